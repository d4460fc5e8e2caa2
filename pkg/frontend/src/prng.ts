/**
 * Deterministic pseudo-randomness for backbone weight generation.
 *
 * Streams are keyed by a string; the 64-bit state seeds from an FNV-1a hash
 * of the key and advances with splitmix64, so the same key produces the
 * same draw sequence on every platform. Gaussians come from Box-Muller.
 */

const MASK64 = (1n << 64n) - 1n;

function fnv1a64(text: string): bigint {
  let hash = 0xcbf29ce484222325n;
  for (let i = 0; i < text.length; i++) {
    hash ^= BigInt(text.charCodeAt(i) & 0xff);
    hash = (hash * 0x100000001b3n) & MASK64;
  }
  return hash;
}

export class Prng {
  private state: bigint;
  private spare: number | null = null;

  constructor(key: string) {
    this.state = fnv1a64(key);
  }

  /** splitmix64 step producing a double in [0, 1). */
  next(): number {
    this.state = (this.state + 0x9e3779b97f4a7c15n) & MASK64;
    let z = this.state;
    z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK64;
    z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK64;
    z = z ^ (z >> 31n);
    // top 53 bits -> double
    return Number(z >> 11n) / 2 ** 53;
  }

  normal(): number {
    if (this.spare !== null) {
      const value = this.spare;
      this.spare = null;
      return value;
    }
    let u = 0;
    while (u === 0) u = this.next();
    const v = this.next();
    const radius = Math.sqrt(-2 * Math.log(u));
    this.spare = radius * Math.sin(2 * Math.PI * v);
    return radius * Math.cos(2 * Math.PI * v);
  }

  normals(count: number, std = 1): Float64Array {
    const out = new Float64Array(count);
    for (let i = 0; i < count; i++) out[i] = this.normal() * std;
    return out;
  }
}
