/**
 * Deterministic ViT-style encoder with per-layer capture.
 *
 * Backbone ids follow "toy-vit-{layers}-{dim}". Weights are generated from
 * a seeded PRNG keyed by the backbone id, so a given id always produces the
 * same encoder; the registry is the extension point for loading real
 * pretrained weights.
 *
 * Each pre-LN block computes
 *     x <- x + attention(LN1(x));  capture <- LN2(x);  x <- x + mlp(capture)
 * and the captured representation (the output of the block's second layer
 * normalization) is what the extractor stores for that layer.
 */

import { FloatImage } from "./images.js";
import { Prng } from "./prng.js";
import {
  Mat,
  addBiasInPlace,
  addInPlace,
  clone,
  fromArray,
  geluInPlace,
  layerNorm,
  matmul,
  softmaxRowsInPlace,
  zeros,
} from "./tensor.js";

export interface BackboneConfig {
  id: string;
  layers: number;
  dim: number;
  heads: number;
  patchSize: number;
  imageSize: number;
  mlpRatio: number;
}

export const CAPTURE_POINT = "after second layer normalization (pre-MLP)";

export function resolveBackbone(id: string): BackboneConfig {
  const match = /^toy-vit-(\d+)-(\d+)$/.exec(id);
  if (!match) {
    throw new Error(`unknown backbone ${JSON.stringify(id)}; expected "toy-vit-{layers}-{dim}"`);
  }
  const layers = parseInt(match[1], 10);
  const dim = parseInt(match[2], 10);
  if (layers < 1 || dim < 8 || dim % 4 !== 0) {
    throw new Error(`unsupported backbone geometry: layers=${layers}, dim=${dim}`);
  }
  return { id, layers, dim, heads: 4, patchSize: 56, imageSize: 224, mlpRatio: 4 };
}

interface BlockWeights {
  ln1Gain: Float64Array;
  ln1Bias: Float64Array;
  wq: Mat;
  bq: Float64Array;
  wk: Mat;
  bk: Float64Array;
  wv: Mat;
  bv: Float64Array;
  wo: Mat;
  bo: Float64Array;
  ln2Gain: Float64Array;
  ln2Bias: Float64Array;
  w1: Mat;
  b1: Float64Array;
  w2: Mat;
  b2: Float64Array;
}

export class ToyVit {
  readonly cfg: BackboneConfig;
  readonly numPatches: number;
  private patchEmbed: Mat;
  private patchBias: Float64Array;
  private clsToken: Float64Array;
  private posEmbed: Mat;
  private blocks: BlockWeights[];

  constructor(cfg: BackboneConfig) {
    this.cfg = cfg;
    const side = cfg.imageSize / cfg.patchSize;
    if (!Number.isInteger(side)) throw new Error("patch size must divide image size");
    this.numPatches = side * side;
    const patchDim = cfg.patchSize * cfg.patchSize * 3;
    const d = cfg.dim;

    const draw = (key: string, count: number, std: number) =>
      new Prng(`${cfg.id}/${key}`).normals(count, std);
    this.patchEmbed = fromArray(patchDim, d, draw("patch-embed", patchDim * d, 0.02));
    this.patchBias = draw("patch-bias", d, 0.02);
    this.clsToken = draw("cls-token", d, 0.5);
    this.posEmbed = fromArray(this.numPatches + 1, d, draw("pos-embed", (this.numPatches + 1) * d, 0.3));
    this.blocks = [];
    for (let layer = 1; layer <= cfg.layers; layer++) {
      const w = (name: string, count: number, std: number) => draw(`block${layer}/${name}`, count, std);
      const dHidden = d * cfg.mlpRatio;
      this.blocks.push({
        ln1Gain: new Float64Array(d).fill(1),
        ln1Bias: new Float64Array(d),
        wq: fromArray(d, d, w("wq", d * d, 0.08)),
        bq: new Float64Array(d),
        wk: fromArray(d, d, w("wk", d * d, 0.08)),
        bk: new Float64Array(d),
        wv: fromArray(d, d, w("wv", d * d, 0.08)),
        bv: new Float64Array(d),
        wo: fromArray(d, d, w("wo", d * d, 0.08)),
        bo: new Float64Array(d),
        ln2Gain: new Float64Array(d).fill(1),
        ln2Bias: new Float64Array(d),
        w1: fromArray(d, dHidden, w("w1", d * dHidden, 0.08)),
        b1: new Float64Array(dHidden),
        w2: fromArray(dHidden, d, w("w2", dHidden * d, 0.08)),
        b2: new Float64Array(d),
      });
    }
  }

  private patchify(img: FloatImage): Mat {
    const { patchSize, imageSize } = this.cfg;
    if (img.width !== imageSize || img.height !== imageSize) {
      throw new Error(`backbone expects ${imageSize}x${imageSize} input, got ${img.width}x${img.height}`);
    }
    const side = imageSize / patchSize;
    const patchDim = patchSize * patchSize * 3;
    const out = zeros(side * side, patchDim);
    let row = 0;
    for (let py = 0; py < side; py++) {
      for (let px = 0; px < side; px++) {
        let k = 0;
        for (let y = 0; y < patchSize; y++) {
          for (let x = 0; x < patchSize; x++) {
            const src = ((py * patchSize + y) * imageSize + px * patchSize + x) * 3;
            out.data[row * patchDim + k++] = img.data[src];
            out.data[row * patchDim + k++] = img.data[src + 1];
            out.data[row * patchDim + k++] = img.data[src + 2];
          }
        }
        row++;
      }
    }
    return out;
  }

  private attention(h: Mat, w: BlockWeights): Mat {
    const d = this.cfg.dim;
    const heads = this.cfg.heads;
    const dh = d / heads;
    const q = addBiasInPlace(matmul(h, w.wq), w.bq);
    const k = addBiasInPlace(matmul(h, w.wk), w.bk);
    const v = addBiasInPlace(matmul(h, w.wv), w.bv);
    const tokens = h.rows;
    const concat = zeros(tokens, d);
    for (let m = 0; m < heads; m++) {
      const off = m * dh;
      const scores = zeros(tokens, tokens);
      for (let i = 0; i < tokens; i++) {
        for (let j = 0; j < tokens; j++) {
          let acc = 0;
          for (let c = 0; c < dh; c++) {
            acc += q.data[i * d + off + c] * k.data[j * d + off + c];
          }
          scores.data[i * tokens + j] = acc / Math.sqrt(dh);
        }
      }
      softmaxRowsInPlace(scores);
      for (let i = 0; i < tokens; i++) {
        for (let j = 0; j < tokens; j++) {
          const a = scores.data[i * tokens + j];
          for (let c = 0; c < dh; c++) {
            concat.data[i * d + off + c] += a * v.data[j * d + off + c];
          }
        }
      }
    }
    return addBiasInPlace(matmul(concat, w.wo), w.bo);
  }

  /**
   * Run one preprocessed image through the encoder. Returns, per layer, the
   * (numPatches + 1) x dim token matrix captured after that block's second
   * layer normalization; row 0 is the CLS token.
   */
  forward(img: FloatImage): Mat[] {
    const d = this.cfg.dim;
    const patches = this.patchify(img);
    const embedded = addBiasInPlace(matmul(patches, this.patchEmbed), this.patchBias);
    const tokens = zeros(this.numPatches + 1, d);
    tokens.data.set(this.clsToken, 0);
    tokens.data.set(embedded.data, d);
    addInPlace(tokens, this.posEmbed);

    const captures: Mat[] = [];
    let x = tokens;
    for (const w of this.blocks) {
      const attnOut = this.attention(layerNorm(x, w.ln1Gain, w.ln1Bias), w);
      x = addInPlace(clone(x), attnOut);
      const capture = layerNorm(x, w.ln2Gain, w.ln2Bias);
      captures.push(capture);
      const hidden = geluInPlace(addBiasInPlace(matmul(capture, w.w1), w.b1));
      const mlpOut = addBiasInPlace(matmul(hidden, w.w2), w.b2);
      x = addInPlace(clone(x), mlpOut);
    }
    return captures;
  }
}
