/**
 * Image loading and preprocessing: binary PPM (P6) decode, bilinear resize
 * of the shorter side to 256, center crop to 224, then per-channel
 * normalization of [0,1] values with mean 0.5 / std 0.5.
 */

export interface RawImage {
  width: number;
  height: number;
  /** interleaved RGB, 8-bit */
  data: Uint8Array;
}

export interface FloatImage {
  width: number;
  height: number;
  /** interleaved RGB, float64 */
  data: Float64Array;
}

export function decodePpm(buf: Buffer): RawImage {
  let pos = 0;
  const readToken = (): string => {
    // skip whitespace and '#' comments
    for (;;) {
      while (pos < buf.length && /\s/.test(String.fromCharCode(buf[pos]))) pos++;
      if (pos < buf.length && buf[pos] === 0x23) {
        while (pos < buf.length && buf[pos] !== 0x0a) pos++;
      } else {
        break;
      }
    }
    const start = pos;
    while (pos < buf.length && !/\s/.test(String.fromCharCode(buf[pos]))) pos++;
    return buf.subarray(start, pos).toString("ascii");
  };
  if (readToken() !== "P6") throw new Error("decodePpm: not a binary P6 file");
  const width = parseInt(readToken(), 10);
  const height = parseInt(readToken(), 10);
  const maxval = parseInt(readToken(), 10);
  if (!(width > 0 && height > 0)) throw new Error("decodePpm: bad dimensions");
  if (maxval !== 255) throw new Error(`decodePpm: unsupported maxval ${maxval}`);
  pos++; // single whitespace after maxval
  const need = width * height * 3;
  if (buf.length - pos < need) throw new Error("decodePpm: truncated pixel data");
  return { width, height, data: new Uint8Array(buf.subarray(pos, pos + need)) };
}

export function toFloat(img: RawImage): FloatImage {
  const data = new Float64Array(img.data.length);
  for (let i = 0; i < img.data.length; i++) data[i] = img.data[i] / 255;
  return { width: img.width, height: img.height, data };
}

export function resizeBilinear(img: FloatImage, outW: number, outH: number): FloatImage {
  const out = new Float64Array(outW * outH * 3);
  const sx = img.width / outW;
  const sy = img.height / outH;
  for (let y = 0; y < outH; y++) {
    const fy = Math.min((y + 0.5) * sy - 0.5, img.height - 1);
    const y0 = Math.max(Math.floor(fy), 0);
    const y1 = Math.min(y0 + 1, img.height - 1);
    const wy = Math.max(fy - y0, 0);
    for (let x = 0; x < outW; x++) {
      const fx = Math.min((x + 0.5) * sx - 0.5, img.width - 1);
      const x0 = Math.max(Math.floor(fx), 0);
      const x1 = Math.min(x0 + 1, img.width - 1);
      const wx = Math.max(fx - x0, 0);
      for (let c = 0; c < 3; c++) {
        const p00 = img.data[(y0 * img.width + x0) * 3 + c];
        const p01 = img.data[(y0 * img.width + x1) * 3 + c];
        const p10 = img.data[(y1 * img.width + x0) * 3 + c];
        const p11 = img.data[(y1 * img.width + x1) * 3 + c];
        out[(y * outW + x) * 3 + c] =
          p00 * (1 - wy) * (1 - wx) + p01 * (1 - wy) * wx + p10 * wy * (1 - wx) + p11 * wy * wx;
      }
    }
  }
  return { width: outW, height: outH, data: out };
}

export function resizeShorterSide(img: FloatImage, target: number): FloatImage {
  const scale = target / Math.min(img.width, img.height);
  const outW = Math.max(Math.round(img.width * scale), target);
  const outH = Math.max(Math.round(img.height * scale), target);
  return resizeBilinear(img, outW, outH);
}

export function centerCrop(img: FloatImage, size: number): FloatImage {
  if (img.width < size || img.height < size) {
    throw new Error(`centerCrop: image ${img.width}x${img.height} smaller than ${size}`);
  }
  const x0 = Math.floor((img.width - size) / 2);
  const y0 = Math.floor((img.height - size) / 2);
  const out = new Float64Array(size * size * 3);
  for (let y = 0; y < size; y++) {
    for (let x = 0; x < size; x++) {
      for (let c = 0; c < 3; c++) {
        out[(y * size + x) * 3 + c] = img.data[((y + y0) * img.width + (x + x0)) * 3 + c];
      }
    }
  }
  return { width: size, height: size, data: out };
}

export function normalizeInPlace(img: FloatImage, mean = 0.5, std = 0.5): FloatImage {
  for (let i = 0; i < img.data.length; i++) img.data[i] = (img.data[i] - mean) / std;
  return img;
}

/** Full pipeline: decode, resize shorter side to 256, center crop 224, normalize. */
export function preprocess(buf: Buffer, resizeTo = 256, cropTo = 224): FloatImage {
  return normalizeInPlace(centerCrop(resizeShorterSide(toFloat(decodePpm(buf)), resizeTo), cropTo));
}
