/** Minimal row-major float64 matrix ops for the encoder forward pass. */

export interface Mat {
  rows: number;
  cols: number;
  data: Float64Array;
}

export function zeros(rows: number, cols: number): Mat {
  return { rows, cols, data: new Float64Array(rows * cols) };
}

export function fromArray(rows: number, cols: number, data: Float64Array): Mat {
  if (data.length !== rows * cols) throw new Error("fromArray: size mismatch");
  return { rows, cols, data };
}

export function matmul(a: Mat, b: Mat): Mat {
  if (a.cols !== b.rows) throw new Error(`matmul: ${a.cols} vs ${b.rows}`);
  const out = zeros(a.rows, b.cols);
  for (let i = 0; i < a.rows; i++) {
    for (let k = 0; k < a.cols; k++) {
      const aik = a.data[i * a.cols + k];
      if (aik === 0) continue;
      const bRow = k * b.cols;
      const oRow = i * b.cols;
      for (let j = 0; j < b.cols; j++) {
        out.data[oRow + j] += aik * b.data[bRow + j];
      }
    }
  }
  return out;
}

export function addBiasInPlace(m: Mat, bias: Float64Array): Mat {
  if (bias.length !== m.cols) throw new Error("addBias: size mismatch");
  for (let i = 0; i < m.rows; i++) {
    for (let j = 0; j < m.cols; j++) m.data[i * m.cols + j] += bias[j];
  }
  return m;
}

export function addInPlace(a: Mat, b: Mat): Mat {
  for (let i = 0; i < a.data.length; i++) a.data[i] += b.data[i];
  return a;
}

export function clone(m: Mat): Mat {
  return { rows: m.rows, cols: m.cols, data: new Float64Array(m.data) };
}

/** Per-row layer normalization with affine gain/bias. */
export function layerNorm(m: Mat, gain: Float64Array, bias: Float64Array, eps = 1e-6): Mat {
  const out = zeros(m.rows, m.cols);
  for (let i = 0; i < m.rows; i++) {
    let mean = 0;
    for (let j = 0; j < m.cols; j++) mean += m.data[i * m.cols + j];
    mean /= m.cols;
    let variance = 0;
    for (let j = 0; j < m.cols; j++) {
      const d = m.data[i * m.cols + j] - mean;
      variance += d * d;
    }
    variance /= m.cols;
    const inv = 1 / Math.sqrt(variance + eps);
    for (let j = 0; j < m.cols; j++) {
      out.data[i * m.cols + j] = gain[j] * (m.data[i * m.cols + j] - mean) * inv + bias[j];
    }
  }
  return out;
}

export function softmaxRowsInPlace(m: Mat): Mat {
  for (let i = 0; i < m.rows; i++) {
    const row = i * m.cols;
    let top = -Infinity;
    for (let j = 0; j < m.cols; j++) top = Math.max(top, m.data[row + j]);
    let total = 0;
    for (let j = 0; j < m.cols; j++) {
      m.data[row + j] = Math.exp(m.data[row + j] - top);
      total += m.data[row + j];
    }
    for (let j = 0; j < m.cols; j++) m.data[row + j] /= total;
  }
  return m;
}

export function geluInPlace(m: Mat): Mat {
  // tanh approximation
  for (let i = 0; i < m.data.length; i++) {
    const x = m.data[i];
    m.data[i] = 0.5 * x * (1 + Math.tanh(Math.sqrt(2 / Math.PI) * (x + 0.044715 * x * x * x)));
  }
  return m;
}

export function l2NormalizeRow(row: Float64Array): Float64Array {
  let sq = 0;
  for (const v of row) sq += v * v;
  const norm = Math.sqrt(sq);
  if (norm <= 1e-12) return row.slice();
  const out = new Float64Array(row.length);
  for (let i = 0; i < row.length; i++) out[i] = row[i] / norm;
  return out;
}
