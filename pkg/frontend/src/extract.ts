/**
 * Extraction job: run every dataset image through a frozen backbone,
 * collect per-layer CLS / average-pooled / patch tokens, and emit one
 * .lfr feature store.
 *
 * Normalization policy (default on, disable with raw):
 *  - CLS tokens are L2-normalized;
 *  - patch tokens are L2-normalized individually;
 *  - when patch tokens are stored, the AP token is the mean of the stored
 *    (normalized) patches, NOT re-normalized, so stored AP always equals
 *    the mean of stored PATCH rows; without stored patches it is the
 *    L2-normalized mean of the raw patches. The training side re-normalizes
 *    every vector at assembly time either way.
 */

import { readFileSync } from "node:fs";

import { scanDataset } from "./dataset.js";
import { preprocess } from "./images.js";
import { Store, TensorEntry, writeStore } from "./lfr.js";
import { l2NormalizeRow } from "./tensor.js";
import { CAPTURE_POINT, ToyVit, resolveBackbone } from "./vit.js";

export interface ExtractJob {
  backbone: string;
  dataset_dir: string;
  out: string;
  token_kinds?: string[];
  splits?: string[];
  raw?: boolean;
}

export interface ExtractManifest {
  out: string;
  sha256: string;
  backbone: string;
  numLayers: number;
  hiddenDim: number;
  numPatches: number;
  tokenKinds: string[];
  splitSizes: Record<string, number>;
  classNames: string[];
}

export function parseJob(path: string): ExtractJob {
  const job = JSON.parse(readFileSync(path, "utf-8"));
  for (const field of ["backbone", "dataset_dir", "out"]) {
    if (typeof job[field] !== "string" || !job[field]) {
      throw new Error(`job file is missing the "${field}" field`);
    }
  }
  return job as ExtractJob;
}

const VALID_KINDS = ["CLS", "AP", "PATCH"];

export function extract(job: ExtractJob): ExtractManifest {
  const tokenKinds = (job.token_kinds ?? ["CLS", "AP"]).map((k) => k.toUpperCase());
  for (const kind of tokenKinds) {
    if (!VALID_KINDS.includes(kind)) throw new Error(`unknown token kind ${kind}`);
  }
  if (!tokenKinds.includes("CLS") || !tokenKinds.includes("AP")) {
    throw new Error("token_kinds must include CLS and AP");
  }
  const storePatches = tokenKinds.includes("PATCH");
  const cfg = resolveBackbone(job.backbone);
  const model = new ToyVit(cfg);
  const dataset = scanDataset(job.dataset_dir, job.splits);
  const d = cfg.dim;
  const P = model.numPatches;

  const tensors: TensorEntry[] = [];
  const labels: Record<string, Int32Array> = {};
  const splitSizes: Record<string, number> = {};

  for (const [split, images] of Object.entries(dataset.splits)) {
    const n = images.length;
    splitSizes[split] = n;
    labels[split] = Int32Array.from(images.map((img) => img.classIndex));
    const cls = Array.from({ length: cfg.layers }, () => new Float32Array(n * d));
    const ap = Array.from({ length: cfg.layers }, () => new Float32Array(n * d));
    const patch = storePatches
      ? Array.from({ length: cfg.layers }, () => new Float32Array(n * P * d))
      : null;

    for (let i = 0; i < n; i++) {
      const captures = model.forward(preprocess(readFileSync(images[i].path)));
      for (let layer = 0; layer < cfg.layers; layer++) {
        const tokens = captures[layer];
        const clsRaw = tokens.data.subarray(0, d);
        const clsVec = job.raw ? clsRaw : l2NormalizeRow(new Float64Array(clsRaw));
        cls[layer].set(clsVec, i * d);

        const patchRows: Float64Array[] = [];
        for (let p = 0; p < P; p++) {
          const row = new Float64Array(tokens.data.subarray((p + 1) * d, (p + 2) * d));
          patchRows.push(job.raw || !storePatches ? row : l2NormalizeRow(row));
        }
        if (patch) {
          for (let p = 0; p < P; p++) patch[layer].set(patchRows[p], (i * P + p) * d);
        }
        const mean = new Float64Array(d);
        for (const row of patchRows) {
          for (let c = 0; c < d; c++) mean[c] += row[c] / P;
        }
        const apVec = job.raw || storePatches ? mean : l2NormalizeRow(mean);
        ap[layer].set(apVec, i * d);
      }
    }
    for (let layer = 1; layer <= cfg.layers; layer++) {
      tensors.push({ split, layer, kind: "CLS", shape: [n, d], data: cls[layer - 1] });
      tensors.push({ split, layer, kind: "AP", shape: [n, d], data: ap[layer - 1] });
      if (patch) {
        tensors.push({ split, layer, kind: "PATCH", shape: [n, P, d], data: patch[layer - 1] });
      }
    }
  }

  const store: Store = {
    meta: {
      modelId: cfg.id,
      numLayers: cfg.layers,
      hiddenDims: Array(cfg.layers).fill(d),
      numPatches: storePatches ? P : 0,
      tokenKinds: tokenKinds,
      numClasses: dataset.classNames.length,
      classNames: dataset.classNames,
      splitSizes,
      extractionPoint: CAPTURE_POINT,
    },
    labels,
    tensors,
  };
  const sha256 = writeStore(store, job.out);
  return {
    out: job.out,
    sha256,
    backbone: cfg.id,
    numLayers: cfg.layers,
    hiddenDim: d,
    numPatches: storePatches ? P : 0,
    tokenKinds,
    splitSizes,
    classNames: dataset.classNames,
  };
}
