/**
 * The .lfr feature-store container.
 *
 * Layout: 4-byte magic "LFR1", u64 little-endian JSON header length, UTF-8
 * JSON header, then little-endian payloads (float32 feature tensors, int32
 * labels) at header-declared offsets relative to the first payload byte.
 */

import { createHash } from "node:crypto";
import { mkdirSync, readFileSync, renameSync, writeFileSync } from "node:fs";
import { dirname, join } from "node:path";

export const MAGIC = "LFR1";
export const FORMAT_VERSION = 1;

export interface TensorEntry {
  split: string;
  layer: number;
  kind: string;
  shape: number[];
  data: Float32Array;
}

export interface StoreMeta {
  modelId: string;
  numLayers: number;
  hiddenDims: number[];
  numPatches: number;
  tokenKinds: string[];
  numClasses: number;
  classNames: string[];
  splitSizes: Record<string, number>;
  extractionPoint?: string;
}

export interface Store {
  meta: StoreMeta;
  labels: Record<string, Int32Array>;
  tensors: TensorEntry[];
}

function sortedJson(value: unknown): string {
  if (value === null || typeof value !== "object") return JSON.stringify(value);
  if (Array.isArray(value)) return `[${value.map(sortedJson).join(",")}]`;
  const entries = Object.entries(value as Record<string, unknown>).sort(([a], [b]) =>
    a < b ? -1 : a > b ? 1 : 0,
  );
  return `{${entries.map(([k, v]) => `${JSON.stringify(k)}:${sortedJson(v)}`).join(",")}}`;
}

export function encodeStore(store: Store): Buffer {
  const { meta } = store;
  const kinds = meta.tokenKinds;
  const ordered: TensorEntry[] = [];
  for (const split of Object.keys(meta.splitSizes)) {
    for (let layer = 1; layer <= meta.numLayers; layer++) {
      for (const kind of kinds) {
        const found = store.tensors.find(
          (t) => t.split === split && t.layer === layer && t.kind === kind,
        );
        if (!found) throw new Error(`missing tensor ${split}/${layer}/${kind}`);
        ordered.push(found);
      }
    }
  }
  let offset = 0;
  const tensorHeaders = ordered.map((t) => {
    const nbytes = t.data.length * 4;
    const header = { split: t.split, layer: t.layer, kind: t.kind, shape: t.shape, offset, nbytes };
    offset += nbytes;
    return header;
  });
  const labelHeaders = Object.keys(meta.splitSizes).map((split) => {
    const labels = store.labels[split];
    if (!labels || labels.length !== meta.splitSizes[split]) {
      throw new Error(`labels for split ${split} missing or mis-sized`);
    }
    const header = { split, offset, nbytes: labels.length * 4 };
    offset += labels.length * 4;
    return header;
  });
  const headerObj = {
    format_version: FORMAT_VERSION,
    model_id: meta.modelId,
    num_layers: meta.numLayers,
    hidden_dims: meta.hiddenDims,
    num_patches: meta.numPatches,
    token_kinds: meta.tokenKinds,
    num_classes: meta.numClasses,
    class_names: meta.classNames,
    splits: meta.splitSizes,
    tensors: tensorHeaders,
    labels: labelHeaders,
    ...(meta.extractionPoint ? { extraction_point: meta.extractionPoint } : {}),
  };
  const headerBytes = Buffer.from(sortedJson(headerObj), "utf-8");
  const total = 12 + headerBytes.length + offset;
  const out = Buffer.alloc(total);
  out.write(MAGIC, 0, "ascii");
  out.writeBigUInt64LE(BigInt(headerBytes.length), 4);
  headerBytes.copy(out, 12);
  let cursor = 12 + headerBytes.length;
  for (const t of ordered) {
    Buffer.from(t.data.buffer, t.data.byteOffset, t.data.length * 4).copy(out, cursor);
    cursor += t.data.length * 4;
  }
  for (const split of Object.keys(meta.splitSizes)) {
    const labels = store.labels[split];
    Buffer.from(labels.buffer, labels.byteOffset, labels.length * 4).copy(out, cursor);
    cursor += labels.length * 4;
  }
  return out;
}

/** Write atomically (temp file + rename) and return the payload sha256. */
export function writeStore(store: Store, path: string): string {
  const bytes = encodeStore(store);
  mkdirSync(dirname(path) || ".", { recursive: true });
  const tmp = join(dirname(path) || ".", `.${process.pid}.${Date.now()}.lfr.tmp`);
  writeFileSync(tmp, bytes);
  renameSync(tmp, path);
  return createHash("sha256").update(bytes).digest("hex");
}

export function readStore(path: string): Store {
  const raw = readFileSync(path);
  if (raw.subarray(0, 4).toString("ascii") !== MAGIC) {
    throw new Error(`bad magic in ${path}`);
  }
  const headerLen = Number(raw.readBigUInt64LE(4));
  const header = JSON.parse(raw.subarray(12, 12 + headerLen).toString("utf-8"));
  if (header.format_version !== FORMAT_VERSION) {
    throw new Error(`version mismatch: ${header.format_version}`);
  }
  const payload = raw.subarray(12 + headerLen);
  const tensors: TensorEntry[] = header.tensors.map(
    (t: { split: string; layer: number; kind: string; shape: number[]; offset: number; nbytes: number }) => {
      if (t.offset + t.nbytes > payload.length) throw new Error("payload length mismatch");
      const slice = payload.subarray(t.offset, t.offset + t.nbytes);
      return {
        split: t.split,
        layer: t.layer,
        kind: t.kind,
        shape: t.shape,
        data: new Float32Array(slice.buffer.slice(slice.byteOffset, slice.byteOffset + t.nbytes)),
      };
    },
  );
  const labels: Record<string, Int32Array> = {};
  for (const l of header.labels) {
    const slice = payload.subarray(l.offset, l.offset + l.nbytes);
    labels[l.split] = new Int32Array(slice.buffer.slice(slice.byteOffset, slice.byteOffset + l.nbytes));
  }
  return {
    meta: {
      modelId: header.model_id,
      numLayers: header.num_layers,
      hiddenDims: header.hidden_dims,
      numPatches: header.num_patches,
      tokenKinds: header.token_kinds,
      numClasses: header.num_classes,
      classNames: header.class_names,
      splitSizes: header.splits,
      extractionPoint: header.extraction_point,
    },
    labels,
    tensors,
  };
}
