"""On-disk feature store and feature preparation.

A store holds, for one model/dataset pair, the per-layer summary tokens of
every sample: the CLS token, the average-pooled patch token (AP), and
optionally the raw patch tokens, for each of the ``L`` encoder layers,
together with integer labels per split.

File layout (``.lfr``):

    bytes 0..4    magic ``LFR1``
    bytes 4..12   unsigned 64-bit little-endian length of the JSON header
    ...           UTF-8 JSON header (see :func:`write_store`)
    ...           raw payloads at header-relative offsets declared in the JSON

Feature payloads are little-endian float32; label payloads are little-endian
int32.  Offsets in the header are relative to the first payload byte (the
byte right after the JSON), so the header never depends on its own length.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import RngStream

__all__ = [
    "TOKEN_KINDS",
    "StoreMeta",
    "FeatureStore",
    "LayerScheme",
    "StackedBatch",
    "StoreFormatError",
    "write_store",
    "read_store",
    "l2_normalize",
    "l2_normalize_rows",
    "pad_to_width",
    "stratified_split",
    "resolve_layers",
    "assemble_batch",
]

MAGIC = b"LFR1"
FORMAT_VERSION = 1
TOKEN_KINDS = ("CLS", "AP", "PATCH")

NORM_EPS = 1e-12


class StoreFormatError(ValueError):
    """Raised when an .lfr file or in-memory store violates the format contract."""


@dataclass
class StoreMeta:
    model_id: str
    num_layers: int
    hidden_dims: list[int]
    num_patches: int
    token_kinds: tuple[str, ...]
    num_classes: int
    class_names: list[str]
    split_sizes: dict[str, int]
    format_version: int = FORMAT_VERSION
    extraction_point: str = ""  # opaque provenance string

    def validate(self) -> None:
        if self.format_version != FORMAT_VERSION:
            raise StoreFormatError(
                f"version mismatch: got {self.format_version}, expected {FORMAT_VERSION}"
            )
        if self.num_layers < 1:
            raise StoreFormatError("num_layers must be >= 1")
        if len(self.hidden_dims) != self.num_layers:
            raise StoreFormatError(
                f"hidden_dims has {len(self.hidden_dims)} entries, expected {self.num_layers}"
            )
        if any(d < 1 for d in self.hidden_dims):
            raise StoreFormatError("all hidden dims must be >= 1")
        unknown = set(self.token_kinds) - set(TOKEN_KINDS)
        if unknown:
            raise StoreFormatError(f"unknown token kinds: {sorted(unknown)}")
        if "PATCH" in self.token_kinds and self.num_patches < 1:
            raise StoreFormatError("PATCH tokens declared but num_patches < 1")
        if self.num_classes < 1:
            raise StoreFormatError("num_classes must be >= 1")
        if self.class_names and len(self.class_names) != self.num_classes:
            raise StoreFormatError("class_names length must equal num_classes")


@dataclass
class FeatureStore:
    """In-memory store: ``tensors[(split, layer, kind)]`` plus labels per split.

    CLS/AP tensors have shape ``[N, d_layer]``; PATCH tensors ``[N, P, d_layer]``.
    All feature arrays are float32; labels are integer arrays.
    """

    meta: StoreMeta
    labels: dict[str, np.ndarray]
    tensors: dict[tuple[str, int, str], np.ndarray]

    def validate(self) -> None:
        self.meta.validate()
        m = self.meta
        if set(self.labels) != set(m.split_sizes):
            raise StoreFormatError("label splits do not match declared split_sizes")
        for split, n in m.split_sizes.items():
            y = self.labels[split]
            if y.shape != (n,):
                raise StoreFormatError(f"split {split!r}: labels shape {y.shape} != ({n},)")
            if n and (y.min() < 0 or y.max() >= m.num_classes):
                bad = int(np.argmax((y < 0) | (y >= m.num_classes)))
                raise StoreFormatError(
                    f"split {split!r}: label {int(y[bad])} at index {bad} outside [0, {m.num_classes})"
                )
            for layer in range(1, m.num_layers + 1):
                d = m.hidden_dims[layer - 1]
                for kind in m.token_kinds:
                    key = (split, layer, kind)
                    if key not in self.tensors:
                        raise StoreFormatError(f"missing tensor {key}")
                    t = self.tensors[key]
                    want = (n, m.num_patches, d) if kind == "PATCH" else (n, d)
                    if t.shape != want:
                        raise StoreFormatError(f"tensor {key}: shape {t.shape} != {want}")
                    if t.dtype != np.float32:
                        raise StoreFormatError(f"tensor {key}: dtype {t.dtype} != float32")
        extra = set(self.tensors) - {
            (s, l, k)
            for s in m.split_sizes
            for l in range(1, m.num_layers + 1)
            for k in m.token_kinds
        }
        if extra:
            raise StoreFormatError(f"undeclared tensors present: {sorted(extra)}")

    def normalized(self) -> "FeatureStore":
        """Copy of the store with every token vector L2-normalized (float32)."""
        tensors = {}
        for key, t in self.tensors.items():
            t64 = t.astype(np.float64)
            flat = t64.reshape(-1, t64.shape[-1])
            tensors[key] = l2_normalize_rows(flat).reshape(t64.shape).astype(np.float32)
        return FeatureStore(replace(self.meta), dict(self.labels), tensors)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _payload_plan(store: FeatureStore):
    """Deterministic payload layout: tensors (split, layer, kind order), then labels."""
    m = store.meta
    entries = []
    offset = 0
    for split in m.split_sizes:
        for layer in range(1, m.num_layers + 1):
            for kind in m.token_kinds:
                t = store.tensors[(split, layer, kind)]
                nbytes = t.size * 4
                entries.append(
                    {
                        "split": split,
                        "layer": layer,
                        "kind": kind,
                        "shape": list(t.shape),
                        "offset": offset,
                        "nbytes": nbytes,
                    }
                )
                offset += nbytes
    label_entries = []
    for split in m.split_sizes:
        n = store.labels[split].shape[0]
        label_entries.append({"split": split, "offset": offset, "nbytes": n * 4})
        offset += n * 4
    return entries, label_entries, offset


def write_store(store: FeatureStore, path) -> None:
    """Serialize a validated store to ``path`` in the .lfr format."""
    store.validate()
    m = store.meta
    tensor_entries, label_entries, _total = _payload_plan(store)
    header = {
        "format_version": m.format_version,
        "model_id": m.model_id,
        "num_layers": m.num_layers,
        "hidden_dims": list(m.hidden_dims),
        "num_patches": m.num_patches,
        "token_kinds": list(m.token_kinds),
        "num_classes": m.num_classes,
        "class_names": list(m.class_names),
        "splits": dict(m.split_sizes),
        "tensors": tensor_entries,
        "labels": label_entries,
    }
    if m.extraction_point:
        header["extraction_point"] = m.extraction_point
    blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for e in tensor_entries:
            t = store.tensors[(e["split"], e["layer"], e["kind"])]
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
        for e in label_entries:
            y = store.labels[e["split"]]
            fh.write(np.ascontiguousarray(y, dtype="<i4").tobytes())


def read_store(path, *, normalize: bool = False) -> FeatureStore:
    """Load an .lfr file, verifying magic, version, payload sizes, and labels."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise StoreFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise StoreFormatError("truncated header")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    if len(raw) < 12 + hlen:
        raise StoreFormatError("truncated JSON header")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    meta = StoreMeta(
        model_id=header["model_id"],
        num_layers=header["num_layers"],
        hidden_dims=list(header["hidden_dims"]),
        num_patches=header["num_patches"],
        token_kinds=tuple(header["token_kinds"]),
        num_classes=header["num_classes"],
        class_names=list(header["class_names"]),
        split_sizes=dict(header["splits"]),
        format_version=header["format_version"],
        extraction_point=header.get("extraction_point", ""),
    )
    meta.validate()
    payload = raw[12 + hlen :]
    tensors = {}
    for e in header["tensors"]:
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if hi > len(payload):
            raise StoreFormatError(
                f"payload length mismatch: tensor ({e['split']},{e['layer']},{e['kind']}) "
                f"needs bytes up to {hi}, payload has {len(payload)}"
            )
        shape = tuple(e["shape"])
        want = int(np.prod(shape, dtype=np.int64)) * 4
        if want != e["nbytes"]:
            raise StoreFormatError(
                f"payload length mismatch: tensor ({e['split']},{e['layer']},{e['kind']}) "
                f"declares {e['nbytes']} bytes for shape {shape}"
            )
        arr = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(shape)
        tensors[(e["split"], e["layer"], e["kind"])] = arr.astype(np.float32)
    labels = {}
    for e in header["labels"]:
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if hi > len(payload):
            raise StoreFormatError(f"payload length mismatch: labels for split {e['split']!r}")
        labels[e["split"]] = np.frombuffer(payload[lo:hi], dtype="<i4").astype(np.int64)
    store = FeatureStore(meta, labels, tensors)
    store.validate()
    return store.normalized() if normalize else store


# ---------------------------------------------------------------------------
# feature preparation
# ---------------------------------------------------------------------------

def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm; vectors with norm <= 1e-12 pass through."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("l2_normalize: non-finite input")
    n = float(np.linalg.norm(v))
    if n <= NORM_EPS:
        return v.copy()
    return v / n


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise l2_normalize for a 2-D array."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("l2_normalize_rows: non-finite input")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    scale = np.where(norms > NORM_EPS, norms, 1.0)
    return x / scale


def pad_to_width(v: np.ndarray, d_max: int) -> np.ndarray:
    """Zero-pad the trailing axis of a vector to d_max entries (norm-preserving)."""
    v = np.asarray(v)
    d = v.shape[-1]
    if d > d_max:
        raise ValueError(f"pad_to_width: vector width {d} exceeds target {d_max}")
    if d == d_max:
        return v.copy()
    pad = [(0, 0)] * (v.ndim - 1) + [(0, d_max - d)]
    return np.pad(v, pad)


def stratified_split(labels: np.ndarray, val_fraction: float, seed: int):
    """Per-class split into (train_indices, val_indices).

    Each class with n samples sends round(n * val_fraction) of them to
    validation, clamped to [1, n-1] when n >= 2; singleton classes stay
    entirely in train.  Deterministic given the seed.
    """
    labels = np.asarray(labels)
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie strictly between 0 and 1")
    rng = RngStream(seed, "stratified-split")
    train_parts, val_parts = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n = idx.size
        n_val = int(np.floor(n * val_fraction + 0.5))  # half-up, platform stable
        if n >= 2:
            n_val = min(max(n_val, 1), n - 1)
        else:
            n_val = 0
        order = rng.permutation(n)
        val_parts.append(idx[order[:n_val]])
        train_parts.append(idx[order[n_val:]])
    train = np.sort(np.concatenate(train_parts)) if train_parts else np.empty(0, dtype=int)
    val = np.sort(np.concatenate(val_parts)) if val_parts else np.empty(0, dtype=int)
    return train, val


@dataclass(frozen=True)
class LayerScheme:
    """Which encoder layers feed the probe.

    ``kind`` is one of ``last``, ``mid_plus_last``, ``quarterly``, ``all``,
    ``custom``; custom schemes carry explicit 1-based indices.
    """

    kind: str
    custom: tuple[int, ...] = field(default=())

    KINDS = ("last", "mid_plus_last", "quarterly", "all", "custom")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown layer scheme {self.kind!r}")
        if self.kind == "custom" and not self.custom:
            raise ValueError("custom layer scheme needs at least one index")

    @classmethod
    def parse(cls, text: str) -> "LayerScheme":
        t = text.strip().lower()
        aliases = {
            "last": "last",
            "mid+last": "mid_plus_last",
            "mid_plus_last": "mid_plus_last",
            "quarterly": "quarterly",
            "all": "all",
        }
        if t in aliases:
            return cls(aliases[t])
        try:
            idx = tuple(int(p) for p in t.split(","))
        except ValueError:
            raise ValueError(f"cannot parse layer scheme {text!r}") from None
        return cls("custom", idx)

    def __str__(self) -> str:
        if self.kind == "custom":
            return ",".join(str(i) for i in self.custom)
        return {"mid_plus_last": "mid+last"}.get(self.kind, self.kind)


def resolve_layers(L: int, scheme: LayerScheme) -> tuple[int, ...]:
    """Resolve a layer scheme to distinct ascending 1-based indices in [1, L]."""
    if L < 1:
        raise ValueError("L must be >= 1")
    if scheme.kind == "last":
        idx = [L]
    elif scheme.kind == "mid_plus_last":
        idx = sorted({(L + 1) // 2, L})
    elif scheme.kind == "quarterly":
        # round half-up, clamped into [1, L], deduplicated
        idx = sorted({min(max(int(np.floor(L * q / 4 + 0.5)), 1), L) for q in range(1, 5)})
    elif scheme.kind == "all":
        idx = list(range(1, L + 1))
    else:
        idx = sorted(set(scheme.custom))
        for i in idx:
            if not 1 <= i <= L:
                raise ValueError(f"custom layer index {i} outside [1, {L}]")
        if len(idx) != len(scheme.custom):
            raise ValueError("custom layer indices must be distinct")
    return tuple(idx)


@dataclass
class StackedBatch:
    """Stacked representation matrix ``H`` of shape [B, R, d_max] plus row tags.

    Row order: CLS rows in ascending layer order, then AP rows in ascending
    layer order, then (for token-level probes) patch rows ascending by
    (layer, patch index).  Rows from layers narrower than d_max are
    zero-padded on the right.
    """

    H: np.ndarray
    row_index: list[tuple[str, int]]
    labels: np.ndarray

    @property
    def B(self) -> int:
        return self.H.shape[0]

    @property
    def R(self) -> int:
        return self.H.shape[1]

    @property
    def d(self) -> int:
        return self.H.shape[2]

    def take(self, rows: np.ndarray) -> "StackedBatch":
        return StackedBatch(self.H[rows], self.row_index, self.labels[rows])


def assemble_batch(
    store: FeatureStore,
    split: str,
    indices,
    layers: tuple[int, ...],
    tokens,
) -> StackedBatch:
    """Build the stacked matrix H for the given samples, layers, and token kinds.

    Every token vector is L2-normalized at its native width and then
    zero-padded to the widest selected layer.
    """
    m = store.meta
    tokens = tuple(tokens)
    for kind in tokens:
        if kind not in m.token_kinds:
            raise ValueError(
                f"store {m.model_id!r} does not carry {kind} tokens (has {list(m.token_kinds)})"
            )
    if split not in m.split_sizes:
        raise ValueError(f"unknown split {split!r}")
    indices = np.asarray(indices, dtype=np.int64)
    layers = tuple(layers)
    d_max = max(m.hidden_dims[l - 1] for l in layers)
    cols = []
    tags: list[tuple[str, int]] = []
    for kind in ("CLS", "AP"):
        if kind not in tokens:
            continue
        for layer in layers:
            x = store.tensors[(split, layer, kind)][indices].astype(np.float64)
            cols.append(pad_to_width(l2_normalize_rows(x), d_max)[:, None, :])
            tags.append((kind, layer))
    if "PATCH" in tokens:
        for layer in layers:
            x = store.tensors[(split, layer, "PATCH")][indices].astype(np.float64)
            b, p, d = x.shape
            flat = l2_normalize_rows(x.reshape(b * p, d))
            cols.append(pad_to_width(flat.reshape(b, p, d), d_max))
            tags.extend(("PATCH", layer) for _ in range(p))
    H = np.concatenate(cols, axis=1)
    return StackedBatch(H, tags, store.labels[split][indices].copy())
