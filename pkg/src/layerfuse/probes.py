"""The four probe architectures over stacked frozen representations.

* ``linear_cls``      - linear classifier on the last layer's CLS token
* ``linear_concat``   - linear classifier on concatenated summary tokens
* ``attentive_fusion``- learned-query multi-head cross-attention over the
                        per-layer CLS/AP summary tokens, then a linear head
* ``attentive_tokens``- the same attention machinery over raw tokens of one
                        or more layers (the all-token and hybrid baselines)

Attentive probes use M heads of dimension d_h = 2d/M, a single shared
learnable query, an output projection from the 2d concatenated heads back to
d, an affine standardization of the fused vector, and a linear classifier;
the parameter count is exactly 8d^2 + 10d + dK + K regardless of M and of
how many layers are fused.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore
from .reprstore import FeatureStore, LayerScheme, StackedBatch, resolve_layers
from .rng import RngStream

__all__ = [
    "AUTO",
    "KINDS",
    "ProbeConfig",
    "AttentiveProbe",
    "LinearProbe",
    "build_config",
    "init_probe",
    "fusion_forward",
    "fusion_backward",
    "linear_forward_probe",
    "linear_backward_probe",
    "probe_forward",
    "probe_backward",
    "count_params",
    "enumerate_params",
    "make_aat_config",
    "make_hybrid_config",
    "save_probe",
    "load_probe",
]

AUTO = "auto"
KINDS = ("linear_cls", "linear_concat", "attentive_fusion", "attentive_tokens")
CHECKPOINT_MAGIC = b"LFPB"
INIT_STD = 0.02
STANDARDIZE_EPS = 1e-6


def _largest_divisor_at_most(n: int, cap: int) -> int:
    for m in range(min(cap, n), 0, -1):
        if n % m == 0:
            return m
    return 1


def resolve_heads(requested, num_rows: int, d: int):
    """Resolve a head count; ``auto`` matches the number of fused rows.

    When 2d is not divisible by the row count, falls back to the largest
    divisor of 2d not exceeding it.  Returns (heads, fallback_applied).
    """
    if requested == AUTO:
        if (2 * d) % num_rows == 0:
            return num_rows, False
        return _largest_divisor_at_most(2 * d, num_rows), True
    m = int(requested)
    if m < 1:
        raise ValueError("num_heads must be >= 1")
    if (2 * d) % m != 0:
        raise ValueError(f"2*d_model = {2 * d} is not divisible by num_heads = {m}")
    return m, False


@dataclass(frozen=True)
class ProbeConfig:
    """Fully resolved description of one probe attached to one store."""

    kind: str
    layers: LayerScheme
    tokens: tuple[str, ...]
    resolved_layers: tuple[int, ...]
    num_rows: int
    d_model: int
    num_classes: int
    num_heads: int = 1
    heads_fallback: bool = False
    attn_dropout: float = 0.0
    variant: str | None = None  # "aat" | "hybrid" for attentive_tokens

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown probe kind {self.kind!r}")
        if self.kind in ("attentive_fusion", "attentive_tokens"):
            if (2 * self.d_model) % self.num_heads != 0:
                raise ValueError(
                    f"2*d_model = {2 * self.d_model} not divisible by {self.num_heads} heads"
                )
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ValueError("attn_dropout must lie in [0, 1)")
        if self.num_rows < 1 or self.d_model < 1 or self.num_classes < 1:
            raise ValueError("num_rows, d_model, num_classes must be positive")

    @property
    def head_dim(self) -> int:
        return 2 * self.d_model // self.num_heads

    @property
    def is_attentive(self) -> bool:
        return self.kind in ("attentive_fusion", "attentive_tokens")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "layers": str(self.layers),
            "tokens": list(self.tokens),
            "resolved_layers": list(self.resolved_layers),
            "num_rows": self.num_rows,
            "d_model": self.d_model,
            "num_classes": self.num_classes,
            "num_heads": self.num_heads,
            "heads_fallback": self.heads_fallback,
            "attn_dropout": self.attn_dropout,
            "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        return cls(
            kind=d["kind"],
            layers=LayerScheme.parse(d["layers"]),
            tokens=tuple(d["tokens"]),
            resolved_layers=tuple(d["resolved_layers"]),
            num_rows=d["num_rows"],
            d_model=d["d_model"],
            num_classes=d["num_classes"],
            num_heads=d["num_heads"],
            heads_fallback=d.get("heads_fallback", False),
            attn_dropout=d["attn_dropout"],
            variant=d.get("variant"),
        )


def _count_rows(store_meta, layers, tokens) -> int:
    r = sum(1 for k in ("CLS", "AP") if k in tokens) * len(layers)
    if "PATCH" in tokens:
        r += store_meta.num_patches * len(layers)
    return r


def build_config(
    store: FeatureStore,
    kind: str,
    layers: LayerScheme,
    tokens,
    *,
    heads=AUTO,
    attn_dropout: float = 0.0,
    variant: str | None = None,
) -> ProbeConfig:
    """Bind a probe description to a store, resolving layers, width, and heads."""
    m = store.meta
    tokens = tuple(tokens)
    for k in tokens:
        if k not in m.token_kinds:
            raise ValueError(
                f"store {m.model_id!r} does not carry {k} tokens (has {list(m.token_kinds)})"
            )
    resolved = resolve_layers(m.num_layers, layers)
    d = max(m.hidden_dims[l - 1] for l in resolved)
    num_rows = _count_rows(m, resolved, tokens)
    if kind in ("attentive_fusion", "attentive_tokens"):
        num_heads, fallback = resolve_heads(heads, num_rows, d)
    else:
        num_heads, fallback = 1, False
    return ProbeConfig(
        kind=kind,
        layers=layers,
        tokens=tokens,
        resolved_layers=resolved,
        num_rows=num_rows,
        d_model=d,
        num_classes=m.num_classes,
        num_heads=num_heads,
        heads_fallback=fallback,
        attn_dropout=attn_dropout,
        variant=variant,
    )


def make_aat_config(store: FeatureStore, *, attn_dropout: float = 0.0) -> ProbeConfig:
    """All-token attentive baseline: last layer's patch tokens plus its CLS, 8 heads."""
    m = store.meta
    if "PATCH" not in m.token_kinds:
        raise ValueError(f"store {m.model_id!r} lacks PATCH tensors required by the all-token probe")
    return build_config(
        store,
        "attentive_tokens",
        LayerScheme("last"),
        ("CLS", "PATCH"),
        heads=8,
        attn_dropout=attn_dropout,
        variant="aat",
    )


def make_hybrid_config(store: FeatureStore) -> ProbeConfig:
    """All tokens of the quarterly layers plus the last layer; 24 heads, dropout 0.5."""
    m = store.meta
    if "PATCH" not in m.token_kinds:
        raise ValueError(f"store {m.model_id!r} lacks PATCH tensors required by the hybrid probe")
    quarterly = resolve_layers(m.num_layers, LayerScheme("quarterly"))
    layers = tuple(sorted(set(quarterly) | {m.num_layers}))
    return build_config(
        store,
        "attentive_tokens",
        LayerScheme("custom", layers),
        ("CLS", "PATCH"),
        heads=24,
        attn_dropout=0.5,
        variant="hybrid",
    )


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

ATTENTIVE_PARAM_ORDER = (
    "q",
    "w_query",
    "b_query",
    "w_key",
    "b_key",
    "w_val",
    "b_val",
    "w_out",
    "b_out",
    "norm_gain",
    "norm_bias",
    "w_clf",
    "b_clf",
)
LINEAR_PARAM_ORDER = ("w_clf", "b_clf")


@dataclass
class AttentiveProbe:
    config: ProbeConfig
    params: dict[str, np.ndarray]
    param_order = ATTENTIVE_PARAM_ORDER


@dataclass
class LinearProbe:
    config: ProbeConfig
    params: dict[str, np.ndarray]
    param_order = LINEAR_PARAM_ORDER


def init_probe(cfg: ProbeConfig, rng: RngStream):
    """Materialize a probe: weights ~ N(0, 0.02^2), biases 0, unit norm gain.

    Draw order is fixed (q, w_query, w_key, w_val, w_out, w_clf for attentive
    probes; w_clf for linear ones) so identical streams give identical probes.
    """
    d, K = cfg.d_model, cfg.num_classes
    if cfg.is_attentive:
        M, dh = cfg.num_heads, cfg.head_dim
        params = {
            "q": rng.normal((1, d), scale=INIT_STD),
            "w_query": rng.normal((M, d, dh), scale=INIT_STD),
            "b_query": np.zeros((M, dh)),
            "w_key": rng.normal((M, d, dh), scale=INIT_STD),
            "b_key": np.zeros((M, dh)),
            "w_val": rng.normal((M, d, dh), scale=INIT_STD),
            "b_val": np.zeros((M, dh)),
            "w_out": rng.normal((2 * d, d), scale=INIT_STD),
            "b_out": np.zeros(d),
            "norm_gain": np.ones(d),
            "norm_bias": np.zeros(d),
            "w_clf": rng.normal((d, K), scale=INIT_STD),
            "b_clf": np.zeros(K),
        }
        return AttentiveProbe(cfg, params)
    flat = cfg.num_rows * d if cfg.kind == "linear_concat" else d
    if cfg.kind == "linear_cls" and cfg.num_rows != 1:
        raise ValueError("linear_cls expects a single stacked row (last layer CLS)")
    params = {
        "w_clf": rng.normal((flat, K), scale=INIT_STD),
        "b_clf": np.zeros(K),
    }
    return LinearProbe(cfg, params)


def _check_batch(cfg: ProbeConfig, batch: StackedBatch) -> None:
    if batch.R != cfg.num_rows:
        raise ValueError(f"batch has {batch.R} rows, probe expects {cfg.num_rows}")
    if batch.d != cfg.d_model:
        raise ValueError(f"batch width {batch.d} != probe d_model {cfg.d_model}")


def fusion_forward(
    probe: AttentiveProbe,
    batch: StackedBatch,
    train: bool = False,
    rng: RngStream | None = None,
):
    """Attentive probe forward pass.

    Per head m: keys/values are linear projections of the stacked rows H,
    the query is a projection of the single learned query vector; head
    outputs are single-query attention over the R rows.  Heads are
    concatenated (width 2d), projected back to d, standardized per sample
    across features (affine gain/bias), and classified linearly.

    Returns ``(logits [B,K], attn [B,M,R], cache)``; ``attn`` holds the
    pre-dropout softmax weights used for heatmap aggregation.
    """
    cfg = probe.config
    _check_batch(cfg, batch)
    p = probe.params
    H = batch.H
    B, R, d = H.shape
    M, dh = cfg.num_heads, cfg.head_dim

    # [M,B,R,dh] keys/values; [M,1,dh] projected query shared across the batch
    K_all = np.einsum("brd,mdh->mbrh", H, p["w_key"], optimize=True) + p["b_key"][:, None, None, :]
    V_all = np.einsum("brd,mdh->mbrh", H, p["w_val"], optimize=True) + p["b_val"][:, None, None, :]
    Q_proj = np.einsum("od,mdh->moh", p["q"], p["w_query"], optimize=True) + p["b_query"][:, None, :]

    Qh = np.broadcast_to(Q_proj[:, None, :, :], (M, B, 1, dh)).reshape(M * B, 1, dh)
    Kh = K_all.reshape(M * B, R, dh)
    Vh = V_all.reshape(M * B, R, dh)
    out, attn_flat, attn_cache = diffcore.attention_forward(
        Qh, Kh, Vh, cfg.attn_dropout, train, rng
    )

    heads = out.reshape(M, B, dh).transpose(1, 0, 2).reshape(B, M * dh)
    fused = heads @ p["w_out"] + p["b_out"]

    mu = fused.mean(axis=1, keepdims=True)
    sd = fused.std(axis=1, keepdims=True)
    z = (fused - mu) / (sd + STANDARDIZE_EPS)
    normed = p["norm_gain"] * z + p["norm_bias"]

    logits = normed @ p["w_clf"] + p["b_clf"]
    attn = attn_flat.reshape(M, B, R).transpose(1, 0, 2)
    cache = {
        "H": H,
        "attn_cache": attn_cache,
        "heads": heads,
        "z": z,
        "sd": sd,
        "normed": normed,
        "shape": (B, R, d, M, dh),
        "score_entries_per_sample": M * R,
    }
    return logits, attn, cache


def fusion_backward(probe: AttentiveProbe, cache: dict, dLogits: np.ndarray) -> dict:
    """Exact parameter gradients for :func:`fusion_forward` composed with a loss."""
    p = probe.params
    B, R, d, M, dh = cache["shape"]
    H, heads, z, sd, normed = cache["H"], cache["heads"], cache["z"], cache["sd"], cache["normed"]
    dLogits = np.asarray(dLogits, dtype=np.float64)

    grads = {
        "w_clf": normed.T @ dLogits,
        "b_clf": dLogits.sum(axis=0),
    }
    dNormed = dLogits @ p["w_clf"].T
    grads["norm_gain"] = (dNormed * z).sum(axis=0)
    grads["norm_bias"] = dNormed.sum(axis=0)
    dz = dNormed * p["norm_gain"]

    # standardize backward: z = (x - mean(x)) / (std(x) + eps), per sample row
    sd_safe = np.maximum(sd, 1e-300)
    dz_mean = dz.mean(axis=1, keepdims=True)
    dzz_mean = (dz * z).mean(axis=1, keepdims=True)
    dFused = (dz - dz_mean) / (sd + STANDARDIZE_EPS) - z * dzz_mean / sd_safe

    grads["w_out"] = heads.T @ dFused
    grads["b_out"] = dFused.sum(axis=0)
    dHeads = dFused @ p["w_out"].T

    dOut = dHeads.reshape(B, M, dh).transpose(1, 0, 2).reshape(M * B, 1, dh)
    dQh, dKh, dVh = diffcore.attention_backward(cache["attn_cache"], dOut)

    dQ_proj = dQh.reshape(M, B, dh).sum(axis=1)  # query is shared across the batch
    grads["b_query"] = dQ_proj
    grads["w_query"] = np.einsum("od,mh->mdh", p["q"], dQ_proj, optimize=True)
    grads["q"] = np.einsum("mh,mdh->d", dQ_proj, p["w_query"], optimize=True)[None, :]

    dK_all = dKh.reshape(M, B, R, dh)
    dV_all = dVh.reshape(M, B, R, dh)
    grads["w_key"] = np.einsum("brd,mbrh->mdh", H, dK_all, optimize=True)
    grads["b_key"] = dK_all.sum(axis=(1, 2))
    grads["w_val"] = np.einsum("brd,mbrh->mdh", H, dV_all, optimize=True)
    grads["b_val"] = dV_all.sum(axis=(1, 2))
    return grads


def linear_forward_probe(probe: LinearProbe, batch: StackedBatch):
    """Linear probe on the row-major flattening of the stacked matrix."""
    cfg = probe.config
    _check_batch(cfg, batch)
    X = batch.H.reshape(batch.B, batch.R * batch.d)
    logits = diffcore.linear_forward(X, probe.params["w_clf"], probe.params["b_clf"])
    return logits, None, {"X": X}


def linear_backward_probe(probe: LinearProbe, cache: dict, dLogits: np.ndarray) -> dict:
    X = cache["X"]
    return {"w_clf": X.T @ dLogits, "b_clf": dLogits.sum(axis=0)}


def probe_forward(probe, batch: StackedBatch, train: bool = False, rng: RngStream | None = None):
    if isinstance(probe, AttentiveProbe):
        return fusion_forward(probe, batch, train, rng)
    return linear_forward_probe(probe, batch)


def probe_backward(probe, cache: dict, dLogits: np.ndarray) -> dict:
    if isinstance(probe, AttentiveProbe):
        return fusion_backward(probe, cache, dLogits)
    return linear_backward_probe(probe, cache, dLogits)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def count_params(kind: str, d: int, num_fused_layers: int = 1, K: int = 1) -> int:
    """Closed-form parameter counts per probe family.

    Attentive probes: 8d^2 + 10d + dK + K (independent of layer count and M).
    Concatenation: 2 * |layers| * d * K + K (CLS+AP per layer).
    CLS-only linear: dK + K.
    """
    if d < 1 or num_fused_layers < 1 or K < 1:
        raise ValueError("count_params: arguments must be positive")
    if kind in ("attentive_fusion", "attentive_tokens"):
        return 8 * d * d + 10 * d + d * K + K
    if kind == "linear_concat":
        return 2 * num_fused_layers * d * K + K
    if kind == "linear_cls":
        return d * K + K
    raise ValueError(f"unknown probe kind {kind!r}")


def enumerate_params(probe) -> int:
    """Actual number of scalars across the probe's parameter arrays."""
    return int(sum(p.size for p in probe.params.values()))


# ---------------------------------------------------------------------------
# checkpoints (.lfpb)
# ---------------------------------------------------------------------------

def save_probe(probe, path, *, seed: int | None = None, provenance: dict | None = None) -> None:
    """Write a probe checkpoint: LFPB magic, JSON header, float64 LE payloads."""
    shapes = [[name, list(probe.params[name].shape)] for name in probe.param_order]
    header = {
        "format_version": 1,
        "config": probe.config.to_dict(),
        "shapes": shapes,
        "seed": seed,
        "provenance": provenance or {},
    }
    blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in probe.param_order:
            fh.write(np.ascontiguousarray(probe.params[name], dtype="<f8").tobytes())


def load_probe(path):
    """Read a .lfpb checkpoint back into a probe."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r}")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    cfg = ProbeConfig.from_dict(header["config"])
    params = {}
    offset = 12 + hlen
    for name, shape in header["shapes"]:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = size * 8
        if offset + nbytes > len(raw):
            raise ValueError("truncated checkpoint payload")
        params[name] = (
            np.frombuffer(raw[offset : offset + nbytes], dtype="<f8")
            .reshape(tuple(shape))
            .astype(np.float64)
        )
        offset += nbytes
    probe = AttentiveProbe(cfg, params) if cfg.is_attentive else LinearProbe(cfg, params)
    expected = tuple(name for name, _ in header["shapes"])
    if expected != probe.param_order:
        raise ValueError("checkpoint parameter order does not match probe kind")
    return probe
