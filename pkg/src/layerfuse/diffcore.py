"""Dense numerical kernel for the fixed probe graphs.

Forward and exact analytic backward passes for the handful of operations the
probes are built from (linear maps, single-query scaled-dot-product attention
with inverted dropout, weighted softmax cross-entropy), plus the optimizer
(decoupled-weight-decay Adam), the cosine learning-rate schedule, global-norm
gradient clipping, per-batch Gaussian jitter, and a central-finite-difference
gradient oracle.

All training arithmetic is 64-bit; feature stores convert to/from 32-bit at
the I/O boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .reprstore import StackedBatch
from .rng import RngStream

__all__ = [
    "OptState",
    "TrainingDiverged",
    "linear_forward",
    "softmax_rows",
    "attention_forward",
    "attention_backward",
    "weighted_ce",
    "compute_class_weights",
    "adamw_step",
    "cosine_lr",
    "clip_global_norm",
    "apply_jitter",
    "finite_difference_check",
]


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite mid-run."""


def linear_forward(X: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """X @ W + b with the bias broadcast over rows."""
    X, W, b = np.asarray(X), np.asarray(W), np.asarray(b)
    if X.shape[-1] != W.shape[0]:
        raise ValueError(f"linear_forward: X has width {X.shape[-1]}, W expects {W.shape[0]}")
    if b.shape != (W.shape[1],):
        raise ValueError(f"linear_forward: bias shape {b.shape} != ({W.shape[1]},)")
    return X @ W + b


def softmax_rows(S: np.ndarray) -> np.ndarray:
    """Row-wise softmax along the last axis, max-subtracted for stability."""
    S = np.asarray(S, dtype=np.float64)
    shifted = S - S.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(
    Qh: np.ndarray,
    Kh: np.ndarray,
    Vh: np.ndarray,
    dropout_p: float,
    train: bool,
    rng: RngStream | None = None,
):
    """Single-query scaled-dot-product attention with inverted dropout.

    Shapes: Qh [B,1,dh], Kh/Vh [B,R,dh].  Returns ``(out, attn, cache)``
    where ``out`` is [B,1,dh], ``attn`` is the pre-dropout softmax [B,R]
    (this is what heatmaps aggregate), and ``cache`` feeds
    :func:`attention_backward`.  At train time each attention weight is
    kept with probability 1-p and scaled by 1/(1-p), so evaluation is the
    unmodified forward pass.
    """
    Qh, Kh, Vh = (np.asarray(a, dtype=np.float64) for a in (Qh, Kh, Vh))
    B, one, dh = Qh.shape
    if one != 1:
        raise ValueError("attention_forward: query length must be 1")
    if dh == 0:
        raise ValueError("attention_forward: head dimension is zero")
    if Kh.shape != Vh.shape or Kh.shape[0] != B or Kh.shape[2] != dh:
        raise ValueError("attention_forward: K/V shapes inconsistent with Q")
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError("attention_forward: dropout_p must lie in [0, 1)")
    scale = 1.0 / math.sqrt(dh)
    scores = np.einsum("bod,brd->br", Qh, Kh, optimize=True) * scale
    attn = softmax_rows(scores)
    if train and dropout_p > 0.0:
        if rng is None:
            raise ValueError("attention_forward: dropout requires an rng stream")
        keep = (rng.uniform(attn.shape) >= dropout_p).astype(np.float64)
        attn_used = attn * keep / (1.0 - dropout_p)
    else:
        keep = None
        attn_used = attn
    out = np.einsum("br,brd->bd", attn_used, Vh, optimize=True)[:, None, :]
    cache = {
        "Qh": Qh,
        "Kh": Kh,
        "Vh": Vh,
        "attn": attn,
        "attn_used": attn_used,
        "keep": keep,
        "dropout_p": dropout_p,
        "scale": scale,
    }
    return out, attn, cache


def attention_backward(cache: dict, dOut: np.ndarray):
    """Exact gradients of :func:`attention_forward` for the drawn dropout mask."""
    required = {"Qh", "Kh", "Vh", "attn", "attn_used", "scale"}
    if not isinstance(cache, dict) or not required <= set(cache):
        raise ValueError("attention_backward: stale or foreign cache")
    Qh, Kh, Vh = cache["Qh"], cache["Kh"], cache["Vh"]
    attn, attn_used = cache["attn"], cache["attn_used"]
    dOut = np.asarray(dOut, dtype=np.float64)
    if dOut.shape != Qh.shape:
        raise ValueError(f"attention_backward: dOut shape {dOut.shape} != {Qh.shape}")
    dO = dOut[:, 0, :]
    dVh = attn_used[:, :, None] * dO[:, None, :]
    dAttn_used = np.einsum("bd,brd->br", dO, Vh, optimize=True)
    if cache["keep"] is not None:
        dAttn = dAttn_used * cache["keep"] / (1.0 - cache["dropout_p"])
    else:
        dAttn = dAttn_used
    inner = (dAttn * attn).sum(axis=-1, keepdims=True)
    dScores = attn * (dAttn - inner)
    dQh = np.einsum("br,brd->bd", dScores, Kh, optimize=True)[:, None, :] * cache["scale"]
    dKh = dScores[:, :, None] * Qh * cache["scale"]
    return dQh, dKh, dVh


def weighted_ce(logits: np.ndarray, labels: np.ndarray, class_weights: np.ndarray):
    """Class-weighted mean cross-entropy and its exact logit gradient.

    loss = -(1/B) * sum_j w[y_j] * log softmax(logits_j)[y_j]
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(class_weights, dtype=np.float64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError("weighted_ce: labels shape mismatch")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError("weighted_ce: label out of range")
    if w.shape != (K,) or np.any(w <= 0):
        raise ValueError("weighted_ce: class_weights must be K positive reals")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    wy = w[labels]
    loss = float(-(wy * logp[np.arange(B), labels]).sum() / B)
    probs = np.exp(logp)
    dLogits = probs * (wy / B)[:, None]
    dLogits[np.arange(B), labels] -= wy / B
    return loss, dLogits


def compute_class_weights(labels: np.ndarray, K: int) -> np.ndarray:
    """Inverse-frequency weights w_i = N / (K * n_i); satisfies sum_i w_i n_i = N."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=K)
    if len(counts) > K:
        raise ValueError("compute_class_weights: label out of range")
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValueError(
            f"compute_class_weights: classes {missing.tolist()} have no samples; "
            "merge or drop them before training"
        )
    N = labels.size
    return N / (K * counts.astype(np.float64))


@dataclass
class OptState:
    """Decoupled-weight-decay Adam state for a dict of named parameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    base_lr: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, *, weight_decay: float = 0.0, base_lr: float = 0.0):
        st = cls(weight_decay=weight_decay, base_lr=base_lr)
        st.m = {k: np.zeros_like(p) for k, p in params.items()}
        st.v = {k: np.zeros_like(p) for k, p in params.items()}
        return st


def adamw_step(params: dict, grads: dict, state: OptState, lr_t: float) -> None:
    """One in-place AdamW update: Adam on gradients, weight decay applied separately."""
    if lr_t < 0:
        raise ValueError("adamw_step: negative learning rate")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        p -= lr_t * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p)


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    """Cosine annealing from lr_max at step 0 to exactly 0 at total_steps."""
    if total_steps < 1:
        raise ValueError("cosine_lr: total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError("cosine_lr: step outside [0, total_steps]")
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * step / total_steps))


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError("clip_global_norm: max_norm must be > 0")
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(g * g))
    norm = math.sqrt(sq)
    scale = min(1.0, max_norm / norm) if norm > 0 else 1.0
    if scale < 1.0:
        for g in grads.values():
            g *= scale
    return scale


def apply_jitter(
    batch: StackedBatch, sigma: float, prob: float, rng: RngStream, train: bool
) -> StackedBatch:
    """With one Bernoulli(prob) draw per batch, add N(0, sigma^2) noise to H.

    Identity at evaluation time, for sigma=0, or when the draw does not fire.
    """
    if sigma < 0 or not 0.0 <= prob <= 1.0:
        raise ValueError("apply_jitter: invalid sigma or prob")
    if not train or prob == 0.0 or sigma == 0.0:
        return batch
    if not rng.bernoulli(prob):
        return batch
    noise = rng.normal(batch.H.shape, scale=sigma)
    return StackedBatch(batch.H + noise, batch.row_index, batch.labels)


def finite_difference_check(
    loss_fn,
    params: dict,
    step: float = 1e-5,
    *,
    max_coords: int = 200,
    seed: int = 0,
) -> float:
    """Central-difference gradient oracle.

    ``loss_fn(params) -> (loss, grads)`` must be deterministic (freeze any
    dropout masks by reconstructing identical rng streams inside it).  A
    random subsample of up to ``max_coords`` coordinates (all of them when
    fewer exist) is perturbed by ±step; returns the maximum
    ``|analytic - numeric| / max(|numeric|, 1e-8)`` over the sample.
    """
    _, grads = loss_fn(params)
    names = sorted(params)
    sizes = [params[n].size for n in names]
    total = int(np.sum(sizes))
    rng = RngStream(seed, "finite-difference")
    if total <= max_coords:
        coords = np.arange(total)
    else:
        coords = np.sort(rng.choice(total, size=max_coords, replace=False))
    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    for flat in coords:
        k = int(np.searchsorted(bounds, flat, side="right") - 1)
        name = names[k]
        local = int(flat - bounds[k])
        p = params[name]
        idx = np.unravel_index(local, p.shape)
        orig = p[idx]
        p[idx] = orig + step
        loss_hi, _ = loss_fn(params)
        p[idx] = orig - step
        loss_lo, _ = loss_fn(params)
        p[idx] = orig
        numeric = (loss_hi - loss_lo) / (2.0 * step)
        analytic = grads[name][idx]
        rel = abs(analytic - numeric) / max(abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
