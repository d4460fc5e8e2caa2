"""Metrics and analyses: balanced accuracy, gains over the linear baseline,
attention-heatmap aggregation, RBF-kernel representation similarity, and
report serialization."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._jsonio import dump_stable
from .reprstore import FeatureStore
from .rng import RngStream

__all__ = [
    "GainRecord",
    "HeatmapMatrix",
    "balanced_accuracy",
    "accuracy_gain",
    "aggregate_attention",
    "cka_rbf",
    "layer_similarity_curve",
    "emit_report",
]


def balanced_accuracy(preds: np.ndarray, labels: np.ndarray, K: int) -> float:
    """Mean per-class recall over the K classes; every class must appear."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("balanced_accuracy: preds/labels shape mismatch")
    counts = np.bincount(labels, minlength=K)
    if len(counts) > K:
        raise ValueError("balanced_accuracy: label out of range")
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValueError(
            f"balanced_accuracy: classes {missing.tolist()} absent from labels; metric undefined"
        )
    correct = np.bincount(labels[preds == labels], minlength=K)
    return float((correct / counts).mean())


def accuracy_gain(method_acc: float, baseline_acc: float) -> float:
    """Percentage-point gain of a method over the baseline (positive = better)."""
    return 100.0 * (method_acc - baseline_acc)


@dataclass
class GainRecord:
    method_id: str
    method_bal_acc: float
    baseline_bal_acc: float
    gain_pp: float

    @classmethod
    def from_accs(cls, method_id: str, method_acc: float, baseline_acc: float):
        return cls(method_id, method_acc, baseline_acc, accuracy_gain(method_acc, baseline_acc))


@dataclass
class HeatmapMatrix:
    """Attention mass per (token kind, layer), averaged over heads and samples.

    Entries sum to 1; cells outside the fused (kind, layer) set are exactly 0.
    """

    values: np.ndarray  # [num_kinds, num_layers]
    kind_labels: tuple[str, ...]
    layer_labels: tuple[int, ...]
    sample_count: int
    head_count: int

    def argmax_cell(self) -> tuple[str, int]:
        k, l = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return self.kind_labels[k], self.layer_labels[l]


def aggregate_attention(attn_batches, row_index, num_layers: int | None = None) -> HeatmapMatrix:
    """Average pre-dropout attention rows over samples and heads into a
    (token kind) x (layer) matrix.

    ``attn_batches`` is an iterable of [B, M, R] arrays from eval-mode
    forward passes; ``row_index`` maps each of the R rows to its
    (kind, layer) cell.  Rows sharing a cell (patch tokens) accumulate.
    """
    row_index = list(row_index)
    R = len(row_index)
    mass = np.zeros(R)
    n_rows = 0
    head_count = None
    for batch in attn_batches:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 3 or batch.shape[2] != R:
            raise ValueError(f"attention batch shape {batch.shape} does not match {R} row tags")
        if head_count is None:
            head_count = batch.shape[1]
        elif batch.shape[1] != head_count:
            raise ValueError("attention batches disagree on head count")
        mass += batch.sum(axis=(0, 1))
        n_rows += batch.shape[0] * batch.shape[1]
    if n_rows == 0:
        raise ValueError("aggregate_attention: no attention rows supplied")
    mass /= n_rows

    kinds = tuple(k for k in ("CLS", "AP", "PATCH") if any(t[0] == k for t in row_index))
    L = num_layers if num_layers is not None else max(t[1] for t in row_index)
    values = np.zeros((len(kinds), L))
    kind_pos = {k: i for i, k in enumerate(kinds)}
    for r, (kind, layer) in enumerate(row_index):
        values[kind_pos[kind], layer - 1] += mass[r]
    return HeatmapMatrix(values, kinds, tuple(range(1, L + 1)), n_rows // head_count, head_count)


# ---------------------------------------------------------------------------
# representation similarity
# ---------------------------------------------------------------------------

def _rbf_kernel(X: np.ndarray, sigma_frac: float) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    iu = np.triu_indices(X.shape[0], k=1)
    median = float(np.median(np.sqrt(d2[iu])))
    sigma = sigma_frac * median if median > 0 else 1e-12
    return np.exp(-d2 / (2.0 * sigma * sigma))


def _center(K: np.ndarray) -> np.ndarray:
    means = K.mean(axis=0)
    return K - means[None, :] - means[:, None] + means.mean()


def cka_rbf(X: np.ndarray, Y: np.ndarray, sigma_frac: float = 0.2) -> float:
    """Centered kernel alignment between paired representations, RBF kernel.

    The bandwidth of each kernel is ``sigma_frac`` times the median pairwise
    Euclidean distance of its own representation, which makes the score
    invariant to isotropic rescaling and to orthogonal transforms.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError("cka_rbf: expects two 2-D arrays with matching row counts")
    if X.shape[0] < 3:
        raise ValueError("cka_rbf: needs at least 3 samples")
    Kc = _center(_rbf_kernel(X, sigma_frac))
    Lc = _center(_rbf_kernel(Y, sigma_frac))
    denom = np.sqrt(np.sum(Kc * Kc) * np.sum(Lc * Lc))
    if denom == 0:
        raise ValueError("cka_rbf: zero-variance representation")
    return float(np.sum(Kc * Lc) / denom)


def layer_similarity_curve(
    store: FeatureStore,
    split: str,
    token_kind: str,
    reference_layer: int | None = None,
    *,
    sigma_frac: float = 0.2,
    max_rows: int = 2000,
    seed: int = 0,
) -> np.ndarray:
    """Similarity of each layer's representation to a reference layer (default last).

    Kernel matrices are N x N, so rows are capped at ``max_rows`` via a
    seeded subsample.  The reference layer scores exactly 1.0 by definition.
    """
    m = store.meta
    if token_kind not in m.token_kinds:
        raise ValueError(f"store lacks {token_kind} tokens")
    L = m.num_layers
    ref = L if reference_layer is None else reference_layer
    if not 1 <= ref <= L:
        raise ValueError(f"reference layer {ref} outside [1, {L}]")
    n = m.split_sizes[split]
    if n > max_rows:
        idx = np.sort(RngStream(seed, "cka-subsample").choice(n, size=max_rows, replace=False))
    else:
        idx = np.arange(n)
    X_ref = store.tensors[(split, ref, token_kind)][idx].astype(np.float64)
    curve = np.empty(L)
    for layer in range(1, L + 1):
        if layer == ref:
            curve[layer - 1] = 1.0
            continue
        X = store.tensors[(split, layer, token_kind)][idx].astype(np.float64)
        curve[layer - 1] = cka_rbf(X.reshape(len(idx), -1), X_ref.reshape(len(idx), -1), sigma_frac)
    return curve


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def _write_heatmap_csv(path, heatmap: HeatmapMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind"] + [f"layer_{l}" for l in heatmap.layer_labels])
        for i, kind in enumerate(heatmap.kind_labels):
            writer.writerow([kind] + [format(v, ".17g") for v in heatmap.values[i]])


def _write_curve_csv(path, curve: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "cka"])
        for layer, value in enumerate(curve, start=1):
            writer.writerow([layer, format(float(value), ".17g")])


def emit_report(
    out_dir,
    report: dict,
    *,
    heatmap: HeatmapMatrix | None = None,
    cka_curves: dict[str, np.ndarray] | None = None,
) -> Path:
    """Write report.json (floats at 17 significant digits) plus optional CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_stable(report, out / "report.json")
    if heatmap is not None:
        _write_heatmap_csv(out / "heatmap.csv", heatmap)
    for name, curve in (cka_curves or {}).items():
        _write_curve_csv(out / f"cka_{name}.csv", curve)
    return out / "report.json"
