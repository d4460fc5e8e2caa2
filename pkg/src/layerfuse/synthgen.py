"""Deterministic synthetic feature stores for desk-scale verification.

Three generators cover the mechanisms under test: a linearly separable task
(class signal in every slot), a planted task whose class signal lives in a
single (layer, token-kind) slot with pure noise everywhere else, and a
mixed-width store exercising the zero-padding path end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .reprstore import FeatureStore, StoreMeta, l2_normalize_rows
from .rng import RngStream

__all__ = ["SynthSpec", "generate_separable", "generate_planted", "generate_mixed_width"]


@dataclass
class SynthSpec:
    split_sizes: dict[str, int] = field(
        default_factory=lambda: {"train": 200, "val": 50, "test": 50}
    )
    num_layers: int = 4
    hidden_dims: int | list[int] = 16
    num_patches: int = 0
    num_classes: int = 2
    planted_layer: int | None = None
    planted_kind: str | None = None
    signal_strength: float = 1.0
    noise_std: float = 0.1
    imbalance_ratio: float = 1.0
    seed: int = 0

    def dims(self) -> list[int]:
        if isinstance(self.hidden_dims, int):
            return [self.hidden_dims] * self.num_layers
        return list(self.hidden_dims)

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        dims = self.dims()
        if len(dims) != self.num_layers:
            raise ValueError("hidden_dims list length must equal num_layers")
        if self.num_classes > min(dims):
            raise ValueError(
                f"num_classes {self.num_classes} exceeds smallest layer width {min(dims)}"
            )
        if self.planted_layer is not None and not 1 <= self.planted_layer <= self.num_layers:
            raise ValueError(f"planted_layer {self.planted_layer} outside [1, {self.num_layers}]")
        if self.planted_kind is not None and self.planted_kind not in ("CLS", "AP", "PATCH"):
            raise ValueError(f"planted_kind {self.planted_kind!r} unknown")
        if self.imbalance_ratio < 1.0:
            raise ValueError("imbalance_ratio must be >= 1")
        if self.noise_std < 0 or self.signal_strength < 0:
            raise ValueError("noise_std and signal_strength must be non-negative")
        K = self.num_classes
        for split, n in self.split_sizes.items():
            if n and min(self._class_counts(n)) < 1:
                raise ValueError(f"imbalance_ratio unrealizable for split {split!r} (n={n}, K={K})")

    def _class_counts(self, n: int) -> list[int]:
        """Per-class sample counts: weights fall linearly from ratio down to 1."""
        K = self.num_classes
        if K == 1:
            return [n]
        w = np.array([self.imbalance_ratio - (self.imbalance_ratio - 1.0) * c / (K - 1) for c in range(K)])
        counts = np.floor(n * w / w.sum()).astype(int)
        for i in range(n - counts.sum()):  # distribute the remainder deterministically
            counts[i % K] += 1
        return counts.tolist()


def _labels_for(spec: SynthSpec, n: int) -> np.ndarray:
    counts = spec._class_counts(n)
    return np.repeat(np.arange(spec.num_classes), counts)


def _token_kinds(spec: SynthSpec) -> tuple[str, ...]:
    return ("CLS", "AP", "PATCH") if spec.num_patches >= 1 else ("CLS", "AP")


def _slot_tensor(
    spec: SynthSpec,
    labels: np.ndarray,
    split: str,
    layer: int,
    kind: str,
    d: int,
    signal: bool,
) -> np.ndarray:
    """One (split, layer, kind) tensor: optional orthonormal class means plus
    Gaussian noise, per-vector L2-normalized, stored as float32."""
    rng = RngStream(spec.seed, f"synth/{split}/{layer}/{kind}")
    n = labels.size
    shape = (n, spec.num_patches, d) if kind == "PATCH" else (n, d)
    x = rng.normal(shape, scale=spec.noise_std) if spec.noise_std > 0 else np.zeros(shape)
    if signal:
        means = np.eye(spec.num_classes, d) * spec.signal_strength
        x += means[labels][:, None, :] if kind == "PATCH" else means[labels]
    flat = l2_normalize_rows(x.reshape(-1, d))
    return flat.reshape(shape).astype(np.float32)


def _generate(spec: SynthSpec, preset: str, planted: tuple[int, str] | None) -> FeatureStore:
    spec.validate()
    dims = spec.dims()
    kinds = _token_kinds(spec)
    meta = StoreMeta(
        model_id=f"synth-{preset}-seed{spec.seed}",
        num_layers=spec.num_layers,
        hidden_dims=dims,
        num_patches=spec.num_patches if "PATCH" in kinds else 0,
        token_kinds=kinds,
        num_classes=spec.num_classes,
        class_names=[f"class_{c}" for c in range(spec.num_classes)],
        split_sizes=dict(spec.split_sizes),
        extraction_point="synthetic",
    )
    labels = {split: _labels_for(spec, n) for split, n in spec.split_sizes.items()}
    tensors = {}
    for split in spec.split_sizes:
        for layer in range(1, spec.num_layers + 1):
            for kind in kinds:
                signal = planted is None or planted == (layer, kind)
                tensors[(split, layer, kind)] = _slot_tensor(
                    spec, labels[split], split, layer, kind, dims[layer - 1], signal
                )
    store = FeatureStore(meta, labels, tensors)
    store.validate()
    return store


def generate_separable(spec: SynthSpec) -> FeatureStore:
    """Class signal in every slot: orthonormal means scaled by signal_strength.

    With signal_strength/noise_std >= 10 the classes are linearly separable
    with margin in every single slot.
    """
    return _generate(spec, "separable", planted=None)


def generate_planted(spec: SynthSpec) -> FeatureStore:
    """Class signal only in the (planted_layer, planted_kind) slot; everything
    else is class-independent noise."""
    if spec.planted_layer is None or spec.planted_kind is None:
        raise ValueError("generate_planted requires planted_layer and planted_kind")
    if spec.planted_kind == "PATCH" and spec.num_patches < 1:
        raise ValueError("planted_kind PATCH requires num_patches >= 1")
    return _generate(spec, "planted", planted=(spec.planted_layer, spec.planted_kind))


def generate_mixed_width(spec: SynthSpec) -> FeatureStore:
    """Separable store with heterogeneous per-layer widths (zero-padding path)."""
    if isinstance(spec.hidden_dims, int):
        raise ValueError("generate_mixed_width needs an explicit per-layer width list")
    if len(set(spec.dims())) < 2:
        raise ValueError("generate_mixed_width expects at least two distinct widths")
    return _generate(spec, "mixed-width", planted=None)
