"""Training runs: schedule resolution, the optimization loop, hyperparameter
grid search with validation selection, and the seed-stability study."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import balanced_accuracy
from .diffcore import (
    OptState,
    TrainingDiverged,
    adamw_step,
    apply_jitter,
    clip_global_norm,
    compute_class_weights,
    cosine_lr,
    weighted_ce,
)
from .probes import ProbeConfig, init_probe, probe_backward, probe_forward
from .reprstore import FeatureStore, StackedBatch, assemble_batch, stratified_split
from .rng import RngStream

__all__ = [
    "TrainPlan",
    "GridSpace",
    "TrainHistory",
    "SplitSpec",
    "GridSearchResult",
    "SeedStudyResult",
    "resolve_schedule",
    "build_plan",
    "train",
    "train_on_arrays",
    "evaluate",
    "predict",
    "grid_search",
    "seed_study",
]

MAX_BATCH = 2048
MIN_EPOCHS = 40
MIN_BATCHES_PER_EPOCH = 5
MIN_TOTAL_STEPS = 1000


def resolve_schedule(
    N_train: int,
    requested_batch: int = MAX_BATCH,
    requested_epochs: int = MIN_EPOCHS,
):
    """Resolve (batch_size, epochs, total_steps) from the dataset size.

    The batch size is shrunk until every epoch has at least 5 batches, and
    the epoch count is raised until the run performs at least 1000 gradient
    updates.
    """
    if N_train < MIN_BATCHES_PER_EPOCH:
        raise ValueError(f"need at least {MIN_BATCHES_PER_EPOCH} training samples, got {N_train}")
    batch_size = max(1, min(requested_batch, N_train // MIN_BATCHES_PER_EPOCH))
    batches_per_epoch = math.ceil(N_train / batch_size)
    epochs = max(requested_epochs, math.ceil(MIN_TOTAL_STEPS / batches_per_epoch))
    total_steps = epochs * batches_per_epoch
    return batch_size, epochs, total_steps


@dataclass
class TrainPlan:
    """Resolved hyperparameters and schedule for one training run."""

    lr_max: float
    weight_decay: float
    attn_dropout: float
    epochs: int
    batch_size: int
    total_steps: int
    batches_per_epoch: int
    grad_clip: float = 5.0
    jitter_sigma: float = 0.05
    jitter_prob: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < MIN_EPOCHS:
            raise ValueError(f"plan epochs {self.epochs} < {MIN_EPOCHS}")
        if self.batch_size > MAX_BATCH:
            raise ValueError(f"plan batch_size {self.batch_size} > {MAX_BATCH}")
        if self.batches_per_epoch < MIN_BATCHES_PER_EPOCH:
            raise ValueError(f"plan batches_per_epoch {self.batches_per_epoch} < {MIN_BATCHES_PER_EPOCH}")
        if self.total_steps < MIN_TOTAL_STEPS:
            raise ValueError(f"plan total_steps {self.total_steps} < {MIN_TOTAL_STEPS}")
        if self.total_steps != self.epochs * self.batches_per_epoch:
            raise ValueError("plan total_steps != epochs * batches_per_epoch")

    def to_dict(self) -> dict:
        return {
            "lr_max": self.lr_max,
            "weight_decay": self.weight_decay,
            "attn_dropout": self.attn_dropout,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "total_steps": self.total_steps,
            "batches_per_epoch": self.batches_per_epoch,
            "grad_clip": self.grad_clip,
            "jitter_sigma": self.jitter_sigma,
            "jitter_prob": self.jitter_prob,
            "seed": self.seed,
        }


def build_plan(
    n_train: int,
    *,
    lr_max: float = 0.01,
    weight_decay: float = 1e-4,
    attn_dropout: float = 0.0,
    batch_size: int = MAX_BATCH,
    epochs: int = MIN_EPOCHS,
    grad_clip: float = 5.0,
    jitter_sigma: float = 0.05,
    jitter_prob: float = 0.5,
    seed: int = 0,
) -> TrainPlan:
    bs, ep, total = resolve_schedule(n_train, batch_size, epochs)
    plan = TrainPlan(
        lr_max=lr_max,
        weight_decay=weight_decay,
        attn_dropout=attn_dropout,
        epochs=ep,
        batch_size=bs,
        total_steps=total,
        batches_per_epoch=math.ceil(n_train / bs),
        grad_clip=grad_clip,
        jitter_sigma=jitter_sigma,
        jitter_prob=jitter_prob,
        seed=seed,
    )
    plan.validate()
    return plan


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_bal_acc: list[float] = field(default_factory=list)
    val_bal_acc: list = field(default_factory=list)  # entries are float or None
    seconds: float = 0.0
    final_step: int = 0

    def summary(self) -> dict:
        return {
            "epochs": len(self.train_loss),
            "final_train_loss": self.train_loss[-1] if self.train_loss else None,
            "final_train_bal_acc": self.train_bal_acc[-1] if self.train_bal_acc else None,
            "final_val_bal_acc": self.val_bal_acc[-1] if self.val_bal_acc else None,
            "steps": self.final_step,
            "seconds": self.seconds,
        }


@dataclass
class SplitSpec:
    """Which store rows to train and validate on.

    ``train_indices``/``val_indices`` index into their respective splits;
    when ``val_indices`` is given with no ``val_split``, validation rows are
    taken from the training split (the inner 80/20 protocol).
    """

    train_split: str = "train"
    val_split: str | None = "val"
    train_indices: np.ndarray | None = None
    val_indices: np.ndarray | None = None


def predict(probe, batch: StackedBatch) -> np.ndarray:
    logits, _, _ = probe_forward(probe, batch, train=False)
    return np.argmax(logits, axis=1)


def evaluate(probe, batch: StackedBatch, K: int) -> float:
    return balanced_accuracy(predict(probe, batch), batch.labels, K)


def train_on_arrays(
    cfg: ProbeConfig,
    plan: TrainPlan,
    train_batch: StackedBatch,
    val_batch: StackedBatch | None = None,
):
    """Core optimization loop on pre-assembled stacked batches.

    Per batch: jitter, forward in train mode, class-weighted cross-entropy,
    analytic backward, global-norm clipping, AdamW with the cosine schedule.
    Per-epoch metrics use eval-mode passes (no dropout, no jitter).  Bitwise
    deterministic given the plan seed.
    """
    plan.validate()
    if abs(plan.attn_dropout - cfg.attn_dropout) > 0:
        raise ValueError(
            f"plan dropout {plan.attn_dropout} != probe config dropout {cfg.attn_dropout}"
        )
    N = train_batch.B
    if math.ceil(N / plan.batch_size) != plan.batches_per_epoch:
        raise ValueError("plan batches_per_epoch does not match the training set size")
    K = cfg.num_classes
    weights = compute_class_weights(train_batch.labels, K)

    seed = plan.seed
    init_rng = RngStream(seed, "init")
    shuffle_rng = RngStream(seed, "shuffle")
    dropout_rng = RngStream(seed, "attn-dropout")
    jitter_rng = RngStream(seed, "jitter")

    probe = init_probe(cfg, init_rng)
    opt = OptState.for_params(
        probe.params, weight_decay=plan.weight_decay, base_lr=plan.lr_max
    )
    history = TrainHistory()
    t0 = time.perf_counter()
    step = 0
    for _epoch in range(plan.epochs):
        perm = shuffle_rng.permutation(N)
        losses = []
        for b in range(plan.batches_per_epoch):
            rows = perm[b * plan.batch_size : (b + 1) * plan.batch_size]
            sub = train_batch.take(rows)
            sub = apply_jitter(sub, plan.jitter_sigma, plan.jitter_prob, jitter_rng, train=True)
            logits, _, cache = probe_forward(probe, sub, train=True, rng=dropout_rng)
            loss, dLogits = weighted_ce(logits, sub.labels, weights)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}; config: {cfg.to_dict()}"
                )
            grads = probe_backward(probe, cache, dLogits)
            clip_global_norm(grads, plan.grad_clip)
            adamw_step(probe.params, grads, opt, cosine_lr(step, plan.total_steps, plan.lr_max))
            step += 1
            losses.append(loss)
        history.train_loss.append(float(np.mean(losses)))
        history.train_bal_acc.append(evaluate(probe, train_batch, K))
        history.val_bal_acc.append(evaluate(probe, val_batch, K) if val_batch is not None else None)
    history.final_step = step
    history.seconds = time.perf_counter() - t0
    return probe, history


def _assemble_for(cfg: ProbeConfig, store: FeatureStore, split: str, indices) -> StackedBatch:
    if indices is None:
        indices = np.arange(store.meta.split_sizes[split])
    return assemble_batch(store, split, indices, cfg.resolved_layers, cfg.tokens)


def train(
    cfg: ProbeConfig,
    plan: TrainPlan,
    store: FeatureStore,
    split_spec: SplitSpec | None = None,
):
    """Assemble the requested splits from the store and run the training loop."""
    spec = split_spec or SplitSpec()
    train_batch = _assemble_for(cfg, store, spec.train_split, spec.train_indices)
    val_batch = None
    if spec.val_indices is not None:
        val_batch = _assemble_for(cfg, store, spec.val_split or spec.train_split, spec.val_indices)
    elif spec.val_split is not None and spec.val_split in store.meta.split_sizes:
        val_batch = _assemble_for(cfg, store, spec.val_split, None)
    return train_on_arrays(cfg, plan, train_batch, val_batch)


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpace:
    """Hyperparameter grid; the all-token baseline pins weight decay to 0.1."""

    learning_rates: tuple[float, ...] = (0.1, 0.01, 0.001)
    dropouts: tuple[float, ...] = (0.0, 0.1, 0.3)
    weight_decays: tuple[float, ...] = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 0.1, 1.0)
    pinned_weight_decay: dict = field(default_factory=lambda: {"aat": (0.1,)})

    def cells(self, variant: str | None):
        wds = self.pinned_weight_decay.get(variant, self.weight_decays)
        return [
            (lr, dr, wd)
            for lr in self.learning_rates
            for dr in self.dropouts
            for wd in wds
        ]


@dataclass
class GridSearchResult:
    winner_index: int
    cells: list[dict]
    best_config: ProbeConfig
    best_plan: TrainPlan
    best_probe: object
    best_history: TrainHistory

    def leaderboard(self) -> dict:
        return {"cells": self.cells, "winner": self.winner_index}


def _rank_key(row: dict):
    # best validation accuracy first; ties prefer smaller wd, then lr, then dropout
    return (-row["val_bal_acc"], row["wd"], row["lr"], row["dropout"])


def _grid_cell(args):
    cfg, plan, store, spec = args
    try:
        probe, history = train(cfg, plan, store, spec)
    except (TrainingDiverged, FloatingPointError, ValueError) as exc:
        row = {
            "lr": plan.lr_max,
            "wd": plan.weight_decay,
            "dropout": plan.attn_dropout,
            "val_bal_acc": None,
            "train_bal_acc": None,
            "steps": plan.total_steps,
            "seconds": 0.0,
            "error": str(exc),
        }
        return row, None, None
    row = {
        "lr": plan.lr_max,
        "wd": plan.weight_decay,
        "dropout": plan.attn_dropout,
        "val_bal_acc": history.val_bal_acc[-1],
        "train_bal_acc": history.train_bal_acc[-1],
        "steps": history.final_step,
        "seconds": history.seconds,
    }
    return row, probe, history


def grid_search(
    cfg: ProbeConfig,
    space: GridSpace,
    store: FeatureStore,
    seed: int,
    *,
    workers: int = 1,
    train_split: str = "train",
    val_fraction: float = 0.2,
) -> GridSearchResult:
    """Train one run per grid cell on a stratified 80/20 split of the training
    split, rank by validation balanced accuracy, and return the winning
    trained probe (no retraining on train+val)."""
    labels = store.labels[train_split]
    idx_tr, idx_val = stratified_split(labels, val_fraction, seed)
    spec = SplitSpec(train_split, None, idx_tr, idx_val)
    jobs = []
    for lr, dr, wd in space.cells(cfg.variant):
        cell_cfg = replace(cfg, attn_dropout=dr)
        plan = build_plan(
            len(idx_tr), lr_max=lr, weight_decay=wd, attn_dropout=dr, seed=seed
        )
        jobs.append((cell_cfg, plan, store, spec))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_grid_cell, jobs))
    else:
        outcomes = [_grid_cell(job) for job in jobs]

    rows = [row for row, _, _ in outcomes]
    valid = [i for i, row in enumerate(rows) if row["val_bal_acc"] is not None]
    if not valid:
        raise TrainingDiverged("every grid cell failed")
    winner = min(valid, key=lambda i: _rank_key(rows[i]))
    _, best_probe, best_history = outcomes[winner]
    best_cfg, best_plan = jobs[winner][0], jobs[winner][1]
    return GridSearchResult(winner, rows, best_cfg, best_plan, best_probe, best_history)


# ---------------------------------------------------------------------------
# seed stability
# ---------------------------------------------------------------------------

@dataclass
class SeedStudyResult:
    rows: list[dict]
    mean: float
    std: float


def _seed_run(args):
    cfg, plan, store, test_split = args
    probe, _ = train(cfg, plan, store, SplitSpec(val_split=None))
    test_batch = _assemble_for(cfg, store, test_split, None)
    return evaluate(probe, test_batch, cfg.num_classes)


def seed_study(
    cfg: ProbeConfig,
    plan: TrainPlan,
    store: FeatureStore,
    seeds,
    *,
    test_split: str = "test",
    workers: int = 1,
) -> SeedStudyResult:
    """Re-train under each seed and report the spread of test balanced accuracy."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("seed_study needs at least 2 seeds")
    jobs = [(cfg, replace(plan, seed=s), store, test_split) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(_seed_run, jobs))
    else:
        accs = [_seed_run(job) for job in jobs]
    rows = [{"seed": s, "test_bal_acc": a} for s, a in zip(seeds, accs)]
    arr = np.asarray(accs)
    return SeedStudyResult(rows, float(arr.mean()), float(arr.std()))
