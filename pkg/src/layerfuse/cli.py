"""Command-line surface.

Subcommands: synth, train, gridsearch, eval, heatmap, cka, params, seedstudy.
Exit codes: 0 success, 2 usage/config error, 3 runtime failure (for example
training divergence).  ``LAYERFUSE_WORKERS`` sets the default worker count
for gridsearch and seedstudy.  Given identical inputs, flags, and seed every
subcommand writes bitwise-identical outputs, except for the wall-clock
``seconds`` fields inside reports.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._jsonio import dump_stable
from .analysis import (
    accuracy_gain,
    aggregate_attention,
    balanced_accuracy,
    emit_report,
    layer_similarity_curve,
)
from .diffcore import TrainingDiverged
from .probes import (
    AUTO,
    build_config,
    count_params,
    enumerate_params,
    load_probe,
    make_aat_config,
    make_hybrid_config,
    probe_forward,
    save_probe,
)
from .reprstore import LayerScheme, StoreFormatError, assemble_batch, read_store, write_store
from .synthgen import SynthSpec, generate_mixed_width, generate_planted, generate_separable
from .trainer import (
    GridSpace,
    SplitSpec,
    build_plan,
    evaluate,
    grid_search,
    predict,
    seed_study,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _provenance(args: argparse.Namespace) -> dict:
    flags = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    return {"artifact": "layerfuse", "version": __version__, "flags": flags}


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get("LAYERFUSE_WORKERS", "1")))
    except ValueError:
        return 1


def _parse_tokens(text: str) -> tuple[str, ...]:
    parts = [p.strip().upper() for p in text.replace("+", ",").split(",") if p.strip()]
    if not parts:
        raise ValueError("empty token set")
    return tuple(dict.fromkeys(parts))


def _full_split_batch(store, cfg, split):
    n = store.meta.split_sizes[split]
    return assemble_batch(store, split, np.arange(n), cfg.resolved_layers, cfg.tokens)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _spec_from_args(args) -> SynthSpec:
    if args.spec:
        payload = json.loads(Path(args.spec).read_text())
        return SynthSpec(**payload)
    dims: int | list[int]
    if "," in args.dim:
        dims = [int(p) for p in args.dim.split(",")]
    else:
        dims = int(args.dim)
    return SynthSpec(
        split_sizes={"train": args.train_n, "val": args.val_n, "test": args.test_n},
        num_layers=args.layers,
        hidden_dims=dims,
        num_patches=args.patches,
        num_classes=args.classes,
        planted_layer=args.layer,
        planted_kind=args.kind.upper() if args.kind else None,
        signal_strength=args.signal,
        noise_std=args.noise,
        imbalance_ratio=args.imbalance,
        seed=args.seed,
    )


def cmd_synth(args) -> int:
    spec = _spec_from_args(args)
    generator = {
        "separable": generate_separable,
        "planted": generate_planted,
        "mixed": generate_mixed_width,
    }[args.preset]
    store = generator(spec)
    write_store(store, args.out)
    print(f"wrote {args.out}: {store.meta.model_id}, splits {store.meta.split_sizes}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / gridsearch shared config plumbing
# ---------------------------------------------------------------------------

def _probe_config(store, args):
    heads = AUTO if args.heads == "auto" else int(args.heads)
    dropout = getattr(args, "dropout", None)
    if args.probe == "aat":
        return make_aat_config(store, attn_dropout=0.0 if dropout is None else dropout)
    if args.probe == "hybrid":
        cfg = make_hybrid_config(store)
        return cfg if dropout is None else replace(cfg, attn_dropout=dropout)
    scheme = LayerScheme.parse(args.layers)
    tokens = _parse_tokens(args.tokens)
    if args.probe == "linear":
        kind = "linear_cls" if scheme.kind == "last" and tokens == ("CLS",) else "linear_concat"
        return build_config(store, kind, scheme, tokens)
    if args.probe == "attentive-fusion":
        return build_config(
            store,
            "attentive_fusion",
            scheme,
            tokens,
            heads=heads,
            attn_dropout=0.0 if dropout is None else dropout,
        )
    raise ValueError(f"unknown probe {args.probe!r}")


def _history_csv(path, history) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,train_bal_acc,val_bal_acc\n")
        for i, (loss, tr, va) in enumerate(
            zip(history.train_loss, history.train_bal_acc, history.val_bal_acc), start=1
        ):
            va_s = "" if va is None else format(va, ".17g")
            fh.write(f"{i},{format(loss, '.17g')},{format(tr, '.17g')},{va_s}\n")


def _run_report(args, cfg, plan, history, test_acc=None) -> dict:
    return {
        "provenance": _provenance(args),
        "config": cfg.to_dict(),
        "plan": plan.to_dict(),
        "seed": plan.seed,
        "param_count": count_params(cfg.kind, cfg.d_model, len(cfg.resolved_layers), cfg.num_classes),
        "test_bal_acc": test_acc,
        "baseline_bal_acc": None,
        "gain_pp": None,
        "history": history.summary(),
    }


def cmd_train(args) -> int:
    store = read_store(args.features)
    cfg = _probe_config(store, args)
    plan = build_plan(
        _train_size(store, args.train_split),
        lr_max=args.lr,
        weight_decay=args.wd,
        attn_dropout=cfg.attn_dropout,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
    )
    probe, history = train(
        cfg, plan, store, SplitSpec(train_split=args.train_split, val_split=args.val_split)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_probe(probe, out / "probe.lfpb", seed=plan.seed, provenance={"plan": plan.to_dict()})
    test_acc = None
    if args.test_split in store.meta.split_sizes:
        test_acc = evaluate(probe, _full_split_batch(store, cfg, args.test_split), cfg.num_classes)
    report = _run_report(args, cfg, plan, history, test_acc)
    report["enumerated_param_count"] = enumerate_params(probe)
    emit_report(out, report)
    _history_csv(out / "history.csv", history)
    print(
        f"trained {cfg.kind} (heads={cfg.num_heads}, rows={cfg.num_rows}); "
        f"final train bal-acc {history.train_bal_acc[-1]:.4f}"
        + (f", test bal-acc {test_acc:.4f}" if test_acc is not None else "")
    )
    return EXIT_OK


def _train_size(store, split: str) -> int:
    if split not in store.meta.split_sizes:
        raise ValueError(f"store has no split {split!r}")
    return store.meta.split_sizes[split]


def cmd_gridsearch(args) -> int:
    store = read_store(args.features)
    cfg = _probe_config(store, args)
    result = grid_search(
        cfg,
        GridSpace(),
        store,
        args.seed,
        workers=args.workers,
        train_split=args.train_split,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_stable(result.leaderboard(), out / "leaderboard.json")
    save_probe(
        result.best_probe,
        out / "probe.lfpb",
        seed=args.seed,
        provenance={"plan": result.best_plan.to_dict(), "grid_winner": result.winner_index},
    )
    test_acc = None
    if args.test_split in store.meta.split_sizes:
        test_acc = evaluate(
            result.best_probe,
            _full_split_batch(store, result.best_config, args.test_split),
            result.best_config.num_classes,
        )
    report = _run_report(args, result.best_config, result.best_plan, result.best_history, test_acc)
    report["grid_cells"] = len(result.cells)
    report["grid_winner"] = result.winner_index
    emit_report(out, report)
    best = result.cells[result.winner_index]
    print(
        f"grid search over {len(result.cells)} cells; winner #{result.winner_index} "
        f"(lr={best['lr']}, wd={best['wd']}, dropout={best['dropout']}, "
        f"val bal-acc {best['val_bal_acc']:.4f})"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    store = read_store(args.features)
    probe = load_probe(args.checkpoint)
    cfg = probe.config
    batch = _full_split_batch(store, cfg, args.split)
    acc = balanced_accuracy(predict(probe, batch), batch.labels, cfg.num_classes)
    baseline_acc = None
    gain = None
    if args.baseline:
        baseline = json.loads(Path(args.baseline).read_text())
        baseline_acc = baseline.get("test_bal_acc")
        if baseline_acc is None:
            raise ValueError(f"baseline report {args.baseline} carries no test_bal_acc")
        gain = accuracy_gain(acc, baseline_acc)
    payload = {
        "provenance": _provenance(args),
        "split": args.split,
        "bal_acc": acc,
        "baseline_bal_acc": baseline_acc,
        "gain_pp": gain,
    }
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        dump_stable(payload, Path(args.out) / "eval.json")
    line = f"bal-acc {acc:.4f} on {args.split}"
    if gain is not None:
        line += f"; gain {gain:+.2f} pp over baseline {baseline_acc:.4f}"
    print(line)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    store = read_store(args.features)
    probe = load_probe(args.checkpoint)
    cfg = probe.config
    if not cfg.is_attentive:
        raise ValueError("heatmaps require an attentive probe checkpoint")
    batch = _full_split_batch(store, cfg, args.split)
    _, attn, _ = probe_forward(probe, batch, train=False)
    heatmap = aggregate_attention([attn], batch.row_index, num_layers=store.meta.num_layers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_report(
        out,
        {
            "provenance": _provenance(args),
            "split": args.split,
            "samples": heatmap.sample_count,
            "heads": heatmap.head_count,
            "argmax_cell": list(heatmap.argmax_cell()),
        },
        heatmap=heatmap,
    )
    kind, layer = heatmap.argmax_cell()
    print(f"attention mass peaks at ({kind}, layer {layer}); heatmap.csv written to {out}")
    return EXIT_OK


def cmd_cka(args) -> int:
    store = read_store(args.features)
    curve = layer_similarity_curve(
        store,
        args.split,
        args.kind.upper(),
        args.reference,
        max_rows=args.max_rows,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_report(
        out,
        {
            "provenance": _provenance(args),
            "split": args.split,
            "kind": args.kind.upper(),
            "reference_layer": args.reference or store.meta.num_layers,
            "bandwidth": "0.2 x median pairwise distance",
        },
        cka_curves={args.kind.lower(): curve},
    )
    print("cka per layer: " + " ".join(f"{v:.4f}" for v in curve))
    return EXIT_OK


def cmd_params(args) -> int:
    kind = {
        "linear": "linear_concat",
        "linear-cls": "linear_cls",
        "attentive-fusion": "attentive_fusion",
        "aat": "attentive_tokens",
        "hybrid": "attentive_tokens",
    }[args.probe]
    n = count_params(kind, args.d, args.layers_count, args.classes)
    print(f"{n:,}")
    return EXIT_OK


def cmd_seedstudy(args) -> int:
    store = read_store(args.features)
    cfg = _probe_config(store, args)
    seeds = [int(s) for s in args.seeds.split(",")]
    plan = build_plan(
        _train_size(store, args.train_split),
        lr_max=args.lr,
        weight_decay=args.wd,
        attn_dropout=cfg.attn_dropout,
        batch_size=args.batch_size,
        epochs=args.epochs,
    )
    result = seed_study(
        cfg, plan, store, seeds, test_split=args.test_split, workers=args.workers
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_stable(
        {
            "provenance": _provenance(args),
            "rows": result.rows,
            "mean": result.mean,
            "std": result.std,
        },
        out / "seedstudy.json",
    )
    print(f"{len(seeds)} seeds: mean bal-acc {result.mean:.4f}, std {result.std:.5f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_probe_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--features", required=True, help="input .lfr feature store")
    p.add_argument(
        "--probe",
        required=True,
        choices=["linear", "attentive-fusion", "aat", "hybrid"],
        help="probe family: linear classifier, attentive fusion over summary tokens, "
        "attention over all last-layer tokens, or the hybrid all-token probe",
    )
    p.add_argument(
        "--layers",
        default="all",
        help="layer subset: last | mid+last | quarterly | all | comma-separated indices",
    )
    p.add_argument(
        "--tokens",
        default="cls+ap",
        help="token kinds to stack, e.g. cls, ap, cls+ap (ignored for aat/hybrid)",
    )
    p.add_argument(
        "--heads",
        default="auto",
        help="attention heads; 'auto' matches the number of stacked representations",
    )
    p.add_argument("--train-split", default="train", help="split to train on")
    p.add_argument("--val-split", default="val", help="split used for validation metrics")
    p.add_argument("--test-split", default="test", help="split used for the test metric")
    p.add_argument("--batch-size", type=int, default=2048, help="upper bound; shrunk to keep >=5 batches/epoch")
    p.add_argument("--epochs", type=int, default=40, help="lower bound; raised to reach >=1000 update steps")


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(
        prog="layerfuse",
        description="Train and analyze probes over per-layer frozen vision-transformer features.",
    )
    root.add_argument("--version", action="version", version=f"layerfuse {__version__}")
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic .lfr feature store")
    p.add_argument("--preset", choices=["separable", "planted", "mixed"], default="separable",
                   help="separable: class signal in every slot; planted: signal in one "
                        "(layer, kind) slot only; mixed: heterogeneous layer widths")
    p.add_argument("--spec", help="JSON file with generator fields (overrides other flags)")
    p.add_argument("--out", required=True, help="output .lfr path")
    p.add_argument("--train-n", type=int, default=200)
    p.add_argument("--val-n", type=int, default=50)
    p.add_argument("--test-n", type=int, default=50)
    p.add_argument("--layers", type=int, default=4, help="number of encoder layers L")
    p.add_argument("--dim", default="16", help="feature width, or comma list for mixed widths")
    p.add_argument("--patches", type=int, default=0, help="patch tokens per layer (0 = none)")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--layer", type=int, default=None, help="planted layer (planted preset)")
    p.add_argument("--kind", default=None, help="planted token kind: cls | ap | patch")
    p.add_argument("--signal", type=float, default=1.0, help="class-mean scale")
    p.add_argument("--noise", type=float, default=0.1, help="Gaussian noise std")
    p.add_argument("--imbalance", type=float, default=1.0, help="majority/minority class ratio")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one probe and write checkpoint + report")
    _add_probe_flags(p)
    p.add_argument("--lr", type=float, default=0.01, help="peak learning rate (cosine-annealed to 0)")
    p.add_argument("--wd", type=float, default=1e-4, help="decoupled weight decay")
    p.add_argument("--dropout", type=float, default=None, help="attention dropout probability")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "gridsearch",
        help="grid over lr {0.1,0.01,0.001} x dropout {0,0.1,0.3} x wd {1e-6..1.0} "
        "(wd pinned to 0.1 for aat), selected by validation balanced accuracy",
    )
    _add_probe_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=_default_workers(),
                   help="parallel workers (default from LAYERFUSE_WORKERS)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("eval", help="evaluate a checkpoint; optional gain vs. a baseline report")
    p.add_argument("--checkpoint", required=True, help=".lfpb probe checkpoint")
    p.add_argument("--features", required=True, help=".lfr feature store")
    p.add_argument("--split", default="test")
    p.add_argument("--baseline", help="report.json of the baseline run (for gain in pp)")
    p.add_argument("--out", help="output directory for eval.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="aggregate attention over heads and samples per (kind, layer)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("cka", help="kernel-alignment similarity of every layer to a reference layer")
    p.add_argument("--features", required=True)
    p.add_argument("--kind", default="cls", help="token kind to compare: cls | ap")
    p.add_argument("--split", default="train")
    p.add_argument("--reference", type=int, default=None, help="reference layer (default: last)")
    p.add_argument("--max-rows", type=int, default=2000, help="subsample cap (kernels are NxN)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("params", help="closed-form parameter count for a probe family")
    p.add_argument("--probe", required=True,
                   choices=["linear", "linear-cls", "attentive-fusion", "aat", "hybrid"])
    p.add_argument("--d", type=int, required=True, help="feature width after padding")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--layers-count", type=int, default=12,
                   help="number of fused layers (linear concatenation only)")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("seedstudy", help="re-train under several seeds; report mean/std of test bal-acc")
    _add_probe_flags(p)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--wd", type=float, default=1e-4)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seed list")
    p.add_argument("--workers", type=int, default=_default_workers())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_seedstudy)

    return root


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (StoreFormatError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
