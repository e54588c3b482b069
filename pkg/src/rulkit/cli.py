"""Command line entry points.

Subcommands: ingest (parse/validate/cache), train (CV + retrain + test
eval, one or many seeds), evaluate (rescore a finished run), ablate
(latent mask sweep), plot (trajectory figures), reproduce-table (multi
seed protocol against the reference results), demo-data (synthetic
files). Options resolve as CLI flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, cmapss, evaluation, simdata, training, windows

# Published results this implementation aims to reproduce, as
# (mean, std) per metric; std is None where only a mean is available.
REFERENCE_RESULTS = {
    ("lstm", "FD001"): {"rmse": (14.88, None), "score": (400.0, None)},
    ("lstm", "FD003"): {"rmse": (14.75, None), "score": (382.0, None)},
    ("cnn", "FD001"): {"rmse": (14.38, None), "score": (332.0, None)},
    ("cnn", "FD003"): {"rmse": (15.12, None), "score": (495.0, None)},
    ("tfm", "FD001"): {"rmse": (11.73, 0.09), "score": (215.0, 5.0)},
    ("tfm", "FD003"): {"rmse": (11.64, 0.03), "score": (191.0, 9.0)},
    ("dtfm", "FD001"): {"rmse": (11.65, None), "score": (210.0, None)},
    ("dtfm", "FD003"): {"rmse": (11.58, None), "score": (204.0, None)},
    ("tfim", "FD001"): {"rmse": (11.59, 0.08), "score": (208.0, 3.0)},
    ("tfim", "FD003"): {"rmse": (10.90, 0.06), "score": (187.0, 8.0)},
}

TRAIN_FLAG_FIELDS = {
    "subset": "subset",
    "model": "model",
    "window": "window",
    "epochs": "max_epochs",
    "folds": "n_folds",
    "batch_size": "batch_size",
    "lr_min": "lr_min",
    "lr_max": "lr_max",
    "cycle_epochs": "cycle_epochs",
    "avg_epochs": "avg_epochs",
    "noise_sigma": "noise_sigma",
    "dropout": "dropout",
    "engines": "max_engines",
}


def _data_dir_or_fail(arg: str | None) -> Path:
    root = cmapss.resolve_data_dir(arg)
    if root is None or not Path(root).exists():
        raise cmapss.DataValidationError(
            "no data directory found; pass --data-dir, set "
            f"{cmapss.DATA_DIR_ENV}, or place files under ./data "
            "(rulkit demo-data generates synthetic files)"
        )
    return Path(root)


def _build_train_config(args: argparse.Namespace) -> training.TrainConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(json.loads(Path(args.config).read_text()))
    for flag, field in TRAIN_FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[field] = v
    known = {f.name for f in dataclasses.fields(training.TrainConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return training.TrainConfig(**values)


def _parse_seeds(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def cmd_ingest(args: argparse.Namespace) -> int:
    root = _data_dir_or_fail(args.data_dir)
    data = cmapss.parse_subset(root, args.subset)
    cmapss.validate_counts(data)
    n_tr, r_tr, n_te, r_te = data.counts()
    print(f"{args.subset}: train {n_tr} engines / {r_tr} rows, "
          f"test {n_te} engines / {r_te} rows (counts OK)")
    stats = cmapss.fit_norm_stats(data.train)
    flat = int(stats.constant_mask.sum())
    print(f"normalization fitted on train: {flat} constant sensor(s) map to 0")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cmapss.save_stats(stats, out / f"stats_{args.subset}.json")
        train_mats = cmapss.normalize_trajectories(data.train, stats)
        test_mats = cmapss.normalize_trajectories(data.test, stats)
        np.savez_compressed(
            out / f"normalized_{args.subset}.npz",
            **{f"train_{i}": m for i, m in enumerate(train_mats)},
            **{f"test_{i}": m for i, m in enumerate(test_mats)},
            test_rul=data.test_rul,
        )
        print(f"cache written to {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    root = _data_dir_or_fail(args.data_dir)
    cfg = _build_train_config(args)
    seeds = _parse_seeds(args.seeds)
    out = Path(args.out)
    if len(seeds) == 1:
        cfg = dataclasses.replace(cfg, seed=seeds[0])
        summary = training.run_pipeline(cfg, root, out, verbose=not args.quiet)
        print(f"rmse {summary['rmse']:.4f}  score {summary['score']:.2f}  "
              f"plateau epoch {summary['plateau_epoch']}")
    else:
        agg = training.multi_run(cfg, seeds, root, out, verbose=not args.quiet)
        print(f"{cfg.model}/{cfg.subset} over seeds {seeds}: "
              f"rmse {agg['rmse_mean']:.4f} +- {agg['rmse_std']:.4f}, "
              f"score {agg['score_mean']:.2f} +- {agg['score_std']:.2f}")
    return 0


def _load_run(args: argparse.Namespace):
    run_dir = Path(args.run_dir)
    manifest = training.load_manifest(run_dir)
    cfg = training.TrainConfig.from_dict(manifest["config"])
    root = _data_dir_or_fail(args.data_dir)
    train_mats, test_mats, test_rul, _ = cmapss.load_normalized_subset(
        root, cfg.subset, check_counts=cfg.max_engines is None
    )
    if cfg.max_engines is not None:
        train_mats = train_mats[: cfg.max_engines]
        test_mats = test_mats[: cfg.max_engines]
        test_rul = test_rul[: cfg.max_engines]
    ckpts = sorted((run_dir / "retrain" / "checkpoints").glob("epoch_*.npz"))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints under {run_dir}/retrain/checkpoints")
    return run_dir, cfg, train_mats, test_mats, test_rul, ckpts


def cmd_evaluate(args: argparse.Namespace) -> int:
    run_dir, cfg, _, test_mats, test_rul, ckpts = _load_run(args)
    preds = training.checkpoint_average_predict(ckpts, cfg, test_mats)
    report = evaluation.build_report(preds, test_rul, cfg.rul_cap)
    report.save(run_dir / "eval")
    print(f"{cfg.model}/{cfg.subset}: rmse {report.rmse:.4f}, "
          f"score {report.score:.2f} over {len(test_mats)} engines "
          f"({len(ckpts)} checkpoints averaged)")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    run_dir, cfg, _, test_mats, test_rul, ckpts = _load_run(args)
    from .models import build_model
    from .nn import load_checkpoint

    model = build_model(cfg.model_config())
    n_blocks = getattr(model, "n_blocks", 0)
    if n_blocks < 2:
        print(f"error: {cfg.model} has no blocks to ablate", file=sys.stderr)
        return 2
    masks = evaluation.ablation_masks(n_blocks)
    sums = {m: np.zeros(len(test_mats)) for m in masks}
    for path in ckpts:
        load_checkpoint(path, model)
        for mask in masks:
            sums[mask] += evaluation.predict_per_engine(
                model, test_mats, cfg.window, cfg.eval_windows, latent_mask=mask
            )
    rows = []
    for mask in masks:
        report = evaluation.build_report(sums[mask] / len(ckpts), test_rul, cfg.rul_cap)
        rows.append({
            "mask": "".join("1" if m else "0" for m in mask),
            "n_active": sum(mask),
            "rmse": report.rmse,
            "score": report.score,
        })
    evaluation.save_ablation_csv(rows, run_dir / "eval" / "ablation.csv")
    evaluation.plot_ablation(rows, run_dir / "eval" / "ablation.png")
    print("mask  n_active  rmse      score")
    for r in rows:
        print(f"{r['mask']:<5} {r['n_active']:<9} {r['rmse']:<9.4f} {r['score']:.2f}")
    print(f"written to {run_dir / 'eval' / 'ablation.csv'}")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    run_dir, cfg, train_mats, test_mats, test_rul, ckpts = _load_run(args)
    from .models import build_model
    from .nn import load_checkpoint

    mats = test_mats if args.split == "test" else train_mats
    idx = args.engine - 1
    if not 0 <= idx < len(mats):
        raise ValueError(f"engine {args.engine} outside 1..{len(mats)}")
    mat = mats[idx]
    model = build_model(cfg.model_config())
    curve = np.zeros(len(mat))
    for path in ckpts:
        load_checkpoint(path, model)
        curve += evaluation.trajectory_curve(model, mat, cfg.window)
    curve /= len(ckpts)
    n = len(mat)
    if args.split == "test":
        target = np.minimum(test_rul[idx] + n - np.arange(1, n + 1), cfg.rul_cap)
    else:
        target = evaluation.true_rul_curve(n, cfg.rul_cap)
    out = Path(args.out) if args.out else (
        run_dir / "plots" / f"{args.split}_engine_{args.engine}.png"
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.plot_trajectory(
        curve,
        out,
        target_curve=target.astype(float),
        smooth_frac=args.smooth,
        title=f"{cfg.model}/{cfg.subset} {args.split} engine {args.engine}",
    )
    print(f"plot written to {out}")
    return 0


def cmd_reproduce_table(args: argparse.Namespace) -> int:
    root = _data_dir_or_fail(args.data_dir)
    cfg = _build_train_config(args)
    key = (cfg.model, cfg.subset)
    ref = REFERENCE_RESULTS.get(key)
    seeds = _parse_seeds(args.seeds)
    agg = training.multi_run(cfg, seeds, root, Path(args.out), verbose=not args.quiet)
    print(f"\n{cfg.model}/{cfg.subset}, {len(seeds)} seed(s):")

    def fmt(mean, std):
        return f"{mean:.2f} +- {std:.2f}" if std is not None else f"{mean:.2f}"

    print(f"  measured  rmse {fmt(agg['rmse_mean'], agg['rmse_std'])}   "
          f"score {fmt(agg['score_mean'], agg['score_std'])}")
    if ref is None:
        print("  no reference row for this model/subset")
    else:
        print(f"  reference rmse {fmt(*ref['rmse'])}   score {fmt(*ref['score'])}")
        print(f"  delta     rmse {agg['rmse_mean'] - ref['rmse'][0]:+.2f}        "
              f"score {agg['score_mean'] - ref['score'][0]:+.2f}")
    return 0


def cmd_demo_data(args: argparse.Namespace) -> int:
    kwargs = {}
    if args.tiny:
        kwargs = dict(
            n_train=8, n_test=4, min_len=70, max_len=110, test_min_len=45, max_rul=60
        )
    out = simdata.make_synthetic_subset(
        args.out, subset=args.subset, seed=args.seed, **kwargs
    )
    data = cmapss.parse_subset(out, args.subset)
    n_tr, r_tr, n_te, r_te = data.counts()
    print(f"synthetic {args.subset} written to {out}: "
          f"train {n_tr}/{r_tr} rows, test {n_te}/{r_te} rows")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rulkit",
        description="RUL estimation on C-MAPSS turbofan data",
    )
    parser.add_argument("--version", action="version", version=f"rulkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_dir(p):
        p.add_argument("--data-dir", default=None,
                       help=f"dataset root (default: ${cmapss.DATA_DIR_ENV} or ./data)")

    p = sub.add_parser("ingest", help="parse, validate counts, optionally cache")
    add_data_dir(p)
    p.add_argument("--subset", default="FD001", choices=sorted(cmapss.EXPECTED_COUNTS))
    p.add_argument("--out", default=None, help="write normalized cache here")
    p.set_defaults(func=cmd_ingest)

    def add_train_flags(p):
        add_data_dir(p)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--subset", default=None, choices=cmapss.SUPPORTED_SUBSETS)
        p.add_argument("--model", default=None,
                       choices=("lstm", "cnn", "tfm", "dtfm", "tfim"))
        p.add_argument("--window", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--folds", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
        p.add_argument("--lr-min", type=float, default=None, dest="lr_min")
        p.add_argument("--lr-max", type=float, default=None, dest="lr_max")
        p.add_argument("--cycle-epochs", type=int, default=None, dest="cycle_epochs")
        p.add_argument("--avg-epochs", type=int, default=None, dest="avg_epochs")
        p.add_argument("--noise-sigma", type=float, default=None, dest="noise_sigma")
        p.add_argument("--dropout", type=float, default=None)
        p.add_argument("--engines", type=int, default=None,
                       help="restrict to the first N engines (smoke runs)")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("train", help="cross-validate, retrain, evaluate")
    add_train_flags(p)
    p.add_argument("--seeds", default="0", help="comma separated seed list")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rescore a finished run directory")
    add_data_dir(p)
    p.add_argument("--run-dir", required=True, dest="run_dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="latent mask sweep on a finished run")
    add_data_dir(p)
    p.add_argument("--run-dir", required=True, dest="run_dir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="per-cycle trajectory figure")
    add_data_dir(p)
    p.add_argument("--run-dir", required=True, dest="run_dir")
    p.add_argument("--engine", type=int, required=True, help="1-based engine number")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--smooth", type=float, default=None,
                   help="LOWESS fraction, e.g. 0.11")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("reproduce-table",
                       help="multi-seed protocol vs the reference results")
    add_train_flags(p)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reproduce_table)

    p = sub.add_parser("demo-data", help="write synthetic subset files")
    p.add_argument("--out", required=True)
    p.add_argument("--subset", default="FD001", choices=sorted(cmapss.EXPECTED_COUNTS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tiny", action="store_true", help="small fast fixture")
    p.set_defaults(func=cmd_demo_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (cmapss.DataValidationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except training.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
