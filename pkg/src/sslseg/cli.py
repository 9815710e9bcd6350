"""Batch command-line entry points: synthetic dataset generation, the three
training stages, whole-volume inference, metric evaluation, and the
inference-speed/accuracy sweep with CSV + plot output.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import trainer as tr
from .inference import InferenceConfig, predict_label, tile_positions
from .metrics import evaluate_cases
from .model import ModelConfig
from .volumes import (Case, DataError, SegLabel, generate_synthetic_case,
                      load_case, save_case)

EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# Dataset directory helpers
# ---------------------------------------------------------------------------

def write_dataset(out_dir: Path, cases: list[Case], split: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for case in cases:
        save_case(case, out_dir)
    (out_dir / "manifest.json").write_text(json.dumps(split, indent=2))


def load_cases(directory: str | Path) -> dict[str, Case]:
    cases = {}
    for vol_path in sorted(Path(directory).glob("*.vol.raw")):
        case = load_case(vol_path)
        cases[case.id] = case
    return cases


def load_dataset(directory: str | Path) -> tuple[dict[str, Case], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    return load_cases(directory), manifest


def split_cases(cases: dict[str, Case], manifest: dict):
    train = [cases[i] for i in manifest["train_labeled"]]
    val = [cases[i] for i in manifest["val_labeled"]]
    unlabeled = [cases[i] for i in manifest["unlabeled"]]
    return train, val, unlabeled


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    extent = _parse_ints(args.extent, 3)
    cases: list[Case] = []
    n_labeled = int(round(args.cases * args.labeled_fraction))
    for i in range(args.cases):
        case = generate_synthetic_case(
            seed=int(rng.integers(2**31)), extent=extent, num_teeth=args.teeth,
            num_classes=args.classes, case_id=f"case{i:04d}")
        if i >= n_labeled:
            case = Case(volume=case.volume, label=None, id=case.id)
        cases.append(case)

    labeled_ids = [c.id for c in cases if c.is_labeled]
    n_val = int(round(len(labeled_ids) * args.val_fraction))
    split = {
        "train_labeled": labeled_ids[: len(labeled_ids) - n_val],
        "val_labeled": labeled_ids[len(labeled_ids) - n_val:],
        "unlabeled": [c.id for c in cases if not c.is_labeled],
        "num_classes": args.classes,
        "seed": args.seed,
    }
    write_dataset(Path(args.out), cases, split)
    print(f"wrote {len(cases)} cases to {args.out} "
          f"({len(split['train_labeled'])} train / {len(split['val_labeled'])} val "
          f"/ {len(split['unlabeled'])} unlabeled)")
    return 0


def _load_run_config(args, stage: str) -> tr.RunConfig:
    if args.config:
        cfg = tr.RunConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        cfg = tr.RunConfig()
    cfg.stage = stage
    if stage == "pretrain":
        cfg.model.head = "reconstruction"
    else:
        cfg.model.head = "segmentation"
    for attr in ("epochs", "iters", "seed"):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, {"epochs": "total_epochs",
                          "iters": "iterations_per_epoch",
                          "seed": "seed"}[attr], value)
    return cfg


def _load_init(args, expected_stage: str | None) -> tr.Checkpoint | None:
    if getattr(args, "from_scratch", False):
        return None
    if not args.init:
        raise ConfigError(
            f"this stage requires --init with a {expected_stage} checkpoint "
            "(or --from-scratch to skip the handoff)")
    ckpt = tr.load_checkpoint(args.init)
    if expected_stage and ckpt.stage != expected_stage and not args.force:
        raise ConfigError(
            f"checkpoint stage {ckpt.stage!r} != required {expected_stage!r} "
            "(use --force to override)")
    return ckpt


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args, "pretrain")
    cases, manifest = load_dataset(args.dataset)
    ckpt = tr.run_stage1(cfg, list(cases.values()),
                         log_path=Path(args.out).with_suffix(".log.jsonl"))
    tr.save_checkpoint(ckpt, args.out)
    print(f"stage-1 checkpoint written to {args.out}")
    return 0


def cmd_train_cr(args) -> int:
    cfg = _load_run_config(args, "cr")
    cases, manifest = load_dataset(args.dataset)
    train, val, unlabeled = split_cases(cases, manifest)
    cfg.model.num_classes = manifest["num_classes"]
    init = _load_init(args, "pretrain")
    ckpt = tr.run_stage2(cfg, train, unlabeled, init, val_cases=val,
                         log_path=Path(args.out).with_suffix(".log.jsonl"))
    tr.save_checkpoint(ckpt, args.out)
    print(f"stage-2 checkpoint written to {args.out}")
    return 0


def cmd_train_pl(args) -> int:
    cfg = _load_run_config(args, "pl")
    cases, manifest = load_dataset(args.dataset)
    train, val, unlabeled = split_cases(cases, manifest)
    cfg.model.num_classes = manifest["num_classes"]
    init = _load_init(args, "cr")
    ckpt = tr.run_stage3(cfg, train, unlabeled, init, val_cases=val,
                         log_path=Path(args.out).with_suffix(".log.jsonl"))
    tr.save_checkpoint(ckpt, args.out)
    print(f"stage-3 checkpoint written to {args.out}")
    return 0


def _parse_mirror_axes(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        axes = tuple(sorted({int(t) for t in text.split(",")}))
    except ValueError as e:
        raise ConfigError(f"bad --mirror-axes {text!r}: {e}")
    if not set(axes) <= {0, 1, 2}:
        raise ConfigError(f"mirror axes must be in {{0,1,2}}, got {axes}")
    return axes


def _parse_ints(text, n: int):
    parts = [int(t) for t in str(text).split(",")]
    if len(parts) == 1:
        parts = parts * n
    if len(parts) != n:
        raise ConfigError(f"expected {n} comma-separated integers, got {text!r}")
    return tuple(parts)


def cmd_infer(args) -> int:
    ckpt = tr.load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    cfg = InferenceConfig(
        patch_size=ckpt.config.model.patch_size,
        step_fraction=args.step_fraction,
        mirror_axes=_parse_mirror_axes(args.mirror_axes),
        stitch_weighting=args.weighting,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases, _ = load_dataset(args.cases)
    timings = {}
    for cid, case in sorted(cases.items()):
        start = time.perf_counter()
        pred = predict_label(model, case.volume, cfg, ckpt.config.model.num_classes)
        timings[cid] = time.perf_counter() - start
        save_case(Case(volume=case.volume, label=pred, id=cid), out_dir)
    (out_dir / "timings.json").write_text(json.dumps(timings, indent=2))
    print(f"wrote {len(cases)} predictions to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    pred_cases = load_cases(args.predictions)
    gt_cases, _ = load_dataset(args.gt)
    gts = {cid: c.label for cid, c in gt_cases.items() if c.is_labeled}
    preds = {}
    for cid in gts:
        if cid not in pred_cases or not pred_cases[cid].is_labeled:
            raise DataError(f"missing prediction for case {cid}")
        preds[cid] = pred_cases[cid].label
    spacings = {cid: gt_cases[cid].volume.spacing for cid in gts}
    report = evaluate_cases(preds, gts, spacings=spacings)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(report.to_json())
    report.write_csv(out_dir / "metrics.csv")
    print(f"average score {report.average_score:.4f} "
          f"(DSC {report.mean_dsc:.4f}, NSD {report.mean_nsd:.4f}, "
          f"mIoU {report.mean_miou:.4f}, IA {report.ia:.4f})")
    return 0


# ---------------------------------------------------------------------------
# Speed/accuracy sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepSpec:
    step_fractions: list[float] = field(
        default_factory=lambda: [0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    mirror_axis_sets: list[tuple[int, ...]] = field(
        default_factory=lambda: [(), (0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2)])
    repetitions: int = 1

    def __post_init__(self):
        if not self.step_fractions or not self.mirror_axis_sets:
            raise ConfigError("sweep lists must be non-empty")


def run_sweep(model, cases: list[Case], spec: SweepSpec, num_classes: int,
              patch_size, out_dir: Path, baseline_mirror=(1, 2),
              baseline_step=0.9) -> list[dict]:
    """Grid over step fractions (at the baseline mirror set) and mirror sets
    (at the baseline step fraction); one CSV row per cell. Cells run
    sequentially so timings do not contend."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [(sf, baseline_mirror) for sf in spec.step_fractions]
    cells += [(baseline_step, m) for m in spec.mirror_axis_sets]
    rows = []
    gts = {c.id: c.label for c in cases}
    spacings = {c.id: c.volume.spacing for c in cases}
    for step_fraction, mirror_axes in cells:
        cfg = InferenceConfig(patch_size=patch_size, step_fraction=step_fraction,
                              mirror_axes=tuple(mirror_axes))
        shape = cases[0].volume.shape
        padded = tuple(max(s, p) for s, p in zip(shape, patch_size))
        n_tiles = len(tile_positions(padded, patch_size, step_fraction))
        times = []
        preds = {}
        for _ in range(spec.repetitions):
            start = time.perf_counter()
            for case in cases:
                preds[case.id] = predict_label(model, case.volume, cfg, num_classes)
            times.append(time.perf_counter() - start)
        report = evaluate_cases(preds, gts, spacings=spacings)
        rows.append({
            "step_fraction": step_fraction,
            "mirror_axes": ",".join(map(str, mirror_axes)),
            "tiles": n_tiles,
            "dsc": report.mean_dsc, "nsd": report.mean_nsd,
            "miou": report.mean_miou, "ia": report.ia,
            "average": report.average_score,
            "seconds": float(np.median(times)),
        })
    _write_sweep_outputs(rows, spec, out_dir, baseline_mirror, baseline_step)
    return rows


def _write_sweep_outputs(rows, spec, out_dir: Path, baseline_mirror, baseline_step):
    import csv as _csv
    with open(out_dir / "sweep.csv", "w", newline="") as f:
        writer = _csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tile_rows = rows[: len(spec.step_fractions)]
    mirror_rows = rows[len(spec.step_fractions):]

    fig, ax1 = plt.subplots(figsize=(6, 4))
    xs = [r["step_fraction"] for r in tile_rows]
    ax1.plot(xs, [r["average"] for r in tile_rows], "o-", color="tab:blue",
             label="average score")
    ax1.set_xlabel("tile step fraction")
    ax1.set_ylabel("average score", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(xs, [r["seconds"] for r in tile_rows], "s--", color="tab:red",
             label="seconds")
    ax2.set_ylabel("seconds", color="tab:red")
    ax1.set_title(f"Tile step sweep (mirror axes {baseline_mirror})")
    fig.tight_layout()
    fig.savefig(out_dir / "sweep_tile.png", dpi=120)
    plt.close(fig)

    fig, ax1 = plt.subplots(figsize=(6, 4))
    labels = [r["mirror_axes"] or "none" for r in mirror_rows]
    pos = range(len(mirror_rows))
    ax1.bar(pos, [r["average"] for r in mirror_rows], color="tab:blue", alpha=0.6)
    ax1.set_xticks(list(pos), labels, rotation=45)
    ax1.set_ylabel("average score", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(pos, [r["seconds"] for r in mirror_rows], "s--", color="tab:red")
    ax2.set_ylabel("seconds", color="tab:red")
    ax1.set_title(f"Mirror-axes sweep (step fraction {baseline_step})")
    fig.tight_layout()
    fig.savefig(out_dir / "sweep_mirror.png", dpi=120)
    plt.close(fig)


def cmd_sweep(args) -> int:
    ckpt = tr.load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    cases, manifest = load_dataset(args.cases)
    labeled = [c for c in cases.values() if c.is_labeled]
    if not labeled:
        raise DataError("sweep needs labeled cases to score against")
    spec = SweepSpec(repetitions=args.repetitions)
    if args.step_fractions:
        spec.step_fractions = [float(t) for t in args.step_fractions.split(",")]
    rows = run_sweep(model, labeled, spec, manifest["num_classes"],
                     ckpt.config.model.patch_size, Path(args.out))
    print(f"wrote {len(rows)} sweep rows to {args.out}/sweep.csv")
    return 0


def cmd_default_config(args) -> int:
    """Emit the default run configuration with every standard constant
    pre-filled, as a starting point for edits."""
    cfg = tr.RunConfig()
    text = json.dumps(cfg.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled/unlabeled dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=30)
    p.add_argument("--labeled-fraction", type=float, default=1.0, dest="labeled_fraction")
    p.add_argument("--val-fraction", type=float, default=1 / 3, dest="val_fraction")
    p.add_argument("--extent", default="32")
    p.add_argument("--teeth", type=int, default=3)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    for name, func, init_stage in (
        ("pretrain", cmd_pretrain, None),
        ("train-cr", cmd_train_cr, "pretrain"),
        ("train-pl", cmd_train_pl, "cr"),
    ):
        p = sub.add_parser(name, help=f"run the {name} training stage")
        p.add_argument("--config", default=None)
        p.add_argument("--dataset", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--iters", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        if init_stage:
            p.add_argument("--init", default=None)
            p.add_argument("--from-scratch", action="store_true", dest="from_scratch")
            p.add_argument("--force", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("infer", help="sliding-window inference over a dataset")
    p.add_argument("checkpoint")
    p.add_argument("cases")
    p.add_argument("--step-fraction", type=float, default=0.9, dest="step_fraction")
    p.add_argument("--mirror-axes", default="", dest="mirror_axes")
    p.add_argument("--weighting", default="gaussian", choices=["gaussian", "uniform"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("predictions")
    p.add_argument("gt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="inference speed/accuracy grid sweep")
    p.add_argument("checkpoint")
    p.add_argument("cases")
    p.add_argument("--step-fractions", default=None, dest="step_fractions")
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("default-config", help="print the default run config JSON")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_default_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA_ERROR
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
