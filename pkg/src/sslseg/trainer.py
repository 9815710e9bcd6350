"""Three-stage training orchestration: reconstruction pre-training, supervised
+ consistency training, and the pseudo-label stage, with checkpoint handoff,
scheduled labeled/unlabeled batch mixing, and SGD optimization."""
from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import corruption as corr
from . import objectives as obj
from . import perturbation as pert
from .inference import InferenceConfig, predict_label
from .metrics import MetricReport, evaluate_cases
from .model import ModelConfig, SegmentationModel, build_model, convert_head
from .volumes import Case, sample_patch

GRAD_CLIP_NORM = 12.0

STAGE_UNLABELED_RAMP = {
    # stage -> (start fraction, end fraction, ramp fraction of total epochs)
    "cr": (0.10, 0.50, 0.4),
    "pl": (0.30, 0.50, 0.2),
}


@dataclass
class RunConfig:
    stage: str = "cr"                               # pretrain | cr | pl
    model: ModelConfig = field(default_factory=ModelConfig)
    corruption: corr.CorruptionConfig | None = None
    perturbation: pert.PerturbationConfig = field(default_factory=pert.PerturbationConfig)
    augmentation: pert.AugmentConfig = field(default_factory=pert.AugmentConfig)
    weights: obj.LossWeights = field(default_factory=obj.LossWeights)
    batch_size: int = 2
    total_epochs: int = 20
    iterations_per_epoch: int = 250
    lr0: float = 0.01
    momentum: float = 0.99
    nesterov: bool = True
    foreground_bias: float = 0.33
    consistency_ramp_fraction: float = 0.2
    seed: int = 0
    validate_every: int = 0   # 0 = only after the final epoch

    def __post_init__(self):
        if self.batch_size < 1 or self.total_epochs < 1:
            raise ValueError("batch_size and total_epochs must be >= 1")
        if self.corruption is None:
            self.corruption = corr.CorruptionConfig.for_patch(self.model.patch_size)
        self.corruption.validate_against_patch(self.model.patch_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        if d.get("corruption"):
            c = dict(d["corruption"])
            for k in ("noise_sigma_range", "downsample_factor_range", "cube_size"):
                c[k] = tuple(c[k])
            d["corruption"] = corr.CorruptionConfig(**c)
        pcfg = dict(d["perturbation"])
        for k, v in pcfg.items():
            if isinstance(v, list):
                pcfg[k] = tuple(v)
        d["perturbation"] = pert.PerturbationConfig(**pcfg)
        acfg = dict(d["augmentation"])
        for k, v in acfg.items():
            if isinstance(v, list):
                acfg[k] = tuple(v)
        d["augmentation"] = pert.AugmentConfig(**acfg)
        d["weights"] = obj.LossWeights(**d["weights"])
        return cls(**d)


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict | None
    config: RunConfig
    epoch: int
    stage: str
    best_val_dsc: float = float("nan")
    metric_history: list = field(default_factory=list)

    def build_model(self) -> SegmentationModel:
        model = SegmentationModel(self.config.model)
        model.load_state_dict(self.model_state)
        return model


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"model_state": ckpt.model_state,
                "optimizer_state": ckpt.optimizer_state}, path)
    manifest = {
        "config": ckpt.config.to_dict(),
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "best_val_dsc": ckpt.best_val_dsc,
        "metric_history": ckpt.metric_history,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    blob = torch.load(path, weights_only=False)
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return Checkpoint(
        model_state=blob["model_state"],
        optimizer_state=blob.get("optimizer_state"),
        config=RunConfig.from_dict(manifest["config"]),
        epoch=manifest["epoch"],
        stage=manifest["stage"],
        best_val_dsc=manifest["best_val_dsc"],
        metric_history=manifest.get("metric_history", []),
    )


# ---------------------------------------------------------------------------
# Internals
# ---------------------------------------------------------------------------

class _JsonlLogger:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, record: dict) -> None:
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record) + "\n")


def _make_optimizer(model: SegmentationModel, config: RunConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=config.lr0,
                           momentum=config.momentum, nesterov=config.nesterov)


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _patch_batch(cases: list[Case], config: RunConfig, rng: np.random.Generator,
                 foreground_bias: float, augment: bool, include_label: bool = True):
    """Sample a batch of patches; returns (data (B,1,...), labels (B,...) or None)."""
    datas, labels = [], []
    for _ in range(config.batch_size):
        case = cases[rng.integers(len(cases))]
        patch = sample_patch(case, config.model.patch_size, foreground_bias, rng,
                             include_label=include_label)
        data, label = patch.data, patch.label
        if augment and label is not None:
            data, label = pert.augment_labeled(data, label, config.augmentation, rng)
        datas.append(data)
        labels.append(label)
    x = torch.from_numpy(np.stack(datas)).unsqueeze(1).float()
    y = None
    if all(l is not None for l in labels):
        y = torch.from_numpy(np.stack(labels)).long()
    return x, y


def _step(optimizer, model, loss) -> None:
    optimizer.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP_NORM)
    optimizer.step()


def validate(model: SegmentationModel, cases: list[Case],
             inference_cfg: InferenceConfig | None = None) -> MetricReport:
    """Sliding-window inference over a labeled holdout, scored with the full
    metric suite."""
    cfg = inference_cfg or InferenceConfig(patch_size=model.config.patch_size)
    preds, gts, spacings = {}, {}, {}
    model.eval()
    for case in cases:
        preds[case.id] = predict_label(model, case.volume, cfg, case.label.num_classes)
        gts[case.id] = case.label
        spacings[case.id] = case.volume.spacing
    return evaluate_cases(preds, gts, spacings=spacings)


def _maybe_validate(model, val_cases, config, epoch, best, history,
                    logger) -> tuple[float, dict | None]:
    is_last = epoch == config.total_epochs - 1
    due = config.validate_every and (epoch + 1) % config.validate_every == 0
    if not val_cases or not (due or is_last):
        return best, None
    report = validate(model, val_cases)
    history.append({"epoch": epoch, "dsc": report.mean_dsc,
                    "average_score": report.average_score})
    logger.log({"event": "validation", "epoch": epoch, "dsc": report.mean_dsc})
    best_state = None
    if not (report.mean_dsc <= best):   # strict improvement (NaN-safe first pass)
        best = report.mean_dsc
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return best, best_state


# ---------------------------------------------------------------------------
# Stage drivers
# ---------------------------------------------------------------------------

def run_stage1(config: RunConfig, cases: list[Case],
               log_path: str | Path | None = None) -> Checkpoint:
    """Reconstruction pre-training over all cases (labels never used)."""
    if not cases:
        raise ValueError("empty dataset")
    if config.model.head != "reconstruction":
        raise ValueError("stage 1 requires a reconstruction head")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    logger = _JsonlLogger(log_path)

    model = build_model(config.model, seed=config.seed)
    model.train()
    optimizer = _make_optimizer(model, config)

    for epoch in range(config.total_epochs):
        state = obj.ScheduleState(epoch, config.total_epochs)
        lr = obj.poly_lr(state, config.lr0)
        _set_lr(optimizer, lr)
        for it in range(config.iterations_per_epoch):
            x, _ = _patch_batch(cases, config, rng, foreground_bias=0.0,
                                augment=False, include_label=False)
            corrupted = torch.stack([
                corr.corrupt(x[b, 0], config.corruption, rng)[0]
                for b in range(x.shape[0])
            ]).unsqueeze(1)
            recon = model(corrupted)
            loss = corr.dae_loss(recon[:, 0], x[:, 0])
            _step(optimizer, model, loss)
            logger.log({"epoch": epoch, "iter": it, "stage": "pretrain",
                        "L_DAE": loss.item(), "lr": lr})

    return Checkpoint(model_state=model.state_dict(),
                      optimizer_state=optimizer.state_dict(),
                      config=config, epoch=config.total_epochs, stage="pretrain")


def init_segmentation_model(config: RunConfig, init: Checkpoint | None) -> SegmentationModel:
    """Build the stage-2/3 segmentation model, converting a reconstruction
    checkpoint's trunk when handed one."""
    if init is None:
        return build_model(config.model, seed=config.seed)
    src = init.build_model()
    if init.config.model.head == "reconstruction":
        return convert_head(src, "segmentation", config.model.num_classes,
                            seed=config.seed)
    return src


def _run_semi_supervised(stage: str, config: RunConfig, labeled: list[Case],
                         unlabeled: list[Case], init: Checkpoint | None,
                         val_cases: list[Case] | None,
                         log_path: str | Path | None) -> Checkpoint:
    if not labeled:
        raise ValueError("semi-supervised stages need labeled data")
    if not unlabeled:
        warnings.warn(f"stage {stage}: no unlabeled data, degenerating to "
                      "supervised training")
    if config.model.head != "segmentation":
        raise ValueError("stages 2/3 require a segmentation head")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    logger = _JsonlLogger(log_path)

    model = init_segmentation_model(config, init)
    optimizer = _make_optimizer(model, config)
    start_frac, end_frac, ramp_frac = STAGE_UNLABELED_RAMP[stage]

    best_dsc = float("-inf")
    best_state = None
    history: list = []
    for epoch in range(config.total_epochs):
        state = obj.ScheduleState(epoch, config.total_epochs)
        lr = obj.poly_lr(state, config.lr0)
        _set_lr(optimizer, lr)
        omega = obj.ramp_weight(state, config.weights.consistency_weight,
                                config.consistency_ramp_fraction)
        u_frac = obj.unlabeled_fraction(state, start_frac, end_frac, ramp_frac)

        for it in range(config.iterations_per_epoch):
            use_unlabeled = bool(unlabeled) and rng.random() < u_frac
            record = {"epoch": epoch, "iter": it, "stage": stage, "lr": lr,
                      "omega_cr": omega, "unlabeled_fraction": u_frac,
                      "L_S": 0.0, "L_CR": 0.0, "L_PL": 0.0}
            if not use_unlabeled:
                model.train()
                x, y = _patch_batch(labeled, config, rng,
                                    config.foreground_bias, augment=True)
                loss_s = obj.dice_ce_loss(model(x), y)
                total = loss_s
                record["L_S"] = loss_s.item()
            else:
                x, _ = _patch_batch(unlabeled, config, rng, 0.0, augment=False)
                model.eval()
                with torch.no_grad():
                    clean_probs = torch.softmax(model(x), dim=1)
                model.train()
                perturbed = torch.from_numpy(np.stack([
                    pert.perturb_input(x[b, 0].numpy(), config.perturbation, rng)
                    for b in range(x.shape[0])
                ])).unsqueeze(1)
                feats = model.encode(perturbed)
                feats = pert.perturb_features(feats, config.perturbation, rng)
                logits = model.decode(feats)
                probs = torch.softmax(logits, dim=1)
                loss_cr = obj.consistency_loss(clean_probs, probs)
                record["L_CR"] = loss_cr.item()
                total = omega * loss_cr
                if stage == "pl":
                    labels, keep = obj.pseudo_label(
                        clean_probs, config.weights.confidence_threshold)
                    loss_pl = obj.pseudo_loss(logits, labels, keep)
                    record["L_PL"] = loss_pl.item()
                    total = total + config.weights.pseudo_weight * loss_pl
            _step(optimizer, model, total)
            logger.log(record)

        best_dsc, new_best = _maybe_validate(model, val_cases or [], config,
                                             epoch, best_dsc, history, logger)
        if new_best is not None:
            best_state = new_best

    final_state = best_state if best_state is not None else model.state_dict()
    return Checkpoint(model_state=final_state,
                      optimizer_state=optimizer.state_dict(),
                      config=config, epoch=config.total_epochs, stage=stage,
                      best_val_dsc=best_dsc if best_dsc > float("-inf") else float("nan"),
                      metric_history=history)


def run_stage2(config: RunConfig, labeled: list[Case], unlabeled: list[Case],
               init: Checkpoint | None, val_cases: list[Case] | None = None,
               log_path: str | Path | None = None) -> Checkpoint:
    """Supervised + consistency-regularization training."""
    return _run_semi_supervised("cr", config, labeled, unlabeled, init,
                                val_cases, log_path)


def run_stage3(config: RunConfig, labeled: list[Case], unlabeled: list[Case],
               init: Checkpoint | None, val_cases: list[Case] | None = None,
               log_path: str | Path | None = None) -> Checkpoint:
    """Stage-2 training plus confidence-thresholded pseudo-labeling."""
    return _run_semi_supervised("pl", config, labeled, unlabeled, init,
                                val_cases, log_path)
