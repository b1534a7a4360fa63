"""Three-stage training of the unrolled reconstruction.

1. ``pretrain``: the denoiser alone, on reconstructions of several accelerations tagged
   with heuristic pseudo-iteration indices, under random rigid-plus-scale augmentation.
2. ``gleam_train``: greedy training through one unroll iteration at a time with
   geometrically increasing loss weights.
3. ``finetune``: the full unroll with checkpoint boundaries at every DC and denoising
   step, supervised on the final output only.
"""
from dataclasses import dataclass, field, replace
from logging import getLogger
import math
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation
import torch
import torch.nn.functional as F

from .autodiff import (
    REAL_DTYPE,
    ActivationCounter,
    adam_step,
    current_lr,
    make_optimizer,
    make_scheduler,
    real_view,
)
from .losses import TissueWeights, ms_ssim_loss, spatial_loss
from .metrics import slice_scores
from .shared import MemoryBudgetError, default_rng
from .unrolled import (
    DenoiserModel,
    UnrollConfig,
    initial_estimate,
    reconstruct,
    unroll,
    unroll_step,
)

LOGGER = getLogger(__name__)

STAGES = ("pretrain", "gleam", "finetune")

#: pseudo-iteration index per pretraining input; ``None`` draws from ``{4, ..., N}``
TIER_INDEX: Dict[str, Optional[int]] = {
    "zero-filled": 1,
    "llr-R12": 2,
    "llr-R6": 2,
    "llr-R3": 3,
    "llr-R1": None,
}
#: accelerations whose LLR reconstructions are pretraining tiers
PRETRAINING_RATES = (12, 6, 3, 1)

MAX_ROTATION_DEG = 15.0
MAX_SHIFT_VOXELS = 5.0
SCALE_RANGE = (0.98, 1.02)
#: ratio between the last and the first GLEAM iteration weight
GLEAM_RATIO = 10.0

ABLATION_VARIANTS = (
    "full",
    "gleam-only",
    "gleam-no-pt",
    "gleam-x3-no-pt",
    "full-uncond",
    "full-uncond-no-ws",
    "unroll-count-sweep",
)
SWEEP_COUNTS = tuple(range(1, 9))

_STAGE_DEFAULTS = {
    "pretrain": {"batch_size": 8, "accumulation": 1},
    "gleam": {"batch_size": 1, "accumulation": 4},
    "finetune": {"batch_size": 1, "accumulation": 4},
}


@dataclass(frozen=True)
class TrainingPlan:
    stage: str
    epochs: int
    batch_size: int = 1
    accumulation: int = 1
    lr: float = 5e-3
    patience: int = 20
    weights: TissueWeights = TissueWeights()
    ssim_weight: float = 0.1
    ssim_slices: int = 30
    ssim_scales: int = 3
    augment: bool = True
    immediate_updates: bool = True
    memory_budget: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 0:
            raise ValueError(f"epoch budget must be >= 0, got {self.epochs}")
        if self.batch_size < 1 or self.accumulation < 1:
            raise ValueError("batch size and accumulation must be >= 1")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.ssim_weight < 0:
            raise ValueError(f"ssim weight must be >= 0, got {self.ssim_weight}")
        self.weights.check()

    @classmethod
    def for_stage(cls, stage: str, epochs: int, **overrides: Any) -> "TrainingPlan":
        if stage not in _STAGE_DEFAULTS:
            raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
        settings = {**_STAGE_DEFAULTS[stage], **overrides}
        return cls(stage=stage, epochs=epochs, **settings)


@dataclass
class TrainingSample:
    """One training phantom: target coefficients, disjoint tissue masks, the pretraining
    inputs per tier and (for the unrolled stages) an operator with its data."""

    target: torch.Tensor
    masks: Dict[str, torch.Tensor]
    tiers: Dict[str, torch.Tensor] = field(default_factory=dict)
    op: Any = None
    data: Optional[torch.Tensor] = None

    def require_unroll(self):
        if self.op is None or self.data is None:
            raise ValueError("training sample has no acquisition for unrolled training")

    def brain_slices(self) -> List[int]:
        brain = torch.zeros(self.target.shape[1:], dtype=torch.bool)
        for name in ("wm", "gm"):
            if name in self.masks:
                brain |= torch.as_tensor(self.masks[name], dtype=torch.bool)
        return [z for z in range(brain.shape[-1]) if bool(brain[..., z].any())]


@dataclass
class TrainingSet:
    train: List[TrainingSample]
    validation: List[TrainingSample] = field(default_factory=list)


@dataclass
class TrainingLog:
    rows: List[Dict[str, Any]] = field(default_factory=list)
    peak_saved_bytes: int = 0

    def record(self, **row: Any):
        self.rows.append(row)

    def to_frame(self) -> pd.DataFrame:
        columns = ["step", "stage", "epoch", "iteration", "spatial", "ssim", "total", "lr"]
        frame = pd.DataFrame(self.rows)
        for column in columns + ["validation"]:
            if column not in frame.columns:
                frame[column] = np.nan
        return frame[columns + ["validation"]]


def pseudo_index(tier: str, iterations: int, rng: np.random.Generator) -> int:
    if tier not in TIER_INDEX:
        raise KeyError(f"unknown pretraining tier {tier!r}")
    index = TIER_INDEX[tier]
    if index is None:
        low = min(4, iterations)
        return int(rng.integers(low, iterations + 1))
    return min(index, iterations)


def validation_index(tier: str, iterations: int) -> int:
    index = TIER_INDEX[tier]
    return min(4 if index is None else index, iterations)


def gleam_weights(iterations: int, first: float = 1.0) -> np.ndarray:
    """``first * r^i`` with ``r`` fixed by last/first = :data:`GLEAM_RATIO`."""
    if iterations == 1:
        return np.array([first])
    ratio = GLEAM_RATIO ** (1.0 / (iterations - 1))
    return first * ratio ** np.arange(iterations)


class AffineTransform(NamedTuple):
    rotation: np.ndarray
    scale: float
    shift: np.ndarray


def random_transform(rng: np.random.Generator) -> AffineTransform:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, math.radians(MAX_ROTATION_DEG))
    rotation = Rotation.from_rotvec(axis * angle).as_matrix()
    scale = rng.uniform(*SCALE_RANGE)
    shift = rng.uniform(-MAX_SHIFT_VOXELS, MAX_SHIFT_VOXELS, 3)
    return AffineTransform(rotation, float(scale), shift)


def _theta(transform: AffineTransform, grid: Sequence[int]) -> torch.Tensor:
    """Sampling matrix for ``affine_grid``: output voxel ``p`` reads input voxel
    ``R^T (p - shift) / scale`` about the volume center."""
    half = np.asarray(grid, dtype=np.float64) / 2
    inverse = transform.rotation.T / transform.scale
    matrix = (inverse * half[None, :]) / half[:, None]
    offset = -(inverse @ transform.shift) / half
    theta = np.concatenate([matrix[::-1, ::-1], offset[::-1, None]], axis=1)
    return torch.as_tensor(np.ascontiguousarray(theta), dtype=REAL_DTYPE)[None]


def apply_transform(
    volume: torch.Tensor, transform: AffineTransform, mode: str = "bilinear"
) -> torch.Tensor:
    """Resample a real ``[C, X, Y, Z]`` volume (trilinear or nearest, reflective edges)."""
    grid_shape = tuple(volume.shape[1:])
    theta = _theta(transform, grid_shape)
    sampling = F.affine_grid(theta, [1, volume.shape[0], *grid_shape], align_corners=False)
    out = F.grid_sample(
        volume[None], sampling, mode=mode, padding_mode="reflection", align_corners=False
    )
    return out[0]


def augment(
    x: torch.Tensor, y: torch.Tensor, masks: Dict[str, torch.Tensor], rng: np.random.Generator
):
    """Apply one random transform to input, target (trilinear) and masks (nearest)."""
    transform = random_transform(rng)
    x = apply_transform(x, transform)
    y = apply_transform(y, transform)
    moved = {}
    for name, mask in masks.items():
        m = torch.as_tensor(mask).to(REAL_DTYPE)[None]
        moved[name] = apply_transform(m, transform, mode="nearest")[0] > 0.5
    return x, y, moved


def _stack_masks(masks: List[Dict[str, torch.Tensor]]) -> Dict[str, torch.Tensor]:
    return {name: torch.stack([torch.as_tensor(m[name]) for m in masks]) for name in masks[0]}


def tier_losses(
    model: DenoiserModel, samples: Sequence[TrainingSample], weights: TissueWeights
) -> Dict[str, float]:
    """Mean spatial loss per pretraining tier at the tier's fixed validation index."""
    out: Dict[str, float] = {}
    with torch.no_grad():
        for tier in TIER_INDEX:
            values = []
            for sample in samples:
                if tier not in sample.tiers:
                    continue
                index = validation_index(tier, model.iterations)
                pred = model.denoise(sample.tiers[tier], index)
                values.append(float(spatial_loss(pred, sample.target, sample.masks, weights)))
            if values:
                out[tier] = float(np.mean(values))
    return out


def validation_loss(
    model: DenoiserModel, samples: Sequence[TrainingSample], weights: TissueWeights
) -> float:
    """Mean final-output spatial loss of the unroll on held-out samples."""
    values = []
    for sample in samples:
        sample.require_unroll()
        pred = torch.as_tensor(reconstruct(model, sample.op, sample.data))
        values.append(float(spatial_loss(pred, sample.target, sample.masks, weights)))
    return float(np.mean(values)) if values else float("nan")


def _check_tiers(samples: Sequence[TrainingSample]):
    for number, sample in enumerate(samples):
        unknown = sorted(set(sample.tiers) - set(TIER_INDEX))
        if unknown:
            raise ValueError(f"training sample {number} has unknown pretraining tiers {unknown}")
        missing = [tier for tier in TIER_INDEX if tier not in sample.tiers]
        if missing:
            raise ValueError(f"training sample {number} is missing pretraining tiers {missing}")


def _check_stage(plan: TrainingPlan, stage: str):
    if plan.stage != stage:
        raise ValueError(f"{stage} needs a {stage!r} plan, got {plan.stage!r}")


def pretrain(
    model: DenoiserModel,
    dataset: TrainingSet,
    plan: TrainingPlan,
    log: Optional[TrainingLog] = None,
) -> TrainingLog:
    """Stage 1: train the denoiser on tagged reconstructions of every tier."""
    _check_stage(plan, "pretrain")
    log = TrainingLog() if log is None else log
    if plan.epochs == 0:
        return log
    samples = [sample for sample in dataset.train if sample.tiers]
    if not samples:
        raise ValueError("no training sample carries pretraining inputs")
    _check_tiers(samples)
    rng = default_rng(plan.seed)
    optimizer = make_optimizer(model.parameters(), plan.lr)
    scheduler = make_scheduler(optimizer, plan.patience)
    pairs = [
        (s, tier)
        for s, sample in enumerate(samples)
        for tier in TIER_INDEX
        if tier in sample.tiers
    ]
    step = 0
    for epoch in range(plan.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), plan.batch_size):
            inputs, targets, masks, indices = [], [], [], []
            for pick in order[start : start + plan.batch_size]:
                number, tier = pairs[int(pick)]
                sample = samples[number]
                x, y = real_view(sample.tiers[tier]), real_view(sample.target)
                m = sample.masks
                if plan.augment:
                    x, y, m = augment(x, y, m, rng)
                inputs.append(x)
                targets.append(y)
                masks.append(m)
                indices.append(pseudo_index(tier, model.iterations, rng))
            pred = model.denoise_real(torch.stack(inputs), indices)
            loss = spatial_loss(pred, torch.stack(targets), _stack_masks(masks), plan.weights)
            loss = loss / len(inputs)
            loss.backward()
            adam_step(optimizer)
            step += 1
            log.record(
                step=step,
                stage="pretrain",
                epoch=epoch,
                spatial=loss.item(),
                ssim=0.0,
                total=loss.item(),
                lr=current_lr(optimizer),
            )
        if dataset.validation:
            losses = tier_losses(model, dataset.validation, plan.weights)
            if not losses:
                continue
            value = float(np.mean(list(losses.values())))
            scheduler.step(value)
            log.record(step=step, stage="pretrain", epoch=epoch, validation=value)
            LOGGER.info(f"pretrain epoch {epoch}: validation {value:.4e}")
    return log


def _start(model: DenoiserModel, sample: TrainingSample):
    with torch.no_grad():
        normal_b = sample.op.normal(sample.data)
        if model.cfg.init_scaling:
            alpha = initial_estimate(sample.op, sample.data)[0]
        else:
            alpha = normal_b
    return normal_b, alpha


def _ssim_term(pred: torch.Tensor, sample: TrainingSample, plan: TrainingPlan, seed: int):
    if plan.ssim_weight == 0:
        return torch.zeros((), dtype=REAL_DTYPE)
    value = ms_ssim_loss(
        pred, sample.target, plan.ssim_slices, plan.ssim_scales, seed=seed
    )
    return plan.ssim_weight * value


def gleam_train(
    model: DenoiserModel,
    dataset: TrainingSet,
    plan: TrainingPlan,
    log: Optional[TrainingLog] = None,
) -> TrainingLog:
    """Stage 2: backpropagate through one unroll iteration at a time.

    Iteration ``i`` is weighted by :func:`gleam_weights`; the MS-SSIM term applies to
    the last iteration only. With ``immediate_updates`` the optimizer steps after
    every ``accumulation`` per-iteration backward passes, otherwise after every
    ``accumulation`` samples.
    """
    _check_stage(plan, "gleam")
    log = TrainingLog() if log is None else log
    if plan.epochs == 0:
        return log
    for sample in dataset.train:
        sample.require_unroll()
    n = model.iterations
    weights = gleam_weights(n)
    rng = default_rng(plan.seed)
    optimizer = make_optimizer(model.parameters(), plan.lr)
    scheduler = make_scheduler(optimizer, plan.patience)
    pending, step = 0, 0
    with ActivationCounter() as counter:
        for epoch in range(plan.epochs):
            for number in rng.permutation(len(dataset.train)):
                sample = dataset.train[int(number)]
                normal_b, alpha = _start(model, sample)
                for index in range(1, n + 1):
                    out = unroll_step(model, sample.op, alpha.detach(), normal_b, index)
                    spatial = weights[index - 1] * spatial_loss(
                        out, sample.target, sample.masks, plan.weights
                    )
                    ssim_term = (
                        _ssim_term(out, sample, plan, seed=plan.seed + step)
                        if index == n
                        else torch.zeros((), dtype=REAL_DTYPE)
                    )
                    total = spatial + ssim_term
                    (total / plan.accumulation).backward()
                    alpha = out.detach()
                    if plan.immediate_updates:
                        pending += 1
                        if pending % plan.accumulation == 0:
                            adam_step(optimizer)
                    step += 1
                    log.record(
                        step=step,
                        stage="gleam",
                        epoch=epoch,
                        iteration=index,
                        spatial=spatial.item(),
                        ssim=ssim_term.item(),
                        total=total.item(),
                        lr=current_lr(optimizer),
                    )
                if not plan.immediate_updates:
                    pending += 1
                    if pending % plan.accumulation == 0:
                        adam_step(optimizer)
            _close_epoch(model, dataset, plan, scheduler, log, step, epoch, "gleam")
        if pending % plan.accumulation:
            adam_step(optimizer)
    log.peak_saved_bytes = max(log.peak_saved_bytes, counter.peak_bytes)
    return log


def _close_epoch(model, dataset, plan, scheduler, log, step, epoch, stage):
    if not dataset.validation:
        return
    value = validation_loss(model, dataset.validation, plan.weights)
    scheduler.step(value)
    log.record(step=step, stage=stage, epoch=epoch, validation=value)
    LOGGER.info(f"{stage} epoch {epoch}: validation {value:.4e}")


def finetune(
    model: DenoiserModel,
    dataset: TrainingSet,
    plan: TrainingPlan,
    log: Optional[TrainingLog] = None,
) -> TrainingLog:
    """Stage 3: full-graph training on the final output with checkpointing."""
    _check_stage(plan, "finetune")
    log = TrainingLog() if log is None else log
    if plan.epochs == 0:
        return log
    for sample in dataset.train:
        sample.require_unroll()
    rng = default_rng(plan.seed)
    optimizer = make_optimizer(model.parameters(), plan.lr)
    scheduler = make_scheduler(optimizer, plan.patience)
    pending, step = 0, 0
    with ActivationCounter() as counter:
        for epoch in range(plan.epochs):
            for number in rng.permutation(len(dataset.train)):
                sample = dataset.train[int(number)]
                result = unroll(model, sample.op, sample.data, use_checkpoint=True)
                spatial = spatial_loss(result.coeffs, sample.target, sample.masks, plan.weights)
                ssim_term = _ssim_term(result.coeffs, sample, plan, seed=plan.seed + step)
                total = spatial + ssim_term
                (total / plan.accumulation).backward()
                if plan.memory_budget is not None and counter.peak_bytes > plan.memory_budget:
                    optimizer.zero_grad(set_to_none=True)
                    raise MemoryBudgetError(
                        f"fine-tuning peak {counter.peak_bytes} bytes exceeds the budget "
                        f"{plan.memory_budget}",
                        counter.peak_bytes,
                    )
                pending += 1
                if pending % plan.accumulation == 0:
                    adam_step(optimizer)
                step += 1
                log.record(
                    step=step,
                    stage="finetune",
                    epoch=epoch,
                    iteration=model.iterations,
                    spatial=spatial.item(),
                    ssim=ssim_term.item(),
                    total=total.item(),
                    lr=current_lr(optimizer),
                )
            _close_epoch(model, dataset, plan, scheduler, log, step, epoch, "finetune")
        if pending % plan.accumulation:
            adam_step(optimizer)
    log.peak_saved_bytes = max(log.peak_saved_bytes, counter.peak_bytes)
    return log


def train_stages(
    model: DenoiserModel,
    dataset: TrainingSet,
    plans: Sequence[TrainingPlan],
) -> TrainingLog:
    """Run the given stages in order, sharing one log."""
    runners = {"pretrain": pretrain, "gleam": gleam_train, "finetune": finetune}
    log = TrainingLog()
    for plan in plans:
        runners[plan.stage](model, dataset, plan, log)
    return log


def evaluate_model(model: DenoiserModel, samples: Sequence[TrainingSample]) -> Tuple[float, float]:
    """Mean first-coefficient PSNR and SSIM over the brain slices of ``samples``."""
    psnrs, ssims = [], []
    for sample in samples:
        sample.require_unroll()
        pred = reconstruct(model, sample.op, sample.data)
        ref = sample.target.numpy()
        p, s = slice_scores(pred[0], ref[0], sample.brain_slices())
        psnrs.append(p.mean())
        ssims.append(s.mean())
    return float(np.mean(psnrs)), float(np.mean(ssims))


def ablation_runs(
    suite: Sequence[str], cfg: UnrollConfig, plans: Dict[str, TrainingPlan]
) -> List[Tuple[str, UnrollConfig, List[TrainingPlan]]]:
    """Expand variant names into ``(name, unroll config, stage plans)`` runs."""
    unknown = [name for name in suite if name not in ABLATION_VARIANTS]
    if unknown:
        raise ValueError(f"unknown ablation variants {unknown}, expected {ABLATION_VARIANTS}")
    full = [plans["pretrain"], plans["gleam"], plans["finetune"]]
    runs: List[Tuple[str, UnrollConfig, List[TrainingPlan]]] = []
    for name in suite:
        if name == "full":
            runs.append((name, cfg, full))
        elif name == "gleam-only":
            runs.append((name, cfg, [plans["pretrain"], plans["gleam"]]))
        elif name == "gleam-no-pt":
            runs.append((name, cfg, [plans["gleam"]]))
        elif name == "gleam-x3-no-pt":
            longer = replace(plans["gleam"], epochs=3 * plans["gleam"].epochs)
            runs.append((name, cfg, [longer]))
        elif name == "full-uncond":
            runs.append((name, replace(cfg, conditioned=False), full))
        elif name == "full-uncond-no-ws":
            runs.append(
                (name, replace(cfg, conditioned=False, weight_sharing=False), full)
            )
        else:
            for count in SWEEP_COUNTS:
                runs.append((f"unroll-{count}", replace(cfg, iterations=count), full))
    return runs


def run_ablation(
    suite: Sequence[str],
    dataset: TrainingSet,
    cfg: UnrollConfig,
    plans: Dict[str, TrainingPlan],
    k: int,
    step: float,
    seed: int = 0,
) -> pd.DataFrame:
    """Train every requested variant under the same stage budgets and report held-out
    PSNR/SSIM with parameter counts."""
    rows = []
    for name, run_cfg, stages in ablation_runs(suite, cfg, plans):
        model = DenoiserModel(k, run_cfg, step=step, seed=seed)
        model.set_whitening([sample.target for sample in dataset.train])
        log = train_stages(model, dataset, stages)
        psnr, ssim = evaluate_model(model, dataset.validation)
        rows.append(
            {
                "variant": name,
                "iterations": run_cfg.iterations,
                "conditioned": run_cfg.conditioned,
                "weight_sharing": run_cfg.weight_sharing,
                "parameters": model.parameter_count(),
                "conditioning_parameters": model.parameter_count(conditioning_only=True),
                "steps": len([r for r in log.rows if "total" in r]),
                "psnr": psnr,
                "ssim": ssim,
            }
        )
        LOGGER.info(f"ablation {name}: PSNR {psnr:.2f} dB, SSIM {ssim:.4f}")
    return pd.DataFrame(rows)
