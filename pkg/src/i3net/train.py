"""Training loop: L1 objective, Adam with single-cycle cosine decay, checkpointing."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import apply_optimizer_state, save_checkpoint
from .evaluation import psnr
from .model import I3Net, synthesize_volume
from .volformat import IntensityDomain, PatchPair, ValidationError, Volume, downsample_axial, sample_patch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """The loss became non-finite."""

    def __init__(self, step: int, lr: float, grad_norm: float, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step} (lr={lr:.3e}, grad_norm={grad_norm:.3e})")
        self.step, self.lr, self.grad_norm, self.loss = step, lr, grad_norm, loss


def deterministic_requested() -> bool:
    return os.environ.get("I3NET_DETERMINISTIC", "") not in ("", "0")


def set_deterministic(flag: bool = True) -> None:
    """Pin torch to deterministic kernels."""
    torch.use_deterministic_algorithms(flag)
    torch.backends.cudnn.benchmark = not flag
    torch.backends.cudnn.deterministic = flag


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr0: float = 3e-4
    seed: int = 0
    patches_per_volume_per_epoch: int = 1
    crop: int = 64
    R: int = 2
    S_in: int = 4
    checkpoint_interval: int = 0
    val_interval: int = 0
    grad_clip: float | None = None
    workers: int = 0
    augment: bool = False
    debug: bool = False

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValidationError(f"lr0 must be > 0, got {self.lr0}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.patches_per_volume_per_epoch < 1:
            raise ValidationError("patches_per_volume_per_epoch must be >= 1")

    def steps_per_epoch(self, n_volumes: int) -> int:
        return math.ceil(n_volumes * self.patches_per_volume_per_epoch / self.batch_size)

    def total_steps(self, n_volumes: int) -> int:
        return self.epochs * self.steps_per_epoch(n_volumes)


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def lr_at(step: int, total_steps: int, lr0: float) -> float:
    """Cosine decay from ``lr0`` at step 0 to 0 at ``total_steps``; clamped past the end."""
    if total_steps <= 0:
        return lr0
    step = min(max(step, 0), total_steps)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    best_val_psnr: float | None = None
    history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "optimizer"}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(**d)


def make_optimizer(model: I3Net, lr0: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr0, betas=(0.9, 0.999), eps=1e-8)


def augment_pair(pair: PatchPair, rng: np.random.Generator) -> PatchPair:
    """Apply one of the 8 in-plane symmetries of the square and, with probability 1/2,
    reverse the slice order. Both transforms keep ``lr[k] == hr[k*R]``."""
    k, transpose, flip = int(rng.integers(4)), bool(rng.integers(2)), bool(rng.integers(2))

    def apply(x):
        x = np.rot90(x, k, axes=(1, 2))
        if transpose:
            x = x.transpose(0, 2, 1)
        if flip:
            x = x[::-1]
        return np.ascontiguousarray(x)

    return PatchPair(apply(pair.lr_patch), apply(pair.hr_patch), pair.scale)


def _epoch_batches(volumes, cfg: TrainConfig, rng: np.random.Generator, pool):
    """Patches for one epoch, grouped into batches in a seed-determined order."""
    order = np.concatenate([rng.permutation(len(volumes)) for _ in range(cfg.patches_per_volume_per_epoch)])
    seeds = rng.integers(0, 2**63 - 1, size=len(order))

    def draw(k):
        g = np.random.default_rng(int(seeds[k]))
        pair = sample_patch(volumes[order[k]], cfg.R, cfg.S_in, cfg.crop, g)
        return augment_pair(pair, g) if cfg.augment else pair

    jobs = range(len(order))
    pairs = list(pool.map(draw, jobs)) if pool is not None else [draw(k) for k in jobs]
    for b in range(0, len(pairs), cfg.batch_size):
        chunk = pairs[b : b + cfg.batch_size]
        lr = torch.from_numpy(np.stack([p.lr_patch for p in chunk]))
        hr = torch.from_numpy(np.stack([p.hr_patch for p in chunk]))
        yield lr, hr


def validation_psnr(model: I3Net, volumes, R: int) -> float:
    vals = []
    for v in volumes:
        lr, hr = downsample_axial(v, R)
        vals.append(psnr(synthesize_volume(lr, model), hr))
    finite = [x for x in vals if math.isfinite(x)]
    return float(np.mean(finite)) if finite else math.inf


def train_loop(
    model: I3Net,
    volumes: list[Volume],
    cfg: TrainConfig,
    *,
    val_volumes: list[Volume] | None = None,
    out_dir=None,
    resume: dict | None = None,
    stop_after_epoch: int | None = None,
    on_step=None,
):
    """Train ``model`` in place on normalised HR volumes; returns ``(model, state)``.

    ``resume`` is the ``training`` dict returned by ``load_checkpoint``; the run
    then continues from the saved epoch and reproduces the uninterrupted loss
    trajectory. ``stop_after_epoch`` ends the run early (the schedule still
    spans ``cfg.epochs``).
    """
    if not volumes:
        raise ValidationError("training set is empty")
    for v in volumes:
        if v.intensity_domain != IntensityDomain.NORMALIZED_UNIT:
            raise ValidationError("training volumes must be normalized")
    if model.config.R != cfg.R or model.config.S_in != cfg.S_in:
        raise ValidationError("TrainConfig R/S_in disagree with the model config")

    total = cfg.total_steps(len(volumes))
    opt = make_optimizer(model, cfg.lr0)
    if resume is not None:
        state = TrainState.from_dict(resume["state"])
        if resume.get("optimizer_state") is not None:
            apply_optimizer_state(model, opt, resume["optimizer_state"])
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
    else:
        state = TrainState()
        rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 0 else None
    model.train()
    try:
        while state.epoch < last_epoch:
            for lr_patch, hr_patch in _epoch_batches(volumes, cfg, rng, pool):
                lr_now = lr_at(state.step, total, cfg.lr0)
                for g in opt.param_groups:
                    g["lr"] = lr_now
                pred = model(lr_patch)
                loss = l1_loss(pred, hr_patch)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                grad_norm = torch.sqrt(
                    sum((p.grad.double() ** 2).sum() for p in model.parameters() if p.grad is not None)
                ).item()
                if not math.isfinite(loss.item()):
                    raise TrainingDiverged(state.step, lr_now, grad_norm, loss.item())
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                if cfg.debug:
                    for n, p in model.named_parameters():
                        if not torch.all(torch.isfinite(p)):
                            raise TrainingDiverged(state.step, lr_now, grad_norm, float("nan"))
                state.history.append({"step": state.step, "loss": loss.item(), "lr": lr_now})
                if on_step is not None:
                    on_step(state)
                state.step += 1
            state.epoch += 1

            if val_volumes and cfg.val_interval and state.epoch % cfg.val_interval == 0:
                score = validation_psnr(model, val_volumes, cfg.R)
                state.val_history.append({"epoch": state.epoch, "psnr": score})
                log.info("epoch %d val psnr %.3f", state.epoch, score)
                if state.best_val_psnr is None or score > state.best_val_psnr:
                    state.best_val_psnr = score
                    if out_dir is not None:
                        state.rng_state = rng.bit_generator.state
                        save_checkpoint(out_dir / "best.ckpt", model, opt, state.to_dict())
            if out_dir is not None and cfg.checkpoint_interval and state.epoch % cfg.checkpoint_interval == 0:
                state.rng_state = rng.bit_generator.state
                save_checkpoint(out_dir / f"epoch{state.epoch:05d}.ckpt", model, opt, state.to_dict())
            if state.history:
                log.debug("epoch %d loss %.5f", state.epoch, state.history[-1]["loss"])
    finally:
        if pool is not None:
            pool.shutdown()
    state.rng_state = rng.bit_generator.state
    state.optimizer = opt
    if out_dir is not None:
        save_checkpoint(out_dir / "last.ckpt", model, opt, state.to_dict())
    return model, state
