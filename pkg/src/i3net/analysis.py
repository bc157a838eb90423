"""Diagnostic probes: frequency energy, feature redundancy, receptive fields,
HU windowing and inference latency."""

from __future__ import annotations

import csv
import math
import os
import platform
import statistics
import time

import numpy as np
import torch

from .model import I3Net, synthesize_volume
from .nnops import dct2
from .volformat import IntensityDomain, ValidationError, Volume


def _as_planes(feature) -> torch.Tensor:
    t = torch.as_tensor(feature)
    t = t.to(torch.float64)
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[None]
    if t.dim() != 4:
        raise ValidationError(f"expected a [N, C, H, W] feature, got shape {tuple(t.shape)}")
    return t


def high_freq_mask(H: int, W: int, rho: float) -> np.ndarray:
    """Boolean mask of the high-frequency region ``i/H + j/W >= 2(1 - rho)``."""
    i = np.arange(H)[:, None] / H
    j = np.arange(W)[None, :] / W
    return (i + j) >= 2.0 * (1.0 - rho)


def hf_energy_ratio(feature, rho: float, info: dict | None = None) -> float:
    """Share of squared DCT intensity inside the high-frequency region.

    Computed per ``(n, c)`` plane and averaged; planes with no energy are
    skipped. An all-zero feature gives 0 and sets ``info["all_zero"]``.
    """
    if not 0 < rho <= 1:
        raise ValidationError(f"rho must lie in (0, 1], got {rho}")
    x = _as_planes(feature)
    energy = dct2(x) ** 2
    mask = torch.as_tensor(high_freq_mask(x.shape[-2], x.shape[-1], rho))
    total = energy.sum(dim=(-2, -1)).reshape(-1)
    high = (energy * mask).sum(dim=(-2, -1)).reshape(-1)
    keep = total > 0
    if not bool(keep.any()):
        if info is not None:
            info["all_zero"] = True
        return 0.0
    return float((high[keep] / total[keep]).mean())


def energy_curve(feature, rhos) -> list[tuple[float, float]]:
    return [(float(r), hf_energy_ratio(feature, r)) for r in rhos]


def uniform_curve(H: int, W: int, rhos) -> list[tuple[float, float]]:
    """The curve of a plane whose every frequency has the same intensity."""
    return [(float(r), float(high_freq_mask(H, W, r).mean())) for r in rhos]


def spectral_energy(feature) -> tuple[float, float]:
    """``(sum of squared DCT intensities, squared spatial norm)``; equal by Parseval."""
    x = _as_planes(feature)
    return float((dct2(x) ** 2).sum()), float((x**2).sum())


def write_curve_csv(path, curve, uniform=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rho", "ratio"] + (["uniform"] if uniform is not None else []))
        for k, (r, v) in enumerate(curve):
            w.writerow([f"{r:.6g}", f"{v:.9g}"] + ([f"{uniform[k][1]:.9g}"] if uniform is not None else []))


def feature_redundancy(feature, info: dict | None = None) -> float:
    """Mean absolute off-diagonal Pearson correlation between channel maps.

    Channels with zero variance are dropped (``info["dropped_channels"]``);
    with fewer than two usable channels the result is NaN and
    ``info["undefined"]`` is set. Batched input is averaged over samples.
    """
    x = _as_planes(feature)
    n, c = x.shape[:2]
    if c < 2:
        raise ValidationError("feature_redundancy needs at least two channels")
    scores, dropped = [], 0
    for k in range(n):
        flat = x[k].reshape(c, -1).numpy()
        std = flat.std(axis=1)
        good = std > 0
        dropped += int((~good).sum())
        if good.sum() < 2:
            continue
        corr = np.corrcoef(flat[good])
        m = corr.shape[0]
        off = np.abs(corr[~np.eye(m, dtype=bool)])
        scores.append(float(np.clip(off.mean(), 0.0, 1.0)))
    if info is not None:
        info["dropped_channels"] = dropped
    if not scores:
        if info is not None:
            info["undefined"] = True
        return math.nan
    return float(np.mean(scores))


def receptive_probe(module, input_shape, center=None, normalize: bool = True, seed: int = 0) -> np.ndarray:
    """Input-gradient saliency of one output location, summed over channels.

    ``input_shape`` is ``(N, C, H, W)``; ``center`` defaults to ``(H//2, W//2)``.
    The probe input is standard normal noise from a fixed seed.
    """
    n, c, h, w = input_shape
    ci, cj = center if center is not None else (h // 2, w // 2)
    dtype = next(iter(module.parameters()), torch.empty(0)).dtype
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(input_shape, generator=gen, dtype=torch.float64).to(dtype).requires_grad_(True)
    y = module(x)
    y[:, :, ci, cj].sum().backward()
    sal = x.grad.detach().abs().sum(dim=(0, 1)).double().numpy()
    if normalize and sal.max() > 0:
        sal = sal / sal.max()
    return sal


def support_box(saliency: np.ndarray, threshold: float = 1e-12) -> tuple[int, int]:
    """Height and width of the bounding box of entries above ``threshold``."""
    rows = np.flatnonzero(saliency.max(axis=1) > threshold)
    cols = np.flatnonzero(saliency.max(axis=0) > threshold)
    if rows.size == 0:
        return 0, 0
    return int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)


def hu_window(v, lo: float, hi: float) -> np.ndarray:
    """Clamp to ``[lo, hi]`` and map linearly to 8-bit grey levels (round half to even)."""
    if not lo < hi:
        raise ValidationError(f"need lo < hi, got lo={lo}, hi={hi}")
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    if isinstance(v, Volume) and v.intensity_domain != IntensityDomain.RAW_HU:
        raise ValidationError("hu_window expects a raw_hu volume")
    x = (np.clip(data.astype(np.float64), lo, hi) - lo) / (hi - lo) * 255.0
    return np.round(x).astype(np.uint8)


def block_taps(model: I3Net, lr_batch: torch.Tensor) -> list[dict[str, torch.Tensor]]:
    """Run ``model`` once and capture, for every I2Block, its input, each branch output and its output."""
    taps: list[dict] = []
    handles = []
    for block in model.i2blocks():
        rec: dict = {}
        taps.append(rec)

        def block_hook(mod, inp, out, rec=rec):
            rec["input"] = inp[0].detach()
            rec["output"] = out.detach()

        handles.append(block.register_forward_hook(block_hook))
        for name in ("inter", "intra"):
            branch = getattr(block, name)
            if branch is not None:
                handles.append(
                    branch.register_forward_hook(lambda mod, inp, out, rec=rec, name=name: rec.__setitem__(name, out.detach()))
                )
    try:
        with torch.no_grad():
            model(lr_batch)
    finally:
        for h in handles:
            h.remove()
    return taps


def stage_energy(model: I3Net, lr_batch: torch.Tensor, rho: float = 0.5) -> list[dict[str, float]]:
    """High-frequency energy ratio at every tap of every I2Block."""
    return [{k: hf_energy_ratio(t, rho) for k, t in rec.items()} for rec in block_taps(model, lr_batch)]


def stage_redundancy(model: I3Net, lr_batch: torch.Tensor) -> list[float]:
    """Feature redundancy of each I2Block output, in depth order."""
    return [feature_redundancy(rec["output"]) for rec in block_taps(model, lr_batch)]


def hardware_descriptor() -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "system": platform.system(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "torch_threads": torch.get_num_threads(),
        "cpu_count": os.cpu_count(),
    }


def bench_latency(model: I3Net, shape=(4, 256, 256), repeats: int = 10, warmup: int = 3, seed: int = 0) -> dict:
    """Median wall-clock of whole-volume synthesis for an LR volume of ``shape``.

    Must run without competing load; the result says so.
    """
    S, H, W = shape
    rng = np.random.default_rng(seed)
    lr = Volume(rng.random((S, H, W), dtype=np.float32), (1.0, 1.0, 1.0), IntensityDomain.NORMALIZED_UNIT)
    for _ in range(warmup):
        synthesize_volume(lr, model)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = synthesize_volume(lr, model)
        times.append((time.perf_counter() - t0) * 1e3)
    return {
        "median_ms": float(statistics.median(times)),
        "times_ms": times,
        "input_shape": [S, H, W],
        "output_shape": list(out.shape),
        "R": model.config.R,
        "repeats": repeats,
        "warmup": warmup,
        "hardware": hardware_descriptor(),
        "note": "single stream; run exclusively, concurrent load invalidates the timing",
    }
