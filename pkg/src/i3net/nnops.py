"""Differentiable tensor primitives used by the network.

All functions take and return ``torch.Tensor`` in ``[N, C, H, W]`` layout and
are built from autograd-aware torch ops, so gradients come for free and are
exact. ``grad_check`` verifies that claim numerically.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import torch


class ShapeError(ValueError):
    """Tensor dimensions are incompatible with an operation."""


# Pixel shuffle -------------------------------------------------------------


def pixel_unshuffle2(x: torch.Tensor) -> torch.Tensor:
    """``[N, C, H, W] -> [N, 4C, H/2, W/2]`` with ``out[:, 4c+2i+j, h, w] = x[:, c, 2h+i, 2w+j]``."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pixel_unshuffle2 needs even H, W; got {h}x{w}")
    x = x.reshape(n, c, h // 2, 2, w // 2, 2)
    x = x.permute(0, 1, 3, 5, 2, 4)
    return x.reshape(n, 4 * c, h // 2, w // 2)


def pixel_shuffle2(x: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`pixel_unshuffle2`."""
    n, c4, h, w = x.shape
    if c4 % 4:
        raise ShapeError(f"pixel_shuffle2 needs channels divisible by 4; got {c4}")
    c = c4 // 4
    x = x.reshape(n, c, 2, 2, h, w)
    x = x.permute(0, 1, 4, 2, 5, 3)
    return x.reshape(n, c, 2 * h, 2 * w)


# DCT ----------------------------------------------------------------------


@functools.lru_cache(maxsize=32)
def _dct_matrix_np(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


def dct_matrix(n: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Orthonormal DCT-II matrix ``D`` with ``X = D @ x`` along one axis."""
    return torch.as_tensor(_dct_matrix_np(n), dtype=dtype, device=device)


def dct2(x: torch.Tensor) -> torch.Tensor:
    """Orthonormal 2D DCT-II over the last two axes, rows then columns."""
    h, w = x.shape[-2:]
    dh = dct_matrix(h, x.dtype, x.device)
    dw = dct_matrix(w, x.dtype, x.device)
    return dh @ x @ dw.T


def idct2(x: torch.Tensor) -> torch.Tensor:
    h, w = x.shape[-2:]
    dh = dct_matrix(h, x.dtype, x.device)
    dw = dct_matrix(w, x.dtype, x.device)
    return dh.T @ x @ dw


# Windows ------------------------------------------------------------------


@dataclass
class WindowSeq:
    """Windows of a feature map: ``data[N, n_windows, C, p*p]``."""

    data: torch.Tensor
    p: int
    H: int
    W: int


def window_partition(x: torch.Tensor, p: int) -> WindowSeq:
    """Tile ``[N, C, H, W]`` into non-overlapping ``p x p`` windows.

    Windows are ordered row-major over the tile grid; positions inside a
    window are flattened row-major.
    """
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"window size {p} must divide H={h} and W={w}")
    t = x.reshape(n, c, h // p, p, w // p, p)
    t = t.permute(0, 2, 4, 1, 3, 5)
    return WindowSeq(t.reshape(n, (h // p) * (w // p), c, p * p), p, h, w)


def window_reverse(ws: WindowSeq) -> torch.Tensor:
    n, nw, c, pp = ws.data.shape
    p, h, w = ws.p, ws.H, ws.W
    if pp != p * p or h % p or w % p or nw != (h // p) * (w // p):
        raise ShapeError(
            f"inconsistent window metadata: data {tuple(ws.data.shape)}, p={p}, H={h}, W={w}"
        )
    t = ws.data.reshape(n, h // p, w // p, c, p, p)
    t = t.permute(0, 3, 1, 4, 2, 5)
    return t.reshape(n, c, h, w)


# Normalisation and activation --------------------------------------------


def layer_norm(x: torch.Tensor, axes, gamma=None, beta=None, eps: float = 1e-5) -> torch.Tensor:
    """Normalise to zero mean and unit (biased) variance over ``axes``, then apply the affine.

    ``gamma`` and ``beta`` must broadcast against ``x``; pass ``None`` to skip.
    """
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    mean = x.mean(dim=axes, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=axes, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


# Gradient checking ---------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple
    n_checked: int
    tol_rel: float
    passed: bool
    message: str = ""


def grad_check(f, x: torch.Tensor, tol_rel: float = 1e-3, h: float = 1e-4, max_coords=None, seed=0):
    """Compare autograd gradients of ``f`` at ``x`` with central differences.

    ``f`` should return a scalar; a tensor-valued output is contracted with a
    fixed random tensor first. The error is ``|analytic - numeric|`` divided by
    the largest gradient magnitude seen, which stays meaningful where
    individual gradient entries vanish. Runs in float64.

    ``max_coords`` limits the finite-difference sweep to a random subset of
    coordinates for large inputs.
    """
    x = x.detach().to(torch.float64).clone()
    gen = torch.Generator().manual_seed(seed)
    probe = {}

    def scalar(inp):
        out = f(inp)
        if out.dim() > 0 and out.numel() > 1:
            if "w" not in probe:
                probe["w"] = torch.randn(out.shape, generator=gen, dtype=torch.float64)
            out = (out * probe["w"]).sum()
        return out.reshape(())

    xa = x.clone().requires_grad_(True)
    y = scalar(xa)
    if not torch.isfinite(y):
        return GradCheckReport(math.inf, (), 0, tol_rel, False, "non-finite output at the base point")
    (analytic,) = torch.autograd.grad(y, xa)

    flat = x.reshape(-1)
    coords = np.arange(flat.numel())
    if max_coords is not None and max_coords < flat.numel():
        coords = np.sort(np.random.default_rng(seed).choice(flat.numel(), max_coords, replace=False))
    numeric = torch.zeros(len(coords), dtype=torch.float64)
    with torch.no_grad():
        for k, idx in enumerate(coords):
            orig = flat[idx].item()
            flat[idx] = orig + h
            fp = scalar(x)
            flat[idx] = orig - h
            fm = scalar(x)
            flat[idx] = orig
            if not (torch.isfinite(fp) and torch.isfinite(fm)):
                where = tuple(int(i) for i in np.unravel_index(idx, tuple(x.shape)))
                return GradCheckReport(math.inf, where, k, tol_rel, False, f"non-finite output at {where}")
            numeric[k] = (fp - fm) / (2 * h)

    a = analytic.reshape(-1)[torch.as_tensor(coords)]
    scale = max(a.abs().max().item(), numeric.abs().max().item(), 1e-12)
    err = (a - numeric).abs() / scale
    worst = int(err.argmax())
    max_err = err[worst].item()
    where = tuple(int(i) for i in np.unravel_index(coords[worst], tuple(x.shape)))
    return GradCheckReport(max_err, where, len(coords), tol_rel, max_err <= tol_rel)
