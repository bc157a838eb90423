"""Inter-/intra-slice interpolation network.

Layout conventions: the network consumes ``S_in`` LR slices stacked as channels
``[N, S_in, h, w]`` and emits ``[N, (S_in-1)*R+1, h, w]`` HR slices.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .nnops import (
    ShapeError,
    dct2,
    gelu,
    idct2,
    layer_norm,
    pixel_shuffle2,
    pixel_unshuffle2,
    window_partition,
    window_reverse,
)
from .volformat import IntensityDomain, ValidationError, Volume


class ConfigError(ValueError):
    """A model configuration violates its invariants."""


@dataclass(frozen=True)
class ModelConfig:
    C: int = 64
    n_blocks: int = 16
    cvb_positions: tuple[int, ...] = (4, 8, 12)
    p: int = 16
    S_in: int = 4
    R: int = 2
    token_expansion: int = 1
    channel_expansion: int = 1
    # "shuffle" is the pixel-unshuffle branch, "plain" a same-resolution conv pair
    inter: str = "shuffle"
    intra: bool = True
    global_residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "cvb_positions", tuple(sorted(int(k) for k in self.cvb_positions)))
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.C < 4 or self.C % 4:
            out.append(f"C={self.C} must be a positive multiple of 4")
        if self.n_blocks < 0:
            out.append(f"n_blocks={self.n_blocks} must be >= 0")
        bad = [k for k in self.cvb_positions if not 1 <= k <= self.n_blocks]
        if bad:
            out.append(f"cvb_positions {bad} outside [1, n_blocks={self.n_blocks}]")
        if len(set(self.cvb_positions)) != len(self.cvb_positions):
            out.append("cvb_positions contains duplicates")
        if self.p < 1:
            out.append(f"p={self.p} must be >= 1")
        if self.S_in < 2:
            out.append(f"S_in={self.S_in} must be >= 2")
        if self.R < 1:
            out.append(f"R={self.R} must be >= 1")
        if self.token_expansion < 1 or self.channel_expansion < 1:
            out.append("mixer expansion factors must be >= 1")
        if self.inter not in ("shuffle", "plain", "none"):
            out.append(f"inter={self.inter!r} must be 'shuffle', 'plain' or 'none'")
        return out

    @property
    def S_out(self) -> int:
        return (self.S_in - 1) * self.R + 1

    @property
    def spatial_multiple(self) -> int:
        """In-plane sizes must be multiples of this."""
        m = 2
        if self.intra and self.n_blocks:
            m = m * self.p // math.gcd(m, self.p)
        return m

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["cvb_positions"] = list(self.cvb_positions)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "cvb_positions" in d:
            d["cvb_positions"] = tuple(d["cvb_positions"])
        return cls(**d)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Scaled-down configuration that trains on a laptop CPU."""
        base = dict(C=32, n_blocks=4, cvb_positions=(2,), p=8)
        base.update(overrides)
        return cls(**base)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of learnable scalars for ``cfg``."""
    C, p2 = cfg.C, cfg.p * cfg.p
    head = cfg.S_in * C * 9 + C
    tail = C * cfg.S_out * 9 + cfg.S_out
    if cfg.inter == "shuffle":
        inter = 2 * (16 * C * C * 9 + 4 * C)
    elif cfg.inter == "plain":
        inter = 2 * (C * C * 9 + C)
    else:
        inter = 0
    if cfg.intra:
        tok_h, ch_h = p2 * cfg.token_expansion, C * cfg.channel_expansion
        intra = (
            (p2 * tok_h + tok_h) + (tok_h * p2 + p2)  # token MLP
            + (C * ch_h + ch_h) + (ch_h * C + C)  # channel MLP
            + 2 * 2 * C  # two LayerNorm affines
            + C * C + C  # 1x1 projection
        )
    else:
        intra = 0
    q = C // 4
    cvb = 2 * (C * C + C) + 2 * 2 * (q * q * 3 + q) + 2 * C
    return head + cfg.n_blocks * (inter + intra) + len(cfg.cvb_positions) * cvb + tail


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of an ``[N, C, ...]`` tensor at each position."""

    def __init__(self, C: int, axis: int = 1, eps: float = 1e-5):
        super().__init__()
        self.axis = axis
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(C))
        self.bias = nn.Parameter(torch.zeros(C))

    def forward(self, x):
        shape = [1] * x.dim()
        shape[self.axis] = -1
        return layer_norm(x, self.axis, self.weight.view(shape), self.bias.view(shape), self.eps)


class Head(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.S_in = cfg.S_in
        self.conv = nn.Conv2d(cfg.S_in, cfg.C, 3, padding=1)

    def forward(self, v):
        if v.shape[1] != self.S_in:
            raise ShapeError(f"expected {self.S_in} input slices, got {v.shape[1]}")
        return self.conv(v)


class InterBranch(nn.Module):
    """Unshuffle -> conv3x3 -> ReLU -> conv3x3 -> shuffle (or the same-resolution ablation)."""

    def __init__(self, C: int, mode: str = "shuffle"):
        super().__init__()
        self.mode = mode
        width = 4 * C if mode == "shuffle" else C
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, z):
        if self.mode == "shuffle":
            return pixel_shuffle2(self.conv2(torch.relu(self.conv1(pixel_unshuffle2(z)))))
        return self.conv2(torch.relu(self.conv1(z)))


class IntraBranch(nn.Module):
    """Frequency-domain windowed MLP-Mixer.

    dct2 -> windows of p*p frequency bands -> token MLP over the bands ->
    channel MLP over C -> window reverse -> 1x1 conv -> idct2. The LayerNorm
    inside each mixer step normalises over channels at every frequency
    location, so the residual carries the raw DCT coefficients.
    """

    def __init__(self, C: int, p: int, token_expansion: int = 1, channel_expansion: int = 1):
        super().__init__()
        self.p = p
        p2 = p * p
        self.norm1 = ChannelNorm(C, axis=2)
        self.token_fc1 = nn.Linear(p2, p2 * token_expansion)
        self.token_fc2 = nn.Linear(p2 * token_expansion, p2)
        self.norm2 = ChannelNorm(C, axis=2)
        self.channel_fc1 = nn.Linear(C, C * channel_expansion)
        self.channel_fc2 = nn.Linear(C * channel_expansion, C)
        self.proj = nn.Conv2d(C, C, 1)
        # the branch starts silent and grows only what the data supports
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def mix(self, zw: torch.Tensor) -> torch.Tensor:
        # zw: [N, n_windows, C, p*p]
        zw = zw + self.token_fc2(gelu(self.token_fc1(self.norm1(zw))))
        t = self.norm2(zw).transpose(-1, -2)
        zw = zw + self.channel_fc2(gelu(self.channel_fc1(t))).transpose(-1, -2)
        return zw

    def forward(self, z):
        ws = window_partition(dct2(z), self.p)
        ws.data = self.mix(ws.data)
        return idct2(self.proj(window_reverse(ws)))


class I2Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.inter = InterBranch(cfg.C, cfg.inter) if cfg.inter != "none" else None
        self.intra = (
            IntraBranch(cfg.C, cfg.p, cfg.token_expansion, cfg.channel_expansion) if cfg.intra else None
        )

    def forward(self, z):
        out = z
        if self.inter is not None:
            out = out + self.inter(z)
        if self.intra is not None:
            out = out + self.intra(z)
        return out


class ConvUnit(nn.Sequential):
    def __init__(self, channels: int, kernel: tuple[int, int]):
        pad = (kernel[0] // 2, kernel[1] // 2)
        super().__init__(
            nn.Conv2d(channels, channels, kernel, padding=pad),
            nn.ReLU(),
            nn.Conv2d(channels, channels, kernel, padding=pad),
        )


class CrossViewBlock(nn.Module):
    """Adds sagittal- and coronal-oriented refinements to axial features.

    Channels carry the through-plane content, so a kernel extending along H
    mixes (channel, height) like a sagittal slice does and one extending along
    W mixes (channel, width) like a coronal slice.
    """

    def __init__(self, C: int):
        super().__init__()
        if C % 4:
            raise ConfigError(f"cross-view block needs C divisible by 4, got {C}")
        self.norm = ChannelNorm(C, axis=1)
        self.w_sag = nn.Conv2d(C, C, 1)
        self.w_cor = nn.Conv2d(C, C, 1)
        self.sag_unit = ConvUnit(C // 4, (3, 1))
        self.cor_unit = ConvUnit(C // 4, (1, 3))

    def forward(self, z):
        zn = self.norm(z)
        z_sag = pixel_unshuffle2(self.sag_unit(pixel_shuffle2(self.w_sag(zn))))
        z_cor = pixel_unshuffle2(self.cor_unit(pixel_shuffle2(self.w_cor(zn))))
        return z_sag + z_cor + z


def linear_interp_matrix(S_in: int, R: int) -> np.ndarray:
    """``[(S_in-1)*R+1, S_in]`` weights placing ``R-1`` linear samples between neighbours."""
    S_out = (S_in - 1) * R + 1
    m = np.zeros((S_out, S_in))
    for t in range(S_out):
        k, r = divmod(t, R)
        if r == 0:
            m[t, k] = 1.0
        else:
            m[t, k] = 1.0 - r / R
            m[t, k + 1] = r / R
    return m


class I3Net(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        super().__init__()
        self.config = cfg
        with torch.random.fork_rng(devices=[], enabled=seed is not None):
            if seed is not None:
                torch.manual_seed(seed)
            self.head = Head(cfg)
            layers = []
            for k in range(1, cfg.n_blocks + 1):
                layers.append(I2Block(cfg))
                if k in cfg.cvb_positions:
                    layers.append(CrossViewBlock(cfg.C))
            self.body = nn.Sequential(*layers)
            self.tail = nn.Conv2d(cfg.C, cfg.S_out, 3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)
        self.register_buffer(
            "interp", torch.tensor(linear_interp_matrix(cfg.S_in, cfg.R), dtype=torch.float32), persistent=False
        )

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        m = self.config.spatial_multiple
        if v.dim() != 4 or v.shape[-1] % m or v.shape[-2] % m:
            raise ShapeError(f"input {tuple(v.shape)} needs [N, S_in, h, w] with h, w multiples of {m}")
        out = self.tail(self.body(self.head(v)))
        if self.config.global_residual:
            out = out + torch.einsum("ts,nshw->nthw", self.interp.to(v.dtype), v)
        return out

    def i2blocks(self) -> list[I2Block]:
        return [m for m in self.body if isinstance(m, I2Block)]


# Whole-volume inference ----------------------------------------------------


def window_starts(S: int, S_in: int) -> list[int]:
    """Start indices of ``S_in``-slice windows covering ``S`` slices with stride ``S_in-1``."""
    if S <= S_in:
        return [0]
    starts = list(range(0, S - S_in + 1, S_in - 1))
    if starts[-1] + S_in < S:
        starts.append(S - S_in)
    return starts


@torch.no_grad()
def synthesize_volume(lr: Volume, model: I3Net, batch_size: int = 8, info: dict | None = None) -> Volume:
    """Interpolate a whole normalised LR volume to ``(S-1)*R+1`` slices.

    Overlapping windows share one LR slice; HR slices predicted by more than
    one window are averaged. Anchor slices ``k*R`` are copied from the input.
    Pass a dict as ``info`` to receive flags (edge replication, padding).
    """
    cfg = model.config
    if lr.intensity_domain != IntensityDomain.NORMALIZED_UNIT:
        raise ValidationError("synthesize_volume expects a normalized volume")
    S, H, W = lr.shape
    R, S_in = cfg.R, cfg.S_in
    data = lr.data
    info = info if info is not None else {}
    info["replicated_slices"] = 0
    if S < S_in:
        info["replicated_slices"] = S_in - S
        data = np.concatenate([data, np.repeat(data[-1:], S_in - S, axis=0)], axis=0)
    m = cfg.spatial_multiple
    ph, pw = (-H) % m, (-W) % m
    info["padding"] = (ph, pw)
    pad = ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
    if ph or pw:
        data = np.pad(data, pad, mode="symmetric")

    S_eff = data.shape[0]
    starts = window_starts(S_eff, S_in)
    acc = np.zeros(((S_eff - 1) * R + 1,) + data.shape[1:], dtype=np.float64)
    cnt = np.zeros(acc.shape[0])
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        for b in range(0, len(starts), batch_size):
            chunk = starts[b : b + batch_size]
            x = torch.from_numpy(np.stack([data[s : s + S_in] for s in chunk])).to(dtype)
            y = model(x).double().numpy()
            for s, pred in zip(chunk, y):
                acc[s * R : s * R + cfg.S_out] += pred
                cnt[s * R : s * R + cfg.S_out] += 1
    finally:
        model.train(was_training)
    out = acc / cnt[:, None, None]
    out[::R] = data
    out = out[: (S - 1) * R + 1, pad[1][0] : pad[1][0] + H, pad[2][0] : pad[2][0] + W]
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    out[::R] = lr.data
    ds, dh, dw = lr.spacing
    return Volume(out, (ds / R, dh, dw), IntensityDomain.NORMALIZED_UNIT)
