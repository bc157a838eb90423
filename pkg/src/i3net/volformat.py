"""Volume container, RVL1 persistence, axial decimation and synthetic phantoms.

Volumes are stored slice-major as ``data[s, h, w]`` where ``s`` runs along the
low-resolution axial axis. Everything downstream (patch sampling, inference,
metrics) assumes this layout.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"RVL1"
HEADER_SIZE = 48
_HEADER = struct.Struct("<4s3I3dB7x")

HU_LO = -1024.0
HU_HI = 3071.0


class ValidationError(ValueError):
    """An argument or a volume violates a documented invariant."""


class VolumeFormatError(ValueError):
    """An RVL1 file is malformed."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class PersistenceError(OSError):
    """Reading or writing a volume file failed at the OS level."""

    def __init__(self, path, cause: BaseException):
        super().__init__(f"{path}: {cause}")
        self.path = Path(path)


class IntensityDomain(enum.IntEnum):
    RAW_HU = 0
    NORMALIZED_UNIT = 1


@dataclass
class Volume:
    """A 3D scalar field ``data[s, h, w]`` with voxel spacing in millimetres."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_domain: IntensityDomain = IntensityDomain.RAW_HU

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.intensity_domain = IntensityDomain(self.intensity_domain)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def validate(self, min_slices: int = 2) -> "Volume":
        """Raise :class:`ValidationError` unless every invariant holds."""
        if self.data.ndim != 3:
            raise ValidationError(f"volume must be 3D, got ndim={self.data.ndim}")
        s, h, w = self.data.shape
        if s < min_slices:
            raise ValidationError(f"S must be >= {min_slices}, got S={s}")
        if h < 8 or w < 8:
            raise ValidationError(f"H and W must be >= 8, got {h}x{w}")
        if len(self.spacing) != 3 or not all(sp > 0 for sp in self.spacing):
            raise ValidationError(f"spacing must be three positive values, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("volume contains non-finite voxels")
        if self.intensity_domain == IntensityDomain.NORMALIZED_UNIT:
            if self.data.min() < 0.0 or self.data.max() > 1.0:
                raise ValidationError("normalized volume has voxels outside [0, 1]")
        return self

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing, self.intensity_domain)


def write_volume(v: Volume, path) -> None:
    """Write ``v`` to ``path`` in the RVL1 format (see ``docs/formats.md``)."""
    v.validate()
    s, h, w = v.shape
    header = _HEADER.pack(MAGIC, s, h, w, *v.spacing, int(v.intensity_domain))
    payload = v.data.astype("<f4", copy=False).tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise PersistenceError(path, exc) from exc


def read_volume(path) -> Volume:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(path, exc) from exc
    if len(raw) < HEADER_SIZE:
        raise VolumeFormatError("header", f"file is {len(raw)} bytes, need {HEADER_SIZE}")
    magic, s, h, w, ds, dh, dw, domain = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise VolumeFormatError("magic", f"bad magic {magic!r}")
    if raw[41:48] != bytes(7):
        raise VolumeFormatError("padding", "reserved bytes 41-47 are not zero")
    if domain not in (0, 1):
        raise VolumeFormatError("intensity_domain", f"unknown code {domain}")
    expected = s * h * w * 4
    got = len(raw) - HEADER_SIZE
    if got != expected:
        raise VolumeFormatError(
            "payload length", f"header dims {s}x{h}x{w} need {expected} bytes, found {got}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(s, h, w)
    v = Volume(data.astype(np.float32), (ds, dh, dw), IntensityDomain(domain))
    try:
        v.validate()
    except ValidationError as exc:
        raise VolumeFormatError("dims", str(exc)) from exc
    return v


def normalize_intensity(v: Volume, lo: float = HU_LO, hi: float = HU_HI) -> Volume:
    """Map raw HU linearly onto [0, 1] using a fixed window, clamping outside it."""
    if not lo < hi:
        raise ValidationError(f"need lo < hi, got lo={lo}, hi={hi}")
    if v.intensity_domain != IntensityDomain.RAW_HU:
        raise ValidationError("normalize_intensity expects a raw_hu volume")
    out = (v.data.astype(np.float64) - lo) / (hi - lo)
    out = np.clip(out, 0.0, 1.0)
    return Volume(out.astype(np.float32), v.spacing, IntensityDomain.NORMALIZED_UNIT)


def downsample_axial(v: Volume, R: int) -> tuple[Volume, Volume]:
    """Decimate along the slice axis; returns ``(lr, hr)``.

    Trailing slices are trimmed so that ``(S_hr - 1) % R == 0``. The LR volume
    keeps slices ``0, R, 2R, ...`` of the trimmed HR volume without filtering.
    """
    if int(R) != R or R < 1:
        raise ValidationError(f"scale factor must be a positive integer, got {R}")
    R = int(R)
    s_full = v.shape[0]
    if s_full < R + 1:
        raise ValidationError(f"too few slices: S={s_full} < R+1={R + 1}")
    s_hr = (s_full - 1) // R * R + 1
    hr = Volume(v.data[:s_hr].copy(), v.spacing, v.intensity_domain)
    ds, dh, dw = v.spacing
    lr = Volume(v.data[:s_hr:R].copy(), (ds * R, dh, dw), v.intensity_domain)
    return lr, hr


@dataclass(frozen=True)
class PatchPair:
    lr_patch: np.ndarray
    hr_patch: np.ndarray
    scale: int


def sample_patch(
    hr: Volume,
    R: int,
    S_in: int = 4,
    crop: int = 64,
    rng: np.random.Generator | None = None,
    window: int = 16,
) -> PatchPair:
    """Draw a random run of ``(S_in-1)*R+1`` HR slices and centre-crop them.

    ``rng`` must be supplied for reproducible sampling; only the slice offset
    is random, the in-plane crop is always centred.
    """
    if crop % window or crop % 2:
        raise ValidationError(f"crop={crop} must be divisible by {window} and 2")
    span = (S_in - 1) * R + 1
    s, h, w = hr.shape
    if s < span:
        raise ValidationError(f"volume has {s} slices, patch needs {span}")
    if crop > min(h, w):
        raise ValidationError(f"crop={crop} exceeds in-plane size {h}x{w}")
    rng = rng if rng is not None else np.random.default_rng()
    start = int(rng.integers(0, s - span + 1))
    top = (h - crop) // 2
    left = (w - crop) // 2
    hr_patch = hr.data[start : start + span, top : top + crop, left : left + crop].copy()
    lr_patch = hr_patch[::R].copy()
    return PatchPair(lr_patch, hr_patch, R)


# Synthetic phantoms -------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for a reproducible CT-like phantom.

    Randomness comes from a Philox counter-based stream keyed by ``seed``; each
    structure class draws from its own sub-stream so adding tubes never moves
    the ellipsoids.
    """

    seed: int = 0
    n_ellipsoids: int = 6
    n_tubes: int = 4
    size: tuple[int, int, int] = (19, 64, 64)
    spacing: tuple[float, float, float] = (2.5, 1.0, 1.0)
    background_smoothness: float = 6.0
    background_hu: float = 40.0
    background_amplitude: float = 60.0
    organ_hu: tuple[float, float] = (-100.0, 300.0)
    lung_hu: tuple[float, float] = (-950.0, -700.0)
    bone_hu: tuple[float, float] = (600.0, 1500.0)
    vessel_hu: tuple[float, float] = (150.0, 450.0)
    lung_fraction: float = 0.2
    bone_fraction: float = 0.2
    noise_hu: float = 0.0
    extra: dict = field(default_factory=dict, compare=False)


_STREAM_BACKGROUND = 0
_STREAM_ELLIPSOIDS = 1
_STREAM_TUBES = 2
_STREAM_NOISE = 3


def _stream(seed: int, sub: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), sub]))


def _soft_inside(dist: np.ndarray, width: float) -> np.ndarray:
    # signed distance (negative inside) -> occupancy in [0, 1]
    return 0.5 * (1.0 - np.tanh(dist / width))


def gen_phantom(spec: PhantomSpec) -> Volume:
    """Render the phantom described by ``spec`` in raw HU."""
    S, H, W = spec.size
    if min(S, H, W) <= 0:
        raise ValidationError(f"phantom size must be positive, got {spec.size}")
    ds, dh, dw = spec.spacing
    # physical coordinates in mm, centred
    zs = (np.arange(S) - (S - 1) / 2) * ds
    ys = (np.arange(H) - (H - 1) / 2) * dh
    xs = (np.arange(W) - (W - 1) / 2) * dw
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    extent = np.array([S * ds, H * dh, W * dw]) / 2

    vol = np.full((S, H, W), spec.background_hu, dtype=np.float64)
    if not math.isinf(spec.background_smoothness):
        rng = _stream(spec.seed, _STREAM_BACKGROUND)
        noise = rng.standard_normal((S, H, W))
        sigma = (spec.background_smoothness * dh / ds, spec.background_smoothness, spec.background_smoothness)
        field_ = ndimage.gaussian_filter(noise, sigma=sigma, mode="wrap")
        # unit standard deviation regardless of correlation length
        field_ *= math.sqrt(np.prod([2 * math.sqrt(math.pi) * max(sg, 1e-6) for sg in sigma]))
        vol += spec.background_amplitude * field_

    rng = _stream(spec.seed, _STREAM_ELLIPSOIDS)
    for _ in range(spec.n_ellipsoids):
        centre = rng.uniform(-0.6, 0.6, size=3) * extent
        radii = rng.uniform(0.15, 0.45, size=3) * extent.min() * np.array([1.6, 1.0, 1.0])
        angle = rng.uniform(0.0, math.pi)
        kind = rng.uniform()
        if kind < spec.lung_fraction:
            lo, hi = spec.lung_hu
        elif kind < spec.lung_fraction + spec.bone_fraction:
            lo, hi = spec.bone_hu
        else:
            lo, hi = spec.organ_hu
        value = rng.uniform(lo, hi)
        c, s_ = math.cos(angle), math.sin(angle)
        dy, dx = Y - centre[1], X - centre[2]
        u = (c * dy + s_ * dx) / radii[1]
        v = (-s_ * dy + c * dx) / radii[2]
        w = (Z - centre[0]) / radii[0]
        r = np.sqrt(u * u + v * v + w * w)
        occ = _soft_inside((r - 1.0) * radii[1:].min(), width=0.75)
        vol = vol * (1 - occ) + value * occ

    rng = _stream(spec.seed, _STREAM_TUBES)
    pts = np.stack([Z, Y, X], axis=-1)
    for _ in range(spec.n_tubes):
        p0 = rng.uniform(-0.8, 0.8, size=3) * extent
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        radius = rng.uniform(0.8, 2.0)
        curvature = rng.uniform(-0.02, 0.02, size=3)
        value = rng.uniform(*spec.vessel_hu)
        rel = pts - p0
        t = rel @ d
        # gently curved centreline
        off = rel - t[..., None] * d - (t[..., None] ** 2) * curvature
        dist = np.sqrt(np.sum(off * off, axis=-1)) - radius
        occ = _soft_inside(dist, width=0.5)
        vol = vol * (1 - occ) + value * occ

    if spec.noise_hu > 0:
        rng = _stream(spec.seed, _STREAM_NOISE)
        vol += spec.noise_hu * rng.standard_normal(vol.shape)

    return Volume(vol.astype(np.float32), spec.spacing, IntensityDomain.RAW_HU)
