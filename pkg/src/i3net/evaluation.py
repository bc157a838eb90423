"""Quality metrics, classical axial interpolation baselines and evaluation reports."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline

from .volformat import IntensityDomain, ValidationError, Volume, downsample_axial

VIEW_AXIS = {"axial": 0, "coronal": 1, "sagittal": 2}

SSIM_SIGMA = 1.5
SSIM_WIN = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(pred, gt):
    a = pred.data if isinstance(pred, Volume) else np.asarray(pred)
    b = gt.data if isinstance(gt, Volume) else np.asarray(gt)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def psnr(pred, gt, data_range: float = 1.0) -> float:
    """PSNR in dB; ``math.inf`` when the inputs are identical."""
    a, b = _pair(pred, gt)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / mse))


def ssim_view(pred, gt, view: str, data_range: float = 1.0, info: dict | None = None) -> float:
    """Mean 2D SSIM over the slices obtained by fixing one axis.

    ``view`` selects the slicing axis: axial fixes ``s``, coronal fixes ``h``
    and sagittal fixes ``w``. Each slice uses an 11x11 Gaussian window
    (sigma 1.5) and the usual ``K1=0.01, K2=0.03`` constants; the border
    where the window does not fit is excluded. Slices smaller than the window
    are reflect-padded first, and ``info["padded"]`` is set.
    """
    if view not in VIEW_AXIS:
        raise ValidationError(f"unknown view {view!r}")
    a, b = _pair(pred, gt)
    ax = VIEW_AXIS[view]
    a = np.moveaxis(a, ax, 0)
    b = np.moveaxis(b, ax, 0)
    pad = [(0, 0)]
    for n in a.shape[1:]:
        short = max(SSIM_WIN - n, 0)
        pad.append((short // 2, short - short // 2))
    if any(p != (0, 0) for p in pad):
        if info is not None:
            info["padded"] = True
        a = np.pad(a, pad, mode="reflect" if min(a.shape[1:]) > 1 else "edge")
        b = np.pad(b, pad, mode="reflect" if min(b.shape[1:]) > 1 else "edge")

    def blur(x):
        for axis in (1, 2):
            x = ndimage.gaussian_filter1d(x, SSIM_SIGMA, axis=axis, mode="reflect", truncate=3.5)
        return x

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    smap = num / den
    r = (SSIM_WIN - 1) // 2
    smap = smap[:, r : smap.shape[1] - r, r : smap.shape[2] - r]
    return float(np.mean(smap.reshape(smap.shape[0], -1).mean(axis=1)))


# Baselines -------------------------------------------------------------------


def baseline_interp(lr: Volume, R: int, kind: str = "linear", info: dict | None = None) -> Volume:
    """Upsample along the slice axis only, to ``(S-1)*R+1`` slices.

    ``cubic`` is a not-a-knot cubic spline, which reproduces cubic profiles
    exactly; with fewer than four slices it falls back to ``linear``.
    ``nearest`` sends a midpoint tie to the earlier slice.
    Anchor slices are copied from the input for every kind.
    """
    if int(R) != R or R < 1:
        raise ValidationError(f"R must be a positive integer, got {R}")
    R = int(R)
    S = lr.shape[0]
    if S < 2:
        raise ValidationError(f"need at least 2 slices, got {S}")
    if kind == "cubic" and S < 4:
        kind = "linear"
        if info is not None:
            info["cubic_fallback"] = True
    S_out = (S - 1) * R + 1
    t = np.arange(S_out) / R
    x = lr.data.astype(np.float64)
    if kind == "nearest":
        idx = np.floor(t + 0.5 - 1e-9).astype(int)
        out = x[np.clip(idx, 0, S - 1)]
    elif kind == "linear":
        k = np.minimum(np.floor(t).astype(int), S - 2)
        frac = (t - k)[:, None, None]
        out = (1 - frac) * x[k] + frac * x[k + 1]
    elif kind == "cubic":
        out = CubicSpline(np.arange(S), x, axis=0, bc_type="not-a-knot")(t)
    else:
        raise ValidationError(f"unknown interpolation kind {kind!r}")
    if lr.intensity_domain == IntensityDomain.NORMALIZED_UNIT:
        out = np.clip(out, 0.0, 1.0)
    out = out.astype(np.float32)
    out[::R] = lr.data
    ds, dh, dw = lr.spacing
    return Volume(out, (ds / R, dh, dw), lr.intensity_domain)


# Reports ---------------------------------------------------------------------


METRICS = ("psnr", "ssim_a", "ssim_c", "ssim_s")


def aggregate_rows(rows: list[dict]) -> dict:
    """Per-method means and population standard deviations.

    Rows with infinite PSNR are left out of the PSNR statistics and counted in
    ``n_psnr_infinite``; failed rows are counted in ``n_failed``.
    """
    out = {}
    for name in dict.fromkeys(r["method"] for r in rows):
        mine = [r for r in rows if r["method"] == name]
        ok = [r for r in mine if r["status"] == "ok"]
        agg = {"n": len(mine), "n_failed": len(mine) - len(ok)}
        for key in METRICS:
            vals = [r[key] for r in ok if r[key] is not None]
            agg[f"{key}_mean"] = float(np.mean(vals)) if vals else None
            agg[f"{key}_std"] = float(np.std(vals)) if vals else None
        agg["n_psnr_infinite"] = sum(1 for r in ok if r.get("psnr_infinite"))
        lat = [r["latency_ms"] for r in ok if r.get("latency_ms") is not None]
        agg["latency_ms_median"] = float(statistics.median(lat)) if lat else None
        out[name] = agg
    return out


@dataclass
class EvalReport:
    rows: list[dict]
    scale: int
    fingerprint: str = ""
    timestamp: str = ""
    notes: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict:
        return aggregate_rows(self.rows)

    def to_dict(self) -> dict:
        return {
            "format": "i3net-eval-report",
            "version": 1,
            "scale": self.scale,
            "fingerprint": self.fingerprint,
            "timestamp": self.timestamp,
            "notes": self.notes,
            "rows": self.rows,
            "aggregates": self.aggregates,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["rows"], d["scale"], d["fingerprint"], d["timestamp"], d.get("notes", {}))

    def write(self, path, csv_path=None) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
        if csv_path is not None:
            self.write_csv(csv_path)

    def write_csv(self, path) -> None:
        """One line per method in the column layout Method, PSNR, SSIM_a, SSIM_c, SSIM_s."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["Method", "PSNR", "SSIM_a", "SSIM_c", "SSIM_s"])
            for name, agg in self.aggregates.items():
                w.writerow([name] + [_fmt(agg[f"{k}_mean"]) for k in METRICS])


def read_report(path) -> EvalReport:
    with open(path) as fh:
        return EvalReport.from_json(fh.read())


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


def time_call(fn, *args, repeats: int = 10, warmup: int = 3):
    """Return ``(result, median_ms)`` over ``repeats`` timed calls after ``warmup`` untimed ones."""
    for _ in range(warmup):
        fn(*args)
    times = []
    result = None
    for _ in range(max(repeats, 1)):
        t0 = time.perf_counter()
        result = fn(*args)
        times.append((time.perf_counter() - t0) * 1e3)
    return result, float(statistics.median(times))


def evaluate(
    methods,
    volumes,
    R: int,
    *,
    names=None,
    repeats: int = 10,
    warmup: int = 3,
    deterministic: bool = False,
    fingerprint_data: dict | None = None,
) -> EvalReport:
    """Decimate each HR volume by ``R``, run every method and score it against the original.

    ``methods`` is a sequence of ``(name, fn)`` with ``fn(lr_volume) -> Volume``.
    A method that raises gets a ``failed`` row and evaluation continues.
    In deterministic mode no wall-clock quantity enters the report.
    """
    rows = []
    names = names or [f"vol{i:03d}" for i in range(len(volumes))]
    for vname, vol in zip(names, volumes):
        lr, hr = downsample_axial(vol, R)
        for mname, fn in methods:
            row = {"volume": vname, "method": mname, "status": "ok", "error": None, "flags": {}}
            try:
                if deterministic:
                    pred, latency = fn(lr), None
                else:
                    pred, latency = time_call(fn, lr, repeats=repeats, warmup=warmup)
                info = {}
                p = psnr(pred, hr)
                row["psnr_infinite"] = math.isinf(p)
                row["psnr"] = None if math.isinf(p) else p
                for key, view in (("ssim_a", "axial"), ("ssim_c", "coronal"), ("ssim_s", "sagittal")):
                    row[key] = ssim_view(pred, hr, view, info=info)
                if info.get("padded"):
                    row["flags"]["ssim_reflect_padded"] = True
                row["latency_ms"] = latency
            except Exception as exc:  # noqa: BLE001 - a failing method must not stop the run
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}", psnr=None,
                           psnr_infinite=False, ssim_a=None, ssim_c=None, ssim_s=None, latency_ms=None)
            rows.append(row)
    fp = {"R": R, "methods": [m for m, _ in methods], "volumes": [list(v.shape) for v in volumes]}
    fp.update(fingerprint_data or {})
    digest = hashlib.sha256(json.dumps(fp, sort_keys=True).encode()).hexdigest()
    if deterministic:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(int(os.environ.get("SOURCE_DATE_EPOCH", "0"))))
    else:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    return EvalReport(rows, int(R), digest, stamp, {"deterministic": deterministic})
