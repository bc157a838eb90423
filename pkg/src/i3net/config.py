"""Run configuration: one flat, schema-versioned JSON document shared by all subcommands."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig
from .train import TrainConfig

SCHEMA_VERSION = 1


class ConfigValidationError(ValueError):
    """Every problem found while validating a run configuration."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


def _int(lo=None, hi=None):
    return (int, lo, hi)


def _float(lo=None, hi=None):
    return (float, lo, hi)


# key -> (default, kind, lower bound, upper bound, help)
SCHEMA: dict[str, tuple] = {
    "schema_version": (SCHEMA_VERSION, *_int(1, 1), "configuration schema version"),
    # model
    "C": (32, *_int(4, 4096), "feature channels, multiple of 4"),
    "n_blocks": (4, *_int(0, 256), "number of I2Blocks"),
    "cvb_positions": ([2], list, None, None, "block indices followed by a cross-view block"),
    "p": (8, *_int(1, 1024), "frequency window size"),
    "S_in": (4, *_int(2, 64), "LR slices per network input"),
    "R": (2, *_int(1, 64), "axial upsampling factor"),
    "token_expansion": (1, *_int(1, 16), "hidden expansion of the token MLP"),
    "channel_expansion": (1, *_int(1, 16), "hidden expansion of the channel MLP"),
    "inter": ("shuffle", str, None, None, "inter-slice branch: shuffle, plain or none"),
    "intra": (True, bool, None, None, "enable the frequency-domain intra-slice branch"),
    "global_residual": (True, bool, None, None, "add linear axial interpolation to the output"),
    # training
    "epochs": (50, *_int(0, 10**7), "training epochs"),
    "batch_size": (4, *_int(1, 4096), "patches per optimizer step"),
    "lr0": (3e-4, *_float(0.0, 1.0), "initial learning rate"),
    "seed": (0, *_int(0, 2**63 - 1), "seed for weight init and patch sampling"),
    "patches_per_volume_per_epoch": (1, *_int(1, 1024), "patches drawn from each volume per epoch"),
    "crop": (64, *_int(16, 8192), "centre-crop size of training patches"),
    "checkpoint_interval": (0, *_int(0, 10**7), "epochs between checkpoints (0 = last only)"),
    "val_interval": (0, *_int(0, 10**7), "epochs between validation passes (0 = never)"),
    "grad_clip": (None, float, 0.0, None, "gradient norm clip (null = off)"),
    "workers": (0, *_int(0, 256), "patch-sampling worker threads"),
    "augment": (False, bool, None, None, "random in-plane flips/rotations and slice-order reversal of patches"),
    "deterministic": (False, bool, None, None, "deterministic kernels and wall-clock-free reports"),
    # data
    "train_dir": (None, str, None, None, "directory of RVL1 training volumes (null = phantoms)"),
    "val_dir": (None, str, None, None, "directory of RVL1 validation volumes"),
    "n_train_phantoms": (20, *_int(1, 10**6), "phantoms generated when train_dir is null"),
    "n_val_phantoms": (0, *_int(0, 10**6), "phantoms generated when val_dir is null"),
    "phantom_size": ([19, 64, 64], list, None, None, "phantom size S, H, W"),
    "phantom_seed": (1000, *_int(0, 2**63 - 1), "seed of the first generated phantom"),
    "hu_lo": (-1024.0, float, None, None, "HU mapped to 0 by normalisation"),
    "hu_hi": (3071.0, float, None, None, "HU mapped to 1 by normalisation"),
}


@dataclass(frozen=True)
class RunConfig:
    schema_version: int
    C: int
    n_blocks: int
    cvb_positions: tuple
    p: int
    S_in: int
    R: int
    token_expansion: int
    channel_expansion: int
    inter: str
    intra: bool
    global_residual: bool
    epochs: int
    batch_size: int
    lr0: float
    seed: int
    patches_per_volume_per_epoch: int
    crop: int
    checkpoint_interval: int
    val_interval: int
    grad_clip: float | None
    workers: int
    augment: bool
    deterministic: bool
    train_dir: str | None
    val_dir: str | None
    n_train_phantoms: int
    n_val_phantoms: int
    phantom_size: tuple
    phantom_seed: int
    hu_lo: float
    hu_hi: float

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            C=self.C, n_blocks=self.n_blocks, cvb_positions=tuple(self.cvb_positions), p=self.p,
            S_in=self.S_in, R=self.R, token_expansion=self.token_expansion,
            channel_expansion=self.channel_expansion, inter=self.inter, intra=self.intra,
            global_residual=self.global_residual,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr0=self.lr0, seed=self.seed,
            patches_per_volume_per_epoch=self.patches_per_volume_per_epoch, crop=self.crop, R=self.R,
            S_in=self.S_in, checkpoint_interval=self.checkpoint_interval, val_interval=self.val_interval,
            grad_clip=self.grad_clip, workers=self.workers, augment=self.augment,
        )

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["cvb_positions"] = list(self.cvb_positions)
        d["phantom_size"] = list(self.phantom_size)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write_snapshot(self, path) -> None:
        Path(path).write_text(self.to_json())


def _coerce(key, value, problems):
    default, kind, lo, hi, _ = SCHEMA[key]
    if value is None:
        if default is None:
            return None
        problems.append(f"{key}: null is not allowed")
        return default
    if kind is bool:
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            value = value.lower() in ("true", "1")
        if not isinstance(value, bool):
            problems.append(f"{key}: expected a boolean, got {value!r}")
            return default
        return value
    if kind is int:
        if isinstance(value, str):
            try:
                value = int(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{key}: expected an integer, got {value!r}")
            return default
    elif kind is float:
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{key}: expected a number, got {value!r}")
            return default
        value = float(value)
    elif kind is str:
        if not isinstance(value, str):
            problems.append(f"{key}: expected a string, got {value!r}")
            return default
    elif kind is list:
        if isinstance(value, str):
            try:
                value = [int(v) for v in value.replace("x", ",").split(",") if v.strip()]
            except ValueError:
                problems.append(f"{key}: expected a list of integers, got {value!r}")
                return default
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            problems.append(f"{key}: expected a list of integers, got {value!r}")
            return default
        value = tuple(value)
    if lo is not None and value < lo:
        problems.append(f"{key}: {value} is below the minimum {lo}")
    if hi is not None and value > hi:
        problems.append(f"{key}: {value} is above the maximum {hi}")
    return value


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, the JSON file at ``path`` and ``overrides`` (highest precedence).

    All problems are collected and raised together as :class:`ConfigValidationError`.
    """
    problems: list[str] = []
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        if text.strip():
            try:
                raw = json.loads(text)
            except ValueError as exc:
                raise ConfigValidationError([f"{path}: not valid JSON ({exc})"]) from exc
            if not isinstance(raw, dict):
                raise ConfigValidationError([f"{path}: top level must be an object"])
    merged = dict(raw)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    for key in sorted(set(merged) - set(SCHEMA)):
        problems.append(f"{key}: unknown key")
    values = {}
    for key, spec in SCHEMA.items():
        values[key] = _coerce(key, merged[key], problems) if key in merged else (
            tuple(spec[0]) if isinstance(spec[0], list) else spec[0]
        )

    if isinstance(values["C"], int) and values["C"] % 4:
        problems.append(f"C: {values['C']} must be divisible by 4 (pixel shuffle factor)")
    if isinstance(values["crop"], int) and isinstance(values["p"], int) and values["p"] > 0:
        if values["crop"] % values["p"]:
            problems.append(f"crop: {values['crop']} must be divisible by the window size p={values['p']}")
        if values["crop"] % 16:
            problems.append(f"crop: {values['crop']} must be divisible by 16")
    bad = [k for k in values["cvb_positions"] if not 1 <= k <= values["n_blocks"]]
    if bad:
        problems.append(f"cvb_positions: {list(bad)} outside [1, n_blocks={values['n_blocks']}]")
    if values["inter"] not in ("shuffle", "plain", "none"):
        problems.append(f"inter: {values['inter']!r} must be one of shuffle, plain, none")
    if len(values["phantom_size"]) != 3 or any(v < 1 for v in values["phantom_size"]):
        problems.append(f"phantom_size: expected three positive integers, got {list(values['phantom_size'])}")
    if not values["hu_lo"] < values["hu_hi"]:
        problems.append("hu_lo: must be below hu_hi")
    if not values["lr0"] > 0:
        problems.append("lr0: must be > 0")
    if problems:
        raise ConfigValidationError(problems)
    return RunConfig(**values)
