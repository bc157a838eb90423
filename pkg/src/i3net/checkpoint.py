"""Checkpoint archives.

A checkpoint is an uncompressed zip with fixed member timestamps, so equal
contents give byte-identical files. Members:

``config.json``
    canonical JSON of the :class:`ModelConfig`
``params.bin``
    parameter tensors back to back, little-endian float32, C order
``manifest.json``
    one entry per tensor (name, shape, offset, nbytes, sha256) and the sha256
    of every other member
``optimizer.bin`` / ``train_state.json``
    present when training state was saved (Adam moments and loop state)

See ``docs/formats.md`` for the byte-level description.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile

import numpy as np
import torch

from .model import I3Net, ModelConfig

FORMAT = "i3net-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    """A checkpoint archive is missing an entry or fails an integrity check."""

    def __init__(self, entry: str, message: str):
        super().__init__(f"{entry}: {message}")
        self.entry = entry


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _pack(named: list[tuple[str, torch.Tensor]]):
    buf = io.BytesIO()
    entries = []
    for name, t in named:
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "<f4",
                "offset": buf.tell(),
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        buf.write(raw)
    return buf.getvalue(), entries


def _unpack(blob: bytes, entries: list[dict], member: str) -> dict[str, torch.Tensor]:
    out = {}
    for e in entries:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{member}:{e['name']}", "payload truncated")
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise CheckpointError(f"{member}:{e['name']}", "sha256 mismatch")
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return out


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, model: I3Net, optimizer: torch.optim.Optimizer | None = None, state: dict | None = None):
    """Write ``model`` (and optionally Adam moments plus loop ``state``) to ``path``."""
    names = [n for n, _ in model.named_parameters()]
    params_blob, param_entries = _pack(list(model.named_parameters()))
    members = {"config.json": model.config.to_json().encode(), "params.bin": params_blob}
    manifest = {"format": FORMAT, "version": VERSION, "tensors": param_entries}
    if optimizer is not None:
        opt_named, steps = [], {}
        by_id = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = by_id[id(p)]
                opt_named.append((f"exp_avg/{n}", st["exp_avg"]))
                opt_named.append((f"exp_avg_sq/{n}", st["exp_avg_sq"]))
                steps[n] = float(st["step"])
        opt_blob, opt_entries = _pack(opt_named)
        members["optimizer.bin"] = opt_blob
        manifest["optimizer"] = {"tensors": opt_entries, "steps": steps, "param_order": names}
    if state is not None:
        members["train_state.json"] = _canonical(state)
    manifest["members"] = {k: hashlib.sha256(v).hexdigest() for k, v in sorted(members.items())}
    with zipfile.ZipFile(path, "w") as zf:
        for name in sorted(members):
            _write_member(zf, name, members[name])
        _write_member(zf, "manifest.json", _canonical(manifest))


def load_checkpoint(path) -> tuple[I3Net, dict | None]:
    """Load a checkpoint; returns ``(model, training)`` where ``training`` is ``None``
    or a dict with ``optimizer_state`` (for :meth:`apply_optimizer_state`) and ``state``.

    Every member is verified before anything is constructed.
    """
    try:
        with zipfile.ZipFile(path) as zf:
            present = set(zf.namelist())
            for required in ("manifest.json", "config.json", "params.bin"):
                if required not in present:
                    raise CheckpointError(required, "missing from archive")
            members = {n: zf.read(n) for n in present}
    except zipfile.BadZipFile as exc:
        raise CheckpointError("archive", f"not a readable zip ({exc})") from exc
    except OSError as exc:
        raise CheckpointError("archive", str(exc)) from exc

    try:
        manifest = json.loads(members["manifest.json"])
    except ValueError as exc:
        raise CheckpointError("manifest.json", "invalid JSON") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError("manifest.json", f"unexpected format {manifest.get('format')!r}")
    for name, digest in manifest.get("members", {}).items():
        if name not in members:
            raise CheckpointError(name, "listed in manifest but missing")
        if hashlib.sha256(members[name]).hexdigest() != digest:
            raise CheckpointError(name, "sha256 mismatch")

    try:
        cfg = ModelConfig.from_dict(json.loads(members["config.json"]))
    except ValueError as exc:
        raise CheckpointError("config.json", str(exc)) from exc
    params = _unpack(members["params.bin"], manifest["tensors"], "params.bin")
    model = I3Net(cfg)
    expected = dict(model.named_parameters())
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError("params.bin", f"missing tensors {sorted(missing)[:3]}")
    with torch.no_grad():
        for n, p in expected.items():
            if tuple(params[n].shape) != tuple(p.shape):
                raise CheckpointError(f"params.bin:{n}", f"shape {tuple(params[n].shape)} != {tuple(p.shape)}")
            p.copy_(params[n])

    training = None
    if "optimizer" in manifest or "train_state.json" in members:
        training = {"optimizer_state": None, "state": None}
        if "optimizer" in manifest:
            if "optimizer.bin" not in members:
                raise CheckpointError("optimizer.bin", "missing from archive")
            opt = manifest["optimizer"]
            training["optimizer_state"] = {
                "moments": _unpack(members["optimizer.bin"], opt["tensors"], "optimizer.bin"),
                "steps": opt["steps"],
            }
        if "train_state.json" in members:
            training["state"] = json.loads(members["train_state.json"])
    return model, training


def apply_optimizer_state(model: I3Net, optimizer: torch.optim.Optimizer, saved: dict) -> None:
    """Restore Adam moments saved by :func:`save_checkpoint` into ``optimizer``."""
    for n, p in model.named_parameters():
        if n not in saved["steps"]:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(saved["steps"][n], dtype=torch.float32),
            "exp_avg": saved["moments"][f"exp_avg/{n}"].clone(),
            "exp_avg_sq": saved["moments"][f"exp_avg_sq/{n}"].clone(),
        }
