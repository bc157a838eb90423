"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
The training criteria take several minutes each on one CPU core.
"""

import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from i3net.analysis import block_taps, energy_curve, hf_energy_ratio, spectral_energy
from i3net.evaluation import baseline_interp, evaluate, psnr, ssim_view
from i3net.model import I3Net, ModelConfig, linear_interp_matrix, synthesize_volume
from i3net.nnops import (
    dct2,
    gelu,
    grad_check,
    idct2,
    layer_norm,
    pixel_shuffle2,
    pixel_unshuffle2,
    window_partition,
    window_reverse,
)
from i3net.train import TrainConfig, l1_loss, train_loop
from i3net.volformat import IntensityDomain, PhantomSpec, Volume, downsample_axial, gen_phantom, normalize_intensity

RESULTS: dict[int, tuple[bool, str]] = {}

# shared setup of the generalization and ablation criteria
TRAIN_SEEDS = range(100, 120)
TEST_SEEDS = range(900, 905)
PHANTOM_SIZE = (19, 64, 64)
GEN_TRAIN = dict(epochs=200, batch_size=4, lr0=1e-3, crop=64, seed=0, augment=True)
VARIANTS = {
    "full": {},
    "inter-only": dict(intra=False, cvb_positions=()),
    "plain-conv": dict(inter="plain", intra=False, cvb_positions=()),
}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)


def phantoms(seeds):
    return [normalize_intensity(gen_phantom(PhantomSpec(seed=s, size=PHANTOM_SIZE))) for s in seeds]


def train_variant(name, train_vols):
    cfg = ModelConfig.desk(R=2, **VARIANTS[name])
    model = I3Net(cfg, seed=0)
    train_loop(model, train_vols, TrainConfig(R=2, **GEN_TRAIN))
    return model


@pytest.fixture(scope="module")
def gen_data():
    return phantoms(TRAIN_SEEDS), phantoms(TEST_SEEDS)


@pytest.fixture(scope="module")
def trained_models(gen_data):
    train_vols, _ = gen_data
    cache = {}

    def get(name):
        if name not in cache:
            t0 = time.perf_counter()
            cache[name] = (train_variant(name, train_vols), time.perf_counter() - t0)
        return cache[name]

    return get


# 1 -------------------------------------------------------------------------


def test_criterion_1_numerical_ops():
    t0 = time.perf_counter()
    problems = []
    g = torch.Generator().manual_seed(0)
    for _ in range(10):
        x = torch.rand(2, 3, 16, 32, generator=g)
        X = dct2(x)
        if not torch.allclose(idct2(X), x, rtol=1e-5, atol=1e-5):
            problems.append("dct inversion")
        e_spec, e_spat = (X.double() ** 2).sum().item(), (x.double() ** 2).sum().item()
        if abs(e_spec - e_spat) > 1e-5 * e_spat:
            problems.append("parseval")
        y = torch.rand(2, 3, 16, 32, generator=g)
        if not torch.allclose(dct2(0.3 * x - 2 * y), 0.3 * X - 2 * dct2(y), rtol=1e-5, atol=1e-5):
            problems.append("linearity")
        if not torch.equal(pixel_shuffle2(pixel_unshuffle2(x)), x):
            problems.append("shuffle round trip")
        if not torch.equal(window_reverse(window_partition(x, 16)), x):
            problems.append("window round trip")

    worst = 0.0
    ops = [
        (pixel_unshuffle2, (1, 2, 4, 4)), (pixel_shuffle2, (1, 4, 3, 3)), (dct2, (1, 2, 8, 8)),
        (idct2, (1, 2, 8, 8)), (lambda x: window_reverse(window_partition(x, 4)) ** 2, (1, 2, 8, 8)),
        (lambda x: layer_norm(x, 1), (2, 4, 3, 3)), (gelu, (3, 5)),
    ]
    for fn, shape in ops:
        rep = grad_check(fn, torch.randn(*shape, generator=g, dtype=torch.float64))
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            problems.append(f"grad_check {rep}")

    net = I3Net(ModelConfig(C=8, n_blocks=2, cvb_positions=(1,), p=8, R=2), seed=0).double()
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.3)
    rep = grad_check(net, torch.rand(1, 4, 16, 16, generator=g, dtype=torch.float64))
    worst = max(worst, rep.max_rel_error)
    if not rep.passed:
        problems.append(f"full network grad_check {rep.max_rel_error:.2e}")

    elapsed = time.perf_counter() - t0
    if elapsed >= 120:
        problems.append(f"runtime {elapsed:.0f}s")
    ok = not problems
    record(1, ok, f"worst grad rel err {worst:.2e}, {elapsed:.1f}s {problems or ''}")
    assert ok, problems


# 2 -------------------------------------------------------------------------


def test_criterion_2_structure():
    problems = []
    for R in (1, 2, 4, 6):
        cfg = ModelConfig.desk(R=R)
        net = I3Net(cfg, seed=R)
        for crop in (32, 64):
            x = torch.rand(1, 4, crop, crop)
            with torch.no_grad():
                y = net(x)
            if y.shape != (1, 3 * R + 1, crop, crop):
                problems.append(f"shape R={R} crop={crop}: {tuple(y.shape)}")
            ref = torch.einsum("ts,nshw->nthw", torch.tensor(linear_interp_matrix(4, R), dtype=torch.float32), x)
            if not torch.equal(y, ref):
                problems.append(f"identity at init R={R} crop={crop}")
            if not torch.equal(y[:, ::R], x):
                problems.append(f"anchors R={R}")
        lr = Volume(np.random.default_rng(R).random((9, 32, 32), dtype=np.float32), (1.0, 1.0, 1.0),
                    IntensityDomain.NORMALIZED_UNIT)
        out = synthesize_volume(lr, net)
        if out.shape[0] != 8 * R + 1 or not np.array_equal(out.data[::R], lr.data):
            problems.append(f"volume synthesis R={R}")
    if ModelConfig.desk(R=6).S_out != 19:
        problems.append("4 -> 19 at R=6")
    ok = not problems
    record(2, ok, f"R in 1,2,4,6 x crop in 32,64 {problems or 'all exact'}")
    assert ok, problems


# 3 -------------------------------------------------------------------------


def test_criterion_3_overfit():
    t0 = time.perf_counter()
    vol = normalize_intensity(gen_phantom(PhantomSpec(seed=7, size=(19, 64, 64))))
    model = I3Net(ModelConfig.desk(R=2), seed=0)
    # one volume, one patch per step: 2000 epochs are 2000 steps
    cfg = TrainConfig(epochs=2000, batch_size=1, lr0=1e-3, crop=64, R=2, seed=0)
    _, state = train_loop(model, [vol], cfg)
    losses = [h["loss"] for h in state.history]
    # batch 1 is noisy, so both ends average 10 steps
    first, last = float(np.mean(losses[:10])), float(np.mean(losses[-10:]))
    lr, hr = downsample_axial(vol, 2)
    base = psnr(baseline_interp(lr, 2, "linear"), hr)
    net = psnr(synthesize_volume(lr, model), hr)
    elapsed = time.perf_counter() - t0
    ok = len(losses) == 2000 and last < first / 3 and net >= base + 1.0 and elapsed < 15 * 60
    record(3, ok, f"L1 {first:.5f} -> {last:.5f}; PSNR net {net:.2f} vs linear {base:.2f} dB; {elapsed:.0f}s")
    assert ok


# 4 -------------------------------------------------------------------------


def _scores(model, test_vols):
    methods = [("linear", lambda lr: baseline_interp(lr, 2, "linear")), ("net", lambda lr: synthesize_volume(lr, model))]
    return evaluate(methods, test_vols, 2, deterministic=True).aggregates


def test_criterion_4_generalization(gen_data, trained_models):
    _, test_vols = gen_data
    model, seconds = trained_models("full")
    agg = _scores(model, test_vols)
    lin, net = agg["linear"], agg["net"]
    gain = net["psnr_mean"] - lin["psnr_mean"]
    ok = gain >= 0.5 and net["ssim_a_mean"] >= lin["ssim_a_mean"] and seconds < 3600
    record(4, ok, f"PSNR net {net['psnr_mean']:.2f} vs linear {lin['psnr_mean']:.2f} (+{gain:.2f} dB); "
                  f"SSIM_a {net['ssim_a_mean']:.5f} vs {lin['ssim_a_mean']:.5f}; train {seconds:.0f}s")
    assert ok


# 5 -------------------------------------------------------------------------


def test_criterion_5_ablation_order(gen_data, trained_models):
    _, test_vols = gen_data
    scores = {}
    for name in VARIANTS:
        model, _ = trained_models(name)
        scores[name] = _scores(model, test_vols)["net"]["psnr_mean"]
    gaps = [scores["full"] - scores["inter-only"], scores["inter-only"] - scores["plain-conv"]]
    ok = all(g >= -0.2 for g in gaps)
    record(5, ok, "  ".join(f"{k} {v:.2f}" for k, v in scores.items()) + f"  gaps {gaps[0]:+.2f} {gaps[1]:+.2f} dB")
    assert ok


# 6 -------------------------------------------------------------------------


def test_criterion_6_frequency_probe(gen_data, trained_models):
    _, test_vols = gen_data
    model, _ = trained_models("full")
    lr, _ = downsample_axial(test_vols[0], 2)
    x = torch.from_numpy(lr.data[:4].copy())[None]
    problems, pairs = [], []
    rhos = [0.1 * k for k in range(1, 11)]
    for k, rec in enumerate(block_taps(model, x), 1):
        for name, t in rec.items():
            vals = [v for _, v in energy_curve(t, rhos)]
            if any(a > b for a, b in zip(vals, vals[1:])):
                problems.append(f"block {k} {name} curve not monotone")
            spec, spat = spectral_energy(t)
            if abs(spec - spat) > 1e-4 * spat:
                problems.append(f"block {k} {name} parseval")
        r_in, r_intra = hf_energy_ratio(rec["input"], 0.5), hf_energy_ratio(rec["intra"], 0.5)
        pairs.append((r_in, r_intra))
        if r_intra < r_in:
            problems.append(f"block {k}: intra {r_intra:.4f} < input {r_in:.4f}")
    ok = not problems
    record(6, ok, "hf@0.5 input->intra " + ", ".join(f"{a:.4f}->{b:.4f}" for a, b in pairs) + f" {problems or ''}")
    assert ok, problems


# 7 -------------------------------------------------------------------------


def test_criterion_7_metric_oracles():
    g = np.random.default_rng(0)
    worst_psnr = worst_l1 = 0.0
    for _ in range(50):
        a, b = g.random((3, 8, 8)), g.random((3, 8, 8))
        fa, fb = a.ravel().tolist(), b.ravel().tolist()
        mse = math.fsum((x - y) ** 2 for x, y in zip(fa, fb)) / len(fa)
        worst_psnr = max(worst_psnr, abs(psnr(a, b) - 10 * math.log10(1.0 / mse)))
        l1 = math.fsum(abs(x - y) for x, y in zip(fa, fb)) / len(fa)
        worst_l1 = max(worst_l1, abs(l1_loss(torch.from_numpy(a), torch.from_numpy(b)).item() - l1))
    x = g.random((6, 16, 16))
    ssim_ok = all(ssim_view(x, x, v) == 1.0 for v in ("axial", "coronal", "sagittal"))
    lr = Volume(g.random((6, 16, 16), dtype=np.float32), (1.0, 1.0, 1.0), IntensityDomain.NORMALIZED_UNIT)
    anchors_ok = all(
        baseline_interp(lr, R, kind).data[::R].tobytes() == lr.data.tobytes()
        for kind in ("nearest", "linear", "cubic") for R in (1, 2, 3, 6)
    )
    ok = worst_psnr <= 1e-6 and worst_l1 <= 1e-6 and ssim_ok and anchors_ok
    record(7, ok, f"psnr err {worst_psnr:.1e}, l1 err {worst_l1:.1e}, ssim(x,x)=1 {ssim_ok}, anchors {anchors_ok}")
    assert ok


# 8 -------------------------------------------------------------------------


def _cli(*args, env):
    return subprocess.run([sys.executable, "-m", "i3net", *args], env=env, capture_output=True, text=True, check=True)


def test_criterion_8_determinism(tmp_path):
    env = dict(os.environ, I3NET_DETERMINISTIC="1")
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"C": 8, "n_blocks": 2, "cvb_positions": [1], "epochs": 2, "batch_size": 2,
                               "n_train_phantoms": 4, "phantom_size": [13, 64, 64], "workers": 2}))
    data = tmp_path / "data"
    data.mkdir()
    for s in (50, 51):
        _cli("gen-phantom", "--seed", str(s), "--size", "13x64x64", "--out", str(data / f"v{s}.rvl"), env=env)
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        _cli("train", "--config", str(cfg), "--seed", "3", "--out", str(out), env=env)
        _cli("eval", "--checkpoint", str(out / "last.ckpt"), "--data", str(data), "--scale", "2",
             "--report", str(out / "report.json"), env=env)
        blobs.append(((out / "last.ckpt").read_bytes(), (out / "report.json").read_bytes()))
    same_ckpt = blobs[0][0] == blobs[1][0]
    same_report = blobs[0][1] == blobs[1][1]
    ok = same_ckpt and same_report
    record(8, ok, f"checkpoints identical {same_ckpt}, reports identical {same_report}")
    assert ok


# 9 -------------------------------------------------------------------------


def test_criterion_9_bench(tmp_path):
    medians = []
    for run in ("a", "b"):
        out = tmp_path / f"{run}.json"
        _cli("bench", "--shape", "4x256x256", "--scale", "6", "--out", str(out), env=dict(os.environ))
        d = json.loads(out.read_text())
        assert d["output_shape"] == [19, 256, 256]
        medians.append(d["median_ms"])
    spread = abs(medians[0] - medians[1]) / min(medians)
    ok = spread <= 0.25
    record(9, ok, f"medians {medians[0]:.1f} / {medians[1]:.1f} ms, spread {spread:.1%}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-q"]))
