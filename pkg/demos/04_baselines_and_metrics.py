"""Score the classical baselines on held-out phantoms and write the report.

    python demos/04_baselines_and_metrics.py
"""

import tempfile
from pathlib import Path

from i3net.evaluation import baseline_interp, evaluate
from i3net.volformat import PhantomSpec, gen_phantom, normalize_intensity

vols = [normalize_intensity(gen_phantom(PhantomSpec(seed=s, size=(19, 64, 64)))) for s in range(900, 905)]

for R in (2, 3, 6):
    methods = [(k, lambda lr, k=k: baseline_interp(lr, R, k)) for k in ("nearest", "linear", "cubic")]
    report = evaluate(methods, vols, R, repeats=3, warmup=1)
    print(f"R={R}")
    for name, agg in report.aggregates.items():
        print(f"  {name:8s} PSNR {agg['psnr_mean']:6.2f} dB  SSIM axial {agg['ssim_a_mean']:.4f}  "
              f"coronal {agg['ssim_c_mean']:.4f}  sagittal {agg['ssim_s_mean']:.4f}  "
              f"{agg['latency_ms_median']:.1f} ms")

with tempfile.TemporaryDirectory() as tmp:
    report.write(Path(tmp) / "report.json", Path(tmp) / "report.csv")
    print((Path(tmp) / "report.csv").read_text())
