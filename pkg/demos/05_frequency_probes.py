"""Look inside an I2Block: high-frequency energy, channel redundancy and receptive fields.

    python demos/05_frequency_probes.py [checkpoint]

Without a checkpoint a freshly initialised desk model is probed.
"""

import sys

import torch

from i3net.analysis import block_taps, energy_curve, feature_redundancy, receptive_probe, support_box, uniform_curve
from i3net.checkpoint import load_checkpoint
from i3net.model import I3Net, ModelConfig
from i3net.volformat import PhantomSpec, downsample_axial, gen_phantom, normalize_intensity

model = load_checkpoint(sys.argv[1])[0] if len(sys.argv) > 1 else I3Net(ModelConfig.desk(), seed=0)
vol = normalize_intensity(gen_phantom(PhantomSpec(seed=901, size=(19, 64, 64))))
lr, _ = downsample_axial(vol, model.config.R)
x = torch.from_numpy(lr.data[: model.config.S_in].copy())[None]

rhos = [0.2, 0.4, 0.5, 0.6, 0.8, 1.0]
print("rho      " + "  ".join(f"{r:6.2f}" for r in rhos))
print("uniform  " + "  ".join(f"{v:6.3f}" for _, v in uniform_curve(64, 64, rhos)))
for k, rec in enumerate(block_taps(model, x), 1):
    for name in ("input", "inter", "intra", "output"):
        if name in rec:
            curve = energy_curve(rec[name], rhos)
            print(f"b{k} {name:6s}" + "  ".join(f"{v:6.3f}" for _, v in curve))
    print(f"b{k} redundancy of the output: {feature_redundancy(rec['output']):.3f}")

block = model.i2blocks()[0]
for name, module in (("inter", block.inter), ("intra", block.intra)):
    if module is not None:
        sal = receptive_probe(module, (1, model.config.C, 64, 64), normalize=False)
        print(f"{name} branch receptive field: {support_box(sal)} pixels")
