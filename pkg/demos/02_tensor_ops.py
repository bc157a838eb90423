"""The building blocks: pixel (un)shuffle, the orthonormal DCT, windows, and a gradient check.

    python demos/02_tensor_ops.py
"""

import torch

from i3net.nnops import dct2, grad_check, idct2, pixel_shuffle2, pixel_unshuffle2, window_partition, window_reverse

x = torch.arange(16.0).reshape(1, 1, 4, 4)
print("4x4 plane:\n", x[0, 0])
print("unshuffled into 4 channels of 2x2:\n", pixel_unshuffle2(x)[0])
print("shuffle undoes it:", torch.equal(pixel_shuffle2(pixel_unshuffle2(x)), x))

plane = torch.rand(1, 1, 16, 16, dtype=torch.float64)
X = dct2(plane)
print(f"DC coefficient {X[0, 0, 0, 0]:.4f} = 16 * mean {16 * plane.mean():.4f}")
print(f"energy preserved: {(X**2).sum():.6f} vs {(plane**2).sum():.6f}")
print("inverse error:", (idct2(X) - plane).abs().max().item())

feat = torch.rand(2, 3, 32, 32)
ws = window_partition(feat, 16)
print("windows:", tuple(ws.data.shape), "(batch, windows, channels, p*p)")
print("reverse is exact:", torch.equal(window_reverse(ws), feat))

rep = grad_check(lambda t: idct2(torch.tanh(dct2(t))), torch.randn(1, 2, 8, 8))
print(f"grad check: max relative error {rep.max_rel_error:.2e} over {rep.n_checked} coordinates, passed={rep.passed}")
