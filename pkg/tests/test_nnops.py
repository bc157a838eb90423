import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from scipy.fft import dctn

from i3net.nnops import (
    ShapeError,
    WindowSeq,
    dct2,
    dct_matrix,
    gelu,
    grad_check,
    idct2,
    layer_norm,
    pixel_shuffle2,
    pixel_unshuffle2,
    window_partition,
    window_reverse,
)


def _rand(*shape, seed=0, dtype=torch.float64):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


# pixel shuffle


def test_unshuffle_matches_torch():
    x = _rand(2, 3, 8, 6)
    assert torch.equal(pixel_unshuffle2(x), F.pixel_unshuffle(x, 2))
    y = _rand(2, 12, 4, 5)
    assert torch.equal(pixel_shuffle2(y), F.pixel_shuffle(y, 2))


def test_unshuffle_channel_order():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    x = torch.tensor([[[[a, b], [c, d]]]])
    assert pixel_unshuffle2(x).reshape(-1).tolist() == [a, b, c, d]


@pytest.mark.parametrize("shape", [(1, 1, 2, 2), (2, 5, 16, 8), (3, 4, 32, 64)])
def test_shuffle_roundtrip_bitwise(shape):
    x = torch.rand(shape, generator=torch.Generator().manual_seed(3))
    assert torch.equal(pixel_shuffle2(pixel_unshuffle2(x)), x)
    y = torch.rand(shape[0], 4 * shape[1], shape[2], shape[3])
    assert torch.equal(pixel_unshuffle2(pixel_shuffle2(y)), y)


def test_shuffle_shape_errors():
    with pytest.raises(ShapeError):
        pixel_unshuffle2(torch.zeros(1, 1, 3, 4))
    with pytest.raises(ShapeError):
        pixel_shuffle2(torch.zeros(1, 6, 4, 4))


# DCT


def _dct_brute(x):
    n, m = x.shape
    out = np.zeros((n, m))
    for k in range(n):
        for l in range(m):
            s = 0.0
            for i in range(n):
                for j in range(m):
                    s += x[i, j] * math.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.cos(math.pi * (2 * j + 1) * l / (2 * m))
            ak = math.sqrt(1 / n) if k == 0 else math.sqrt(2 / n)
            al = math.sqrt(1 / m) if l == 0 else math.sqrt(2 / m)
            out[k, l] = ak * al * s
    return out


def test_dct_matches_brute_force_and_scipy():
    x = np.random.default_rng(0).standard_normal((6, 5))
    got = dct2(torch.from_numpy(x)).numpy()
    np.testing.assert_allclose(got, _dct_brute(x), atol=1e-12)
    np.testing.assert_allclose(got, dctn(x, type=2, norm="ortho"), atol=1e-12)


def test_dct_of_constant_plane():
    x = torch.full((1, 1, 16, 16), 2.0, dtype=torch.float64)
    X = dct2(x)
    assert X[0, 0, 0, 0].item() == pytest.approx(32.0, abs=1e-12)
    rest = X.clone()
    rest[0, 0, 0, 0] = 0
    assert rest.abs().max().item() < 1e-12


def test_dct_matrix_orthonormal():
    for n in (1, 2, 7, 16):
        d = dct_matrix(n, torch.float64)
        assert torch.allclose(d @ d.T, torch.eye(n, dtype=torch.float64), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_dct_inversion_and_parseval(seed):
    x = torch.rand(2, 3, 16, 32, generator=torch.Generator().manual_seed(seed))
    X = dct2(x)
    assert torch.allclose(idct2(X), x, atol=1e-5)
    assert abs((X.double() ** 2).sum().item() - (x.double() ** 2).sum().item()) <= 1e-5 * (x.double() ** 2).sum().item()


def test_dct_linearity():
    x, y = _rand(2, 2, 16, 16, seed=1), _rand(2, 2, 16, 16, seed=2)
    a, b = 0.7, -1.3
    assert torch.allclose(dct2(a * x + b * y), a * dct2(x) + b * dct2(y), atol=1e-5)


# windows


def test_window_roundtrip_and_order():
    x = torch.arange(2 * 3 * 8 * 12, dtype=torch.float32).reshape(2, 3, 8, 12)
    ws = window_partition(x, 4)
    assert ws.data.shape == (2, 6, 3, 16)
    # second window in row-major order starts at column 4
    assert torch.equal(ws.data[0, 1, 0].reshape(4, 4), x[0, 0, :4, 4:8])
    assert torch.equal(ws.data[1, 3, 2].reshape(4, 4), x[1, 2, 4:8, :4])
    assert torch.equal(window_reverse(ws), x)


def test_window_whole_plane():
    x = torch.rand(1, 2, 16, 16)
    ws = window_partition(x, 16)
    assert ws.data.shape == (1, 1, 2, 256)
    assert torch.equal(window_reverse(ws), x)


def test_window_errors():
    with pytest.raises(ShapeError):
        window_partition(torch.zeros(1, 1, 12, 16), 8)
    ws = window_partition(torch.zeros(1, 1, 16, 16), 8)
    with pytest.raises(ShapeError):
        window_reverse(WindowSeq(ws.data, 8, 16, 24))


# layer norm and gelu


def test_layer_norm_closed_form():
    x = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
    y = layer_norm(x, -1)
    expected = (x - 2.0) / math.sqrt(2.0 / 3.0 + 1e-5)
    assert torch.allclose(y, expected, atol=1e-12)


def test_layer_norm_matches_torch_with_affine():
    x = _rand(2, 5, 7)
    g, b = _rand(7, seed=4), _rand(7, seed=5)
    ref = F.layer_norm(x, (7,), g, b, 1e-5)
    assert torch.allclose(layer_norm(x, -1, g, b), ref, atol=1e-12)


def test_layer_norm_constant_input_is_finite():
    y = layer_norm(torch.full((1, 4, 8), 3.0), 1)
    assert torch.all(y == 0)


def test_gelu_matches_torch():
    x = torch.linspace(-6, 6, 101, dtype=torch.float64)
    assert torch.allclose(gelu(x), F.gelu(x), atol=1e-14)
    assert gelu(torch.tensor(0.0)).item() == 0.0


# gradient checks


@pytest.mark.parametrize(
    "name,fn,shape",
    [
        ("unshuffle", pixel_unshuffle2, (1, 2, 4, 4)),
        ("shuffle", pixel_shuffle2, (1, 4, 3, 3)),
        ("dct2", dct2, (1, 2, 8, 8)),
        ("idct2", idct2, (1, 1, 8, 4)),
        ("window", lambda x: window_reverse(window_partition(x, 4)) * x, (1, 2, 8, 8)),
        ("layer_norm", lambda x: layer_norm(x, 1), (2, 5, 3, 3)),
        ("gelu", gelu, (2, 3, 4)),
    ],
)
def test_grad_check_ops(name, fn, shape):
    rep = grad_check(fn, _rand(*shape, seed=7))
    assert rep.passed, (name, rep)
    assert rep.max_rel_error <= 1e-3


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2x g

    rep = grad_check(Bad.apply, _rand(3, 3))
    assert not rep.passed


def test_grad_check_reports_non_finite():
    rep = grad_check(lambda x: torch.log(x), torch.tensor([1e-5, 1.0], dtype=torch.float64), h=1e-3)
    assert not rep.passed
    assert "non-finite" in rep.message
