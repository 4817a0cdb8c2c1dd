import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wsworld.inr import (
    CoordinateGrid,
    DimensionError,
    FrequencyMask,
    InrArchitecture,
    flatten,
    fourier_embed,
    init_weights,
    nyquist_mask,
    param_count,
    render,
    unflatten,
)


def test_param_counts_match_layer_arithmetic():
    assert param_count(InrArchitecture()) == 961
    assert param_count(InrArchitecture(out_channels=3)) == 987
    assert param_count(InrArchitecture(depth=2)) == (26 * 12 + 12) + (12 * 1 + 1)


@given(
    depth=st.integers(2, 8),
    width=st.integers(1, 20),
    c=st.sampled_from([1, 3]),
    k=st.integers(1, 8),
    raw=st.booleans(),
)
def test_param_count_oracle(depth, width, c, k, raw):
    arch = InrArchitecture(depth, width, c, k, raw)
    d_in = 4 * k + (2 if raw else 0)
    dims = [d_in] + [width] * (depth - 1) + [c]
    assert param_count(arch) == sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(depth))


def test_invalid_architectures():
    for kw in ({"depth": 1}, {"width": 0}, {"fourier_bands": 0}, {"activation": "tanh"}):
        with pytest.raises(ValueError):
            InrArchitecture(**kw)


def test_unflatten_shapes_for_961():
    shapes = [tuple(w.shape) + tuple(b.shape) for w, b in unflatten(torch.zeros(961), InrArchitecture())]
    assert shapes == [(12, 26, 12)] + [(12, 12, 12)] * 4 + [(1, 12, 1)]


def test_unflatten_length_error_names_both_lengths():
    with pytest.raises(DimensionError, match="961.*960"):
        unflatten(torch.zeros(960), InrArchitecture())
    with pytest.raises(DimensionError):
        render(torch.zeros(962), CoordinateGrid(4, 4), InrArchitecture())


@given(seed=st.integers(0, 2**31 - 1), depth=st.integers(2, 6), width=st.integers(1, 16))
@settings(max_examples=30, deadline=None)
def test_flatten_unflatten_inverse(seed, depth, width):
    arch = InrArchitecture(depth=depth, width=width)
    g = torch.Generator().manual_seed(seed)
    layers = [(torch.randn(o, i, generator=g), torch.randn(o, generator=g)) for o, i in arch.layer_shapes()]
    back = unflatten(flatten(layers), arch)
    for (w, b), (w2, b2) in zip(layers, back):
        assert torch.equal(w, w2) and torch.equal(b, b2)
    z = torch.randn(arch.param_count(), generator=g)
    assert torch.equal(flatten(unflatten(z, arch)), z)


def test_flat_layout_is_weights_then_bias_row_major():
    arch = InrArchitecture(depth=2, width=2, fourier_bands=1, include_raw_coords=False)
    z = torch.arange(float(arch.param_count()))
    (w0, b0), (w1, b1) = unflatten(z, arch)
    assert w0.tolist() == [[0, 1, 2, 3], [4, 5, 6, 7]]
    assert b0.tolist() == [8, 9]
    assert w1.tolist() == [[10, 11]] and b1.tolist() == [12]


def test_embed_at_origin():
    e = fourier_embed(torch.tensor([0.0, 0.0]), 6)
    assert e.shape == (26,)
    assert torch.all(e[0:24:2] == 0) and torch.all(e[1:24:2] == 1)
    assert e[24:].tolist() == [0.0, 0.0]


def test_embed_y_band_at_one():
    e = fourier_embed(torch.tensor([0.0, 1.0], dtype=torch.float64), 1, raw=False)
    assert e.shape == (4,)
    assert abs(e[2].item()) < 1e-15 and e[3].item() == -1.0


def test_embed_layout_oracle():
    x, y, k = 0.3, -0.7, 4
    e = fourier_embed(torch.tensor([x, y], dtype=torch.float64), k).tolist()
    want = []
    for v in (x, y):
        for b in range(k):
            want += [math.sin(2**b * math.pi * v), math.cos(2**b * math.pi * v)]
    want += [x, y]
    assert np.allclose(e, want, atol=1e-14)


@given(band=st.integers(0, 5), x=st.floats(-1, 1), y=st.floats(-1, 1))
def test_masked_band_entries_are_exact_zero(band, x, y):
    keep = tuple(k != band for k in range(6))
    e = fourier_embed(torch.tensor([x, y]), 6, FrequencyMask((True,) * 6, keep))
    assert e[12 + 2 * band].item() == 0.0 and e[12 + 2 * band + 1].item() == 0.0
    assert torch.all(e.abs() <= 1.0)


def test_mask_idempotent():
    mask = nyquist_mask(8, 16, 6)
    c = CoordinateGrid(5, 7).coords()
    once = fourier_embed(c, 6, mask)
    m = mask.multiplier(True)
    assert torch.equal(once * m, once)


@pytest.mark.parametrize(
    "h,w,y_keep,x_keep",
    [
        (32, 64, {0, 1, 2, 3}, {0, 1, 2, 3, 4}),
        (72, 72, set(range(6)), set(range(6))),
        (4, 4, {0}, {0}),
        (64, 64, set(range(5)), set(range(5))),
    ],
)
def test_nyquist_table(h, w, y_keep, x_keep):
    m = nyquist_mask(h, w, 6)
    assert {k for k, v in enumerate(m.y_keep) if v} == y_keep
    assert {k for k, v in enumerate(m.x_keep) if v} == x_keep


@given(n=st.integers(2, 5000), k=st.integers(1, 14))
def test_nyquist_matches_log_formula(n, k):
    m = nyquist_mask(n, n, k)
    for b in range(k):
        assert m.y_keep[b] == (b < math.log2(n) - 1)


def test_coordinate_grid_pixel_centres():
    c = CoordinateGrid(2, 4).coords(torch.float64)
    assert c.shape == (2, 4, 2)
    assert c[0, :, 0].tolist() == [-0.75, -0.25, 0.25, 0.75]
    assert c[:, 0, 1].tolist() == [-0.5, 0.5]


def _loop_render(z, arch, x, y):
    layers = unflatten(z.double(), arch)
    h = fourier_embed(torch.tensor([x, y], dtype=torch.float64), arch.fourier_bands, None, arch.include_raw_coords).tolist()
    for i, (w, b) in enumerate(layers):
        out = []
        for r in range(w.shape[0]):
            s = b[r].item()
            for c in range(w.shape[1]):
                s += w[r, c].item() * h[c]
            out.append(max(s, 0.0) if i < len(layers) - 1 else s)
        h = out
    return h


@pytest.mark.parametrize("c", [1, 3])
def test_render_matches_scalar_loop(c):
    arch = InrArchitecture(out_channels=c)
    z = torch.randn(arch.param_count(), generator=torch.Generator().manual_seed(c), dtype=torch.float64)
    grid = CoordinateGrid(9, 13)
    frame = render(z, grid, arch)
    coords = grid.coords(torch.float64)
    for i, j in [(0, 0), (4, 7), (8, 12)]:
        x, y = coords[i, j].tolist()
        assert np.allclose(frame[i, j].tolist(), _loop_render(z, arch, x, y), rtol=1e-10, atol=1e-12)


def test_render_zero_weights_and_resolution():
    arch = InrArchitecture()
    assert torch.equal(render(torch.zeros(961), CoordinateGrid(8, 8), arch), torch.zeros(8, 8, 1))
    z = init_weights(arch, torch.Generator().manual_seed(0))
    assert render(z, CoordinateGrid(16, 16), arch).shape == (16, 16, 1)
    assert torch.equal(render(z, CoordinateGrid(8, 8), arch), render(z, CoordinateGrid(8, 8), arch))


def test_render_batched_matches_single():
    arch = InrArchitecture(out_channels=3)
    z = torch.randn(2, 3, arch.param_count())
    grid = CoordinateGrid(5, 6)
    batch = render(z, grid, arch)
    assert batch.shape == (2, 3, 5, 6, 3)
    assert torch.allclose(batch[1, 2], render(z[1, 2], grid, arch), atol=1e-6)


def test_mask_band_count_mismatch():
    with pytest.raises(DimensionError):
        fourier_embed(torch.zeros(2), 6, FrequencyMask.all_pass(5))


def _above_nyquist_fraction(img: np.ndarray, train_h: int, train_w: int) -> float:
    power = np.abs(np.fft.fft2(img)) ** 2
    ny = np.abs(np.fft.fftfreq(img.shape[0]) * img.shape[0])
    nx = np.abs(np.fft.fftfreq(img.shape[1]) * img.shape[1])
    high = (ny[:, None] > train_h / 2) | (nx[None, :] > train_w / 2)
    return float(power[high].sum() / power.sum())


def test_masked_embedding_is_band_limited():
    """Every kept Fourier feature lies below the training Nyquist limit."""
    h, w, s = 16, 32, 8
    emb = fourier_embed(CoordinateGrid(s * h, s * w).coords(torch.float64), 6, nyquist_mask(h, w, 6), raw=False)
    for f in range(emb.shape[-1]):
        ch = emb[..., f].numpy()
        if np.any(ch != 0):
            assert _above_nyquist_fraction(ch, h, w) < 1e-12
    full = fourier_embed(CoordinateGrid(s * h, s * w).coords(torch.float64), 6, raw=False)
    assert max(_above_nyquist_fraction(full[..., f].numpy(), h, w) for f in range(24)) > 0.4
