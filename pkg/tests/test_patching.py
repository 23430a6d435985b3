import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from oracles import naive_patch
from patchcast.errors import ConfigError, ShapeError
from patchcast.nn import Linear
from patchcast.patching import (
    PatchConfig,
    embed_patches,
    expand_to_series,
    expansion_index,
    multivariate_patch,
    num_patches,
)


@pytest.mark.parametrize("c,w,s,p", [(24, 12, 6, 4), (6, 12, 6, 1), (12, 12, 6, 2), (5, 3, 3, 2), (1, 1, 1, 2)])
def test_num_patches(c, w, s, p):
    assert num_patches(c, PatchConfig(w, s)) == p


def test_num_patches_too_short():
    with pytest.raises(ShapeError):
        num_patches(5, PatchConfig(12, 6))


@pytest.mark.parametrize("w,s", [(3, 4), (0, 1), (2, 0)])
def test_invalid_patch_config(w, s):
    with pytest.raises(ConfigError):
        PatchConfig(w, s)


def test_two_step_example():
    x1, x2, c = 1.5, -2.0, 7.0
    pt = multivariate_patch(np.array([[[x1], [x2]]]), np.array([[c]]), PatchConfig(2, 2))
    assert pt.num_patches == 2
    # patch 0 only sees the zero padding; patch 1 holds (x1, c), (x2, c)
    np.testing.assert_array_equal(pt.patches[0, 0], [0, 0, 0, 0])
    np.testing.assert_array_equal(pt.patches[0, 1], [x1, c, x2, c])


def test_first_patch_zero_slots():
    rng = np.random.default_rng(0)
    for w, s in [(12, 6), (4, 4), (5, 2), (3, 1)]:
        xt, xs = rng.normal(size=(2, 24, 3)), rng.normal(size=(2, 2))
        pt = multivariate_patch(xt, xs, PatchConfig(w, s))
        assert np.all(pt.patches[:, 0, : s * 5] == 0.0)


@given(st.integers(1, 4), st.integers(1, 30), st.integers(1, 4), st.integers(1, 3), st.data())
def test_statics_replicated(b, c, d, m, data):
    w = data.draw(st.integers(1, c + 1))
    s = data.draw(st.integers(1, w))
    if c + s < w:
        return
    rng = np.random.default_rng(c * 31 + w)
    xs = rng.normal(size=(b, m))
    pt = multivariate_patch(rng.normal(size=(b, c, d)), xs, PatchConfig(w, s))
    blocks = pt.patches.reshape(b, pt.num_patches, w, d + m)
    p = pt.num_patches
    for j in range(p):
        for slot in range(w):
            if j * s + slot >= s:  # not padding
                np.testing.assert_array_equal(blocks[:, j, slot, d:], xs)


def _random_shapes(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        c = int(rng.integers(1, 31))
        w = int(rng.integers(1, 13))
        s = int(rng.integers(1, w + 1))
        if c + s < w:
            continue
        out.append((int(rng.integers(1, 4)), c, int(rng.integers(1, 4)), int(rng.integers(1, 3)), w, s))
    return out


@pytest.mark.parametrize("pad_mode", ["zero", "repeat"])
def test_matches_naive_loop(pad_mode):
    rng = np.random.default_rng(1)
    for b, c, d, m, w, s in _random_shapes(30, 2) + [(2, 24, 3, 2, 12, 6)]:
        xt, xs = rng.normal(size=(b, c, d)), rng.normal(size=(b, m))
        pt = multivariate_patch(xt, xs, PatchConfig(w, s, pad_mode))
        assert pt.patches.shape == (b, num_patches(c, PatchConfig(w, s)), w * (d + m))
        np.testing.assert_array_equal(pt.patches, naive_patch(xt, xs, w, s, pad_mode))


def test_torch_and_numpy_agree():
    rng = np.random.default_rng(3)
    xt, xs = rng.normal(size=(2, 24, 3)), rng.normal(size=(2, 2))
    cfg = PatchConfig(12, 6)
    a = multivariate_patch(xt, xs, cfg).patches
    b = multivariate_patch(torch.as_tensor(xt), torch.as_tensor(xs), cfg).patches
    assert isinstance(b, torch.Tensor)
    np.testing.assert_array_equal(a, b.numpy())


def test_shape_errors():
    with pytest.raises(ShapeError):
        multivariate_patch(np.zeros((2, 5)), np.zeros((2, 1)), PatchConfig(2, 1))
    with pytest.raises(ShapeError):
        multivariate_patch(np.zeros((2, 5, 1)), np.zeros((3, 1)), PatchConfig(2, 1))


def test_causality_exhaustive():
    """Perturbing source time t' changes exactly the patches whose window covers padded t'+s."""
    rng = np.random.default_rng(4)
    for c in range(1, 31):
        for w in range(1, 9):
            for s in range(1, w + 1):
                if c + s < w or num_patches(c, PatchConfig(w, s)) > 8:
                    continue
                xt, xs = rng.normal(size=(1, c, 2)), rng.normal(size=(1, 1))
                base = multivariate_patch(xt, xs, PatchConfig(w, s)).patches
                for t in range(c):
                    pert = xt.copy()
                    pert[0, t, :] += 1.0
                    out = multivariate_patch(pert, xs, PatchConfig(w, s)).patches
                    changed = {j for j in range(base.shape[1]) if not np.array_equal(out[0, j], base[0, j])}
                    covering = {j for j in range(base.shape[1]) if j * s <= t + s < j * s + w}
                    assert changed == covering
                    assert all(j * s + w > t + s for j in changed)


def test_embed_identity_and_bias():
    rng = np.random.default_rng(5)
    cfg = PatchConfig(4, 2)
    pt = multivariate_patch(rng.normal(size=(2, 8, 2)), rng.normal(size=(2, 1)), cfg)
    k = pt.patches.shape[-1]
    ident = Linear(k, k)
    with torch.no_grad():
        ident.weight.copy_(torch.eye(k, dtype=torch.float64))
    np.testing.assert_array_equal(embed_patches(pt, ident).hidden.detach().numpy(), pt.patches)
    zero = Linear(k, 5)
    with torch.no_grad():
        zero.bias.copy_(torch.arange(5.0, dtype=torch.float64))
    h = embed_patches(pt, zero).hidden.detach().numpy()
    assert np.all(h == np.arange(5.0))


def test_embed_rowwise_and_width_check():
    rng = np.random.default_rng(6)
    cfg = PatchConfig(12, 6)
    pt = multivariate_patch(rng.normal(size=(3, 24, 3)), rng.normal(size=(3, 2)), cfg)
    adapter = Linear(60, 8)
    torch.nn.init.normal_(adapter.weight)
    h = embed_patches(pt, adapter).hidden.detach().numpy()
    W, bias = adapter.weight.detach().numpy(), adapter.bias.detach().numpy()
    for i in range(3):
        for j in range(pt.num_patches):
            np.testing.assert_allclose(h[i, j], W @ pt.patches[i, j] + bias, rtol=1e-12)
    with pytest.raises(ShapeError):
        embed_patches(pt, Linear(59, 8))


def test_expand_single_patch_broadcasts():
    cfg = PatchConfig(12, 6)
    x = np.arange(3.0).reshape(1, 1, 3)
    out = expand_to_series(x, 6, cfg)
    assert out.shape == (1, 6, 3)
    assert np.all(out == x)


def test_expand_index_enumeration():
    """Each source index takes the last patch covering it; under tiling this is floor((t'+s)/s) - 1
    counted over the covered source positions (one patch later than the formula, see notes)."""
    for c in range(1, 31):
        for w in range(1, 9):
            for s in range(1, w + 1):
                if c + s < w:
                    continue
                cfg = PatchConfig(w, s)
                p = num_patches(c, cfg)
                idx = expansion_index(c, cfg)
                for t in range(c):
                    covering = [j for j in range(p) if j * s <= t + s < j * s + w]
                    expected = covering[-1] if covering else p - 1
                    assert idx[t] == expected
                    if w == s and covering:
                        assert idx[t] == min((t + s) // s, p - 1)


def test_expand_constant_series():
    cfg = PatchConfig(4, 2)
    xt = np.full((1, 10, 1), 3.0)
    pt = multivariate_patch(xt, np.ones((1, 1)), cfg)
    # target channel value from the last slot of each patch
    last_slot = pt.patches.reshape(1, pt.num_patches, 4, 2)[:, :, -1, :1]
    out = expand_to_series(last_slot, 10, cfg)
    assert np.all(out == 3.0)


def test_expand_shape_error():
    with pytest.raises(ShapeError):
        expand_to_series(np.zeros((1, 3, 2)), 24, PatchConfig(12, 6))
