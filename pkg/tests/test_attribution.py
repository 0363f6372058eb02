import copy

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import DenseToy, random_dense, tiny_model
from histoeval.attribution import (GRID_MAGIC, attention_per_head, lrp, lrp_batch, lrp_hybrid, pool_relevance,
                                   read_grid, save_heatmap_png, token_relevance, upscale, write_grid)
from histoeval.errors import CapabilityError, RuleCoverageError, ShapeError
from histoeval.models import ArchitectureSpec, build_model, fuse_hybrid
from histoeval.models import layers as L
from histoeval.models.zoo import ModelHandle
from histoeval.oracles import oracle_bilinear, oracle_lrp_toy

SINGLE = ("resnet50", "botnet50", "inception_v3", "vit", "vit_c")


def _patch(size, seed=0):
    return np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)


def _flat(img):
    return img.transpose(2, 0, 1).ravel()


# --- epsilon rule on dense toys --------------------------------------------

@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("eps", [0.0, 1e-6])
def test_dense_toy_matches_oracle(seed, eps):
    rng = np.random.default_rng(seed)
    ws, bs = random_dense(rng, (4, 2))
    x = rng.random((1, 1, 3))
    net = DenseToy(ws, bs)
    R = lrp(net, x, 1, eps=eps).values
    ref = oracle_lrp_toy(ws, _flat(x), 1, bs, eps)
    np.testing.assert_allclose(_flat(R), ref, rtol=0, atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_epsilon_zero_conserves_logit(seed):
    rng = np.random.default_rng(100 + seed)
    ws, _ = random_dense(rng, (6, 4, 3), side=2, bias=False)
    x = rng.random((2, 2, 3))
    net = DenseToy(ws, side=2)
    logit = net(torch.from_numpy(x.transpose(2, 0, 1)[None]).double())[0, 2].item()
    total = lrp(net, x, 2, eps=0.0).values.sum()
    assert abs(total - logit) <= 1e-6 * abs(logit)


def test_single_affine_layer_conserves_exactly():
    w = np.array([[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]])
    x = np.array([[[0.2, 0.4, 0.9]]])
    net = DenseToy([w])
    R = lrp(net, x, 0, eps=0.0).values
    assert R.sum() == pytest.approx(w[0] @ x.ravel(), abs=1e-12)
    np.testing.assert_allclose(R.ravel(), w[0] * x.ravel())


def test_uncovered_layer_is_named():
    net = DenseToy([np.ones((2, 3))])
    net.body = L.Sequential(nn.Flatten(), nn.Tanh())
    with pytest.raises(RuleCoverageError, match="Flatten|Tanh"):
        lrp(net, np.ones((1, 1, 3)), 0)


# --- zoo models ------------------------------------------------------------

@pytest.mark.parametrize("name", SINGLE)
def test_lrp_contract_on_every_architecture(name):
    m = tiny_model(name)
    p = _patch(m.input_size)
    r = lrp(m, p, 1)
    assert r.values.shape == p.shape and np.isfinite(r.values).all()
    np.testing.assert_array_equal(r.values, lrp(m, p, 1).values)
    assert r.target_class == 1 and r.model_id == name
    assert np.abs(r.values).sum() > 0


@pytest.mark.parametrize("name", SINGLE)
def test_zero_input_has_zero_relevance(name):
    m = tiny_model(name)
    r = lrp(m, np.zeros((m.input_size,) * 2 + (3,), np.float32), 0)
    assert np.all(r.values == 0)


def test_lrp_batch_matches_single_calls():
    m = tiny_model("resnet50")
    batch = np.stack([_patch(32, s) for s in range(3)])
    R = lrp_batch(m, batch, [0, 1, 1])
    for i, t in enumerate([0, 1, 1]):
        np.testing.assert_allclose(R[i], lrp(m, batch[i], t).values, atol=1e-6)


def _hybrid():
    return fuse_hybrid(tiny_model("resnet50", 0), tiny_model("vit", 1), 2, 0)


def test_hybrid_map_is_sum_of_branches():
    h = _hybrid()
    r = lrp(h, _patch(32), 1)
    b1, b2 = r.branches
    np.testing.assert_array_equal(r.values, b1 + b2)
    assert np.abs(b1).sum() > 0 and np.abs(b2).sum() > 0


def test_zero_branch_weights_isolate_other_branch():
    h = _hybrid()
    d1 = h.module.m1.feature_dim
    with torch.no_grad():
        h.module.head.weight[:, d1:] = 0
    r = lrp_hybrid(h, _patch(32), 1)
    assert np.all(r.branches[1] == 0)
    # branch 1 alone with the hybrid's classifier slice gives the same map
    single = copy.deepcopy(h.module.m1)
    with torch.no_grad():
        single.head = L.Linear(d1, 2)
        single.head.weight.copy_(h.module.head.weight[:, :d1])
        single.head.bias.copy_(h.module.head.bias)
    ref = lrp(ModelHandle(ArchitectureSpec("resnet50", input_size=32), single, 0), _patch(32), 1)
    np.testing.assert_allclose(r.values, ref.values, atol=1e-6)


def test_lrp_hybrid_rejects_single_models():
    with pytest.raises(CapabilityError):
        lrp_hybrid(tiny_model("vit"), _patch(32), 0)


# --- pooling ---------------------------------------------------------------

def test_pool_examples():
    v = np.array([[[1.0, 2.0, 3.0], [-3.0, 1.0, 2.0]], [[-1.0, -2.0, -0.5], [-4.0, 0.0, 5.0]]])
    np.testing.assert_allclose(pool_relevance(v).values, [[2.0, 0.0], [0.0, 1 / 3]])
    assert np.all(pool_relevance(-np.abs(v) - 1).values == 0)


@given(arrays(np.float64, (4, 5, 3), elements=st.floats(-1e3, 1e3)), st.floats(1e-3, 1e3))
def test_pool_positive_homogeneity(v, c):
    np.testing.assert_allclose(pool_relevance(c * v).values, c * pool_relevance(v).values, rtol=1e-9, atol=1e-9)
    assert pool_relevance(v).values.min() >= 0


# --- attention -------------------------------------------------------------

def test_attention_per_head_reference_vit():
    m = build_model(ArchitectureSpec("vit"), 0)
    a = attention_per_head(m, _patch(96))
    assert a.maps.shape == (12, 16, 16) and a.heads == 12 and a.layer == 11
    np.testing.assert_allclose(a.maps.sum(axis=(1, 2)), 1.0, atol=1e-5)
    assert a.maps.min() >= 0


@pytest.mark.parametrize("name", ("vit", "vit_c"))
def test_attention_per_head_tiny(name):
    m = tiny_model(name)
    a = attention_per_head(m, _patch(32))
    g = m.module.grid
    assert a.maps.shape == (4, g, g)
    np.testing.assert_allclose(a.maps.sum(axis=(1, 2)), 1.0, atol=1e-5)


@pytest.mark.parametrize("name", ("resnet50", "inception_v3", "botnet50"))
def test_attention_needs_cls_token(name):
    m = tiny_model(name)
    with pytest.raises(CapabilityError):
        attention_per_head(m, _patch(m.input_size))


def test_token_relevance_grid():
    m = tiny_model("vit")
    t = token_relevance(m, _patch(32), 1)
    assert t.shape == (m.module.grid,) * 2 and np.isfinite(t).all() and t.min() >= 0


# --- upscaling -------------------------------------------------------------

def test_upscale_examples():
    np.testing.assert_allclose(upscale(np.full((4, 4), 0.3), (17, 23)), 0.3)
    g = np.random.default_rng(0).random((5, 5))
    np.testing.assert_allclose(upscale(g, 5), g)
    assert upscale([[0.0, 1.0], [1.0, 0.0]], 3)[1, 1] == pytest.approx(0.5)
    with pytest.raises(ShapeError):
        upscale(g, 4)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(0, 1)),
       st.integers(0, 7), st.integers(0, 7))
def test_upscale_matches_hand_bilinear(g, dh, dw):
    out_h, out_w = g.shape[0] + dh, g.shape[1] + dw
    np.testing.assert_allclose(upscale(g, (out_h, out_w)), oracle_bilinear(g.tolist(), out_h, out_w), atol=1e-12)


def test_upscale_renormalized_mass():
    g = np.random.default_rng(2).random((16, 16))
    g /= g.sum()
    out = upscale(g, 96, renormalize=True)
    assert out.sum() / (96 * 96 / 256) == pytest.approx(1.0, rel=0.01)


# --- export ----------------------------------------------------------------

def test_grid_file_roundtrip(tmp_path):
    v = np.random.default_rng(0).standard_normal((7, 5, 3)).astype(np.float32)
    p = write_grid(tmp_path / "r.bin", v)
    raw = p.read_bytes()
    assert raw[:4] == GRID_MAGIC and len(raw) == 16 + v.size * 4
    np.testing.assert_array_equal(read_grid(p), v)
    assert read_grid(write_grid(tmp_path / "p.bin", v[..., 0])).shape == (7, 5, 1)


def test_heatmap_png(tmp_path):
    from PIL import Image

    v = np.random.default_rng(0).standard_normal((8, 8, 3))
    for signed, arr in ((True, v), (False, pool_relevance(v).values)):
        p = save_heatmap_png(tmp_path / f"{signed}.png", arr)
        with Image.open(p) as im:
            assert im.size == (8, 8) and im.mode == "RGB"
