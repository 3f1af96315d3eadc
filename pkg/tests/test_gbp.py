import time

import numpy as np
import pytest

from oracles import kink_free_inputs, numeric_grad, seeded
from rtcnn import data, gbp, graph as G
from rtcnn.errors import ConfigError, ContractError, DataError
from rtcnn.layers import ConvSpec


def norm_rel_error(a, b):
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def linear_toy():
    m = G.Model((2, 6, 6), ["a", "b"], seed=1, dtype=np.float64)
    m.add("conv", "conv", G.INPUT, spec=ConvSpec(3, 2, 2, has_bias=True))
    m.add("gap", "gap", "conv")
    m.add("softmax", "softmax", "gap")
    return m


def relu_toy(seed=2):
    m = G.Model((1, 7, 7), ["a", "b", "c"], seed=seed, dtype=np.float64)
    m.add("conv", "conv1", G.INPUT, spec=ConvSpec(3, 1, 4, has_bias=True))
    m.add("relu", "relu1", "conv1")
    m.add("conv", "class_maps", "relu1", spec=ConvSpec(3, 4, 3, has_bias=True))
    m.add("gap", "gap", "class_maps")
    m.add("softmax", "softmax", "gap")
    return m


def probe_model():
    """Single 1x1 identity convolution so the layer output equals the input."""
    m = G.Model((2, 3, 3), ["a", "b"], dtype=np.float64)
    m.add("conv", "id", G.INPUT, spec=ConvSpec(1, 2, 2))
    m.params["id/weight"][...] = np.eye(2).reshape(2, 2, 1, 1)
    m.add("gap", "gap", "id")
    m.add("softmax", "softmax", "gap")
    return m


# --- target selection ------------------------------------------------------------------


def test_default_layer_is_class_map_conv():
    assert gbp.default_layer(G.build_mini_xception(7)) == "class_maps"
    assert gbp.default_layer(G.build_sequential_fully_cnn(7)) == "class_maps"


def test_select_target_unique_max_and_ties():
    m = probe_model()
    x = np.zeros((1, 2, 3, 3))
    x[0, 1, 2, 0] = 5
    assert gbp.select_target(m, x, "id") == gbp.Target("id", 1, 2, 0)
    assert gbp.select_target(m, np.full((1, 2, 3, 3), 0.5), "id") == gbp.Target("id", 0, 0, 0)


def test_selected_activation_is_maximal():
    m = G.build_mini_xception(7)
    x = seeded((1, 1, 48, 48), 3).astype(np.float32)
    t = gbp.select_target(m, x)
    _, tr = G.forward(m, x, keep_cache=True)
    act = tr.outputs[t.layer]
    assert act[0, t.channel, t.i, t.j] >= act.max()


def test_unknown_layer():
    with pytest.raises(ConfigError):
        gbp.select_target(probe_model(), np.zeros((1, 2, 3, 3)), "nope")


# --- reconstruction ---------------------------------------------------------------------


def test_linear_model_all_modes_equal_analytic_gradient():
    m = linear_toy()
    x = seeded((1, 2, 6, 6), 4)
    t = gbp.Target("conv", 1, 2, 3)
    maps = {mode: gbp.reconstruct(m, x, t, mode).image for mode in ("standard", "deconvnet", "guided")}
    expected = np.zeros_like(x)
    expected[0, :, 1:4, 2:5] = m.params["conv/weight"][1]
    for r in maps.values():
        assert np.array_equal(r, expected)


def _target_value(m, x, t):
    _, tr = G.forward(m, x, keep_cache=False)
    return float(tr.outputs[t.layer][0, t.channel, t.i, t.j])


@pytest.mark.parametrize("seed", range(5))
def test_standard_mode_matches_fd(seed):
    m = relu_toy(seed)
    x = kink_free_inputs(m, (1, 1, 7, 7), "infer", 1, 50 + 100 * seed)[0]
    smap = gbp.reconstruct(m, x, mode="standard")
    assert smap.image.shape == x.shape
    fd = numeric_grad(lambda: _target_value(m, x, smap.target), x)
    assert norm_rel_error(smap.image, fd) < 1e-4


def test_standard_mode_matches_fd_on_mini_xception():
    m = G.build_mini_xception(7, input_hw=32, seed=5, dtype=np.float64)
    x = seeded((1, 1, 32, 32), 6)
    smap = gbp.reconstruct(m, x, mode="standard")
    rng = np.random.default_rng(0)
    picks = rng.choice(32 * 32, 24, replace=False)
    flat = x.reshape(-1)
    fd = []
    for p in picks:
        orig = flat[p]
        flat[p] = orig + 1e-5
        hi = _target_value(m, x, smap.target)
        flat[p] = orig - 1e-5
        lo = _target_value(m, x, smap.target)
        flat[p] = orig
        fd.append((hi - lo) / 2e-5)
    assert norm_rel_error(smap.image.reshape(-1)[picks], np.array(fd)) < 1e-4


@pytest.mark.parametrize("mode", ["guided", "deconvnet"])
@pytest.mark.parametrize("seed", range(3))
def test_relu_stage_gradients_nonnegative(mode, seed):
    m = G.build_mini_xception(7, seed=seed)
    x = seeded((1, 1, 48, 48), 70 + seed).astype(np.float32)
    smap = gbp.reconstruct(m, x, mode=mode)
    relus = [n.name for n in m.nodes if n.kind == "relu"]
    assert set(smap.relu_grads) == set(relus)
    assert all((g >= 0).all() for g in smap.relu_grads.values())


def test_guided_stage_is_masked_deconvnet_stage():
    """At the last ReLU both modes see the same upstream, so the lattice identity is visible end to end."""
    m = relu_toy()
    x = seeded((1, 1, 7, 7), 80)
    _, tr = G.forward(m, x, keep_cache=True)
    t = gbp.select_target(m, x)
    g = gbp.reconstruct(m, x, t, "guided").relu_grads["relu1"]
    d = gbp.reconstruct(m, x, t, "deconvnet").relu_grads["relu1"]
    s = gbp.reconstruct(m, x, t, "standard").relu_grads["relu1"]
    f = tr.outputs["conv1"]
    assert np.array_equal(g, np.where(f > 0, d, 0))
    assert np.array_equal(g, np.where(d > 0, s, 0) * (f > 0))


def test_out_of_bounds_target():
    m = relu_toy()
    x = seeded((1, 1, 7, 7), 81)
    with pytest.raises(ContractError):
        gbp.reconstruct(m, x, gbp.Target("class_maps", 3, 0, 0))
    with pytest.raises(ContractError):
        gbp.reconstruct(m, x, gbp.Target("class_maps", 0, 7, 0))
    with pytest.raises(ContractError):
        gbp.reconstruct(m, np.zeros((2, 1, 7, 7)))


def test_reconstruction_latency_under_one_second():
    m = G.build_mini_xception(7)
    x = seeded((1, 1, 48, 48), 90).astype(np.float32)
    gbp.reconstruct(m, x)
    t0 = time.perf_counter()
    gbp.reconstruct(m, x)
    assert time.perf_counter() - t0 < 1.0


# --- rendering ------------------------------------------------------------------------------


def test_to_gray8_extremes_and_constant():
    r = np.array([[-2.0, 0.0], [1.0, 2.0]])
    g = gbp.to_gray8(r)
    assert g[0, 0] == 0 and g[1, 1] == 255 and g[0, 1] == 128
    assert (gbp.to_gray8(np.full((3, 4), 7.0)) == 128).all()


def test_render_pgm(tmp_path):
    m = G.build_mini_xception(7)
    x = seeded((1, 1, 48, 48), 91).astype(np.float32)
    smap = gbp.reconstruct(m, x)
    a, b = tmp_path / "a.pgm", tmp_path / "b.pgm"
    gbp.render(smap, a)
    gbp.render(gbp.reconstruct(m, x), b)
    assert a.read_bytes() == b.read_bytes()
    img = data.decode_pgm(a)
    assert img.shape == (1, 1, 48, 48)
    assert img.min() == 0 and img.max() == 255
    gbp.render(smap, a, montage_input=x)
    assert data.decode_pgm(a).shape == (1, 1, 48, 96)


def test_render_unwritable(tmp_path):
    smap = gbp.SaliencyMap(np.zeros((1, 1, 4, 4)), gbp.Target("x", 0, 0, 0), "guided")
    with pytest.raises(DataError):
        gbp.render(smap, tmp_path / "missing" / "out.pgm")
