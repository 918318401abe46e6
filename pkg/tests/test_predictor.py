import numpy as np
import pytest
from latpred.archspace import sample_architectures
from latpred.embedding import DeviceEmbedding, embedding_from_raw
from latpred.nnet import constant, grad, leaf, mse_loss, tsum
from latpred.predictor import (
    ModelConfig,
    ModelError,
    encode_batch,
    forward,
    init_params,
    inner_param_names,
    load_checkpoint,
    modulate,
    modulator_output,
    predict_latency_ms,
    predict_standardized,
    save_checkpoint,
)

CELL_CFG = ModelConfig(space="cell", arch_hidden=16, gcn_layers=4,
                       device_hidden=16, header_hidden=12, modulator_hidden=8)
LW_CFG = ModelConfig(space="layerwise", arch_hidden=16, device_hidden=16,
                     header_hidden=12, modulator_hidden=8)


def rand_vh(rng, d=10):
    v = rng.uniform(0, 1, size=d)
    v[0], v[-1] = 0.0, 1.0
    return v


@pytest.mark.parametrize("cfg", [CELL_CFG, LW_CFG], ids=["cell", "layerwise"])
def test_forward_zero_params_outputs_final_bias(cfg):
    params = init_params(cfg, seed=0)
    for name in params.names():
        if not name.startswith(("mod.", "alpha.")):
            params[name].data[...] = 0.0
    archs = sample_architectures(cfg.space, 4, seed=1)
    out = predict_standardized(cfg, params.tensors(), archs, rand_vh(np.random.default_rng(0)))
    np.testing.assert_array_equal(out, np.zeros(4))
    params["head.b2"].data[...] = 0.7
    out2 = predict_standardized(cfg, params.tensors(), archs, rand_vh(np.random.default_rng(0)))
    np.testing.assert_allclose(out2, np.full(4, 0.7))


def test_conditioning_path_is_live():
    cfg = CELL_CFG
    params = init_params(cfg, seed=3)
    archs = sample_architectures("cell", 1, seed=2)
    v = leaf(rand_vh(np.random.default_rng(1)))
    out = tsum(forward(cfg, params.tensors(), encode_batch(cfg, archs), v))
    (gv,) = grad(out, [v])
    assert np.any(gv.data != 0.0)


def test_same_arch_different_devices_can_differ():
    cfg = LW_CFG
    params = init_params(cfg, seed=4)
    archs = sample_architectures("layerwise", 1, seed=0)
    rng = np.random.default_rng(5)
    o1 = predict_standardized(cfg, params.tensors(), archs, rand_vh(rng))
    o2 = predict_standardized(cfg, params.tensors(), archs, rand_vh(rng))
    assert o1[0] != o2[0]


def test_forward_shape_errors():
    cfg = CELL_CFG
    params = init_params(cfg, seed=0)
    with pytest.raises(ModelError):
        forward(cfg, params.tensors(), np.zeros((2, 5)), rand_vh(np.random.default_rng(0)))
    with pytest.raises(ModelError):
        forward(cfg, params.tensors(), np.zeros((2, 8, 8)), np.zeros(3))


def test_forward_regression_locked_value():
    # golden value recorded from the first build of this model
    cfg = ModelConfig(space="cell", arch_hidden=8, gcn_layers=2,
                      device_hidden=8, header_hidden=6, modulator_hidden=4)
    params = init_params(cfg, seed=1234)
    arch = sample_architectures("cell", 1, seed=99)
    vh = np.linspace(0.0, 1.0, 10)
    out = predict_standardized(cfg, params.tensors(), arch, vh)
    assert out[0] == pytest.approx(GOLDEN_FORWARD_VALUE, rel=1e-12)


GOLDEN_FORWARD_VALUE = -0.09083212009907134  # recorded at first build


# ---------------------------------------------------------------------------
# Modulation


@pytest.mark.parametrize("cfg", [CELL_CFG, LW_CFG], ids=["cell", "layerwise"])
def test_modulator_identity_at_init(cfg):
    params = init_params(cfg, seed=7)
    vh = rand_vh(np.random.default_rng(2))
    theta0 = modulate(cfg, params.tensors(), vh)
    for name, _ in cfg.header_shapes():
        np.testing.assert_array_equal(theta0[name].data, params[name].data)
    archs = sample_architectures(cfg.space, 8, seed=3)
    base = predict_standardized(cfg, params.tensors(), archs, vh)
    mod = predict_standardized(cfg, theta0, archs, vh)
    assert np.array_equal(base, mod)  # bitwise


def test_modulator_scaling_doubles_one_matrix():
    cfg = CELL_CFG
    params = init_params(cfg, seed=8)
    nw, nb = cfg.header_param_counts()
    n0 = int(np.prod(cfg.header_shapes()[0][1]))
    # craft z_w = 2 on head.w0's slice via the output bias
    params["mod.b1"].data[:n0] = 2.0
    vh = rand_vh(np.random.default_rng(3))
    theta0 = modulate(cfg, params.tensors(), vh)
    np.testing.assert_allclose(theta0["head.w0"].data, 2.0 * params["head.w0"].data)
    np.testing.assert_array_equal(theta0["head.w1"].data, params["head.w1"].data)
    np.testing.assert_array_equal(theta0["head.b0"].data, params["head.b0"].data)


def test_modulator_output_length_matches_header_count():
    for cfg in (CELL_CFG, LW_CFG,
                ModelConfig(space="cell", header_hidden=33),
                ModelConfig(space="layerwise", arch_hidden=20, header_hidden=200)):
        params = init_params(cfg, seed=0)
        nw, nb = cfg.header_param_counts()
        z = modulator_output(cfg, params.tensors(), rand_vh(np.random.default_rng(0),
                                                            cfg.device_input_dim))
        assert z.shape == (nw + nb,)
        assert params["mod.w1"].shape[1] == nw + nb
        # audit against the actual header tensors
        total = sum(params[n].data.size for n, _ in cfg.header_shapes())
        assert nw + nb == total


def test_loss_gradient_reaches_modulator():
    cfg = LW_CFG
    params = init_params(cfg, seed=9)
    rng = np.random.default_rng(4)
    params["mod.w1"].data[...] = rng.normal(0, 0.05, size=params["mod.w1"].shape)
    archs = sample_architectures("layerwise", 6, seed=5)
    vh = rand_vh(rng)
    theta0 = modulate(cfg, params.tensors(), vh)
    pred = forward(cfg, theta0, encode_batch(cfg, archs), vh)
    loss = mse_loss(pred, constant(rng.uniform(0, 1, size=6)))
    for name in ("mod.w0", "mod.b0", "mod.w1", "mod.b1"):
        (g,) = grad(loss, [params[name]])
        assert np.any(g.data != 0.0), name


def finite_diff_param(loss_fn, params, name, idx, h=1e-6):
    t = params[name]
    orig = t.data[idx]
    t.data[idx] = orig + h
    hi = loss_fn()
    t.data[idx] = orig - h
    lo = loss_fn()
    t.data[idx] = orig
    return (hi - lo) / (2 * h)


@pytest.mark.parametrize("cfg", [CELL_CFG, LW_CFG], ids=["cell", "layerwise"])
def test_gradients_for_every_group_match_finite_differences(cfg):
    rng = np.random.default_rng(11)
    params = init_params(cfg, seed=11)
    params["mod.w1"].data[...] = rng.normal(0, 0.05, size=params["mod.w1"].shape)
    archs = sample_architectures(cfg.space, 5, seed=6)
    x = encode_batch(cfg, archs)
    vh = rand_vh(rng, cfg.device_input_dim)
    y = rng.uniform(0, 1, size=5)

    def loss_tensor():
        theta0 = modulate(cfg, params.tensors(), vh)
        return mse_loss(forward(cfg, theta0, x, vh), constant(y))

    loss = loss_tensor()
    names = [n for n in params.names() if not n.startswith("alpha.")]
    grads = dict(zip(names, grad(loss, [params[n] for n in names])))
    for name in names:
        flat_idx = rng.integers(0, params[name].data.size, size=min(4, params[name].data.size))
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), params[name].shape)
            ref = finite_diff_param(lambda: loss_tensor().item(), params, name, idx)
            got = grads[name].data[idx]
            assert got == pytest.approx(ref, rel=2e-4, abs=1e-7), name


# ---------------------------------------------------------------------------
# De-standardization


def test_predict_latency_ms_anchors():
    cfg = LW_CFG
    params = init_params(cfg, seed=0)
    emb = embedding_from_raw("dev", [5.0, 7.5, 10.0, 12.0, 14.0, 15.0, 16.0, 17.0, 20.0, 25.0])
    for name in params.names():
        if not name.startswith(("mod.", "alpha.")):
            params[name].data[...] = 0.0
    archs = sample_architectures("layerwise", 2, seed=1)
    params["head.b2"].data[...] = 0.0
    np.testing.assert_allclose(
        predict_latency_ms(cfg, params.tensors(), archs, emb), [5.0, 5.0])
    params["head.b2"].data[...] = 1.0
    np.testing.assert_allclose(
        predict_latency_ms(cfg, params.tensors(), archs, emb), [25.0, 25.0])


def test_standardize_destandardize_roundtrip():
    emb = embedding_from_raw("dev", [2.0, 4.0, 9.0])
    for p in (0.0, 0.3, 1.0, 1.7, -0.2):
        assert emb.standardize(emb.destandardize(p)) == pytest.approx(p)


def test_missing_anchors_raise():
    cfg = LW_CFG
    params = init_params(cfg, seed=0)
    bad = DeviceEmbedding("d", np.linspace(0, 1, 10), raw_min=5.0, raw_max=5.0)
    with pytest.raises(ModelError, match="anchors"):
        predict_latency_ms(cfg, params.tensors(), sample_architectures("layerwise", 1, seed=0),
                           bad)


# ---------------------------------------------------------------------------
# Checkpoints


def test_checkpoint_roundtrip_and_mismatch(tmp_path):
    cfg = CELL_CFG
    params = init_params(cfg, seed=21)
    path = tmp_path / "model.npz"
    save_checkpoint(path, cfg, params)
    cfg2, params2 = load_checkpoint(path)
    assert cfg2.manifest() == cfg.manifest()
    archs = sample_architectures("cell", 3, seed=2)
    vh = rand_vh(np.random.default_rng(1))
    np.testing.assert_array_equal(
        predict_standardized(cfg, params.tensors(), archs, vh),
        predict_standardized(cfg2, params2.tensors(), archs, vh))
    with pytest.raises(ModelError, match="does not match"):
        load_checkpoint(path, expect_config=LW_CFG)


def test_inner_param_names_scopes():
    names_all = inner_param_names(CELL_CFG, "all")
    names_head = inner_param_names(CELL_CFG, "header")
    assert set(names_head) < set(names_all)
    assert all(n.startswith("head.") for n in names_head)
    assert any(n.startswith("arch.") for n in names_all)
    with pytest.raises(ModelError):
        inner_param_names(CELL_CFG, "nope")
