import numpy as np
import pytest

import gradcases
from biolite import model, train
from biolite.errors import InternalError, ShapeError
from oracles import observed_layers


def observed_complexity(config, h, w):
    layers = observed_layers(config, h, w)
    return sum(p for p, _ in layers.values()), sum(f for _, f in layers.values())


def test_layer_rows_match_observed():
    cfg = model.ArchConfig()
    obs = observed_layers(cfg, 64, 96)
    rows = model.layer_table(cfg, 64, 96)
    assert {r.name for r in rows} == set(obs)
    for r in rows:
        assert (r.params, r.flops) == obs[r.name], r.name


@pytest.mark.parametrize("config", [
    model.ArchConfig(),
    model.ArchConfig(enc_channels=(8, 16), bottleneck_channels=32, dec_channels=(16, 8)),
    model.ArchConfig(enc_channels=(3, 5), bottleneck_channels=7, dec_channels=(6, 2)),
])
@pytest.mark.parametrize("hw", [(8, 8), (32, 16), (256, 256)])
def test_complexity_matches_observed(config, hw):
    p, f = observed_complexity(config, *hw)
    assert model.count_params(config) == p
    assert model.count_flops(config, hw) == f


def test_default_complexity_window():
    cfg = model.ArchConfig()
    assert 8_000 <= model.count_params(cfg) <= 12_000
    assert 0.35e9 <= model.count_flops(cfg, (256, 256)) <= 0.55e9


def test_layer_table_shapes_match_trace():
    cfg = model.ArchConfig()
    params = model.build(cfg, seed=3)
    traced = model.trace_shapes(params, np.zeros((1, 3, 32, 48), np.float32))
    for row in model.layer_table(cfg, 32, 48):
        assert tuple(traced[row.name]) == row.out_shape, row.name


def test_forward_shape_dtype_and_determinism(rng):
    params = model.build(seed=7)
    x = rng.standard_normal((2, 3, 16, 24)).astype(np.float32)
    y = model.forward(params, x)
    assert y.shape == (2, 3, 16, 24) and y.dtype == np.float32
    assert np.array_equal(y, model.forward(model.build(seed=7), x))
    assert not np.array_equal(y, model.forward(model.build(seed=8), x))


def test_forward_rejects_bad_input():
    params = model.build()
    with pytest.raises(ShapeError):
        model.forward(params, np.zeros((1, 3, 10, 8), np.float32))
    with pytest.raises(ShapeError):
        model.forward(params, np.zeros((1, 4, 8, 8), np.float32))
    with pytest.raises(InternalError):
        model.backward(params, None, np.zeros((1, 3, 8, 8), np.float32))


def test_param_order_and_validation():
    cfg = model.ArchConfig()
    params = model.build(cfg)
    assert params.names() == list(cfg.param_shapes())
    assert params.names()[-2:] == ["head.weight", "head.bias"]
    bad = dict(params.tensors)
    bad["head.bias"] = np.zeros(4, np.float32)
    with pytest.raises(ShapeError):
        model.ModelParams(cfg, bad)
    with pytest.raises(InternalError):
        model.ModelParams(cfg, dict(reversed(list(params.tensors.items()))))


def test_init_bounds_and_zero_biases():
    params = model.build(seed=11)
    for name, t in params.tensors.items():
        if name.endswith("bias"):
            assert not t.any()
        else:
            assert np.abs(t).max() <= model.init_bound(name, t.shape)


@pytest.mark.parametrize("seed", range(5))
def test_initial_loss_near_uniform(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 64, 64)).astype(np.float32)
    y = rng.integers(0, 3, (2, 64, 64))
    loss, _ = train.ce_loss(model.forward(model.build(seed=seed), x), y)
    assert abs(loss - np.log(3)) < 0.3


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_model_gradient(seed):
    overall, layers = gradcases.full_model_case(np.random.default_rng(seed))
    for lr in layers:
        assert lr.checked >= 30, lr
    assert overall.max_rel_error < 1e-4, overall


def test_gradient_dict_matches_params(rng):
    params = model.build(seed=0)
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    logits, cache = model.forward(params, x, cache=True)
    grads = model.backward(params, cache, np.ones_like(logits))
    assert list(grads) == params.names()
    assert all(grads[k].shape == params[k].shape and grads[k].dtype == np.float32 for k in grads)


def test_invalid_arch():
    with pytest.raises(ValueError):
        model.ArchConfig(num_classes=4)
    with pytest.raises(ValueError):
        model.ArchConfig(enc_channels=(0, 4))
