import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splitfrozen import rng
from splitfrozen.lora import (LoRAAdapter, OptimizerState, TrainConfig, adapter_forward, adapter_grads,
                              adapter_init, adapter_input_grad, merge)
from splitfrozen.numerics import ToyConfig, ToyModel, forward_prefix


def trained_adapter(rank=3, d_out=6, d_in=5, seed=0, alpha=None):
    a = adapter_init(rank, (d_out, d_in), seed, scale_alpha=alpha)
    a.up[...] = rng.normals(seed + 1, a.up.shape)
    return a


def test_shapes_and_zero_init():
    a = adapter_init(4, (8, 8), seed=1)
    assert a.down.shape == (4, 8) and a.up.shape == (8, 4)
    assert a.scaling == 1.0
    x = rng.normals(2, (5, 8))
    assert np.array_equal(adapter_forward(a, x), np.zeros((5, 8)))


def test_same_seed_same_down():
    assert np.array_equal(adapter_init(4, (8, 8), 3).down, adapter_init(4, (8, 8), 3).down)
    assert not np.array_equal(adapter_init(4, (8, 8), 3).down, adapter_init(4, (8, 8), 4).down)


def test_down_variance_is_one_over_rank():
    a = adapter_init(4, (10, 4000), seed=5)
    assert abs(a.down.var() - 0.25) < 0.01


def test_zero_input_and_alpha_linearity():
    a = trained_adapter()
    assert np.array_equal(adapter_forward(a, np.zeros((2, 5))), np.zeros((2, 6)))
    b = LoRAAdapter(a.down, a.up, 2 * a.scale_alpha)
    x = rng.normals(9, (3, 5))
    np.testing.assert_allclose(adapter_forward(b, x), 2 * adapter_forward(a, x), rtol=1e-15)


def test_invalid_rank():
    with pytest.raises(ValueError):
        adapter_init(0, (4, 4), 0)
    with pytest.raises(ValueError):
        LoRAAdapter(np.zeros((2, 4)), np.zeros((4, 3)), 2.0)


def fd_grads(a, x, g, eps=1e-5):
    """Central differences of L = sum(g * adapter_forward(a, x))."""
    def loss():
        return float(np.sum(g * adapter_forward(a, x)))
    out = []
    for p in (a.down, a.up):
        grad = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            hi = loss()
            p[idx] = old - eps
            lo = loss()
            p[idx] = old
            grad[idx] = (hi - lo) / (2 * eps)
        out.append(grad)
    return out


@pytest.mark.parametrize("seed", range(5))
def test_grads_match_finite_differences(seed):
    a = trained_adapter(seed=seed, alpha=1.5)
    x = rng.normals(seed + 10, (7, 5))
    g = rng.normals(seed + 20, (7, 6))
    gd, gu = adapter_grads(a, x, g)
    fd_d, fd_u = fd_grads(a, x, g)
    for got, want in ((gd, fd_d), (gu, fd_u)):
        assert np.linalg.norm(got - want) / np.linalg.norm(want) < 1e-4


def test_input_grad_matches_finite_differences():
    a = trained_adapter(seed=3)
    x = rng.normals(4, (2, 5))
    g = rng.normals(5, (2, 6))
    eps = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fd[idx] = (np.sum(g * adapter_forward(a, xp)) - np.sum(g * adapter_forward(a, xm))) / (2 * eps)
    np.testing.assert_allclose(adapter_input_grad(a, g), fd, rtol=1e-6, atol=1e-9)


def test_merge_fresh_is_identity():
    a = adapter_init(2, (6, 5), 0)
    base = rng.normals(1, (6, 5))
    assert np.array_equal(merge(a, base), base)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), rank=st.integers(1, 6))
def test_merged_forward_equals_adapted_forward(seed, rank):
    a = trained_adapter(rank=rank, seed=seed)
    base = rng.normals(seed + 2, (6, 5))
    x = rng.normals(seed + 3, (9, 5))
    adapted = x @ base.T + adapter_forward(a, x)
    merged = x @ merge(a, base).T
    np.testing.assert_allclose(merged, adapted, rtol=0, atol=1e-12)


def test_merge_not_idempotent():
    a = trained_adapter()
    base = rng.normals(7, (6, 5))
    assert not np.allclose(merge(a, merge(a, base)), merge(a, base))
    with pytest.raises(ValueError):
        merge(a, np.zeros((5, 6)))


def test_zero_init_identity_on_model():
    cfg = ToyConfig(depth=3, width=8, seed=4, attention=True)
    x = rng.normals(1, (8, 8))
    m = ToyModel(cfg)
    before = forward_prefix(m, x, 0, 3)
    m.attach_adapters(range(3), rank=4, seed=0)
    assert np.array_equal(forward_prefix(m, x, 0, 3), before)


def test_adapter_parameters_are_small_subset():
    cfg = ToyConfig(depth=4, width=64, attention=True, ffn_mult=4)
    m = ToyModel(cfg)
    m.attach_adapters(range(4), rank=4, seed=0)
    base = sum(w.size for layer in m.layers for w in layer.base.values())
    lora = sum(a.num_params for layer in m.layers for a in layer.adapters.values())
    bound = sum(2 * 4 * (a.d_in + a.d_out) for layer in m.layers for a in layer.adapters.values())
    assert lora <= bound
    assert lora < 0.05 * base


def test_all_projections_can_be_adapted():
    m = ToyModel(ToyConfig(depth=2, width=8, attention=True))
    m.attach_adapters([1], rank=2, seed=0, targets=("wq", "wk", "wv", "wo", "w1", "w2"))
    assert sorted(m.layers[1].adapters) == ["w1", "w2", "wk", "wo", "wq", "wv"]
    with pytest.raises(ValueError):
        ToyModel(ToyConfig(depth=1, width=8)).attach_adapters([0], 2, 0, targets=("wq",))


def test_sgd_and_adamw_updates():
    p = {"w": np.ones(3)}
    g = {"w": np.array([1.0, -2.0, 0.0])}
    OptimizerState(TrainConfig(learning_rate=0.1, optimizer="sgd")).apply(p, g)
    np.testing.assert_array_equal(p["w"], [0.9, 1.2, 1.0])

    # first AdamW step moves each coordinate by lr * sign(g) (plus decay)
    p = {"w": np.ones(3)}
    OptimizerState(TrainConfig(learning_rate=0.1, weight_decay=0.0)).apply(p, g)
    np.testing.assert_allclose(p["w"], [0.9, 1.1, 1.0], atol=1e-7)


def test_zero_learning_rate_leaves_weights():
    p = {"w": np.ones(3)}
    OptimizerState(TrainConfig(learning_rate=0.0)).apply(p, {"w": np.ones(3)})
    np.testing.assert_array_equal(p["w"], np.ones(3))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lion")
