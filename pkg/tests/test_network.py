import numpy as np
import pytest

from meal import autodiff as ad
from meal.data import Dataset
from meal.network import (BlockNetwork, BlockSpec, NetworkSpec, error_rate, forward,
                          init_network, predict_classes, simple_spec, spec_from_params)


def three_block(seed=0, dropout_p=0.0):
    return simple_spec(4, [[8], [6, 6], [5]], 3, seed=seed, dropout_p=dropout_p)


def test_spec_validation():
    with pytest.raises(ValueError):
        BlockSpec(())
    with pytest.raises(ValueError):
        BlockSpec((4,), dropout_p=1.0)
    with pytest.raises(ValueError):
        NetworkSpec(2, (), 3)


def test_init_is_deterministic_and_biases_zero():
    a, b = init_network(three_block(7)), init_network(three_block(7))
    assert a.param_bytes() == b.param_bytes()
    assert init_network(three_block(8)).param_bytes() != a.param_bytes()
    for name, p in a.params.items():
        if name.endswith(".b"):
            assert not p.any()


def test_init_weight_mean_within_three_sigma():
    net = init_network(simple_spec(100, [[100]], 2, seed=3))
    w = net.params["block.0.layer.0.W"]
    bound = 1.0 / np.sqrt(100)
    assert w.size >= 10_000
    assert np.all(np.abs(w) <= bound)
    sigma_of_mean = bound / np.sqrt(3 * w.size)
    assert abs(w.mean()) < 3 * sigma_of_mean


def test_param_shapes_follow_spec():
    net = init_network(three_block())
    assert net.params["block.0.layer.0.W"].shape == (4, 8)
    assert net.params["block.1.layer.0.W"].shape == (8, 6)
    assert net.params["block.1.layer.1.W"].shape == (6, 6)
    assert net.params["block.2.layer.0.W"].shape == (6, 5)
    assert net.params["head.W"].shape == (5, 3)
    assert spec_from_params(net.params, seed=0) == three_block(0)


def test_zero_network_gives_uniform_probabilities():
    net = init_network(simple_spec(3, [[4]], 4))
    net.params = {k: np.zeros_like(v) for k, v in net.params.items()}
    probs = forward(net, np.random.default_rng(0).normal(size=(5, 3))).probabilities.data
    np.testing.assert_allclose(probs, 0.25, atol=1e-15)


def test_forward_outputs():
    net = init_network(three_block())
    x = np.random.default_rng(1).normal(size=(7, 4))
    res = forward(net, x)
    assert len(res.block_outputs) == 3
    assert [b.shape for b in res.block_outputs] == [(7, 8), (7, 6), (7, 5)]
    assert res.logits.shape == (7, 3)
    np.testing.assert_allclose(res.probabilities.data.sum(axis=1), 1.0, atol=1e-12)
    assert all(np.all(b.data >= 0) for b in res.block_outputs)


def test_forward_dimension_mismatch():
    with pytest.raises(ad.ShapeError):
        forward(init_network(three_block()), np.zeros((2, 5)))


def test_eval_mode_is_pure():
    net = init_network(three_block(dropout_p=0.5))
    x = np.random.default_rng(2).normal(size=(6, 4))
    a = forward(net, x, train_mode=False).probabilities.data
    b = forward(net, x, train_mode=False).probabilities.data
    assert a.tobytes() == b.tobytes()


def test_dropout_zero_equals_eval():
    net = init_network(three_block())
    x = np.random.default_rng(3).normal(size=(6, 4))
    train = forward(net, x, train_mode=True, rng=np.random.default_rng(0)).probabilities.data
    assert train.tobytes() == forward(net, x).probabilities.data.tobytes()


def test_dropout_scales_kept_units():
    net = init_network(simple_spec(4, [[2000]], 2, dropout_p=0.2))
    x = np.abs(np.random.default_rng(4).normal(size=(1, 4)))
    clean = forward(net, x).block_outputs[0].data
    dropped = forward(net, x, train_mode=True, rng=np.random.default_rng(5)).block_outputs[0].data
    kept = dropped != 0
    live = clean != 0
    np.testing.assert_allclose(dropped[kept], clean[kept] / 0.8)
    frac = 1 - kept[live].mean()
    assert 0.15 < frac < 0.25


def test_forward_gradients_match_finite_differences():
    spec = simple_spec(3, [[4], [5], [4]], 3, seed=9)
    net = init_network(spec)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 3))
    target = rng.dirichlet(np.ones(3), size=4)
    for name in net.params:
        net.params[name] = net.params[name] + 0.1 * rng.normal(size=net.params[name].shape)

    def value(name, p):
        trial = BlockNetwork(spec, {**net.params, name: p})
        return float((forward(trial, x).probabilities.data * target).sum())

    tape = ad.Tape()
    res = forward(net, x, tape=tape, requires_grad=True)
    grads = tape.backward(ad.sum_(ad.mul(res.probabilities, tape.constant(target))))
    eps = 1e-5
    for name, node in res.param_nodes.items():
        p = net.params[name]
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            hi, lo = p.copy(), p.copy()
            hi[idx] += eps
            lo[idx] -= eps
            numeric[idx] = (value(name, hi) - value(name, lo)) / (2 * eps)
        analytic = grads[node.id]
        rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
        assert rel.max() < 1e-4, name


def test_predict_classes_ties_and_argmax():
    net = init_network(simple_spec(2, [[2]], 2))
    net.params = {k: np.zeros_like(v) for k, v in net.params.items()}
    assert predict_classes(net, np.zeros((3, 2))).tolist() == [0, 0, 0]
    net.params["head.b"] = np.array([0.0, np.log(4.0)])  # probabilities (0.2, 0.8)
    assert predict_classes(net, np.zeros((1, 2))).tolist() == [1]
    other = init_network(three_block(4))
    x = np.random.default_rng(7).normal(size=(20, 4))
    np.testing.assert_array_equal(predict_classes(other, x),
                                  np.argmax(forward(other, x).logits.data, axis=1))


def test_error_rate():
    net = init_network(simple_spec(2, [[2]], 3))
    net.params = {k: np.zeros_like(v) for k, v in net.params.items()}
    x = np.zeros((6, 2))
    assert error_rate(net, Dataset(x, [0] * 6)) == 0.0
    assert error_rate(net, Dataset(x, [1] * 6)) == 1.0
    # constant predictor on balanced data misses (C - 1) / C
    assert error_rate(net, Dataset(x, [0, 1, 2, 0, 1, 2])) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        error_rate(net, Dataset(np.zeros((0, 2)), []))
