import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from readtwice import autodiff as ad
from readtwice.autodiff import Tensor, precision
from readtwice.checkpoint import CheckpointError, load_arrays, save_arrays
from readtwice.gradcheck import corrupted_backward, grad_check


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(eye, m).data, m.data)
    np.testing.assert_array_equal(ad.matmul(m, Tensor(np.zeros((2, 2)))).data, np.zeros((2, 2)))
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    for c in (-50.0, 0.0, 3.7, 800.0):
        np.testing.assert_allclose(ad.softmax(Tensor([c, c, c], dtype=np.float64)).data, [1 / 3] * 3, atol=1e-12)
    np.testing.assert_allclose(ad.softmax(Tensor([math.log(1), math.log(3)], dtype=np.float64)).data, [0.25, 0.75])


def test_layer_norm_examples():
    one, zero = Tensor([1.0]), Tensor([0.0])
    np.testing.assert_allclose(ad.layer_norm(Tensor([1.0, 1.0, 1.0]), one, zero).data, [0, 0, 0])
    with precision():
        out = ad.layer_norm(Tensor([-1.0, 1.0]), Tensor([1.0]), Tensor([0.0]))
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-9)
    np.testing.assert_allclose(ad.layer_norm(Tensor([0.0, 0.0]), Tensor([2.0]), Tensor([5.0])).data, [5, 5])


finite = st.floats(-20, 20, allow_nan=False, width=64)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite), st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(x, c):
    with precision():
        y = ad.softmax(Tensor(x), axis=-1).data
        y2 = ad.softmax(Tensor(x + c), axis=-1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(y, y2, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=finite))
def test_layer_norm_moments(x):
    spread = x.max(axis=-1) - x.min(axis=-1)
    x = x[spread > 1e-3]
    if x.size == 0:
        return
    with precision():
        d = x.shape[-1]
        y = ad.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-6)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_grad_check_polynomial():
    with precision():
        w = Tensor([3.0], requires_grad=True)
        res = grad_check(lambda: (w * w).sum(), {"w": w})
        w.grad = None
        (w * w).sum().backward()
    assert w.grad[0] == pytest.approx(6.0)
    assert res.max_rel_error < 1e-8


def test_grad_check_rejects_nondeterministic():
    rng = np.random.default_rng(0)
    with precision():
        w = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError, match="deterministic"):
            grad_check(lambda: (w * float(rng.random())).sum(), {"w": w})


def test_grad_check_rejects_single_precision():
    w = Tensor([1.0], requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: (w * w).sum(), {"w": w})


def _op_cases(rng):
    """(name, build) pairs; build maps a dict of float64 leaves to a scalar."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    mask = rng.random((3, 4)) > 0.3
    mask[:, 0] = True
    w = rng.normal(size=(3, 4))
    idx = np.array([0, 2, 2, 1])
    return [
        ("add", {"a": a, "c": rng.normal(size=(4,))}, lambda p: ((p["a"] + p["c"]) * w).sum()),
        ("sub", {"a": a, "c": rng.normal(size=(1, 4))}, lambda p: ((p["a"] - p["c"]) * w).sum()),
        ("mul", {"a": a, "c": rng.normal(size=(3, 1))}, lambda p: (p["a"] * p["c"] * w).sum()),
        ("div", {"a": a, "c": pos}, lambda p: (p["a"] / p["c"] * w).sum()),
        ("pow", {"c": pos}, lambda p: ((p["c"] ** 3) * w).sum()),
        ("matmul", {"a": a, "b": b}, lambda p: (ad.matmul(p["a"], p["b"]) * rng_fixed(3, 2)).sum()),
        ("bmm", {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(2, 4, 5))},
         lambda p: (ad.matmul(p["a"], p["b"]) * rng_fixed(2, 3, 5)).sum()),
        ("exp", {"a": a}, lambda p: (p["a"].exp() * w).sum()),
        ("log", {"c": pos}, lambda p: (p["c"].log() * w).sum()),
        ("tanh", {"a": a}, lambda p: (p["a"].tanh() * w).sum()),
        ("sigmoid", {"a": a * 5}, lambda p: (ad.sigmoid(p["a"]) * w).sum()),
        ("gelu", {"a": a}, lambda p: (ad.gelu(p["a"]) * w).sum()),
        ("sum_axis", {"a": a}, lambda p: (p["a"].sum(axis=0) * w[0]).sum()),
        ("mean", {"a": a}, lambda p: (p["a"].mean(axis=-1, keepdims=True) * w).sum()),
        ("reshape", {"a": a}, lambda p: (p["a"].reshape(4, 3) * w.reshape(4, 3)).sum()),
        ("transpose", {"a": a}, lambda p: (p["a"].T * w.T).sum()),
        ("getitem", {"a": a}, lambda p: (p["a"][idx[:3]] * w).sum() + p["a"][1, 2:].sum()),
        ("concat", {"a": a, "b": b.T}, lambda p: (ad.concat([p["a"], p["b"]], axis=0) * rng_fixed(5, 4)).sum()),
        ("stack", {"a": a, "c": pos}, lambda p: (ad.stack([p["a"], p["c"]], axis=1) * rng_fixed(3, 2, 4)).sum()),
        ("where", {"a": a, "c": pos}, lambda p: (ad.where(mask, p["a"], p["c"]) * w).sum()),
        ("softmax", {"a": a}, lambda p: (ad.softmax(p["a"], axis=-1) * w).sum()),
        ("softmax_masked", {"a": a}, lambda p: (ad.softmax(p["a"], axis=-1, mask=mask) * w).sum()),
        ("log_softmax", {"a": a}, lambda p: (ad.log_softmax(p["a"], axis=0, mask=mask) * w).sum()),
        ("logsumexp", {"a": a}, lambda p: (ad.logsumexp(p["a"], axis=1, mask=mask) * w[:, 0]).sum()
         + ad.logsumexp(p["a"])),
        ("layer_norm", {"a": a, "g": rng.normal(size=4), "b": rng.normal(size=4)},
         lambda p: (ad.layer_norm(p["a"], p["g"], p["b"], eps=1e-5) * w).sum()),
    ]


_FIXED = np.random.default_rng(7)
_FIXED_CACHE: dict = {}


def rng_fixed(*shape):
    if shape not in _FIXED_CACHE:
        _FIXED_CACHE[shape] = _FIXED.normal(size=shape)
    return _FIXED_CACHE[shape]


@pytest.mark.parametrize("case", range(len(_op_cases(np.random.default_rng(0)))))
def test_every_op_matches_finite_differences(case):
    rng = np.random.default_rng(100 + case)
    name, init, build = _op_cases(rng)[case]
    with precision():
        leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in init.items()}
        res = grad_check(lambda: build(leaves), leaves)
    assert res.max_rel_error < 1e-4, (name, res.per_param)


def test_corrupted_backward_is_detected():
    rng = np.random.default_rng(3)
    with precision():
        a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        with corrupted_backward("gelu"):
            bad = grad_check(lambda: ad.gelu(a).sum(), {"a": a})
        good = grad_check(lambda: ad.gelu(a).sum(), {"a": a})
    assert bad.max_rel_error > 1e-2
    assert good.max_rel_error < 1e-6


def test_gradient_accumulates_over_shared_inputs():
    with precision():
        x = Tensor([2.0], requires_grad=True)
        y = x * x + x * 3.0
        y.sum().backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._op is None


def test_topo_order_places_inputs_first():
    x = Tensor([1.0], requires_grad=True)
    a = x * 2.0
    b = a + x
    c = b * a
    order = ad.topo_order(c)
    pos = {id(t): k for k, t in enumerate(order)}
    for node in order:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "encoder.layer0.w": rng.normal(size=(3, 5)).astype(np.float32),
        "omega": rng.normal(size=(21,)),
        "empty": np.zeros((0, 4), dtype=np.float32),
        "step": np.array(12, dtype=np.int64),
    }
    save_arrays(tmp_path / "c.ckpt", arrays, meta={"note": "x"})
    back, meta = load_arrays(tmp_path / "c.ckpt")
    assert meta == {"note": "x"}
    assert set(back) == set(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_arrays(p)
