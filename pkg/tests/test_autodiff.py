"""Gradient, optimizer, and checkpoint behavior of the autodiff engine."""

import os

import numpy as np
import pytest

from softtrack import autodiff as ad
from oracles import check_gradients, relative_error, numeric_grad

RNG = np.random.default_rng(20240811)


def rand(*shape):
    return RNG.normal(0.0, 1.0, size=shape)


def test_frozen_sum_of_squares_gradient():
    w = ad.parameter([1.0, 2.0, 3.0])
    loss = ad.sum_all(ad.mul(w, w))
    ad.backward(loss)
    assert loss.item() == 14.0
    np.testing.assert_array_equal(w.grad, [2.0, 4.0, 6.0])


def test_layer_norm_frozen_values():
    x = ad.tensor([1.0, 2.0, 3.0])
    gain = ad.parameter(np.ones(3))
    bias = ad.parameter(np.zeros(3))
    out = ad.layer_norm(x, gain, bias)
    np.testing.assert_allclose(out.data, [-1.2247, 0.0, 1.2247], atol=1e-3)


def test_sgd_momentum_frozen_unroll():
    p = ad.parameter([1.0])
    opt = ad.SgdOptimizer({"p": p}, lr=0.1, momentum=0.9)
    p.grad = np.array([1.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9])
    p.grad = np.array([1.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.71])   # second delta is 0.1 * 1.9


@pytest.mark.parametrize("name", [
    "add", "sub", "mul", "div", "add_row", "add_const", "scale", "relu",
    "tanh", "sqrt", "matmul", "dot", "transpose", "layer_norm", "softmax",
    "log_softmax", "concat_rows", "gather_rows", "offset_scores", "sum_all",
    "mean_all", "sum_rows", "pick", "nll_rows",
])
def test_op_gradients_match_finite_differences(name):
    a = ad.parameter(rand(3, 4))
    b = ad.parameter(rand(3, 4))
    row = ad.parameter(rand(4))
    mat = ad.parameter(rand(4, 5))
    vec1 = ad.parameter(rand(6))
    vec2 = ad.parameter(rand(6))
    table = ad.parameter(rand(5, 4))
    pos = ad.parameter(np.abs(rand(3, 4)) + 0.5)
    builders = {
        "add": (lambda: ad.sum_all(ad.tanh(ad.add(a, b))), {"a": a, "b": b}),
        "sub": (lambda: ad.sum_all(ad.tanh(ad.sub(a, b))), {"a": a, "b": b}),
        "mul": (lambda: ad.sum_all(ad.tanh(ad.mul(a, b))), {"a": a, "b": b}),
        "div": (lambda: ad.sum_all(ad.tanh(ad.div(a, pos))), {"a": a, "p": pos}),
        "add_row": (lambda: ad.sum_all(ad.tanh(ad.add_row(a, row))),
                    {"a": a, "row": row}),
        "add_const": (lambda: ad.sum_all(ad.tanh(ad.add_const(a, 0.7))), {"a": a}),
        "scale": (lambda: ad.sum_all(ad.tanh(ad.scale(a, -1.3))), {"a": a}),
        "relu": (lambda: ad.sum_all(ad.mul(ad.relu(a), ad.relu(a))), {"a": a}),
        "tanh": (lambda: ad.sum_all(ad.tanh(a)), {"a": a}),
        "sqrt": (lambda: ad.sum_all(ad.sqrt(pos)), {"p": pos}),
        "matmul": (lambda: ad.sum_all(ad.tanh(ad.matmul(a, mat))),
                   {"a": a, "mat": mat}),
        "dot": (lambda: ad.tanh(ad.dot(vec1, vec2)), {"v1": vec1, "v2": vec2}),
        "transpose": (lambda: ad.sum_all(ad.tanh(ad.matmul(ad.transpose(a), b))),
                      {"a": a, "b": b}),
        "layer_norm": (lambda: ad.sum_all(ad.tanh(ad.layer_norm(a, row, row))),
                       {"a": a, "row": row}),
        "softmax": (lambda: ad.sum_all(ad.mul(ad.softmax(a), b)), {"a": a, "b": b}),
        "log_softmax": (lambda: ad.sum_all(ad.mul(ad.log_softmax(a), b)),
                        {"a": a, "b": b}),
        "concat_rows": (lambda: ad.sum_all(ad.tanh(ad.concat_rows(a, b, row))),
                        {"a": a, "b": b, "row": row}),
        "gather_rows": (lambda: ad.sum_all(ad.tanh(
            ad.gather_rows(a, np.array([0, 2, 2, 1])))), {"a": a}),
        "offset_scores": (lambda: ad.sum_all(ad.tanh(ad.offset_scores(
            a, table, np.array([[0, 1, 4], [2, 2, 3], [4, 0, 1]])))),
            {"a": a, "table": table}),
        "sum_all": (lambda: ad.tanh(ad.sum_all(a)), {"a": a}),
        "mean_all": (lambda: ad.tanh(ad.mean_all(a)), {"a": a}),
        "sum_rows": (lambda: ad.sum_all(ad.tanh(ad.sum_rows(a))), {"a": a}),
        "pick": (lambda: ad.tanh(ad.pick(a, 1, 3)), {"a": a}),
        "nll_rows": (lambda: ad.nll_rows(ad.log_softmax(a), np.array([1, 0, 3])),
                     {"a": a}),
    }
    make, params = builders[name]
    assert check_gradients(make, params) < 1e-4


def test_shared_subexpression_gradient_counts_once():
    x = ad.parameter([3.0])
    y = ad.mul(x, x)
    z = ad.add(y, y)        # z = 2 x^2, dz/dx = 4x
    ad.backward(z)
    np.testing.assert_allclose(x.grad, [12.0])


def test_diamond_graph_gradient():
    # b sits on two paths of different depth; a stale topological order
    # would double- or under-count it.
    b = ad.parameter(rand(3, 3))
    c = ad.tanh(b)
    out = ad.sum_all(ad.mul(c, ad.add(b, c)))
    ad.backward(out)
    analytic = b.grad.copy()
    numeric = numeric_grad(
        lambda: ad.sum_all(ad.mul(ad.tanh(b), ad.add(b, ad.tanh(b)))).data,
        {"b": b.data})["b"]
    assert relative_error(analytic, numeric) < 1e-4


def test_unreached_parameters_get_zero_gradients():
    used = ad.parameter(rand(2, 2))
    unused = ad.parameter(rand(3))
    loss = ad.sum_all(ad.mul(used, used))
    ad.backward(loss, params={"used": used, "unused": unused})
    assert unused.grad is not None
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_backward_rejects_non_scalar_loss():
    a = ad.parameter(rand(2, 2))
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.mul(a, a))


def test_shape_mismatch_names_op_and_shapes():
    a = ad.tensor(rand(2, 3))
    b = ad.tensor(rand(3, 3))
    with pytest.raises(ad.ShapeError, match=r"add.*\(2, 3\).*\(3, 3\)"):
        ad.add(a, b)
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(ad.tensor(rand(2, 3)), ad.tensor(rand(2, 3)))


def test_optimizer_requires_gradients_by_name():
    p = ad.parameter(rand(2))
    q = ad.parameter(rand(2))
    opt = ad.SgdOptimizer({"p": p, "q": q}, lr=0.1)
    p.grad = np.zeros(2)
    with pytest.raises(ad.MissingGradientError, match="'q'"):
        opt.step()
    # failed step must not half-apply updates
    assert p.grad is not None


def test_softmax_rows_sum_to_one_and_survive_huge_logits():
    for _ in range(20):
        x = ad.tensor(RNG.normal(0, 5, size=(4, 7)))
        y = ad.softmax(x).data
        np.testing.assert_allclose(y.sum(axis=1), np.ones(4), atol=1e-12)
    big = ad.softmax(ad.tensor([[1000.0, 1000.0, 999.0]])).data
    assert np.isfinite(big).all()
    np.testing.assert_allclose(big.sum(), 1.0, atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    x = ad.tensor(rand(5, 6))
    np.testing.assert_allclose(ad.log_softmax(x).data,
                               np.log(ad.softmax(x).data), atol=1e-12)


def test_no_grad_blocks_graph_recording():
    p = ad.parameter(rand(2, 2))
    with ad.no_grad():
        out = ad.mul(p, p)
    assert out._back is None and not out.requires_grad


def test_gradient_accumulates_across_backward_calls():
    p = ad.parameter([2.0])
    for _ in range(2):
        ad.backward(ad.sum_all(ad.mul(p, p)))
    np.testing.assert_allclose(p.grad, [8.0])


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = {"w": ad.parameter(rand(4, 3)), "b": ad.parameter(rand(3))}
    extras = {"vel.w": rand(4, 3)}
    path = os.path.join(tmp_path, "ckpt.npz")
    ad.save_checkpoint(path, params, hyper={"lr": 0.001, "note": "x"}, extras=extras)
    loaded, hyper, loaded_extras = ad.load_checkpoint(path)
    assert hyper == {"lr": 0.001, "note": "x"}
    for name in params:
        assert loaded[name].requires_grad
        np.testing.assert_array_equal(loaded[name].data, params[name].data)
    np.testing.assert_array_equal(loaded_extras["vel.w"], extras["vel.w"])


def test_checkpoint_rejects_wrong_version_and_garbage(tmp_path):
    path = os.path.join(tmp_path, "ckpt.npz")
    ad.save_checkpoint(path, {"w": ad.parameter(rand(2))}, hyper={})
    import json
    import zipfile
    with np.load(path) as npz:
        meta = json.loads(str(npz["meta"]))
        arrays = {k: npz[k] for k in npz.files}
    meta["version"] = 99
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)
    with pytest.raises(ad.CheckpointError, match="version"):
        ad.load_checkpoint(path)

    garbage = os.path.join(tmp_path, "garbage.npz")
    with open(garbage, "wb") as fh:
        fh.write(b"not a checkpoint at all")
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(garbage)


def test_gather_and_nll_reject_bad_indices():
    a = ad.tensor(rand(3, 4))
    with pytest.raises(IndexError):
        ad.gather_rows(a, np.array([0, 3]))
    with pytest.raises(ValueError, match="target index"):
        ad.nll_rows(ad.log_softmax(a), np.array([0, 4, 1]))
