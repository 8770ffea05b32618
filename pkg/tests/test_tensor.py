import math

import numpy as np
import pytest
from scipy.special import erf

import emp.tensor as t
from emp.tensor import ComputeGraph, Tensor

from gradcheck import check_gradients

RNG = np.random.default_rng(20240811)


def randt(*shape, grad=False):
    return Tensor(RNG.standard_normal(shape), requires_grad=grad, dtype=np.float64)


def mha_params(d, seed=0):
    rng = np.random.default_rng(seed)
    names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
    out = {}
    for name in names:
        shape = (d, d) if name.startswith("w") else (d,)
        out[name] = rng.standard_normal(shape) * 0.3
    return out


def run_mha(tensors, heads, key_mask=None):
    return t.multi_head_attention(
        tensors["q"], tensors["k"], tensors["v"], heads,
        tensors["wq"], tensors["bq"], tensors["wk"], tensors["bk"],
        tensors["wv"], tensors["bv"], tensors["wo"], tensors["bo"],
        key_mask=key_mask,
    )


# ----------------------------------------------------------------------
# matmul
# ----------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor(np.eye(2), dtype=np.float64)
    b = Tensor([[1.0, 2.0], [3.0, 4.0]], dtype=np.float64)
    assert np.array_equal(t.matmul(a, b).numpy(), [[1, 2], [3, 4]])


def test_matmul_projector_selects_rows():
    p = Tensor([[1.0, 0.0], [0.0, 0.0]], dtype=np.float64)
    b = Tensor([[5.0, 6.0], [7.0, 8.0]], dtype=np.float64)
    assert np.array_equal(t.matmul(p, b).numpy(), [[5, 6], [0, 0]])


def test_matmul_triple_loop_oracle():
    a = RNG.standard_normal((3, 4))
    b = RNG.standard_normal((4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    got = t.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).numpy()
    assert np.allclose(got, expected, rtol=0, atol=1e-15)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(t.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        t.matmul(randt(2, 3), randt(2, 2))


def test_matmul_batched_matches_loop():
    a = RNG.standard_normal((5, 3, 4))
    b = RNG.standard_normal((5, 4, 2))
    got = t.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).numpy()
    for i in range(5):
        assert np.allclose(got[i], a[i] @ b[i])


# ----------------------------------------------------------------------
# softmax / layer_norm / activations
# ----------------------------------------------------------------------

def test_softmax_symmetry():
    out = t.softmax(Tensor([0.0, 0.0], dtype=np.float64)).numpy()
    assert np.allclose(out, [0.5, 0.5], atol=0)


def test_softmax_no_overflow():
    out = t.softmax(Tensor([1000.0, 0.0], dtype=np.float64)).numpy()
    assert np.all(np.isfinite(out))
    assert abs(out[0] - 1.0) < 1e-12 and out[1] < 1e-12


def test_softmax_formula_oracle():
    x = np.array([1.0, 2.0, 3.0])
    e = np.exp(x)
    assert np.allclose(t.softmax(Tensor(x, dtype=np.float64)).numpy(), e / e.sum(), atol=1e-15)


def test_softmax_sums_to_one_any_input():
    for _ in range(50):
        x = RNG.standard_normal((4, 7)) * RNG.uniform(0.1, 100)
        out = t.softmax(Tensor(x, dtype=np.float64), axis=-1).numpy()
        assert np.all(np.abs(out.sum(axis=-1) - 1.0) <= 1e-9)
        assert np.all(out > 0)


def test_layer_norm_two_values():
    out = t.layer_norm(
        Tensor([1.0, 3.0], dtype=np.float64),
        Tensor(np.ones(2), dtype=np.float64),
        Tensor(np.zeros(2), dtype=np.float64),
        eps=1e-12,
    ).numpy()
    assert np.allclose(out, [-1.0, 1.0], atol=1e-6)


def test_layer_norm_constant_row_is_zero():
    out = t.layer_norm(
        Tensor(np.full((3, 4), 7.0), dtype=np.float64),
        Tensor(np.ones(4), dtype=np.float64),
        Tensor(np.zeros(4), dtype=np.float64),
    ).numpy()
    assert np.allclose(out, 0.0)


def test_layer_norm_formula_oracle():
    x = RNG.standard_normal(6)
    g = RNG.standard_normal(6)
    b = RNG.standard_normal(6)
    eps = 1e-5
    expected = (x - x.mean()) / math.sqrt(x.var() + eps) * g + b
    got = t.layer_norm(
        Tensor(x, dtype=np.float64), Tensor(g, dtype=np.float64), Tensor(b, dtype=np.float64), eps
    ).numpy()
    assert np.allclose(got, expected, atol=1e-12)


def test_relu_values():
    out = t.relu(Tensor([-1.0, 2.0], dtype=np.float64)).numpy()
    assert np.array_equal(out, [0.0, 2.0])


def test_gelu_zero_and_erf_oracle():
    assert t.gelu(Tensor(0.0, dtype=np.float64)).item() == 0.0
    x = 1.0
    expected = x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    assert abs(t.gelu(Tensor(x, dtype=np.float64)).item() - expected) < 1e-15


# ----------------------------------------------------------------------
# multi-head attention
# ----------------------------------------------------------------------

def test_mha_single_key_returns_projected_value():
    d, heads = 4, 2
    p = mha_params(d)
    q = RNG.standard_normal((3, d))
    k = RNG.standard_normal((1, d))
    v = RNG.standard_normal((1, d))
    tensors = {"q": Tensor(q, dtype=np.float64), "k": Tensor(k, dtype=np.float64),
               "v": Tensor(v, dtype=np.float64)}
    tensors.update({n: Tensor(a, dtype=np.float64) for n, a in p.items()})
    out = run_mha(tensors, heads).numpy()
    projected = (v @ p["wv"] + p["bv"]) @ p["wo"] + p["bo"]
    for row in out:
        assert np.allclose(row, projected[0], atol=1e-12)


def test_mha_duplicate_key_degeneracy():
    d, heads = 4, 2
    p = mha_params(d, seed=1)
    q = RNG.standard_normal((2, d))
    k1 = RNG.standard_normal((1, d))
    v1 = RNG.standard_normal((1, d))
    base = {n: Tensor(a, dtype=np.float64) for n, a in p.items()}
    one = dict(base, q=Tensor(q, dtype=np.float64), k=Tensor(k1, dtype=np.float64),
               v=Tensor(v1, dtype=np.float64))
    two = dict(base, q=Tensor(q, dtype=np.float64),
               k=Tensor(np.vstack([k1, k1]), dtype=np.float64),
               v=Tensor(np.vstack([v1, v1]), dtype=np.float64))
    assert np.allclose(run_mha(one, heads).numpy(), run_mha(two, heads).numpy(), atol=1e-12)


def test_mha_mask_equals_key_removal():
    d, heads = 8, 4
    p = mha_params(d, seed=2)
    base = {n: Tensor(a, dtype=np.float64) for n, a in p.items()}
    q = RNG.standard_normal((3, d))
    k = RNG.standard_normal((5, d))
    v = RNG.standard_normal((5, d))
    for j in range(5):
        mask = np.ones(5, dtype=bool)
        mask[j] = False
        masked = run_mha(
            dict(base, q=Tensor(q, dtype=np.float64), k=Tensor(k, dtype=np.float64),
                 v=Tensor(v, dtype=np.float64)),
            heads, key_mask=mask,
        ).numpy()
        keep = np.delete(np.arange(5), j)
        removed = run_mha(
            dict(base, q=Tensor(q, dtype=np.float64), k=Tensor(k[keep], dtype=np.float64),
                 v=Tensor(v[keep], dtype=np.float64)),
            heads,
        ).numpy()
        assert np.allclose(masked, removed, atol=1e-9)


def test_mha_all_masked_raises():
    d, heads = 4, 2
    base = {n: Tensor(a, dtype=np.float64) for n, a in mha_params(d).items()}
    tensors = dict(base, q=randt(2, d), k=randt(3, d), v=randt(3, d))
    with pytest.raises(t.InvalidMaskError):
        run_mha(tensors, heads, key_mask=np.zeros(3, dtype=bool))


def test_mha_permutation_invariance_of_key_value_pairs():
    d, heads = 8, 2
    base = {n: Tensor(a, dtype=np.float64) for n, a in mha_params(d, seed=3).items()}
    q = RNG.standard_normal((2, d))
    k = RNG.standard_normal((6, d))
    v = RNG.standard_normal((6, d))
    mask = np.array([True, True, False, True, True, False])
    out = run_mha(dict(base, q=Tensor(q, dtype=np.float64), k=Tensor(k, dtype=np.float64),
                       v=Tensor(v, dtype=np.float64)), heads, key_mask=mask).numpy()
    for _ in range(10):
        perm = RNG.permutation(6)
        out_p = run_mha(
            dict(base, q=Tensor(q, dtype=np.float64), k=Tensor(k[perm], dtype=np.float64),
                 v=Tensor(v[perm], dtype=np.float64)),
            heads, key_mask=mask[perm],
        ).numpy()
        assert np.allclose(out, out_p, atol=1e-12)


# ----------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------

def test_backward_weighted_sum_gradient_is_input():
    w = Tensor(RNG.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
    x = Tensor(RNG.standard_normal((4, 2)), dtype=np.float64)
    t.backward(t.reduce_sum(t.matmul(w, x)))
    # d/dW sum(W @ x) = broadcast of x's row sums
    expected = np.tile(x.numpy().sum(axis=1), (3, 1))
    assert np.allclose(w.grad, expected, atol=1e-12)


def test_backward_rejects_non_scalar():
    with pytest.raises(t.ContractViolation):
        t.backward(randt(2, 2, grad=True))


def test_backward_resets_accumulators_each_pass():
    x = Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
    loss = t.reduce_sum(t.mul(x, x))
    t.backward(loss)
    first = x.grad.copy()
    t.backward(loss)
    assert np.array_equal(x.grad, first)


def test_compute_graph_topological_and_single_visit():
    x = Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
    y = t.mul(x, x)
    z = t.add(y, x)       # diamond: x reached twice
    loss = t.reduce_sum(t.mul(z, y))
    graph = ComputeGraph.from_root(loss)
    seen_ids = [id(n) for n in graph.nodes]
    assert len(seen_ids) == len(set(seen_ids))  # each node exactly once
    position = {i: p for p, i in enumerate(seen_ids)}
    for node in graph.nodes:
        for parent in node.parents:
            assert position[id(parent)] < position[id(node)]
    # analytic check of the diamond: loss = sum((x^2 + x) * x^2)
    t.backward(loss)
    xv = np.array([1.0, 2.0])
    assert np.allclose(x.grad, 4 * xv**3 + 3 * xv**2, atol=1e-12)


def test_forward_is_deterministic():
    base = {n: Tensor(a, dtype=np.float64) for n, a in mha_params(6, seed=4).items()}
    q, k, v = randt(4, 6), randt(5, 6), randt(5, 6)
    a = run_mha(dict(base, q=q, k=k, v=v), 3).numpy()
    b = run_mha(dict(base, q=q, k=k, v=v), 3).numpy()
    assert np.array_equal(a, b)


# ----------------------------------------------------------------------
# finite-difference checks, one per primitive
# ----------------------------------------------------------------------

def weighted(out, seed=7):
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return t.reduce_sum(t.mul(out, Tensor(w, dtype=np.float64)))


@pytest.mark.parametrize("name,builder", [
    ("add", lambda v: weighted(t.add(v["a"], v["b"]))),
    ("add_broadcast", lambda v: weighted(t.add(v["a"], v["row"]))),
    ("sub", lambda v: weighted(t.sub(v["a"], v["b"]))),
    ("mul", lambda v: weighted(t.mul(v["a"], v["b"]))),
    ("neg", lambda v: weighted(t.neg(v["a"]))),
    ("exp", lambda v: weighted(t.exp(v["a"]))),
    ("log", lambda v: weighted(t.log(t.add(t.mul(v["a"], v["a"]), 1.0)))),
    ("abs", lambda v: weighted(t.absolute(v["a"]))),
    ("relu", lambda v: weighted(t.relu(v["a"]))),
    ("gelu", lambda v: weighted(t.gelu(v["a"]))),
    ("where", lambda v: weighted(t.where(np.array([[True, False, True], [False, True, False]]),
                                         v["a"], v["b"]))),
    ("reshape", lambda v: weighted(t.reshape(v["a"], (3, 2)))),
    ("transpose", lambda v: weighted(t.transpose(v["a"], (1, 0)))),
    ("concat", lambda v: weighted(t.concat([v["a"], v["b"]], axis=1))),
    ("slice", lambda v: weighted(t.slice_axis(v["a"], 1, 1, 3))),
    ("gather", lambda v: weighted(t.gather_rows(v["a"], np.array([1, 0, 1])))),
    ("sum_all", lambda v: t.reduce_sum(v["a"])),
    ("sum_axis", lambda v: weighted(t.reduce_sum(v["a"], axis=1, keepdims=True))),
    ("max", lambda v: weighted(t.reduce_max(v["a"], axis=1))),
    ("mean", lambda v: weighted(t.mean(v["a"], axis=0))),
    ("softmax", lambda v: weighted(t.softmax(v["a"], axis=-1))),
])
def test_primitive_gradients(name, builder):
    rng = np.random.default_rng(hash(name) % 2**31)
    arrays = {
        "a": rng.standard_normal((2, 3)) + 0.1,
        "b": rng.standard_normal((2, 3)),
        "row": rng.standard_normal(3),
    }
    check_gradients(builder, arrays, tol=1e-6)


def test_matmul_gradients_both_patterns():
    rng = np.random.default_rng(11)
    check_gradients(
        lambda v: weighted(t.matmul(v["a"], v["b"])),
        {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))},
    )
    check_gradients(
        lambda v: weighted(t.matmul(v["a"], v["b"])),
        {"a": rng.standard_normal((2, 3, 4)), "b": rng.standard_normal((2, 4, 2))},
    )
    check_gradients(  # batched left, shared right matrix
        lambda v: weighted(t.matmul(v["a"], v["b"])),
        {"a": rng.standard_normal((2, 3, 4)), "b": rng.standard_normal((4, 2))},
    )


def test_layer_norm_gradients():
    rng = np.random.default_rng(12)
    check_gradients(
        lambda v: weighted(t.layer_norm(v["x"], v["g"], v["b"])),
        {"x": rng.standard_normal((3, 5)), "g": rng.standard_normal(5),
         "b": rng.standard_normal(5)},
    )


def test_mha_gradients():
    rng = np.random.default_rng(13)
    d, heads = 4, 2
    arrays = {"q": rng.standard_normal((3, d)), "k": rng.standard_normal((4, d)),
              "v": rng.standard_normal((4, d))}
    arrays.update(mha_params(d, seed=14))
    mask = np.array([True, False, True, True])
    check_gradients(lambda v: weighted(run_mha(v, heads, key_mask=mask)), arrays, tol=1e-6)
