import math

import numpy as np
import pytest

from promptseg import numerics as nx
from promptseg.numerics import (
    AdamW, Im2ColPlan, MissingGradientError, NonFiniteError, ParamStore, Rng,
    ShapeError, Tensor, attention, concat, const, finite_difference_check, gelu,
    im2col, index_rows, layer_norm, matmul, pow_const, relu, sigmoid, slice_cols,
    softmax, softplus,
)

F64 = np.float64


def t64(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=F64), requires_grad=grad)


# --- attention ---

def test_attention_single_key_returns_value_row():
    q = t64([[0.3, -1.2], [5.0, 0.1]])
    k = t64([[0.7, 0.7]])
    v = t64([[2.5, -3.5]])
    out = attention(q, k, v)
    assert np.allclose(out.data, [[2.5, -3.5], [2.5, -3.5]])


def test_attention_identical_keys_gives_value_mean():
    q = t64([[1.0, 2.0]])
    k = t64([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
    v = t64([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    out = attention(q, k, v)
    assert np.allclose(out.data, v.data.mean(axis=0))


def test_attention_matches_scalar_oracle():
    # hand-set 2x2, d=2, single head; oracle is plain python arithmetic
    q = [[0.2, -0.4], [1.1, 0.3]]
    k = [[0.5, 0.7], [-0.2, 0.9]]
    v = [[1.0, 2.0], [3.0, -1.0]]
    out = attention(t64(q), t64(k), t64(v)).data

    def oracle_row(qr):
        scale = 1.0 / math.sqrt(2)
        logits = [(qr[0] * kr[0] + qr[1] * kr[1]) * scale for kr in k]
        m = max(logits)
        exps = [math.exp(x - m) for x in logits]
        z = sum(exps)
        w = [e / z for e in exps]
        return [w[0] * v[0][j] + w[1] * v[1][j] for j in range(2)]

    expect = np.array([oracle_row(r) for r in q])
    assert np.max(np.abs(out - expect)) < 1e-6


def test_attention_rows_are_convex_combinations():
    rng = Rng(7)
    q = t64(rng.normal(0, 1, (5, 8), dtype=F64))
    k = t64(rng.normal(0, 1, (6, 8), dtype=F64))
    v = t64(rng.normal(0, 1, (6, 8), dtype=F64))
    out = attention(q, k, v, n_heads=2).data
    for h, lo in ((0, 0), (1, 4)):
        vh = v.data[:, lo:lo + 4]
        oh = out[:, lo:lo + 4]
        assert (oh >= vh.min(axis=0) - 1e-9).all()
        assert (oh <= vh.max(axis=0) + 1e-9).all()


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        attention(t64([[1.0, 2.0]]), t64([[1.0, 2.0, 3.0]]), t64([[1.0, 2.0, 3.0]]))
    with pytest.raises(ShapeError):
        attention(t64([[1.0, 2.0, 3.0]]), t64([[1.0, 2.0, 3.0]]), t64([[1.0, 2.0, 3.0]]), n_heads=2)


def test_softmax_rows_sum_to_one():
    rng = Rng(3)
    x = softmax(t64(rng.normal(0, 5, (20, 7), dtype=F64)))
    assert np.abs(x.data.sum(axis=1) - 1.0).max() < 1e-6


# --- layer_norm ---

def test_layer_norm_constant_row_returns_bias():
    x = t64([[4.0, 4.0, 4.0]])
    g = t64([2.0, 2.0, 2.0])
    b = t64([0.5, -0.5, 0.0])
    out = layer_norm(x, g, b)
    assert np.allclose(out.data, b.data, atol=1e-6)


def test_layer_norm_two_point_row():
    out = layer_norm(t64([[1.0, 3.0]]), t64([1.0, 1.0]), t64([0.0, 0.0]))
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


# --- AdamW ---

def make_store(values, frozen=()):
    store = ParamStore()
    for name, val in values.items():
        store.create(name, np.asarray(val, dtype=np.float32))
    store.freeze(frozen)
    return store


def test_adamw_zero_gradient_is_noop():
    store = make_store({"w": [1.0, -2.0]})
    opt = AdamW(store, lr=0.1, weight_decay=0.0)
    before = store["w"].data.copy()
    opt.step({"w": np.zeros(2, dtype=np.float32)})
    assert np.array_equal(store["w"].data, before)


def test_adamw_scalar_hand_rule():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    g, theta, wd = 0.5, 2.0, 0.1
    store = make_store({"w": [theta]})
    opt = AdamW(store, lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    opt.step({"w": np.asarray([g], dtype=np.float32)})
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mhat = m / (1 - b1)
    vhat = v / (1 - b2)
    expect = theta - lr * mhat / (math.sqrt(vhat) + eps) - lr * wd * theta
    assert abs(float(store["w"].data[0]) - expect) < 1e-6


def test_adamw_frozen_parameter_untouched():
    store = make_store({"w": [1.0], "frozen.w": [3.0]}, frozen=["frozen.w"])
    opt = AdamW(store, lr=0.5)
    before = store["frozen.w"].data.tobytes()
    for _ in range(5):
        opt.step({"w": np.asarray([1.0], dtype=np.float32)})
    assert store["frozen.w"].data.tobytes() == before


def test_adamw_missing_gradient_raises():
    store = make_store({"w": [1.0]})
    opt = AdamW(store, lr=0.1)
    with pytest.raises(MissingGradientError):
        opt.step({})


def test_two_identical_steps_bitwise_identical():
    def run():
        rng = Rng(42)
        store = ParamStore()
        nx.linear_init(store, "lin", 4, 3, rng)
        opt = AdamW(store, lr=1e-3, weight_decay=1e-2)
        x = const(rng.uniform(-1, 1, (5, 4)))
        for _ in range(2):
            store.zero_grads()
            out = nx.linear(store, "lin", x)
            loss = (out * out).mean()
            loss.backward()
            opt.step(store.grads())
        return {n: store[n].data.tobytes() for n in store.names()}

    assert run() == run()


# --- finite differences ---

def test_fd_check_quadratic_is_tight():
    rng = Rng(11)
    point = t64(rng.normal(0, 1, (3, 4), dtype=F64))
    err = finite_difference_check(lambda x: (x * x).sum(), point)
    assert err < 1e-8


def test_fd_check_detects_corrupted_gradient():
    def bad(x):
        # forward of sum(x^2) but gradient of sum(x) by detaching the square
        return (x + const(x.data * x.data - x.data, F64)).sum()

    point = t64(np.asarray([[1.3, -0.4, 2.2]]))
    err = finite_difference_check(bad, point)
    assert err > 1e-2


def test_fd_check_nonfinite_raises():
    point = t64(np.asarray([[0.0]]))
    with pytest.raises(NonFiniteError):
        finite_difference_check(lambda x: x / x.sum(), point * const(0.0, F64))


OPS = {
    "add": lambda a, b: (a + b).sum(),
    "sub": lambda a, b: (a - b).mean(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + const(1.0, F64))).sum(),
    "neg": lambda a, b: (-a).sum(),
    "matmul": lambda a, b: matmul(a, b.T).sum(),
    "transpose": lambda a, b: (a.T * a.T).sum(),
    "reshape": lambda a, b: a.reshape((a.data.size, 1)).mean(),
    "concat": lambda a, b: concat([a, b], axis=0).sum(axis=None),
    "index_rows": lambda a, b: index_rows(a, [1, 0, 1]).sum(),
    "slice_cols": lambda a, b: slice_cols(a, 1, 3).sum(),
    "sum_axis": lambda a, b: (a.sum(axis=0) * a.sum(axis=0)).sum(),
    "mean_axis": lambda a, b: (a.mean(axis=1, keepdims=True) * a).sum(),
    "softmax": lambda a, b: (softmax(a) * b).sum(),
    "sigmoid": lambda a, b: sigmoid(a).sum(),
    "relu": lambda a, b: relu(a + const(0.05, F64)).sum(),
    "gelu": lambda a, b: gelu(a).sum(),
    "softplus": lambda a, b: softplus(a).sum(),
    "pow_const": lambda a, b: pow_const(a * a + const(0.5, F64), 1.7).sum(),
    "layer_norm": lambda a, b: (layer_norm(a, b.sum(axis=0), -b.sum(axis=0)) * a).sum(),
    "attention": lambda a, b: (attention(a, b, b, n_heads=2) * a).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    fn = OPS[name]
    worst = 0.0
    for seed in range(20):
        rng = Rng(1000 + seed)
        a0 = rng.normal(0, 1.0, (3, 4), dtype=F64)
        b0 = rng.normal(0, 1.0, (3, 4), dtype=F64)
        for probe in ("a", "b"):
            if probe == "b" and name in ("neg", "transpose", "reshape", "slice_cols",
                                         "index_rows", "sum_axis", "mean_axis", "sigmoid",
                                         "relu", "gelu", "softplus", "pow_const"):
                continue
            if probe == "a":
                point = t64(a0)
                err = finite_difference_check(lambda x: fn(x, t64(b0, grad=False)), point)
            else:
                point = t64(b0)
                err = finite_difference_check(lambda x: fn(t64(a0, grad=False), x), point)
            worst = max(worst, err)
    assert worst <= 1e-4, f"{name}: max rel err {worst}"


def test_im2col_gradient_and_values():
    plan = Im2ColPlan(h=4, w=4, k=3, stride=2, pad=1)
    assert plan.ho == 2 and plan.wo == 2
    rng = Rng(5)
    x0 = rng.normal(0, 1, (16, 2), dtype=F64)
    err = finite_difference_check(lambda x: (im2col(x, plan) * im2col(x, plan)).sum(), t64(x0))
    assert err < 1e-6
    # top-left patch of a padded 4x4: first row/col taps fall in the pad
    cols = im2col(t64(x0), plan).data
    img = x0.reshape(4, 4, 2)
    assert np.allclose(cols[0, :2], 0.0)  # (-1,-1) tap is padding
    assert np.allclose(cols[0, 8:10], img[0, 0])  # center tap (0,0)


def test_mixed_dtype_rejected():
    a = Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)
    b = t64(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        _ = a + b


# --- ParamStore / fingerprint / rng ---

def test_fingerprint_changes_with_payload():
    store = make_store({"a": [1.0, 2.0], "b": [3.0]}, frozen=["a", "b"])
    fp1 = store.fingerprint()
    store2 = make_store({"a": [1.0, 2.0], "b": [3.0001]}, frozen=["a", "b"])
    assert fp1 != store2.fingerprint()
    store3 = make_store({"a": [1.0, 2.0], "b": [3.0]}, frozen=["a", "b"])
    assert fp1 == store3.fingerprint()


def test_rng_split_streams_differ_and_repeat():
    r = Rng(9)
    a = r.split("x").uniform(0, 1, 5)
    b = r.split("y").uniform(0, 1, 5)
    assert not np.allclose(a, b)
    assert np.array_equal(a, Rng(9).split("x").uniform(0, 1, 5))


def test_frozen_params_require_no_grad_and_prune_tape():
    store = make_store({"w": [[1.0, 2.0]]}, frozen=["w"])
    x = Tensor(np.ones((1, 2), dtype=np.float32), requires_grad=True)
    out = (x * store["w"]).sum()
    out.backward()
    assert store["w"].grad is None
    assert x.grad is not None
