import numpy as np
import pytest

from evrecon import tensor as T
from evrecon.checkpoint import load_tensors, save_tensors
from evrecon.errors import ContractError, ParseError
from evrecon.gradcheck import gradcheck
from evrecon.tensor import Tensor


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def naive_conv2d(x, w, b, stride):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, pt, pb = T.same_padding(h, k, stride)
    wo, pl, pr = T.same_padding(wd, k, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[bi, oc, i, j] = np.sum(patch * w[oc]) + b[oc]
    return out


# -- core op examples -------------------------------------------------------


def test_relu_example():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_identity_center_kernel_is_identity():
    x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(T.conv2d(x, Tensor(w)).data, x.data)


def test_upsample_constant():
    x = Tensor(np.full((1, 2, 3, 5), 0.7))
    y = T.upsample2x(x)
    assert y.shape == (1, 2, 6, 10)
    np.testing.assert_allclose(y.data, 0.7, atol=1e-15)


def test_upsample_matches_half_pixel_reference(rng):
    x = rng.standard_normal((4, 3))
    y = T.upsample2x(Tensor(x[None, None])).data[0, 0]

    def ref1d(v, n_out):
        out = []
        for i in range(n_out):
            s = max((i + 0.5) / 2 - 0.5, 0)
            i0 = min(int(np.floor(s)), len(v) - 1)
            i1 = min(i0 + 1, len(v) - 1)
            out.append((1 - (s - i0)) * v[i0] + (s - i0) * v[i1])
        return np.array(out)

    rows = np.stack([ref1d(r, 6) for r in x])
    ref = np.stack([ref1d(c, 8) for c in rows.T]).T
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_same_padding_shape_ladder():
    assert T.same_padding(64, 5, 2) == (32, 1, 2)
    assert T.same_padding(64, 3, 1) == (64, 1, 1)
    assert T.same_padding(64, 1, 1) == (64, 0, 0)


@pytest.mark.parametrize("stride,k", [(1, 3), (1, 5), (2, 5), (1, 1), (2, 3)])
def test_conv2d_matches_naive_loops(rng, stride, k, backend):
    for _ in range(3):
        x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
        w = rng.standard_normal((4, 3, k, k)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride).data
        np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride), atol=1e-5)


def test_shape_mismatch_names_op():
    with pytest.raises(ContractError, match="add"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(ContractError, match="conv2d"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


def test_dtype_is_preserved():
    x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32))
    y = T.sigmoid(T.upsample2x(x) * 2.0 + 1.0).mean()
    assert y.dtype == np.float32


# -- backward ----------------------------------------------------------------


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
    T.backward(T.square(x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_fan_out_accumulates():
    x = Tensor([3.0], requires_grad=True, dtype=np.float64)
    T.backward((x + x).sum())
    np.testing.assert_array_equal(x.grad, [2.0])


def test_backward_requires_scalar_and_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(x * 2.0)
    with pytest.raises(ContractError):
        T.backward(Tensor(1.0))
    with pytest.raises(ContractError):
        T.backward(T.detach(x).sum())


def test_detach_blocks_gradient():
    x = Tensor([1.0, -2.0], requires_grad=True, dtype=np.float64)
    y = T.detach(x * 3.0)
    assert y.shape == x.shape
    np.testing.assert_array_equal(y.data, [3.0, -6.0])
    z = (y * x).sum()
    T.backward(z)
    # only the direct path contributes
    np.testing.assert_array_equal(x.grad, [3.0, -6.0])


def test_graph_tags_count_steps():
    # a shared weight keeps post-detach steps in the graph, as in TBPTT
    w = Tensor([2.0], requires_grad=True, dtype=np.float64)
    h = Tensor([1.0], requires_grad=True, dtype=np.float64)
    for step in range(6):
        with T.tag(step):
            h = T.tanh(h * w)
        if step == 2:
            h = T.detach(h)
    assert T.graph_tags(h.sum()) == {3, 4, 5}


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


# -- finite-difference checks: >= 20 random instances per op at float64 -----

UNARY = {
    "relu": T.relu,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "exp": T.exp,
    "abs": T.abs,
    "square": T.square,
    "clamp": lambda x: T.clamp(x, -0.5, 0.7),
    "sum_axis": lambda x: T.reduce_sum(x, axis=1),
    "mean": lambda x: x.mean(),
    "mean_axes": lambda x: T.reduce_mean(x, axis=(0, 2), keepdims=True),
    "slice": lambda x: x[:, 1:3, ::2],
    "pad_zero": lambda x: T.pad_zero(x, (1, 2, 0, 1)),
    "reshape": lambda x: x.reshape(2, -1),
    "scalar_ops": lambda x: 2.0 - x * 3.0 + 1.5 / (x * x + 1.0),
    "upsample2x": T.upsample2x,
    "avg_pool2": lambda x: T.avg_pool2(x[:, :, :4, :4]),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    fn = UNARY[name]
    for _ in range(20):
        x = leaf(rng, 2, 3, 4, 5)
        assert gradcheck(lambda: fn(x), [x], rng=rng) < 1e-3, name


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
def test_binary_broadcast_gradients(op, rng):
    for _ in range(20):
        a = leaf(rng, 2, 3, 4)
        b = leaf(rng, 1, 3, 1)
        if op is T.div:
            b.data[...] = np.abs(b.data) + 0.5
        assert gradcheck(lambda: op(a, b), [a, b], rng=rng) < 1e-3


def test_concat_gradient(rng):
    for _ in range(20):
        a, b = leaf(rng, 2, 2, 3, 3), leaf(rng, 2, 3, 3, 3)
        assert gradcheck(lambda: T.concat([a, b], axis=1), [a, b], rng=rng) < 1e-3


@pytest.mark.parametrize("stride,k", [(1, 3), (2, 5), (1, 1)])
def test_conv2d_gradient(rng, stride, k, backend):
    for _ in range(20):
        x, w, b = leaf(rng, 2, 3, 6, 6), leaf(rng, 4, 3, k, k), leaf(rng, 4)
        assert gradcheck(lambda: T.conv2d(x, w, b, stride), [x, w, b], rng=rng) < 1e-3


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradient(rng, training):
    for _ in range(20):
        x, g, bt = leaf(rng, 3, 4, 3, 3), leaf(rng, 4), leaf(rng, 4)
        rm, rv = rng.standard_normal(4), rng.random(4) + 0.5

        def fn():
            return T.batchnorm2d(x, g, bt, rm.copy(), rv.copy(), training)

        assert gradcheck(fn, [x, g, bt], rng=rng) < 1e-3


def test_bilinear_sample_gradient(rng, backend):
    for _ in range(20):
        x = leaf(rng, 2, 1, 6, 7)
        sx = rng.uniform(-1, 8, size=(2, 6, 7))
        sy = rng.uniform(-1, 7, size=(2, 6, 7))
        assert gradcheck(lambda: T.bilinear_sample(x, sx, sy), [x], rng=rng) < 1e-3


# -- batchnorm properties ------------------------------------------------------


def test_batchnorm_eval_is_affine(rng):
    g, b = Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(3))
    rm, rv = rng.standard_normal(3), rng.random(3) + 0.1
    x1, x2 = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
    f = lambda x: T.batchnorm2d(Tensor(x), g, b, rm, rv, training=False).data  # noqa: E731
    lam = 0.3
    np.testing.assert_allclose(f(lam * x1 + (1 - lam) * x2), lam * f(x1) + (1 - lam) * f(x2), atol=1e-10)


def test_batchnorm_train_normalizes(rng):
    x = rng.standard_normal((16, 3, 16, 16)) * [[[[3.0]], [[0.5]], [[7.0]]]] + [[[[1.0]], [[-4.0]], [[2.0]]]]
    rm, rv = np.zeros(3), np.ones(3)
    y = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-2)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-2)
    # running statistics move 10% towards the batch statistics
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-10)


# -- container format -----------------------------------------------------------


def test_container_roundtrip(tmp_path, rng):
    tensors = {"a.w": rng.standard_normal((2, 3)).astype(np.float32), "b": np.float32([1.5]), "ü": np.zeros((0, 4))}
    save_tensors(tmp_path / "t.he2v", tensors)
    back = load_tensors(tmp_path / "t.he2v")
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k].astype(np.float32))


def test_container_layout(tmp_path):
    save_tensors(tmp_path / "t.he2v", {"xy": np.float32([[1, 2]])})
    raw = (tmp_path / "t.he2v").read_bytes()
    expected = (
        b"HE2V"
        + (1).to_bytes(4, "little")
        + (1).to_bytes(4, "little")
        + (2).to_bytes(4, "little")
        + b"xy"
        + (2).to_bytes(4, "little")
        + (1).to_bytes(4, "little")
        + (2).to_bytes(4, "little")
        + np.float32([1, 2]).tobytes()
    )
    assert raw == expected


def test_container_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE")
    with pytest.raises(ParseError):
        load_tensors(tmp_path / "bad")


def test_gradcheck_flags_wrong_backward():
    x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    wrong = lambda: T.make(x.data**2, (x,), lambda g: (g * 3.0 * x.data,))
    assert gradcheck(wrong, [x]) > 0.1


def test_gradcheck_tolerates_kink_within_step():
    # relu input 4e-6 from zero: a 1e-5 step straddles the kink
    x = Tensor(np.array([4e-6, -3e-6, 0.5]), requires_grad=True)
    assert gradcheck(lambda: T.relu(x) * 2.0, [x]) < 1e-6
