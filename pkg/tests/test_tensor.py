import math

import numpy as np
import pytest

from diffvqa import tensor as T
from diffvqa.tensor import Tensor, grad_check


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def away_from_kinks(rng, shape, lo=0.1):
    x = rng.uniform(-2, 2, size=shape)
    return np.where(np.abs(x) < lo, np.sign(x) * lo + x, x)


# -- matmul ------------------------------------------------------------------


def test_matmul_identity():
    out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_grad(rng):
    b = Tensor(rng.uniform(-2, 2, (3, 3)))
    assert grad_check(lambda a: T.matmul(a, b).sum(), rng.uniform(-2, 2, (3, 3))) <= 1e-6
    a = Tensor(rng.uniform(-2, 2, (3, 3)))
    assert grad_check(lambda x: T.matmul(a, x).sum(), rng.uniform(-2, 2, (3, 3))) <= 1e-6


def test_matmul_batched_grad(rng):
    b = Tensor(rng.uniform(-2, 2, (2, 4, 3)))
    w = rng.uniform(-1, 1, (2, 3, 3))
    f = lambda a: (T.matmul(a, b) * Tensor(w)).sum()
    assert grad_check(f, rng.uniform(-2, 2, (2, 3, 4))) <= 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_linear_grad(rng):
    w = rng.uniform(-1, 1, (4, 3))
    b = rng.uniform(-1, 1, 3)
    x = Tensor(rng.uniform(-2, 2, (2, 5, 4)))
    probe = Tensor(rng.uniform(-1, 1, (2, 5, 3)))
    assert grad_check(lambda t: (T.linear(t, Tensor(w), Tensor(b)) * probe).sum(), x) <= 1e-6
    assert grad_check(lambda t: (T.linear(x, t, Tensor(b)) * probe).sum(), w) <= 1e-6
    assert grad_check(lambda t: (T.linear(x, Tensor(w), t) * probe).sum(), b) <= 1e-6


# -- conv2d --------------------------------------------------------------------


def test_conv_scaling():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)),
                   Tensor([0.0]), stride=1, pad=0)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_hand():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = T.conv2d(x, Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]))
    assert out.data.tolist() == [[[[10.0]]]]


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    Ho, Wo = (7 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1
    ref = np.zeros((2, 4, Ho, Wo))
    for bi in range(2):
        for o in range(4):
            for i in range(Ho):
                for j in range(Wo):
                    ref[bi, o, i, j] = (xp[bi, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 1)])
def test_conv_grads(rng, stride, pad):
    x = rng.uniform(-2, 2, (1, 2, 5, 5))
    w = rng.uniform(-1, 1, (3, 2, 3, 3))
    b = rng.uniform(-1, 1, 3)
    probe = Tensor(rng.uniform(-1, 1, T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).shape))
    conv = lambda xx, ww, bb: (T.conv2d(xx, ww, bb, stride, pad) * probe).sum()
    assert grad_check(lambda t: conv(t, Tensor(w), Tensor(b)), x) <= 1e-5
    assert grad_check(lambda t: conv(Tensor(x), t, Tensor(b)), w) <= 1e-5
    assert grad_check(lambda t: conv(Tensor(x), Tensor(w), t), b) <= 1e-5


def test_conv_kernel_too_large():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# -- grid sampling -----------------------------------------------------------------


def identity_grid(B, H, W):
    ys = np.linspace(-1, 1, H)
    xs = np.linspace(-1, 1, W)
    gx, gy = np.meshgrid(xs, ys)
    return np.broadcast_to(np.stack([gx, gy], -1), (B, H, W, 2)).copy()


def test_grid_sample_identity_exact(rng):
    x = rng.uniform(size=(2, 3, 9, 13))
    out = T.grid_sample_bilinear(Tensor(x), Tensor(identity_grid(2, 9, 13)))
    assert np.array_equal(out.data, x)


def test_grid_sample_midpoint():
    x = Tensor(np.array([[0.0, 1.0]]).reshape(1, 1, 1, 2))
    grid = Tensor(np.array([0.0, -1.0]).reshape(1, 1, 1, 2))
    # single row: H=1 so gy maps to row 0 regardless
    x2 = Tensor(np.array([[0.0, 1.0], [0.0, 1.0]]).reshape(1, 1, 2, 2))
    out = T.grid_sample_bilinear(x2, Tensor(np.array([0.0, -1.0]).reshape(1, 1, 1, 2)))
    assert out.data.item() == 0.5


def test_grid_sample_out_of_range_zero():
    x = Tensor(np.ones((1, 1, 3, 3)))
    out = T.grid_sample_bilinear(x, Tensor(np.array([5.0, 5.0]).reshape(1, 1, 1, 2)))
    assert out.data.item() == 0.0


def test_grid_sample_grads(rng):
    x = rng.uniform(0, 1, (1, 1, 4, 4))
    # keep samples strictly inside cells so bilinear weights are smooth
    grid = identity_grid(1, 4, 4) * 0.8 + rng.uniform(-0.05, 0.05, (1, 4, 4, 2)) + 0.07
    probe = Tensor(rng.uniform(-1, 1, (1, 1, 4, 4)))
    f_grid = lambda g: (T.grid_sample_bilinear(Tensor(x), g) * probe).sum()
    f_x = lambda t: (T.grid_sample_bilinear(t, Tensor(grid)) * probe).sum()
    assert grad_check(f_grid, grid) <= 1e-5
    assert grad_check(f_x, x) <= 1e-5


# -- elementwise suite -------------------------------------------------------------


def test_relu_definition():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_softmax_symmetry():
    assert T.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_maximum_tie_goes_to_first():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([1.0, 3.0], requires_grad=True)
    T.maximum(a, b).sum().backward()
    assert a.grad.tolist() == [1.0, 0.0]
    assert b.grad.tolist() == [0.0, 1.0]


def test_broadcast_rules():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    out = T.add(Tensor(np.ones((2, 3))), 2.0)
    assert (out.data == 3).all()


UNARY = {
    "relu": lambda t: T.relu(t),
    "exp": lambda t: T.exp(t),
    "log": lambda t: T.log(T.exp(t)),
    "scale": lambda t: T.scale(t, -1.7),
    "mean_axis": lambda t: T.mean(t, axis=1),
    "sum_axis": lambda t: T.tsum(t, axis=0, keepdims=True),
    "reshape": lambda t: T.reshape(t, (4, 3)),
    "transpose": lambda t: T.transpose(t, (1, 0)),
    "slice": lambda t: t[1:, ::2],
    "fancy_index": lambda t: t[np.array([0, 2, 2])],
    "softmax": lambda t: T.softmax(t, axis=1),
    "softmax_masked": lambda t: T.softmax(t, axis=1, mask=np.tri(3, 4, 1, dtype=bool)),
    "log_softmax": lambda t: T.log_softmax(t, axis=0),
    "layer_norm": lambda t: T.layer_norm(t, axis=-1),
    "layer_norm_axis0": lambda t: T.layer_norm(t, axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_grads(rng, name):
    x = away_from_kinks(rng, (3, 4))
    probe = rng.uniform(-1, 1, UNARY[name](Tensor(x)).shape)
    f = lambda t: (UNARY[name](t) * Tensor(probe)).sum()
    assert grad_check(f, x) <= 1e-5


@pytest.mark.parametrize("op", ["add", "sub", "mul", "maximum"])
def test_binary_grads(rng, op):
    fn = {"add": T.add, "sub": T.sub, "mul": T.mul, "maximum": T.maximum}[op]
    a = rng.uniform(-2, 2, (3, 4))
    b = a + np.where(rng.uniform(size=(3, 4)) > 0.5, 0.5, -0.5)
    probe = Tensor(rng.uniform(-1, 1, (3, 4)))
    assert grad_check(lambda t: (fn(t, Tensor(b)) * probe).sum(), a) <= 1e-5
    assert grad_check(lambda t: (fn(Tensor(a), t) * probe).sum(), b) <= 1e-5


def test_concat_grad(rng):
    a = rng.uniform(-2, 2, (2, 3))
    b = Tensor(rng.uniform(-2, 2, (2, 2)))
    probe = Tensor(rng.uniform(-1, 1, (2, 5)))
    assert grad_check(lambda t: (T.concat([t, b], axis=1) * probe).sum(), a) <= 1e-5


def test_layer_norm_affine_grads(rng):
    x = rng.uniform(-2, 2, (2, 3, 5))
    g = rng.uniform(0.5, 1.5, 5)
    b = rng.uniform(-1, 1, 5)
    probe = Tensor(rng.uniform(-1, 1, (2, 3, 5)))
    f = lambda xx, gg, bb: (T.layer_norm(xx, gg, bb) * probe).sum()
    assert grad_check(lambda t: f(t, Tensor(g), Tensor(b)), x) <= 1e-5
    assert grad_check(lambda t: f(Tensor(x), t, Tensor(b)), g) <= 1e-5
    assert grad_check(lambda t: f(Tensor(x), Tensor(g), t), b) <= 1e-5


def test_embedding_grad(rng):
    table = rng.uniform(-2, 2, (5, 3))
    ids = np.array([[0, 4, 4], [2, 1, 0]])
    probe = Tensor(rng.uniform(-1, 1, (2, 3, 3)))
    assert grad_check(lambda t: (T.embedding(t, ids) * probe).sum(), table) <= 1e-5


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(Tensor(np.ones((3, 2))), np.array([3]))


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        T.log(Tensor([0.0, 1.0]))


# -- cross entropy -------------------------------------------------------------------


def test_cross_entropy_uniform():
    loss = T.cross_entropy(Tensor(np.zeros((1, 4))), [2])
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_saturated():
    logits = np.zeros((1, 4))
    logits[0, 1] = 1000.0
    assert T.cross_entropy(Tensor(logits), [1]).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_direct_formula(rng):
    logits = rng.normal(size=(3, 5))
    targets = np.array([4, 0, 2])
    mask = np.array([False, True, False])
    # independent oracle: plain log-sum-exp per kept row
    kept = [0, 2]
    expected = np.mean([math.log(sum(math.exp(v) for v in logits[i])) - logits[i, targets[i]]
                        for i in kept])
    got = T.cross_entropy(Tensor(logits), targets, mask).item()
    assert abs(got - expected) <= 1e-9
    assert grad_check(lambda t: T.cross_entropy(t, targets, mask), logits) <= 1e-5


def test_cross_entropy_all_masked():
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], [True, True])


# -- backward semantics ------------------------------------------------------------------


def test_backward_linear():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x.sum().backward()
    assert x.grad.tolist() == [1.0] * 4


def test_backward_quadratic():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    assert x.grad.tolist() == [2.0, -4.0, 6.0]


def test_backward_fan_out():
    x = Tensor(np.ones(3), requires_grad=True)
    (x.sum() + x.sum()).backward()
    assert x.grad.tolist() == [2.0, 2.0, 2.0]


def test_backward_accumulates():
    x = Tensor(np.ones(2), requires_grad=True)
    x.sum().backward()
    x.sum().backward()
    assert x.grad.tolist() == [2.0, 2.0]


def test_backward_non_scalar():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        T.scale(x, 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * x
    assert not y.requires_grad


def test_nonfinite_is_error():
    with pytest.raises(T.NonFiniteError):
        T.exp(Tensor([1000.0]))


# -- grad_check ----------------------------------------------------------------------


def test_grad_check_sum(rng):
    assert grad_check(lambda t: t.sum(), rng.normal(size=(3, 2))) <= 1e-9


def test_grad_check_relu_away_from_kink(rng):
    assert grad_check(lambda t: T.relu(t).sum(), away_from_kinks(rng, (4, 4))) <= 1e-6


def test_grad_check_non_scalar():
    with pytest.raises(ValueError):
        grad_check(lambda t: t, np.ones(3))


def test_csv_round_trip(tmp_path, rng):
    x = rng.normal(size=(2, 3, 4))
    T.to_csv(Tensor(x), tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "2,3,4"
    np.testing.assert_array_equal(T.from_csv(tmp_path / "t.csv").data, x)
