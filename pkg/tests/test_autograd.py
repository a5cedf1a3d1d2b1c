import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import analytic_grads, fd_grads, rel_err
from vaderlab import autograd as ag
from vaderlab.autograd import Parameter, Tensor
from vaderlab.errors import GradientError, NondeterminismError, NonFiniteError, ShapeError
from vaderlab.nn import Linear

SEEDS = range(10)


def _weighted(out):
    """Generic scalar readout so every output element gets a distinct seed gradient."""
    w = np.random.default_rng(99).standard_normal(out.shape)
    return (out * Tensor(w)).sum()


def _pos(r, shape):
    return r.uniform(0.5, 2.0, size=shape)


# (name, input factory, function of tensors)
OPS = [
    ("add", lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)], lambda a, b: ag.add(a, b)),
    ("sub", lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))], lambda a, b: ag.sub(a, b)),
    ("mul", lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))], lambda a, b: ag.mul(a, b)),
    ("div", lambda r: [r.standard_normal((2, 3)), _pos(r, (2, 3))], lambda a, b: ag.div(a, b)),
    ("scalar_mul", lambda r: [r.standard_normal((3, 2))], lambda a: ag.scalar_mul(a, -1.7)),
    ("minimum", lambda r: [r.standard_normal(6), r.standard_normal(6) + 0.05],
     lambda a, b: ag.minimum(a, b)),
    ("tanh", lambda r: [r.standard_normal((2, 5))], ag.tanh),
    ("sigmoid", lambda r: [r.standard_normal((2, 5)) * 3], ag.sigmoid),
    ("silu", lambda r: [r.standard_normal((2, 5)) * 2], ag.silu),
    ("log_sigmoid", lambda r: [r.standard_normal((2, 5)) * 3], ag.log_sigmoid),
    ("exp", lambda r: [r.standard_normal(5)], ag.exp),
    ("log", lambda r: [_pos(r, (3, 3))], ag.log),
    ("square", lambda r: [r.standard_normal((3, 3))], ag.square),
    ("sqrt", lambda r: [_pos(r, (3, 3))], ag.sqrt),
    ("clip", lambda r: [np.array([-2.0, -0.3, 0.2, 0.7, 1.9])], lambda a: ag.clip(a, -1.0, 1.0)),
    ("matmul", lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))],
     lambda a, b: ag.matmul(a, b)),
    ("affine", lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5)), r.standard_normal(5)],
     lambda x, w, b: ag.affine(x, w, b)),
    ("reduce_sum", lambda r: [r.standard_normal((2, 3, 4))], lambda a: ag.reduce_sum(a, axis=(0, 2))),
    ("reduce_mean", lambda r: [r.standard_normal((2, 3, 4))], lambda a: ag.reduce_mean(a, axis=1)),
    ("reshape", lambda r: [r.standard_normal((2, 6))], lambda a: ag.reshape(a, (3, 4))),
    ("transpose", lambda r: [r.standard_normal((2, 3, 4))], lambda a: ag.transpose(a, (2, 0, 1))),
    ("broadcast", lambda r: [r.standard_normal((3, 1))], lambda a: ag.broadcast(a, (2, 3, 4))),
    ("slice", lambda r: [r.standard_normal((4, 5))], lambda a: ag.slice_(a, (slice(1, 3), [0, 2, 2]))),
    ("concat", lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 2))],
     lambda a, b: ag.concat([a, b], axis=1)),
    ("stack", lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))],
     lambda a, b: ag.stack([a, b], axis=1)),
    ("softmax", lambda r: [r.standard_normal((3, 4))], lambda a: ag.softmax(a, axis=-1)),
    ("log_softmax", lambda r: [r.standard_normal((3, 4))], lambda a: ag.log_softmax(a, axis=0)),
]


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name,make,fn", OPS, ids=[o[0] for o in OPS])
def test_op_gradient_matches_finite_differences(name, make, fn, seed):
    arrays = make(np.random.default_rng(seed))
    f = lambda *ts: _weighted(fn(*ts))  # noqa: E731
    for a, n in zip(analytic_grads(f, arrays), fd_grads(f, arrays)):
        assert rel_err(a, n) < 1e-4


def test_apply_dispatches_every_listed_op():
    x = Tensor(np.eye(2))
    a = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(ag.apply("matmul", x, a).data, a.data)
    assert ag.apply("reduce_mean", Tensor(np.ones((2, 3)))).item() == 1.0
    assert np.allclose(ag.apply("softmax", Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert ag.apply("concat", a, a, axis=0).shape == (4, 3)
    with pytest.raises(ValueError):
        ag.apply("conv2d", a)


def test_shape_errors_name_op_and_dims():
    with pytest.raises(ShapeError) as e:
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert e.value.op == "matmul"
    assert (2, 3) in e.value.dims
    with pytest.raises(ShapeError):
        ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        ag.reshape(Tensor(np.ones(5)), (2, 3))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_reports_node_id():
    x = Tensor(np.array([800.0]), requires_grad=True)
    with ag.Tape() as tape:
        y = ag.square(x)
        with pytest.raises(NonFiniteError) as e:
            ag.exp(y)  # overflows
    assert e.value.node_id == len(tape.nodes)
    with pytest.raises(NonFiniteError):
        ag.log(Tensor([0.0]))


def test_records_only_when_an_input_requires_grad():
    a = Tensor(np.ones(3))
    b = Tensor(np.ones(3), requires_grad=True)
    with ag.Tape() as tape:
        ag.add(a, a)
        assert len(tape) == 0
        ag.add(a, b)
        assert len(tape) == 1
        with ag.no_grad():
            ag.add(a, b)
        assert len(tape) == 1


def test_stop_grad_examples():
    x = Tensor([2.0], requires_grad=True)
    with ag.Tape():
        ag.backward((ag.stop_grad(x) * x).sum())
    assert np.array_equal(x.grad, [2.0])

    x = Tensor([1.0, 2.0], requires_grad=True)
    with ag.Tape():
        loss = ag.stop_grad(x).sum() + (x * 0.0).sum()
        ag.backward(loss)
    assert np.array_equal(x.grad, [0.0, 0.0])
    assert np.array_equal(ag.stop_grad(x).data, x.data)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6))
def test_stop_grad_idempotent(values):
    x = Tensor(np.array(values), requires_grad=True)
    once, twice = ag.stop_grad(x), ag.stop_grad(ag.stop_grad(x))
    assert np.array_equal(once.data, twice.data)
    assert not once.requires_grad and not twice.requires_grad


def test_backward_examples():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with ag.Tape():
        ag.backward((x * x).sum())
    assert np.array_equal(x.grad, [2.0, 4.0])

    x = Tensor([1.0, 2.0], requires_grad=True)
    with ag.Tape():
        ag.backward((ag.stop_grad(x) * x).sum())
    assert np.array_equal(x.grad, [1.0, 2.0])


def test_backward_errors_and_unreachable_params():
    p = Parameter("p", np.ones(3))
    q = Parameter("q", np.ones(2))
    with ag.Tape():
        y = p * 2.0
        with pytest.raises(GradientError):
            ag.backward(y)  # not scalar
        loss = y.sum()
        grads = ag.backward(loss, [p, q])
        with pytest.raises(GradientError):
            ag.backward(loss)  # consumed
    assert np.array_equal(grads["p"], [2.0, 2.0, 2.0])
    assert np.array_equal(grads["q"], [0.0, 0.0])


def test_shared_leaf_accumulates_once_per_path():
    x = Tensor([3.0], requires_grad=True)
    with ag.Tape():
        ag.backward((x * x + x * 2.0 + ag.tanh(x)).sum())
    assert np.allclose(x.grad, [2 * 3.0 + 2.0 + (1 - np.tanh(3.0) ** 2)])


class MLP:
    def __init__(self, seed, dims=(5, 7, 6, 3)):
        r = np.random.default_rng(seed)
        self.layers = [Linear(f"l{i}", a, b, r) for i, (a, b) in enumerate(zip(dims, dims[1:]))]
        for layer in self.layers:  # nonzero biases
            layer.bias.data = r.standard_normal(layer.bias.shape)

    def params(self):
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def __call__(self, x):
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ag.tanh(h) if i % 2 == 0 else ag.silu(h)
        return h


@pytest.mark.parametrize("seed", SEEDS)
def test_three_layer_mlp_matches_finite_differences(seed):
    mlp = MLP(seed)
    r = np.random.default_rng(seed + 100)
    x = Tensor(r.standard_normal((4, 5)))
    target = r.standard_normal((4, 3))

    def loss():
        return ag.square(mlp(x) - Tensor(target)).mean()

    with ag.Tape():
        grads = ag.backward(loss(), mlp.params())
    h = 1e-5
    for p in mlp.params():
        num = np.zeros_like(p.data)
        for i in range(p.data.size):
            old = p.data.flat[i]
            p.data.flat[i] = old + h
            with ag.no_grad():
                up = loss().item()
            p.data.flat[i] = old - h
            with ag.no_grad():
                down = loss().item()
            p.data.flat[i] = old
            num.flat[i] = (up - down) / (2 * h)
        assert rel_err(grads[p.name], num) < 1e-4, p.name


def test_determinism_bitwise():
    def run():
        mlp = MLP(4)
        x = Tensor(np.random.default_rng(5).standard_normal((3, 5)))
        with ag.Tape():
            out = mlp(x).sum()
            g = ag.backward(out, mlp.params())
        return out.data, g

    (o1, g1), (o2, g2) = run(), run()
    assert o1.tobytes() == o2.tobytes()
    assert all(g1[k].tobytes() == g2[k].tobytes() for k in g1)


def test_checkpoint_identity():
    x = Tensor([1.5, -2.0], requires_grad=True)
    with ag.Tape():
        y = ag.checkpoint(lambda t: t, x)
        assert np.array_equal(y.data, x.data)
        ag.backward(y.sum())
    assert np.array_equal(x.grad, [1.0, 1.0])


def _two_layer(seed):
    mlp = MLP(seed, dims=(4, 8, 3))
    x = Tensor(np.random.default_rng(seed).standard_normal((5, 4)), requires_grad=True)
    return mlp, x


@pytest.mark.parametrize("seed", range(3))
def test_checkpoint_matches_plain_exactly(seed):
    results = []
    for use_ckpt in (False, True):
        mlp, x = _two_layer(seed)
        with ag.Tape():
            h = ag.checkpoint(mlp, x) if use_ckpt else mlp(x)
            loss = ag.square(h).mean()
            grads = ag.backward(loss, mlp.params())
        results.append((loss.data.tobytes(), {k: v.tobytes() for k, v in grads.items()},
                        x.grad.tobytes()))
    assert results[0] == results[1]


def test_checkpoint_saves_fewer_activations():
    x0 = np.random.default_rng(0).standard_normal((4, 6))

    def segment(t):
        for _ in range(5):  # 10 ops
            t = ag.tanh(t * 1.1)
        return t

    counts = []
    for use_ckpt in (False, True):
        x = Tensor(x0, requires_grad=True)
        with ag.Tape() as tape:
            y = ag.checkpoint(segment, x) if use_ckpt else segment(x)
            counts.append(tape.saved_activations)
            ag.backward(y.sum())
    assert counts[1] < counts[0]


def test_checkpoint_detects_nondeterminism():
    calls = iter(range(100))

    def flaky(t):
        return t * float(next(calls))

    x = Tensor([1.0], requires_grad=True)
    with ag.Tape():
        y = ag.checkpoint(flaky, x)
        with pytest.raises(NondeterminismError):
            ag.backward(y.sum())


def test_precision_switch():
    assert ag.default_dtype() == np.float64
    with ag.precision("float32"):
        assert Tensor([1.0]).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64
