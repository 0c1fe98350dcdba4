import numpy as np
import pytest

from src import qsim
from src import tensorgraph as tg
from src.errors import ShapeError


def check_gradients(op, shapes, rng, numeric_grad, assert_close_relative):
    arrays = [rng.normal(size=s) for s in shapes]
    nodes = [tg.Node(a, requires_grad=True) for a in arrays]
    out = op(*nodes)
    weights = rng.normal(size=out.shape)
    tg.backward(tg.sum_all(tg.mul(out, tg.constant(weights))))
    for i, array in enumerate(arrays):
        def f(values, i=i):
            inputs = [tg.Node(a) for a in arrays]
            inputs[i] = tg.Node(values)
            return float(np.sum(op(*inputs).values * weights))
        assert_close_relative(nodes[i].grad, numeric_grad(f, array))


PRIMITIVES = {
    "add": (tg.add, [(2, 3), (2, 3)]),
    "mul": (tg.mul, [(2, 3), (2, 3)]),
    "scalar_mul": (lambda x: tg.scalar_mul(x, -1.7), [(4,)]),
    "scalar_add": (lambda x: tg.scalar_add(x, 0.3), [(4,)]),
    "tanh": (tg.tanh, [(3, 2)]),
    "sigmoid": (tg.sigmoid, [(3, 2)]),
    "relu": (tg.relu, [(3, 4)]),
    "concat": (lambda a, b: tg.concat([a, b], axis=1), [(2, 3, 2, 2), (2, 1, 2, 2)]),
    "linear": (tg.linear, [(3, 4), (2, 4), (2,)]),
    "linear_no_bias": (tg.linear, [(3, 4), (5, 4)]),
    "global_avg_pool": (tg.global_avg_pool, [(2, 3, 4, 4)]),
    "broadcast_channelwise": (lambda x: tg.broadcast_channelwise(x, 3, 2), [(2, 3)]),
    "broadcast_rows": (lambda x: tg.broadcast_rows(x, 4), [(3,)]),
    "upsample_nearest2x": (tg.upsample_nearest2x, [(1, 2, 3, 3)]),
    "maxpool2x": (tg.maxpool2x, [(2, 2, 4, 6)]),
    "conv2d_same": (lambda x, w, b: tg.conv2d(x, w, b, padding=1), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_strided": (lambda x, w: tg.conv2d(x, w, stride=2, padding=1), [(1, 2, 5, 5), (2, 2, 3, 3)]),
    "conv2d_1x1": (lambda x, w: tg.conv2d(x, w), [(1, 3, 3, 3), (2, 3, 1, 1)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name, rng, numeric_grad, assert_close_relative):
    op, shapes = PRIMITIVES[name]
    check_gradients(op, shapes, rng, numeric_grad, assert_close_relative)


def test_sum_all_gradient_is_ones():
    x = tg.Node(np.arange(6.0).reshape(2, 3), requires_grad=True)
    tg.backward(tg.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_quantum_node_gradients(rng, numeric_grad, assert_close_relative):
    template = qsim.CircuitParams.create(3, 2, reupload=True, rng=rng, init_range=1.0)
    circuit = tg.parameter("angles", template.angles, "quantum", decay=False)
    xs = rng.normal(size=(4, 3))
    x = tg.Node(xs, requires_grad=True)
    weights = rng.normal(size=(4, 3))
    tg.backward(tg.sum_all(tg.mul(tg.quantum_node(x, circuit, template), tg.constant(weights))))

    def by_input(values):
        return float(np.sum(qsim.run_circuit_batch(values, template) * weights))

    def by_angles(values):
        return float(np.sum(qsim.run_circuit_batch(xs, template.with_angles(values)) * weights))

    assert_close_relative(x.grad, numeric_grad(by_input, xs))
    assert_close_relative(circuit.grad, numeric_grad(by_angles, template.angles))


def test_quantum_node_threads_do_not_change_results(rng, monkeypatch):
    template = qsim.CircuitParams.create(4, 2, rng=rng)
    xs = rng.normal(size=(7, 4))
    results = []
    for threads in ("1", "3"):
        monkeypatch.setenv(tg.THREADS_ENV, threads)
        assert tg.configure_threads() == int(threads)
        circuit = tg.parameter("angles", template.angles, "quantum")
        x = tg.Node(xs, requires_grad=True)
        out = tg.quantum_node(x, circuit, template)
        tg.backward(tg.sum_all(out))
        results.append((out.values, x.grad, circuit.grad))
    tg.configure_threads(1)
    for a, b in zip(*results):
        assert np.allclose(a, b, rtol=0, atol=1e-13)


def test_reused_node_accumulates():
    x = tg.Node(np.array([1.5, -2.0]), requires_grad=True)
    tg.backward(tg.sum_all(tg.mul(x, x)))
    assert np.allclose(x.grad, [3.0, -4.0])


def test_constants_receive_no_gradient():
    x = tg.Node(np.ones(3), requires_grad=True)
    c = tg.constant(np.full(3, 2.0))
    tg.backward(tg.sum_all(tg.mul(x, c)))
    assert not c.grad.any()
    assert np.allclose(x.grad, 2.0)


def test_shape_mismatch_names_operands():
    with pytest.raises(ShapeError, match="add"):
        tg.add(tg.Node(np.zeros((2, 3))), tg.Node(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        tg.mul(tg.Node(np.zeros(3)), tg.Node(np.zeros((1, 3))))


def test_structural_errors():
    with pytest.raises(ShapeError):
        tg.maxpool2x(tg.Node(np.zeros((1, 1, 3, 4))))
    with pytest.raises(ShapeError):
        tg.conv2d(tg.Node(np.zeros((1, 1, 4, 4))), tg.Node(np.zeros((1, 1, 2, 2))))
    with pytest.raises(ShapeError):
        tg.conv2d(tg.Node(np.zeros((1, 1, 4, 4))), tg.Node(np.zeros((1, 1, 3, 3))), stride=2, padding=1)
    with pytest.raises(ShapeError):
        tg.conv2d(tg.Node(np.zeros((1, 2, 4, 4))), tg.Node(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ShapeError):
        tg.linear(tg.Node(np.zeros((2, 3))), tg.Node(np.zeros((4, 2))))


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        tg.backward(tg.Node(np.zeros(2), requires_grad=True))


def test_maxpool_routes_ties_to_first_maximum():
    x = tg.Node(np.ones((1, 1, 2, 2)), requires_grad=True)
    tg.backward(tg.sum_all(tg.maxpool2x(x)))
    assert np.array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    out = tg.conv2d(tg.Node(x), tg.Node(w), padding=1).values
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                expected[0, o, i, j] = np.sum(padded[0, :, i:i + 3, j:j + 3] * w[o])
    assert np.allclose(out, expected)


def test_stable_sigmoid_extremes():
    values = tg.stable_sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(values))
    assert np.allclose(values, [0.0, 0.5, 1.0])


def test_parameter_rejects_unknown_group():
    with pytest.raises(ValueError):
        tg.parameter("w", np.zeros(2), "head")
