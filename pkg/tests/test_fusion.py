import numpy as np
import pytest

from src import fusion
from src import tensorgraph as tg
from src.errors import ShapeError


def _features(rng, shape=(2, 3, 4, 4)):
    return rng.normal(size=shape), rng.normal(size=shape)


def test_fpn_gate_parameter_shapes():
    gate = fusion.QuantumFpnGate.create("fpn.gate0", channels=8, seed=0)
    shapes = {p.name: p.values.shape for p in gate.parameters()}
    assert shapes == {
        "fpn.gate0.compress.weight": (4, 16),
        "fpn.gate0.scale": (4,),
        "fpn.gate0.shift": (4,),
        "fpn.gate0.circuit.angles": (2, 4, 3),
        "fpn.gate0.out_linear.weight": (8, 4),
        "fpn.gate0.out_linear.bias": (8,),
    }
    assert gate.circuit.group == "quantum" and not gate.circuit.decay
    assert not gate.scale.decay and not gate.shift.decay
    assert np.all(gate.scale.values == 0.5) and not gate.shift.values.any()
    assert np.all(np.abs(gate.circuit.values) <= fusion.CIRCUIT_INIT_RANGE)
    assert gate.template.reupload


def test_skip_gate_has_24_circuit_parameters():
    gate = fusion.QuantumSkipGate.create("unet.skip_gate0", channels=6, seed=0, reupload=False)
    assert gate.circuit.size == 24
    assert not gate.template.reupload
    assert gate.proj.values.shape == (4, 6)


def test_same_name_and_seed_initialise_identically():
    a = fusion.QuantumFpnGate.create("fpn.gate1", 4, seed=5)
    b = fusion.QuantumFpnGate.create("fpn.gate1", 4, seed=5)
    c = fusion.QuantumFpnGate.create("fpn.gate1", 4, seed=6)
    assert np.array_equal(a.compress.values, b.compress.values)
    assert not np.array_equal(a.compress.values, c.compress.values)


def test_zeroed_output_linear_gives_plain_average(rng):
    gate = fusion.QuantumFpnGate.create("g", 3, seed=1)
    gate.out_weight.node.values = np.zeros_like(gate.out_weight.values)
    gate.out_bias.node.values = np.zeros_like(gate.out_bias.values)
    f_lat, f_td = _features(rng)
    out = fusion.fpn_gate_forward(tg.Node(f_lat), tg.Node(f_td), gate).values
    assert np.allclose(out, 0.5 * (f_lat + f_td), rtol=0, atol=1e-15)


def test_gate_output_stays_between_inputs():
    # 100 random gates x 100 feature rows = 10^4 draws, each gate evaluated as one batch
    rng = np.random.default_rng(11)
    for draw in range(100):
        gate = fusion.QuantumFpnGate.create("g", 4, seed=draw)
        for param in (gate.compress, gate.scale, gate.shift, gate.out_weight, gate.out_bias):
            param.node.values = rng.normal(scale=3.0, size=param.values.shape)
        gate.circuit.node.values = rng.uniform(-np.pi, np.pi, gate.circuit.values.shape)
        f_lat, f_td = _features(rng, (100, 4, 2, 2))
        out = fusion.fpn_gate_forward(tg.Node(f_lat), tg.Node(f_td), gate).values
        assert np.all(out >= np.minimum(f_lat, f_td) - 1e-12)
        assert np.all(out <= np.maximum(f_lat, f_td) + 1e-12)


def test_gate_values_in_unit_interval(rng):
    gate = fusion.QuantumSkipGate.create("s", 5, seed=2)
    g = gate.gate(tg.Node(rng.normal(size=(3, 5, 2, 2)))).values
    assert g.shape == (3, 5)
    assert np.all((g > 0) & (g < 1))


def test_classical_merge_is_addition(rng):
    f_lat, f_td = _features(rng)
    assert np.array_equal(fusion.classical_fpn_merge(tg.Node(f_lat), tg.Node(f_td)).values, f_lat + f_td)


def _check_chain(forward, inputs, params, rng, numeric_grad, assert_close_relative):
    nodes = [tg.Node(v, requires_grad=True) for v in inputs]
    out = forward(*nodes)
    weights = rng.normal(size=out.shape)
    tg.backward(tg.sum_all(tg.mul(out, tg.constant(weights))))

    def total():
        return float(np.sum(forward(*[tg.Node(v) for v in inputs]).values * weights))

    for node, values in zip(nodes, inputs):
        def by_input(v, values=values):
            saved = values.copy()
            values[...] = v
            result = total()
            values[...] = saved
            return result
        assert_close_relative(node.grad, numeric_grad(by_input, values))
    for param in params:
        def by_param(v, param=param):
            saved = param.node.values
            param.node.values = v
            result = total()
            param.node.values = saved
            return result
        assert_close_relative(param.grad, numeric_grad(by_param, param.values))


def test_fpn_gate_chain_gradients(rng, numeric_grad, assert_close_relative):
    gate = fusion.QuantumFpnGate.create("g", 2, seed=3)
    gate.out_weight.node.values = rng.normal(size=gate.out_weight.values.shape)
    gate.out_bias.node.values = rng.normal(size=gate.out_bias.values.shape)
    f_lat, f_td = _features(rng, (2, 2, 2, 2))
    _check_chain(lambda a, b: fusion.fpn_gate_forward(a, b, gate), [f_lat, f_td], gate.parameters(),
                 rng, numeric_grad, assert_close_relative)


@pytest.mark.parametrize("reupload", [True, False])
def test_skip_gate_chain_gradients(reupload, rng, numeric_grad, assert_close_relative):
    gate = fusion.QuantumSkipGate.create("s", 3, seed=4, reupload=reupload, encoding_kind="frequency")
    gate.out_weight.node.values = rng.normal(size=gate.out_weight.values.shape)
    _check_chain(lambda f: fusion.skip_gate_forward(f, gate), [rng.normal(size=(2, 3, 2, 2))], gate.parameters(),
                 rng, numeric_grad, assert_close_relative)


def test_shape_errors(rng):
    gate = fusion.QuantumFpnGate.create("g", 3, seed=0)
    with pytest.raises(ShapeError):
        fusion.fpn_gate_forward(tg.Node(np.zeros((1, 3, 2, 2))), tg.Node(np.zeros((1, 3, 4, 4))), gate)
    with pytest.raises(ShapeError):
        fusion.fpn_gate_forward(tg.Node(np.zeros((1, 4, 2, 2))), tg.Node(np.zeros((1, 4, 2, 2))), gate)
    with pytest.raises(ShapeError):
        fusion.classical_fpn_merge(tg.Node(np.zeros((1, 3, 2, 2))), tg.Node(np.zeros((1, 2, 2, 2))))
    skip = fusion.QuantumSkipGate.create("s", 3, seed=0)
    with pytest.raises(ShapeError):
        fusion.skip_gate_forward(tg.Node(np.zeros((1, 2, 2, 2))), skip)
