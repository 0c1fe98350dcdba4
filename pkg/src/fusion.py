"""
Feature-fusion operators: the quantum FPN gate, the quantum skip gate and classical FPN addition.

Both quantum gates compress a feature map to one value per qubit by global average pooling and a
linear map, feed the rescaled vector to the circuit, and turn the expectations into a per-channel
sigmoid gate that is broadcast over space.
"""
import zlib
from dataclasses import dataclass
from typing import List

import numpy as np

from src import qsim
from src import tensorgraph as tg
from src.errors import ShapeError
from src.tensorgraph import Node, Parameter

PLACEMENTS = ("all_levels", "bottleneck_only")
CIRCUIT_INIT_RANGE = 0.1
SCALE_INIT = 0.5
SHIFT_INIT = 0.0


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by seed and parameter name, so shared parameters initialise identically across models."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def _uniform_linear(name: str, shape: tuple, seed: int, group: str = "decoder") -> Parameter:
    """
    Weight of shape [out, in] drawn from U(-1/sqrt(in), 1/sqrt(in)) with the name-keyed generator.

    Args:
        name (str): Parameter name; also keys the generator.
        shape (tuple): (out_features, in_features).
        seed (int): Model seed.
        group (str): Learning-rate group.

    Returns:
        Parameter: The initialised weight.
    """
    bound = 1.0 / np.sqrt(shape[1])
    return tg.parameter(name, param_rng(seed, name).uniform(-bound, bound, size=shape), group)


def _circuit(name: str, n_qubits: int, n_layers: int, reupload: bool, encoding_kind: str,
             seed: int) -> tuple:
    """
    Builds a circuit template and its trainable angle Parameter.

    Args:
        name (str): Name of the angle Parameter.
        n_qubits (int): Qubit count.
        n_layers (int): Variational layers.
        reupload (bool): Whether inputs are re-encoded before every layer.
        encoding_kind (str): "unit" or "frequency" encoding scales.
        seed (int): Model seed.

    Returns:
        tuple[qsim.CircuitParams, Parameter]: Template and angles, initialised in [-0.1, 0.1].
    """
    template = qsim.CircuitParams.create(n_qubits, n_layers, reupload, encoding_kind,
                                         rng=param_rng(seed, name), init_range=CIRCUIT_INIT_RANGE)
    return template, tg.parameter(name, template.angles, "quantum", decay=False)


def _gate_vector(x: Node, circuit: Parameter, template: qsim.CircuitParams,
                 out_weight: Parameter, out_bias: Parameter) -> Node:
    """Circuit expectations [B, n] mapped to per-channel gates sigmoid(W q + b), shape [B, C]."""
    q = tg.quantum_node(x, circuit, template)
    return tg.sigmoid(tg.linear(q, out_weight.node, out_bias.node))


@dataclass
class QuantumFpnGate:
    """
    Per-channel convex combination of lateral and top-down features driven by a circuit.

    Attributes:
        compress (Parameter): [n, 2C] bias-free map from the pooled streams to the circuit inputs.
        scale (Parameter): [n] encoding scale s, initialised to 0.5.
        shift (Parameter): [n] encoding shift b, initialised to 0.
        circuit (Parameter): [L, n, 3] variational angles.
        template (qsim.CircuitParams): Circuit structure (qubits, layers, re-uploading, scales).
        out_weight (Parameter): [C, n] map from expectations to gate logits.
        out_bias (Parameter): [C] bias, initialised to 0.
    """
    compress: Parameter
    scale: Parameter
    shift: Parameter
    circuit: Parameter
    template: qsim.CircuitParams
    out_weight: Parameter
    out_bias: Parameter

    @classmethod
    def create(cls, prefix: str, channels: int, seed: int, n_qubits: int = 4, n_layers: int = 2,
               encoding_kind: str = "unit") -> "QuantumFpnGate":
        template, circuit = _circuit(f"{prefix}.circuit.angles", n_qubits, n_layers, True, encoding_kind, seed)
        return cls(
            compress=_uniform_linear(f"{prefix}.compress.weight", (n_qubits, 2 * channels), seed),
            scale=tg.parameter(f"{prefix}.scale", np.full(n_qubits, SCALE_INIT), "decoder", decay=False),
            shift=tg.parameter(f"{prefix}.shift", np.full(n_qubits, SHIFT_INIT), "decoder", decay=False),
            circuit=circuit,
            template=template,
            out_weight=_uniform_linear(f"{prefix}.out_linear.weight", (channels, n_qubits), seed),
            out_bias=tg.parameter(f"{prefix}.out_linear.bias", np.zeros(channels), "decoder"),
        )

    def parameters(self) -> List[Parameter]:
        """Trainable parameters in registration order."""
        return [self.compress, self.scale, self.shift, self.circuit, self.out_weight, self.out_bias]

    def circuit_params(self) -> qsim.CircuitParams:
        return self.template.with_angles(self.circuit.values)

    def encode(self, f_lat: Node, f_td: Node) -> Node:
        """Circuit inputs x = (s * tanh(v) + b) * pi with v = compress([GAP(F_lat); GAP(F_td)])."""
        pooled = tg.concat([tg.global_avg_pool(f_lat), tg.global_avg_pool(f_td)], axis=1)
        v = tg.linear(pooled, self.compress.node)
        rows = v.shape[0]
        scaled = tg.mul(tg.tanh(v), tg.broadcast_rows(self.scale.node, rows))
        return tg.scalar_mul(tg.add(scaled, tg.broadcast_rows(self.shift.node, rows)), np.pi)

    def gate(self, f_lat: Node, f_td: Node) -> Node:
        """Per-channel gate g in (0, 1), shape [B, C]."""
        return _gate_vector(self.encode(f_lat, f_td), self.circuit, self.template, self.out_weight, self.out_bias)


@dataclass
class QuantumSkipGate:
    """
    Multiplicative per-channel gate on a skip connection driven by a circuit.

    Attributes:
        proj (Parameter): [n, C] bias-free projection of the pooled skip features.
        circuit (Parameter): [L, n, 3] variational angles.
        template (qsim.CircuitParams): Circuit structure.
        out_weight (Parameter): [C, n] map from expectations to gate logits.
        out_bias (Parameter): [C] bias, initialised to 0.
    """
    proj: Parameter
    circuit: Parameter
    template: qsim.CircuitParams
    out_weight: Parameter
    out_bias: Parameter

    @classmethod
    def create(cls, prefix: str, channels: int, seed: int, n_qubits: int = 4, n_layers: int = 2,
               reupload: bool = True, encoding_kind: str = "unit") -> "QuantumSkipGate":
        template, circuit = _circuit(f"{prefix}.circuit.angles", n_qubits, n_layers, reupload, encoding_kind, seed)
        return cls(
            proj=_uniform_linear(f"{prefix}.proj.weight", (n_qubits, channels), seed),
            circuit=circuit,
            template=template,
            out_weight=_uniform_linear(f"{prefix}.out_linear.weight", (channels, n_qubits), seed),
            out_bias=tg.parameter(f"{prefix}.out_linear.bias", np.zeros(channels), "decoder"),
        )

    def parameters(self) -> List[Parameter]:
        return [self.proj, self.circuit, self.out_weight, self.out_bias]

    def circuit_params(self) -> qsim.CircuitParams:
        return self.template.with_angles(self.circuit.values)

    def encode(self, f_skip: Node) -> Node:
        """Circuit inputs x_s = tanh(proj(GAP(F_skip))) * pi."""
        return tg.scalar_mul(tg.tanh(tg.linear(tg.global_avg_pool(f_skip), self.proj.node)), np.pi)

    def gate(self, f_skip: Node) -> Node:
        """Per-channel gate in (0, 1), shape [B, C], from the pooled skip features."""
        return _gate_vector(self.encode(f_skip), self.circuit, self.template, self.out_weight, self.out_bias)


def _check_pair(f_lat: Node, f_td: Node) -> None:
    """Raises ShapeError unless both streams share a shape."""
    if f_lat.shape != f_td.shape:
        raise ShapeError(f"lateral {f_lat.shape} and top-down {f_td.shape} streams differ in shape")


def fpn_gate_forward(f_lat: Node, f_td: Node, gate: QuantumFpnGate) -> Node:
    """
    F_out = g * F_lat + (1 - g) * F_td with g from the quantum gate, broadcast over H and W.

    Raises:
        ShapeError: If the two streams differ in shape or the channel count does not match the gate.
    """
    _check_pair(f_lat, f_td)
    if f_lat.values.ndim != 4 or gate.compress.values.shape[1] != 2 * f_lat.shape[1]:
        raise ShapeError(f"feature map {f_lat.shape} does not match gate compress {gate.compress.values.shape}")
    _, _, h, w = f_lat.shape
    g = tg.broadcast_channelwise(gate.gate(f_lat, f_td), h, w)
    one_minus_g = tg.scalar_add(tg.scalar_mul(g, -1.0), 1.0)
    return tg.add(tg.mul(g, f_lat), tg.mul(one_minus_g, f_td))


def classical_fpn_merge(f_lat: Node, f_td: Node) -> Node:
    """Standard FPN merge: element-wise sum, no parameters."""
    _check_pair(f_lat, f_td)
    return tg.add(f_lat, f_td)


def skip_gate_forward(f_skip: Node, gate: QuantumSkipGate) -> Node:
    """
    F'_skip = g * F_skip with g from the quantum gate, broadcast over H and W.

    Raises:
        ShapeError: If the channel count does not match the gate projection.
    """
    if f_skip.values.ndim != 4 or gate.proj.values.shape[1] != f_skip.shape[1]:
        raise ShapeError(f"skip features {f_skip.shape} do not match gate projection {gate.proj.values.shape}")
    _, _, h, w = f_skip.shape
    return tg.mul(tg.broadcast_channelwise(gate.gate(f_skip), h, w), f_skip)
