"""
Dense statevector simulation of the re-uploading variational circuit used by the quantum gates.

Bit convention: qubit 0 is the most significant bit of a basis-state index, so a register of
n qubits is held as a tensor of shape [2] * n whose first axis is qubit 0. Every routine is a
pure function of its inputs; internally all gates act on a leading batch axis so that the
parameter-shift evaluations of one circuit run as a single batched simulation.
"""
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import ShapeError

MIN_QUBITS = 2
MAX_QUBITS = 10
SHIFT = np.pi / 2
ENCODING_KINDS = ("unit", "frequency")


@dataclass(frozen=True)
class Statevector:
    """
    Amplitudes of an n-qubit register.

    Attributes:
        n_qubits (int): Register size, 2 <= n <= 10.
        amplitudes (np.ndarray): 2**n complex128 amplitudes.
    """
    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        if not MIN_QUBITS <= self.n_qubits <= MAX_QUBITS:
            raise ValueError(f"n_qubits must lie in [{MIN_QUBITS}, {MAX_QUBITS}], got {self.n_qubits}")
        amps = np.asarray(self.amplitudes, dtype=np.complex128).reshape(-1)
        if amps.size != 2 ** self.n_qubits:
            raise ShapeError(f"expected {2 ** self.n_qubits} amplitudes for {self.n_qubits} qubits, got {amps.size}")
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def zero(cls, n_qubits: int) -> "Statevector":
        """Returns the |0...0> register."""
        return cls.basis(n_qubits, 0)

    @classmethod
    def basis(cls, n_qubits: int, index: int) -> "Statevector":
        """Returns the computational basis state with the given index."""
        amps = np.zeros(2 ** n_qubits, dtype=np.complex128)
        amps[index] = 1.0
        return cls(n_qubits, amps)

    def norm(self) -> float:
        """Returns the sum of squared amplitude magnitudes."""
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    def _tensor(self) -> np.ndarray:
        return self.amplitudes.reshape([1] + [2] * self.n_qubits)


def encoding_scales(kind: str, n_layers: int) -> Tuple[float, ...]:
    """
    Per-layer multipliers applied to encoded inputs.

    Args:
        kind (str): "unit" (all 1.0) or "frequency" (1, 2, 4, ...).
        n_layers (int): Number of variational layers.

    Returns:
        tuple[float, ...]: One multiplier per layer.
    """
    if kind == "unit":
        return tuple(1.0 for _ in range(n_layers))
    if kind == "frequency":
        return tuple(float(2 ** layer) for layer in range(n_layers))
    raise ValueError(f"Unknown encoding kind '{kind}', expected one of {ENCODING_KINDS}")


@dataclass
class CircuitParams:
    """
    Variational angles and encoding configuration of one circuit.

    Attributes:
        n_qubits (int): Register size.
        n_layers (int): Number of variational layers L.
        angles (np.ndarray): [L, n, 3] angles (phi, theta, omega) in radians.
        reupload (bool): Re-apply the encoding before every layer instead of only the first.
        encoding_scale (tuple[float, ...]): Per-layer multiplier on the encoded inputs.
    """
    n_qubits: int
    n_layers: int
    angles: np.ndarray
    reupload: bool = True
    encoding_scale: Optional[Sequence[float]] = None

    def __post_init__(self):
        if not MIN_QUBITS <= self.n_qubits <= MAX_QUBITS:
            raise ValueError(f"n_qubits must lie in [{MIN_QUBITS}, {MAX_QUBITS}], got {self.n_qubits}")
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        angles = np.array(self.angles, dtype=np.float64)
        expected = (self.n_layers, self.n_qubits, 3)
        if angles.shape != expected:
            raise ShapeError(f"angles must have shape {expected}, got {angles.shape}")
        if not np.all(np.isfinite(angles)):
            raise ValueError("circuit angles must be finite")
        self.angles = angles
        if self.encoding_scale is None:
            self.encoding_scale = encoding_scales("unit", self.n_layers)
        self.encoding_scale = tuple(float(s) for s in self.encoding_scale)
        if len(self.encoding_scale) != self.n_layers:
            raise ShapeError(f"encoding_scale needs {self.n_layers} entries, got {len(self.encoding_scale)}")

    @classmethod
    def create(cls, n_qubits: int = 4, n_layers: int = 2, reupload: bool = True,
               encoding_kind: str = "unit", rng: Optional[np.random.Generator] = None,
               init_range: float = 0.1) -> "CircuitParams":
        """
        Builds a circuit with angles drawn uniformly from [-init_range, init_range].

        Args:
            n_qubits (int): Register size.
            n_layers (int): Number of layers.
            reupload (bool): Data re-uploading switch.
            encoding_kind (str): "unit" or "frequency".
            rng (np.random.Generator, optional): Source of the initial angles; zeros when omitted.
            init_range (float): Half-width of the initial angle interval.

        Returns:
            CircuitParams: The new circuit.
        """
        shape = (n_layers, n_qubits, 3)
        angles = np.zeros(shape) if rng is None else rng.uniform(-init_range, init_range, size=shape)
        return cls(n_qubits, n_layers, angles, reupload, encoding_scales(encoding_kind, n_layers))

    @property
    def n_params(self) -> int:
        return 3 * self.n_qubits * self.n_layers

    def encoded_layers(self) -> np.ndarray:
        """Boolean mask of the layers preceded by an encoding stage."""
        mask = np.zeros(self.n_layers, dtype=bool)
        mask[0] = True
        if self.reupload:
            mask[:] = True
        return mask

    def with_angles(self, angles: np.ndarray) -> "CircuitParams":
        return CircuitParams(self.n_qubits, self.n_layers, angles, self.reupload, self.encoding_scale)


@dataclass(frozen=True)
class ExpectationVector:
    """Pauli-Z expectation of every qubit, each in [-1, 1]."""
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, index: int) -> float:
        return float(self.values[index])

    def tolist(self) -> List[float]:
        return [float(v) for v in self.values]


# Batched kernels: psi has shape [K, 2, ..., 2], one row per circuit instance.

def _ry_matrices(angles: np.ndarray) -> np.ndarray:
    c = np.cos(angles / 2)
    s = np.sin(angles / 2)
    mats = np.empty(angles.shape + (2, 2), dtype=np.complex128)
    mats[..., 0, 0] = c
    mats[..., 0, 1] = -s
    mats[..., 1, 0] = s
    mats[..., 1, 1] = c
    return mats


def _apply_matrices(psi: np.ndarray, mats: np.ndarray, qubit: int) -> np.ndarray:
    axis = qubit + 1
    moved = np.moveaxis(psi, axis, -1)
    out = np.einsum("k...j,kij->k...i", moved, mats)
    return np.moveaxis(out, -1, axis)


def _apply_rz(psi: np.ndarray, angles: np.ndarray, qubit: int) -> np.ndarray:
    out = psi.copy()
    shape = (psi.shape[0],) + (1,) * (psi.ndim - 2)
    low = [slice(None)] * psi.ndim
    high = [slice(None)] * psi.ndim
    low[qubit + 1] = 0
    high[qubit + 1] = 1
    out[tuple(low)] *= np.exp(-0.5j * angles).reshape(shape)
    out[tuple(high)] *= np.exp(0.5j * angles).reshape(shape)
    return out


def _apply_cnot(psi: np.ndarray, control: int, target: int) -> np.ndarray:
    def index(c: int, t: int) -> tuple:
        idx = [slice(None)] * psi.ndim
        idx[control + 1] = c
        idx[target + 1] = t
        return tuple(idx)

    out = psi.copy()
    out[index(1, 0)] = psi[index(1, 1)]
    out[index(1, 1)] = psi[index(1, 0)]
    return out


def _z_expectations(psi: np.ndarray) -> np.ndarray:
    probs = np.abs(psi) ** 2
    n = psi.ndim - 1
    values = np.empty((psi.shape[0], n))
    for qubit in range(n):
        others = tuple(axis for axis in range(1, n + 1) if axis != qubit + 1)
        marginal = probs.sum(axis=others)
        values[:, qubit] = marginal[:, 0] - marginal[:, 1]
    return values


def _simulate(enc: np.ndarray, var: np.ndarray, encoded: np.ndarray, n_qubits: int) -> np.ndarray:
    """
    Runs K circuits at once.

    Args:
        enc (np.ndarray): [K, L, n] encoding angles (input times layer scale).
        var (np.ndarray): [K, L, n, 3] variational angles.
        encoded (np.ndarray): [L] mask of layers with an encoding stage.
        n_qubits (int): Register size.

    Returns:
        np.ndarray: [K, n] Pauli-Z expectations.
    """
    k = enc.shape[0]
    psi = np.zeros((k, 2 ** n_qubits), dtype=np.complex128)
    psi[:, 0] = 1.0
    psi = psi.reshape([k] + [2] * n_qubits)
    for layer in range(var.shape[1]):
        if encoded[layer]:
            for q in range(n_qubits):
                psi = _apply_matrices(psi, _ry_matrices(enc[:, layer, q]), q)
        for q in range(n_qubits):
            psi = _apply_rz(psi, var[:, layer, q, 0], q)
            psi = _apply_matrices(psi, _ry_matrices(var[:, layer, q, 1]), q)
            psi = _apply_rz(psi, var[:, layer, q, 2], q)
        for q in range(n_qubits):
            psi = _apply_cnot(psi, q, (q + 1) % n_qubits)
    return _z_expectations(psi)


def _check_qubit(state: Statevector, qubit: int) -> None:
    if not 0 <= qubit < state.n_qubits:
        raise IndexError(f"qubit {qubit} out of range for a {state.n_qubits}-qubit register")


def _check_angle(*angles: float) -> None:
    if not np.all(np.isfinite(angles)):
        raise ValueError(f"rotation angles must be finite, got {angles}")


def _wrap(state: Statevector, psi: np.ndarray) -> Statevector:
    return Statevector(state.n_qubits, psi.reshape(-1))


def apply_ry(state: Statevector, qubit: int, angle: float) -> Statevector:
    """
    Applies R_Y(angle) = exp(-i angle Y / 2) to one qubit.

    Raises:
        IndexError: If the qubit index is out of range.
    """
    _check_qubit(state, qubit)
    _check_angle(angle)
    return _wrap(state, _apply_matrices(state._tensor(), _ry_matrices(np.array([angle], dtype=float)), qubit))


def apply_rz(state: Statevector, qubit: int, angle: float) -> Statevector:
    """Applies R_Z(angle) = exp(-i angle Z / 2) to one qubit."""
    _check_qubit(state, qubit)
    _check_angle(angle)
    return _wrap(state, _apply_rz(state._tensor(), np.array([angle], dtype=float), qubit))


def apply_rot(state: Statevector, qubit: int, phi: float, theta: float, omega: float) -> Statevector:
    """
    Applies Rot(phi, theta, omega) = R_Z(omega) R_Y(theta) R_Z(phi), i.e. R_Z(phi) acts first.

    Raises:
        IndexError: If the qubit index is out of range.
    """
    _check_qubit(state, qubit)
    _check_angle(phi, theta, omega)
    psi = _apply_rz(state._tensor(), np.array([phi], dtype=float), qubit)
    psi = _apply_matrices(psi, _ry_matrices(np.array([theta], dtype=float)), qubit)
    psi = _apply_rz(psi, np.array([omega], dtype=float), qubit)
    return _wrap(state, psi)


def apply_cnot(state: Statevector, control: int, target: int) -> Statevector:
    """
    Flips the target bit of every basis state whose control bit is 1.

    Raises:
        ValueError: If control and target coincide.
        IndexError: If either index is out of range.
    """
    if control == target:
        raise ValueError(f"CNOT control and target must differ, both are {control}")
    _check_qubit(state, control)
    _check_qubit(state, target)
    return _wrap(state, _apply_cnot(state._tensor(), control, target))


def expectation_z(state: Statevector, qubit: int) -> float:
    """Returns <Z> on one qubit: P(bit = 0) - P(bit = 1)."""
    _check_qubit(state, qubit)
    return float(_z_expectations(state._tensor())[0, qubit])


def _check_rows(xs: np.ndarray, params: CircuitParams, name: str = "x") -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != params.n_qubits:
        raise ValueError(f"{name} must provide {params.n_qubits} values per row, got shape {xs.shape}")
    if not np.all(np.isfinite(xs)):
        raise ValueError(f"{name} entries must be finite")
    return xs


def run_circuit_batch(xs: np.ndarray, params: CircuitParams) -> np.ndarray:
    """
    Evaluates the circuit on every row of xs.

    Args:
        xs (np.ndarray): [B, n] inputs.
        params (CircuitParams): Circuit to run.

    Returns:
        np.ndarray: [B, n] expectations.
    """
    xs = _check_rows(xs, params)
    scale = np.asarray(params.encoding_scale)
    enc = scale[None, :, None] * xs[:, None, :]
    var = np.broadcast_to(params.angles, (xs.shape[0],) + params.angles.shape)
    return _simulate(enc, var, params.encoded_layers(), params.n_qubits)


def run_circuit(x: Sequence[float], params: CircuitParams) -> ExpectationVector:
    """
    Runs the re-uploading circuit on one input vector.

    Each layer optionally encodes R_Y(scale * x_i) on every qubit (always before the first layer,
    before every layer when re-uploading), then applies Rot on every qubit and the CNOT ring
    i -> (i + 1) mod n in ascending order.

    Args:
        x (Sequence[float]): n finite inputs.
        params (CircuitParams): Circuit to run.

    Returns:
        ExpectationVector: <Z_i> for every qubit.

    Raises:
        ValueError: If len(x) differs from the qubit count.
    """
    row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return ExpectationVector(run_circuit_batch(row, params)[0])


def _encoding_slots(params: CircuitParams) -> List[Tuple[int, int]]:
    encoded = params.encoded_layers()
    return [(layer, q) for layer in range(params.n_layers) if encoded[layer] for q in range(params.n_qubits)]


def circuit_gradients_batch(xs: np.ndarray, params: CircuitParams,
                            upstream: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Parameter-shift gradients for a batch of inputs.

    Every rotation angle alpha obeys d<Z>/d alpha = [f(alpha + pi/2) - f(alpha - pi/2)] / 2. Each
    encoding occurrence of x_i is shifted on its own and scaled by the layer's encoding multiplier.

    Args:
        xs (np.ndarray): [B, n] inputs.
        params (CircuitParams): Circuit.
        upstream (np.ndarray): [B, n] loss-gradient coefficients on the expectations.

    Returns:
        tuple[np.ndarray, np.ndarray]: d_angles [B, L, n, 3] and d_x [B, n].
    """
    xs = _check_rows(xs, params)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != xs.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match inputs {xs.shape}")

    b, n, n_layers = xs.shape[0], params.n_qubits, params.n_layers
    scale = np.asarray(params.encoding_scale)
    slots = _encoding_slots(params)
    p_var = params.n_params
    p_total = p_var + len(slots)
    shifts = np.array([SHIFT, -SHIFT])

    enc = scale[None, :, None] * xs[:, None, :]
    var_batch = np.broadcast_to(params.angles, (b, p_total, 2) + params.angles.shape).copy()
    enc_batch = np.broadcast_to(enc[:, None, None], (b, p_total, 2, n_layers, n)).copy()
    var_flat = var_batch.reshape(b, p_total, 2, p_var)
    for p in range(p_var):
        var_flat[:, p, :, p] += shifts
    enc_flat = enc_batch.reshape(b, p_total, 2, n_layers * n)
    for j, (layer, q) in enumerate(slots):
        enc_flat[:, p_var + j, :, layer * n + q] += shifts

    z = _simulate(enc_batch.reshape(-1, n_layers, n), var_batch.reshape(-1, n_layers, n, 3),
                  params.encoded_layers(), n).reshape(b, p_total, 2, n)
    derivatives = 0.5 * (z[:, :, 0] - z[:, :, 1])
    weighted = np.einsum("bpn,bn->bp", derivatives, upstream)

    d_angles = weighted[:, :p_var].reshape(b, n_layers, n, 3)
    d_x = np.zeros((b, n))
    for j, (layer, q) in enumerate(slots):
        d_x[:, q] += scale[layer] * weighted[:, p_var + j]
    return d_angles, d_x


def circuit_gradients(x: Sequence[float], params: CircuitParams,
                      upstream: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Parameter-shift gradients of sum_j upstream_j <Z_j> for one input.

    Args:
        x (Sequence[float]): n inputs.
        params (CircuitParams): Circuit.
        upstream (Sequence[float]): n coefficients on the expectations.

    Returns:
        tuple[np.ndarray, np.ndarray]: d_angles [L, n, 3] and d_x [n].

    Raises:
        ValueError: On a dimension mismatch.
    """
    row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    coeffs = np.asarray(upstream, dtype=np.float64).reshape(1, -1)
    d_angles, d_x = circuit_gradients_batch(row, params, coeffs)
    return d_angles[0], d_x[0]


def barren_plateau_floor(n_qubits: int) -> float:
    """Reference gradient-variance floor 2**-n for random n-qubit circuits."""
    return 2.0 ** -n_qubits


def gradient_variance_scan(qubit_counts: Iterable[int], n_layers: int, n_samples: int,
                           seed: int) -> List[Tuple[int, float, float]]:
    """
    Samples d<Z_0>/d theta of the first layer over random angles and inputs.

    Args:
        qubit_counts (Iterable[int]): Register sizes to scan.
        n_layers (int): Layers per circuit.
        n_samples (int): Random draws per register size.
        seed (int): Generator seed.

    Returns:
        list[tuple[int, float, float]]: (n_qubits, gradient variance, 2**-n floor) rows.
    """
    rows = []
    for n_qubits in qubit_counts:
        rng = np.random.default_rng([seed, n_qubits])
        upstream = np.zeros(n_qubits)
        upstream[0] = 1.0
        samples = np.empty(n_samples)
        for i in range(n_samples):
            params = CircuitParams(n_qubits, n_layers, rng.uniform(0, 2 * np.pi, (n_layers, n_qubits, 3)))
            x = rng.uniform(-np.pi, np.pi, n_qubits)
            d_angles, _ = circuit_gradients(x, params, upstream)
            samples[i] = d_angles[0, 0, 1]
        rows.append((n_qubits, float(np.var(samples)), barren_plateau_floor(n_qubits)))
    return rows
