"""Exact statevector simulation of the per-patch parameterized circuit.

The register is noiseless and expectations are exact (no shot sampling).
Basis convention: qubit 0 is the most significant bit of the amplitude
index, so |1000> lives at index 8 of a 4-qubit register.

The circuit family is fixed by CircuitSpec: RY data-encoding rotations, L
variational layers of per-qubit RY followed by a CNOT ring, and a Pauli-Z
readout on one qubit. Every trainable gate is an RY, so the two-point
parameter-shift rule gives exact gradients.

A process-wide counter tracks single-circuit executions so callers can
assert the baseline model never touches the simulator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

_eval_count = 0


def eval_count() -> int:
    """Number of single-circuit executions since the last reset."""
    return _eval_count


def reset_eval_count() -> None:
    global _eval_count
    _eval_count = 0


@dataclass
class StateVector:
    """Amplitudes of an n-qubit register, complex128, length 2^n."""

    amps: np.ndarray

    def __post_init__(self):
        self.amps = np.asarray(self.amps, dtype=np.complex128)
        n = self.amps.shape[0]
        if self.amps.ndim != 1 or n & (n - 1) or n == 0:
            raise ConfigError(f"amplitude count must be a power of two, got {n}")

    @classmethod
    def zero(cls, n_qubits: int) -> "StateVector":
        amps = np.zeros(2**n_qubits, dtype=np.complex128)
        amps[0] = 1.0
        return cls(amps)

    @property
    def n_qubits(self) -> int:
        return int(self.amps.shape[0]).bit_length() - 1

    def norm(self) -> float:
        return float(np.sqrt((np.abs(self.amps) ** 2).sum()))


@dataclass
class CircuitSpec:
    """Layout of the encoding + variational ansatz.

    theta holds the trainable angles, one RY per qubit per variational
    layer; the entangler is a ring of CNOTs (q -> q+1 mod n) after each
    variational layer.
    """

    n_qubits: int = 4
    n_var_layers: int = 2
    theta: np.ndarray = field(default_factory=lambda: np.zeros(8))
    observable_qubit: int = 0

    def __post_init__(self):
        if self.n_qubits < 1:
            raise ConfigError(f"need at least one qubit, got {self.n_qubits}")
        if self.n_var_layers < 0:
            raise ConfigError(f"negative layer count {self.n_var_layers}")
        self.theta = np.asarray(self.theta, dtype=np.float64)
        expected = self.n_qubits * self.n_var_layers
        if self.theta.shape != (expected,):
            raise ConfigError(
                f"theta must have length n_qubits*n_var_layers={expected}, "
                f"got shape {self.theta.shape}"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ConfigError("theta contains non-finite angles")
        if not 0 <= self.observable_qubit < self.n_qubits:
            raise ConfigError(f"observable qubit {self.observable_qubit} out of range")

    def with_theta(self, theta: np.ndarray) -> "CircuitSpec":
        return CircuitSpec(self.n_qubits, self.n_var_layers, theta,
                           self.observable_qubit)

    def ring(self) -> list[tuple[int, int]]:
        if self.n_qubits < 2:
            return []
        return [(q, (q + 1) % self.n_qubits) for q in range(self.n_qubits)]


def init_theta(rng: np.random.Generator, n_qubits: int = 4,
               n_var_layers: int = 2) -> np.ndarray:
    """Initial variational angles, uniform in [-0.1, 0.1]."""
    return rng.uniform(-0.1, 0.1, size=n_qubits * n_var_layers)


# -- batched primitives (fast path; amps is (N, 2^n) complex128) ----------------


def _ry_batch(amps: np.ndarray, n: int, qubit: int, theta) -> np.ndarray:
    half = np.asarray(theta, dtype=np.float64) / 2.0
    c, s = np.cos(half), np.sin(half)
    if c.ndim:  # per-sample angles
        c = c[:, None, None]
        s = s[:, None, None]
    view = amps.reshape(amps.shape[0], 2**qubit, 2, -1)
    out = np.empty_like(view)
    a0, a1 = view[:, :, 0, :], view[:, :, 1, :]
    out[:, :, 0, :] = c * a0 - s * a1
    out[:, :, 1, :] = s * a0 + c * a1
    return out.reshape(amps.shape)


def _cnot_perm(n: int, control: int, target: int) -> np.ndarray:
    idx = np.arange(2**n)
    control_set = (idx >> (n - 1 - control)) & 1
    return np.where(control_set == 1, idx ^ (1 << (n - 1 - target)), idx)


def _cnot_batch(amps: np.ndarray, n: int, control: int, target: int) -> np.ndarray:
    return amps[:, _cnot_perm(n, control, target)]


def _run_batch(spec: CircuitSpec, angles: np.ndarray,
               theta: np.ndarray | None = None) -> np.ndarray:
    """Evolve |0..0> for every row of encoding angles; returns (N, 2^n)."""
    global _eval_count
    theta = spec.theta if theta is None else theta
    n = spec.n_qubits
    n_samples = angles.shape[0]
    amps = np.zeros((n_samples, 2**n), dtype=np.complex128)
    amps[:, 0] = 1.0
    for q in range(n):
        amps = _ry_batch(amps, n, q, angles[:, q])
    for layer in range(spec.n_var_layers):
        for q in range(n):
            amps = _ry_batch(amps, n, q, theta[layer * n + q])
        for control, target in spec.ring():
            amps = _cnot_batch(amps, n, control, target)
    _eval_count += n_samples
    return amps


def _expectation_batch(amps: np.ndarray, n: int, qubit: int) -> np.ndarray:
    idx = np.arange(amps.shape[1])
    signs = 1.0 - 2.0 * ((idx >> (n - 1 - qubit)) & 1)
    return (np.abs(amps) ** 2 * signs).sum(axis=1)


# -- single-circuit API ----------------------------------------------------------


def apply_ry(state: StateVector, qubit: int, theta: float) -> StateVector:
    """Rotate one qubit by RY(theta) = [[cos t/2, -sin t/2], [sin t/2, cos t/2]]."""
    n = state.n_qubits
    if not 0 <= qubit < n:
        raise IndexError(f"qubit {qubit} out of range for {n}-qubit register")
    return StateVector(_ry_batch(state.amps[None, :], n, qubit, float(theta))[0])


def apply_cnot(state: StateVector, control: int, target: int) -> StateVector:
    """Flip the target amplitude pair wherever the control bit is 1."""
    n = state.n_qubits
    if control == target:
        raise ContractError("CNOT control and target must differ")
    if not (0 <= control < n and 0 <= target < n):
        raise IndexError(f"qubit pair ({control}, {target}) out of range")
    return StateVector(state.amps[_cnot_perm(n, control, target)])


def run_circuit(spec: CircuitSpec, input_angles) -> StateVector:
    """Encode the input angles and apply the variational layers to |0..0>."""
    angles = np.asarray(input_angles, dtype=np.float64)
    if angles.shape != (spec.n_qubits,):
        raise ContractError(
            f"expected {spec.n_qubits} input angles, got shape {angles.shape}"
        )
    if not np.all(np.isfinite(angles)):
        raise ContractError("input angles must be finite")
    return StateVector(_run_batch(spec, angles[None, :])[0])


def expectation_z(state: StateVector, qubit: int = 0) -> float:
    """Exact <Z> on one qubit: probability-weighted +/-1 over the basis."""
    norm = state.norm()
    if abs(norm - 1.0) > 1e-6:
        raise ContractError(f"state norm {norm} deviates from 1 beyond 1e-6")
    return float(_expectation_batch(state.amps[None, :], state.n_qubits, qubit)[0])


def expectation_z0(state: StateVector) -> float:
    return expectation_z(state, 0)


def circuit_expectation(spec: CircuitSpec, input_angles) -> float:
    return expectation_z(run_circuit(spec, input_angles), spec.observable_qubit)


def parameter_shift_grad(spec: CircuitSpec, input_angles):
    """Exact gradient of <Z> via the two-point shift rule.

    dE/dphi = (E(phi + pi/2) - E(phi - pi/2)) / 2 for every RY angle; returns
    (grad wrt input angles, grad wrt theta), two circuit runs per angle.
    """
    angles = np.asarray(input_angles, dtype=np.float64)[None, :]
    d_inputs, d_theta = parameter_shift_grad_batch(spec, angles)
    return d_inputs[0], d_theta[0]


def parameter_shift_grad_batch(spec: CircuitSpec, angles: np.ndarray):
    """Vectorized shift-rule gradients for a batch of encoding rows.

    Returns (dE/d_angles with shape (N, n_qubits), dE/d_theta with shape
    (N, len(theta))); theta is shared across the batch so its per-sample
    derivatives are summed by the caller as needed.
    """
    angles = np.asarray(angles, dtype=np.float64)
    n_samples, n = angles.shape
    if n != spec.n_qubits:
        raise ContractError(f"expected {spec.n_qubits} angle columns, got {n}")
    half_pi = np.pi / 2
    obs = spec.observable_qubit

    d_inputs = np.empty((n_samples, n))
    for q in range(n):
        shifted = angles.copy()
        shifted[:, q] += half_pi
        e_plus = _expectation_batch(_run_batch(spec, shifted), n, obs)
        shifted[:, q] -= np.pi
        e_minus = _expectation_batch(_run_batch(spec, shifted), n, obs)
        d_inputs[:, q] = (e_plus - e_minus) / 2.0

    d_theta = np.empty((n_samples, spec.theta.shape[0]))
    for k in range(spec.theta.shape[0]):
        shifted = spec.theta.copy()
        shifted[k] += half_pi
        e_plus = _expectation_batch(_run_batch(spec, angles, shifted), n, obs)
        shifted[k] -= np.pi
        e_minus = _expectation_batch(_run_batch(spec, angles, shifted), n, obs)
        d_theta[:, k] = (e_plus - e_minus) / 2.0

    return d_inputs, d_theta


def batch_expectations(spec: CircuitSpec, angles: np.ndarray) -> np.ndarray:
    """<Z> per row of encoding angles; the quanv forward fast path."""
    angles = np.asarray(angles, dtype=np.float64)
    amps = _run_batch(spec, angles)
    return _expectation_batch(amps, spec.n_qubits, spec.observable_qubit)
