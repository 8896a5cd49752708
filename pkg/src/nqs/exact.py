"""Dense-vector ground truth for small chains (N <= 14)."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla

from .ansatz import Ansatz, TableAnsatz, is_zero_amplitude
from .basis import MAX_ENUM_SITES, all_configurations
from .errors import CapacityError, DomainError
from .operators import LocalOperator, hermitian_check

DENSE_EIGH_MAX = 12
NORM_TOL = 1e-8


@dataclass(frozen=True)
class StateVector:
    n_sites: int
    amplitudes: np.ndarray

    def __post_init__(self):
        if self.n_sites > MAX_ENUM_SITES:
            raise CapacityError(f"state vectors limited to {MAX_ENUM_SITES} sites")
        amps = np.array(self.amplitudes, dtype=complex).ravel()
        if amps.shape[0] != 1 << self.n_sites:
            raise DomainError(f"{amps.shape[0]} amplitudes do not match {self.n_sites} sites")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalize(self) -> "StateVector":
        norm = self.norm
        if norm == 0:
            raise DomainError("cannot normalize the zero vector")
        return StateVector(self.n_sites, self.amplitudes / norm)

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    @classmethod
    def basis_state(cls, n_sites: int, index: int) -> "StateVector":
        amps = np.zeros(1 << n_sites, dtype=complex)
        amps[index] = 1.0
        return cls(n_sites, amps)

    def to_bytes(self) -> bytes:
        head = struct.pack("<QQ", self.n_sites, self.amplitudes.shape[0])
        return head + self.amplitudes.astype("<c16").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "StateVector":
        n_sites, length = struct.unpack("<QQ", data[:16])
        amps = np.frombuffer(data[16:16 + 16 * length], dtype="<c16")
        return cls(int(n_sites), amps.astype(complex))


@dataclass(frozen=True)
class SpectralResult:
    ground_energy: float
    ground_state: StateVector
    gap: float


def _require_hermitian(op):
    if not hermitian_check(op):
        raise DomainError("operator is not Hermitian")


def _check_sizes(op, state):
    if op.n_sites != state.n_sites:
        raise DomainError(f"operator on {op.n_sites} sites, state on {state.n_sites}")


def ground_state(op: LocalOperator) -> SpectralResult:
    """Lowest eigenpair: full diagonalization up to 12 sites, Lanczos above."""
    _require_hermitian(op)
    if op.n_sites > MAX_ENUM_SITES:
        raise CapacityError(f"exact diagonalization limited to {MAX_ENUM_SITES} sites")
    if op.n_sites <= DENSE_EIGH_MAX:
        vals, vecs = scipy.linalg.eigh(op.dense_matrix(), subset_by_index=[0, 1])
    else:
        vals, vecs = spla.eigsh(op.sparse_matrix(), k=2, which="SA", tol=1e-12)
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    psi = vecs[:, 0]
    # Fix the global phase so the largest amplitude is real and positive.
    k = np.argmax(np.abs(psi))
    psi = psi * np.exp(-1j * np.angle(psi[k]))
    return SpectralResult(
        float(vals[0]), StateVector(op.n_sites, psi).normalize(), float(vals[1] - vals[0])
    )


def apply(op: LocalOperator, state: StateVector) -> np.ndarray:
    _check_sizes(op, state)
    return op.sparse_matrix() @ state.amplitudes


def expectation(op: LocalOperator, state: StateVector) -> complex:
    _check_sizes(op, state)
    psi = state.amplitudes
    return complex(np.vdot(psi, op.sparse_matrix() @ psi) / np.vdot(psi, psi))


def _rk4_steps(h, psi, dt, steps):
    """Yield the state after each classical RK4 step for i d|psi>/dt = H|psi>.

    The state is rescaled to its initial norm after every step, so the norm is
    conserved to round-off while the truncation error stays fourth order.
    """
    norm0 = np.linalg.norm(psi)
    for _ in range(steps):
        k1 = -1j * (h @ psi)
        k2 = -1j * (h @ (psi + 0.5 * dt * k1))
        k3 = -1j * (h @ (psi + 0.5 * dt * k2))
        k4 = -1j * (h @ (psi + dt * k3))
        psi = psi + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        psi *= norm0 / np.linalg.norm(psi)
        yield psi


def evolve_exact(op: LocalOperator, state: StateVector, duration: float, steps: int) -> StateVector:
    """Integrate i d|psi>/dt = H|psi> with fixed-step classical RK4."""
    _require_hermitian(op)
    _check_sizes(op, state)
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    psi = state.amplitudes.copy()
    for psi in _rk4_steps(op.sparse_matrix(), psi, duration / steps, steps):
        pass
    return StateVector(state.n_sites, psi)


def evolve_observables(op, state, duration, steps, observables, record_every=1):
    """Exact time series ``{name: array}`` sampled every ``record_every`` steps."""
    _require_hermitian(op)
    _check_sizes(op, state)
    mats = {name: o.sparse_matrix() for name, o in observables.items()}
    times, series = [], {name: [] for name in mats}

    def record(t, v):
        times.append(t)
        norm = np.vdot(v, v)
        for name, m in mats.items():
            series[name].append(np.vdot(v, m @ v) / norm)

    psi = state.amplitudes.copy()
    record(0.0, psi)
    if steps > 0:
        dt = duration / steps
        for n, psi in enumerate(_rk4_steps(op.sparse_matrix(), psi, dt, steps), 1):
            if n % record_every == 0:
                record(n * dt, psi)
    return np.array(times), {name: np.array(v) for name, v in series.items()}


def born_sample(state: StateVector, count: int, seed: int) -> np.ndarray:
    """``count`` i.i.d. configurations (rows of +1/-1) drawn from |psi|^2."""
    probs = state.probabilities()
    total = probs.sum()
    if abs(total - 1.0) > NORM_TOL:
        raise DomainError(f"state is not normalized (norm^2 = {total})")
    rng = np.random.default_rng(seed)
    idx = rng.choice(probs.shape[0], size=count, p=probs / total)
    return all_configurations(state.n_sites)[idx]


def fidelity(a: StateVector, b: StateVector) -> float:
    if a.n_sites != b.n_sites:
        raise DomainError(f"states on {a.n_sites} and {b.n_sites} sites")
    x, y = a.amplitudes, b.amplitudes
    f = abs(np.vdot(x, y)) ** 2 / (np.vdot(x, x).real * np.vdot(y, y).real)
    return float(min(max(f, 0.0), 1.0))


def table_ansatz(state: StateVector) -> TableAnsatz:
    return TableAnsatz(state.amplitudes, state.n_sites)


def state_from_ansatz(ansatz: Ansatz, normalize: bool = True) -> StateVector:
    """Dense amplitudes by evaluating the ansatz on every configuration."""
    if ansatz.n_sites > MAX_ENUM_SITES:
        raise CapacityError(f"full-basis evaluation limited to {MAX_ENUM_SITES} sites")
    if isinstance(ansatz, TableAnsatz):
        amps = ansatz.amplitudes
    else:
        logs = ansatz.log_amplitude(all_configurations(ansatz.n_sites))
        zero = is_zero_amplitude(logs)
        shift = np.max(np.where(zero, -np.inf, logs.real))
        amps = np.where(zero, 0.0, np.exp(np.where(zero, 0.0, logs - shift)))
    vec = StateVector(ansatz.n_sites, amps)
    return vec.normalize() if normalize else vec


def exact_energy(op: LocalOperator, ansatz: Ansatz) -> float:
    return expectation(op, state_from_ansatz(ansatz)).real


def dense_operator_state(op: LocalOperator, state: StateVector) -> StateVector:
    return StateVector(state.n_sites, apply(op, state))
