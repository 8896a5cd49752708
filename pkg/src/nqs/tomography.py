"""Multi-basis state tomography with neural ansatze.

Snapshots are measurement outcomes ``s`` recorded after rotating the state by
``U_B = prod_j u_{B_j}`` with ``u_Z = 1``, ``u_X = H`` and ``u_Y = H S^dagger``.
The trained objective is the empirical negative log-likelihood

    L = -(1/|D|) sum_B sum_{s in D_B} log(|psi^B(s)|^2 / Z),   Z = sum_s |psi(s)|^2,

which differs from the multi-basis KL divergence only by the dataset entropy.
``Z`` is basis independent because every ``U_B`` is unitary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .ansatz import LOG_ZERO, Ansatz, TableAnsatz, is_zero_amplitude
from .basis import MAX_ENUM_SITES, SpinConfiguration, all_configurations, as_array, encode_array
from .errors import CapacityError, DomainError, LossError
from .exact import StateVector, born_sample, fidelity, state_from_ansatz
from .sampler import SamplerConfig
from .vmc import ExactSource, MonteCarloSource, exact_batch

MAX_ROTATED_SITES = 20
LETTERS = "ZXY"

_S2 = 1.0 / np.sqrt(2.0)
# Row = measured outcome, column = computational state; index 0 is spin up.
_UNITARIES = {
    "Z": np.eye(2, dtype=complex),
    "X": _S2 * np.array([[1, 1], [1, -1]], dtype=complex),
    "Y": _S2 * np.array([[1, -1j], [1, 1j]], dtype=complex),
}


def _check_basis(basis: str, n_sites: int | None = None) -> str:
    basis = basis.upper()
    bad = set(basis) - set(LETTERS)
    if bad:
        raise DomainError(f"unknown basis letter(s) {sorted(bad)} in {basis!r}")
    if n_sites is not None and len(basis) != n_sites:
        raise DomainError(f"basis {basis!r} has {len(basis)} letters, expected {n_sites}")
    return basis


@dataclass(frozen=True)
class BasisRotation:
    basis: str

    def __post_init__(self):
        object.__setattr__(self, "basis", _check_basis(self.basis))

    @property
    def n_sites(self) -> int:
        return len(self.basis)

    def site_unitary(self, site: int) -> np.ndarray:
        return _UNITARIES[self.basis[site]].copy()

    @property
    def rotated_sites(self) -> tuple:
        return tuple(j for j, c in enumerate(self.basis) if c != "Z")

    def matrix(self) -> np.ndarray:
        """Dense ``U_B`` in the package basis ordering (site 0 is the fastest bit)."""
        if self.n_sites > MAX_ENUM_SITES:
            raise CapacityError(f"dense rotations limited to {MAX_ENUM_SITES} sites")
        out = np.ones((1, 1), dtype=complex)
        for c in self.basis:
            out = np.kron(_UNITARIES[c], out)
        return out

    def apply(self, state: StateVector) -> StateVector:
        if state.n_sites != self.n_sites:
            raise DomainError(f"basis on {self.n_sites} sites, state on {state.n_sites}")
        psi = state.amplitudes.reshape((2,) * self.n_sites)
        # Axis k of the reshaped tensor is site N-1-k.
        for j in self.rotated_sites:
            axis = self.n_sites - 1 - j
            psi = np.moveaxis(np.tensordot(_UNITARIES[self.basis[j]], psi, axes=([1], [axis])), 0, axis)
        return StateVector(self.n_sites, psi.reshape(-1))


@dataclass(frozen=True)
class Snapshot:
    basis: str
    outcome: SpinConfiguration

    def __post_init__(self):
        outcome = self.outcome
        if not isinstance(outcome, SpinConfiguration):
            outcome = SpinConfiguration.from_array(outcome)
        object.__setattr__(self, "outcome", outcome)
        object.__setattr__(self, "basis", _check_basis(self.basis, outcome.n_sites))

    def to_line(self) -> str:
        return f"{self.basis} {self.outcome.to_token()}"

    @classmethod
    def from_line(cls, line: str) -> "Snapshot":
        parts = line.split()
        if len(parts) != 2:
            raise DomainError(f"snapshot line must be 'BASES OUTCOME', got {line!r}")
        return cls(parts[0], SpinConfiguration.from_token(parts[1]))


@dataclass
class SnapshotDataset:
    """Outcomes grouped by basis.

    Each group stores distinct outcomes (rows of +1/-1) and their weights. Weights
    are shot counts for sampled data and may be fractional for exact datasets.
    """

    n_sites: int
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for basis, (outcomes, weights) in self.groups.items():
            basis = _check_basis(basis, self.n_sites)
            outcomes = np.asarray(outcomes, dtype=np.int8).reshape(-1, self.n_sites)
            weights = np.asarray(weights, dtype=float).reshape(-1)
            if outcomes.shape[0] == 0 or outcomes.shape[0] != weights.shape[0]:
                raise DomainError(f"group {basis} is empty or has mismatched weights")
            if np.any(weights < 0) or weights.sum() <= 0:
                raise DomainError(f"group {basis} needs non-negative weights with positive total")
            clean[basis] = (outcomes, weights)
        self.groups = clean

    @property
    def bases(self) -> list:
        return list(self.groups)

    def counts(self) -> dict:
        return {b: float(w.sum()) for b, (_, w) in self.groups.items()}

    @property
    def total_weight(self) -> float:
        return float(sum(w.sum() for _, w in self.groups.values()))

    @classmethod
    def from_snapshots(cls, snapshots) -> "SnapshotDataset":
        snapshots = list(snapshots)
        if not snapshots:
            raise DomainError("no snapshots")
        n = snapshots[0].outcome.n_sites
        raw = {}
        for snap in snapshots:
            if snap.outcome.n_sites != n:
                raise DomainError("snapshots have different sizes")
            raw.setdefault(snap.basis, []).append(snap.outcome.values)
        return cls(n, {b: _tally(np.array(rows, dtype=np.int8)) for b, rows in raw.items()})

    def snapshots(self):
        """Iterate individual shots; fractional weights are not expandable."""
        for basis, (outcomes, weights) in self.groups.items():
            if not np.allclose(weights, np.round(weights)):
                raise DomainError("dataset has fractional weights")
            for row, w in zip(outcomes, weights):
                for _ in range(int(round(w))):
                    yield Snapshot(basis, SpinConfiguration.from_array(row))

    def to_text(self) -> str:
        return "".join(s.to_line() + "\n" for s in self.snapshots())

    @classmethod
    def from_text(cls, text: str) -> "SnapshotDataset":
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        return cls.from_snapshots(Snapshot.from_line(ln) for ln in lines)

    def entropy_floor(self) -> float:
        """Weighted empirical entropy: the smallest value the loss can take."""
        total = self.total_weight
        h = 0.0
        for _, w in self.groups.values():
            p = w[w > 0] / w.sum()
            h -= (w.sum() / total) * float(p @ np.log(p))
        return h


def _tally(rows: np.ndarray):
    codes, first, counts = np.unique(encode_array(rows), return_index=True, return_counts=True)
    return rows[first], counts.astype(float)


def generate_snapshots(state: StateVector, bases, counts, seed: int = 0) -> SnapshotDataset:
    """Born-sample ``counts`` shots of ``state`` in each basis of ``bases``."""
    if state.n_sites > MAX_ENUM_SITES:
        raise CapacityError(f"snapshot generation limited to {MAX_ENUM_SITES} sites")
    bases = [_check_basis(b, state.n_sites) for b in bases]
    if np.isscalar(counts):
        counts = [int(counts)] * len(bases)
    if len(counts) != len(bases):
        raise DomainError("one count per basis required")
    seeds = np.random.SeedSequence(seed).spawn(len(bases))
    groups = {}
    for basis, count, ss in zip(bases, counts, seeds):
        if count < 1:
            raise DomainError(f"count for basis {basis} must be >= 1")
        rotated = BasisRotation(basis).apply(state)
        shot_seed = int(ss.generate_state(1)[0])
        rows = born_sample(rotated.normalize(), int(count), shot_seed)
        outcomes, weights = _tally(rows)
        if basis in groups:
            outcomes = np.vstack([groups[basis][0], outcomes])
            weights = np.concatenate([groups[basis][1], weights])
            outcomes, weights = _merge(outcomes, weights)
        groups[basis] = (outcomes, weights)
    return SnapshotDataset(state.n_sites, groups)


def _merge(outcomes, weights):
    codes = encode_array(outcomes)
    uniq, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
    return outcomes[first], np.bincount(inverse, weights=weights)


def exact_dataset(state: StateVector, bases) -> SnapshotDataset:
    """Infinite-shot dataset: every outcome weighted by its exact probability."""
    configs = all_configurations(state.n_sites)
    groups = {}
    for basis in bases:
        basis = _check_basis(basis, state.n_sites)
        p = BasisRotation(basis).apply(state.normalize()).probabilities()
        keep = p > 0
        groups[basis] = (configs[keep], p[keep])
    return SnapshotDataset(state.n_sites, groups)


# -- rotated amplitudes --------------------------------------------------------


def _branches(basis: str, outcomes: np.ndarray):
    """Expanded configurations (M, K, N) and log rotation factors (M, K)."""
    sites = [j for j, c in enumerate(basis) if c != "Z"]
    k = len(sites)
    if k > MAX_ROTATED_SITES:
        raise CapacityError(f"{k} rotated sites exceed the cap of {MAX_ROTATED_SITES}")
    m, n = outcomes.shape
    combos = np.array(list(product((1, -1), repeat=k)), dtype=np.int8).reshape(1 << k, k)
    configs = np.broadcast_to(outcomes[:, None, :], (m, combos.shape[0], n)).copy()
    factor = np.ones((m, combos.shape[0]), dtype=complex)
    for col, j in enumerate(sites):
        configs[:, :, j] = combos[None, :, col]
        u = _UNITARIES[basis[j]]
        row = (outcomes[:, j] < 0).astype(int)
        column = (combos[:, col] < 0).astype(int)
        factor *= u[row[:, None], column[None, :]]
    return configs, np.log(factor)


def _rotated(ansatz: Ansatz, basis: str, outcomes: np.ndarray, with_derivatives: bool = False):
    configs, log_u = _branches(basis, outcomes)
    logs = np.asarray(ansatz.log_amplitude(configs), dtype=complex)
    zero = is_zero_amplitude(logs)
    terms = np.where(zero, -np.inf + 0j, logs + log_u)
    shift = np.max(terms.real, axis=1, keepdims=True)
    finite = np.isfinite(shift)
    shift = np.where(finite, shift, 0.0)
    weights = np.where(zero, 0.0, np.exp(np.where(zero, 0.0, terms - shift)))
    total = weights.sum(axis=1)
    nonzero = (np.abs(total) > 1e-300) & finite[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(nonzero, np.log(np.where(nonzero, total, 1.0)) + shift[:, 0], LOG_ZERO)
    if not with_derivatives:
        return out, None
    # d log psi^B / d theta = sum_b w_b O(s_b) / sum_b w_b
    rel = np.where(nonzero[:, None], weights / np.where(nonzero, total, 1.0)[:, None], 0.0)
    o = ansatz.log_derivatives(configs)
    return out, np.einsum("mk,mkp->mp", rel, o)


def rotated_log_amplitude(ansatz: Ansatz, basis: str, outcome) -> complex:
    """``log <s|U_B|psi>`` summed over the branches of the rotated sites."""
    s = as_array(outcome)
    basis = _check_basis(basis, ansatz.n_sites)
    if s.shape != (ansatz.n_sites,):
        raise DomainError(f"outcome of length {s.shape} for {ansatz.n_sites} sites")
    return complex(_rotated(ansatz, basis, s[None, :].astype(np.int8))[0][0])


# -- loss ----------------------------------------------------------------------


def _normalizer(ansatz: Ansatz, batch):
    """``log Z`` (full summation only) and ``<O^*>`` under the model distribution."""
    if batch.weights is not None:
        logs = batch.log_amps
        shift = logs.real.max()
        log_z = float(shift * 2 + np.log(np.sum(np.exp(2 * (logs.real - shift)))))
    else:
        log_z = float("nan")
    o = ansatz.log_derivatives(batch.configs)
    w = batch.weights
    mean_o = o.mean(axis=0) if w is None else w @ o
    return log_z, np.conj(mean_o)


def kl_loss(ansatz: Ansatz, dataset: SnapshotDataset, batch=None, with_gradient: bool = True):
    """Empirical NLL of ``dataset`` under ``ansatz`` and its gradient.

    The gradient is ``2 dL/dconj(theta)``, whose real and imaginary parts are
    the derivatives along ``Re theta`` and ``Im theta``. ``batch`` supplies the
    model distribution for the normalizer; it defaults to full summation.
    """
    if dataset.n_sites != ansatz.n_sites:
        raise DomainError(f"dataset on {dataset.n_sites} sites, ansatz on {ansatz.n_sites}")
    if batch is None:
        if ansatz.n_sites > MAX_ENUM_SITES:
            raise CapacityError("full-summation normalizer needs N <= 14; pass a sampled batch")
        batch = exact_batch(ansatz)
    log_z, mean_o_conj = _normalizer(ansatz, batch)
    total = dataset.total_weight
    loglik = 0.0
    data_grad = np.zeros(ansatz.n_params, dtype=complex)
    for basis, (outcomes, weights) in dataset.groups.items():
        logs, d = _rotated(ansatz, basis, outcomes, with_derivatives=with_gradient)
        bad = is_zero_amplitude(logs) & (weights > 0)
        if np.any(bad):
            row = outcomes[np.argmax(bad)]
            snap = Snapshot(basis, SpinConfiguration.from_array(row))
            raise LossError(f"zero model amplitude on snapshot {snap.to_line()}", snapshot=snap)
        loglik += float(weights @ (2.0 * logs.real))
        if with_gradient:
            data_grad += weights @ np.conj(d)
    loss = -loglik / total + log_z
    if not with_gradient:
        return loss, None
    grad = 2.0 * (-data_grad / total + mean_o_conj)
    return loss, grad


def entropy_floor(dataset: SnapshotDataset) -> float:
    return dataset.entropy_floor()


# -- training ------------------------------------------------------------------


@dataclass
class TomographyResult:
    ansatz: Ansatz
    losses: list
    fidelities: list = field(default_factory=list)

    def rows(self):
        for k, loss in enumerate(self.losses):
            fid = self.fidelities[k] if k < len(self.fidelities) else float("nan")
            yield k, loss, fid


def train_tomography(
    ansatz: Ansatz,
    dataset: SnapshotDataset,
    lr: float,
    n_steps: int,
    sampler_config: SamplerConfig | None = None,
    diag_shift: float | None = 1e-3,
    reference: StateVector | None = None,
    max_update: float | None = 0.5,
) -> TomographyResult:
    """Gradient descent on the NLL.

    With ``diag_shift`` set, the gradient is preconditioned by the regularized
    geometric tensor of the model distribution (natural gradient); ``None``
    gives plain gradient descent. The normalizer term uses full summation
    unless ``sampler_config`` is given. ``reference`` records the fidelity
    trajectory. ``max_update`` caps the Euclidean norm of a single parameter
    update, which keeps the first steps stable when the data sit where the
    initial model has almost no weight.
    """
    if "Z" * dataset.n_sites not in dataset.groups:
        raise DomainError("dataset must contain the all-Z basis")
    if isinstance(ansatz, TableAnsatz):
        raise DomainError("table ansatz has no trainable parameters")
    if lr <= 0 or n_steps < 0:
        raise DomainError("lr must be positive and n_steps non-negative")
    source = MonteCarloSource(sampler_config) if sampler_config is not None else ExactSource()
    losses, fids = [], []
    a = ansatz
    for _ in range(n_steps):
        batch = source(a)
        loss, grad = kl_loss(a, dataset, batch=batch)
        if a.n_sites <= MAX_ENUM_SITES and batch.weights is None:
            loss, _ = kl_loss(a, dataset, with_gradient=False)
        losses.append(float(loss))
        if reference is not None:
            fids.append(reconstruct_fidelity(a, reference))
        step = grad
        if diag_shift is not None:
            step = _precondition(a, batch, grad, diag_shift)
        delta = lr * step
        norm = float(np.linalg.norm(delta))
        if max_update is not None and norm > max_update:
            delta *= max_update / norm
        params = a.parameters - delta
        if not np.all(np.isfinite(params)):
            break
        a = a.with_parameters(params)
    if a.n_sites <= MAX_ENUM_SITES:
        losses.append(float(kl_loss(a, dataset, with_gradient=False)[0]))
        if reference is not None:
            fids.append(reconstruct_fidelity(a, reference))
    return TomographyResult(a, losses, fids)


def _precondition(ansatz, batch, grad, diag_shift):
    o = ansatz.log_derivatives(batch.configs)
    w = batch.weights
    if w is None:
        w = np.full(o.shape[0], 1.0 / o.shape[0])
    oc = o - w @ o
    s = (np.conj(oc).T * w) @ oc
    s = 0.5 * (s + s.conj().T) + diag_shift * np.eye(s.shape[0])
    return np.linalg.solve(s, grad)


def reconstruct_fidelity(ansatz: Ansatz, reference: StateVector) -> float:
    if ansatz.n_sites > MAX_ENUM_SITES:
        raise CapacityError(f"fidelity evaluation limited to {MAX_ENUM_SITES} sites")
    return fidelity(reference, state_from_ansatz(ansatz))


def born_tv_distance(ansatz: Ansatz, reference: StateVector) -> float:
    """Total-variation distance between computational-basis Born distributions."""
    p = state_from_ansatz(ansatz).probabilities()
    q = reference.normalize().probabilities()
    return 0.5 * float(np.abs(p - q).sum())
