"""Monte Carlo estimators and variational dynamics.

Conventions for complex (holomorphic) parameters:

* ``f_p = <E_loc O_p^*> - <E_loc><O_p^*>`` is the derivative of the energy
  with respect to ``conj(theta_p)``.
* :func:`energy_gradient` returns ``2 f``: its real part is ``dE/dRe(theta)``
  and its imaginary part ``dE/dIm(theta)``. Gradient descent therefore reads
  ``theta <- theta - lr * energy_gradient``.
* Time evolution solves ``(S + diag_shift) theta_dot = -xi f`` with ``xi = 1j``
  in real time and ``xi = 1`` in imaginary time.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .ansatz import Ansatz, TableAnsatz, is_zero_amplitude
from .basis import all_configurations, as_array
from .errors import DomainError, NumericalError, OptimizationError
from .operators import LocalOperator, PauliString
from .sampler import SampleBatch, SamplerConfig, TransitionKernel, binning_analysis, run_chain

# -- batches -------------------------------------------------------------------


def exact_batch(ansatz: Ansatz) -> SampleBatch:
    """Full-basis batch weighted by the normalized Born probabilities."""
    configs = all_configurations(ansatz.n_sites)
    logs = np.asarray(ansatz.log_amplitude(configs), dtype=complex)
    keep = ~is_zero_amplitude(logs)
    configs, logs = configs[keep], logs[keep]
    w = np.exp(2.0 * (logs.real - logs.real.max()))
    return SampleBatch(configs=configs, log_amps=logs, weights=w / w.sum())


class MonteCarloSource:
    """Callable producing a fresh Markov-chain batch for an ansatz snapshot.

    Chains are warm-started from the previous call and every call uses a new
    random epoch, so a run is reproducible from ``config.seed`` alone.
    """

    def __init__(self, config: SamplerConfig, kernel: TransitionKernel | None = None):
        self.config = config
        self.kernel = kernel or TransitionKernel("single_flip")
        self.epoch = 0
        self._states = None

    def __call__(self, ansatz: Ansatz) -> SampleBatch:
        batch = run_chain(self.config, self.kernel, ansatz, initial=self._states, epoch=self.epoch)
        self.epoch += 1
        self._states = batch.final_states
        return batch


class ExactSource:
    """Full-summation stand-in for a sampler (desk-scale chains only)."""

    def __call__(self, ansatz: Ansatz) -> SampleBatch:
        return exact_batch(ansatz)


# -- local estimators ----------------------------------------------------------


def _ratios(ansatz, configs, targets, log_amps):
    if isinstance(ansatz, TableAnsatz):
        return ansatz.amplitude_ratio(np.broadcast_to(configs[..., None, :], targets.shape), targets)
    return np.exp(np.asarray(ansatz.log_amplitude(targets)) - log_amps[..., None])


def local_values(op: LocalOperator, ansatz: Ansatz, configs, log_amps=None) -> np.ndarray:
    """``O_loc(s) = sum_s' <s|O|s'> psi(s') / psi(s)`` for a batch of configurations."""
    s = as_array(configs)
    if op.n_sites != ansatz.n_sites or s.shape[-1] != op.n_sites:
        raise DomainError("operator, ansatz and configuration sizes differ")
    if log_amps is None:
        log_amps = np.asarray(ansatz.log_amplitude(s), dtype=complex)
    if np.any(is_zero_amplitude(log_amps)):
        raise DomainError("local estimator undefined at a zero-amplitude configuration")
    targets, values = op.connections(s)
    ratios = np.ones(values.shape, dtype=complex)
    if values.shape[-1] > 1:
        ratios[..., 1:] = _ratios(ansatz, s, targets[..., 1:, :], log_amps)
    return (values * ratios).sum(axis=-1)


def local_estimator(op: LocalOperator, ansatz: Ansatz, s) -> complex:
    s = as_array(s)
    if s.ndim != 1:
        raise DomainError("local_estimator expects one configuration; use local_values")
    return complex(local_values(op, ansatz, s[None, :])[0])


def _cached(batch, name, owners, fn):
    hit = batch._cache.get(name)
    if hit is not None and all(a is b for a, b in zip(hit[0], owners)):
        return hit[1]
    value = fn()
    batch._cache[name] = (owners, value)
    return value


def batch_local_values(op, ansatz, batch):
    return _cached(batch, ("loc", id(op)), (op, ansatz),
                   lambda: local_values(op, ansatz, batch.configs, batch.log_amps))


def batch_log_derivatives(ansatz, batch):
    return _cached(batch, "O", (ansatz,), lambda: ansatz.log_derivatives(batch.configs))


def _mean(x, weights):
    if weights is None:
        # numpy divides a complex mean by a complex count, which is inexact
        # even for constant input; divide the parts by the real count instead.
        total = x.sum(axis=0)
        if np.iscomplexobj(total):
            return (total.real / len(x)) + 1j * (total.imag / len(x))
        return total / len(x)
    return weights @ x


# -- expectation values --------------------------------------------------------


@dataclass(frozen=True)
class EnergyEstimate:
    mean: complex
    variance: float
    stderr: float
    effective_samples: float
    tau: float = 1.0

    @property
    def real(self) -> float:
        return float(self.mean.real)


def summarize(values: np.ndarray, batch: SampleBatch) -> EnergyEstimate:
    if len(values) == 0:
        raise DomainError("empty batch")
    mean = complex(_mean(values, batch.weights))
    dev2 = np.abs(values - mean) ** 2
    variance = float(_mean(dev2, batch.weights))
    if batch.exact:
        return EnergyEstimate(mean, variance, 0.0, math.inf, 1.0)
    res = binning_analysis(batch.per_chain(values.real))
    tau = max(res.tau, 1.0 / len(values))
    eff = len(values) / tau
    return EnergyEstimate(mean, variance, math.sqrt(variance / eff), eff, tau)


def expectation_estimate(op: LocalOperator, ansatz: Ansatz, batch: SampleBatch) -> EnergyEstimate:
    if len(batch) == 0:
        raise DomainError("empty batch")
    return summarize(batch_local_values(op, ansatz, batch), batch)


# -- gradients and the geometric tensor ----------------------------------------


@dataclass(frozen=True)
class Qgt:
    matrix: np.ndarray
    forces: np.ndarray
    diag_shift: float = 0.0

    def regularized(self) -> np.ndarray:
        return self.matrix + self.diag_shift * np.eye(self.matrix.shape[0])


def _centered(ansatz, batch):
    o = batch_log_derivatives(ansatz, batch)
    return o - _mean(o, batch.weights)


def qgt_and_forces(op: LocalOperator, ansatz: Ansatz, batch: SampleBatch, diag_shift: float = 0.0) -> Qgt:
    if len(batch) == 0:
        raise DomainError("empty batch")
    oc = _centered(ansatz, batch)
    e = batch_local_values(op, ansatz, batch)
    e = e - _mean(e, batch.weights)
    if batch.weights is None:
        w = np.full(len(batch), 1.0 / len(batch))
    else:
        w = batch.weights
    ow = oc.conj().T * w
    s = ow @ oc
    s = 0.5 * (s + s.conj().T)
    f = ow @ e
    return Qgt(s, f, diag_shift)


def forces(op, ansatz, batch) -> np.ndarray:
    if len(batch) == 0:
        raise DomainError("empty batch")
    oc = _centered(ansatz, batch)
    e = batch_local_values(op, ansatz, batch)
    e = e - _mean(e, batch.weights)
    return _mean(oc.conj() * e[:, None], batch.weights)


def energy_gradient(op: LocalOperator, ansatz: Ansatz, batch: SampleBatch) -> np.ndarray:
    """``2 f``; real part is dE/dRe(theta), imaginary part dE/dIm(theta)."""
    return 2.0 * forces(op, ansatz, batch)


# -- linear solve and time stepping --------------------------------------------


@dataclass(frozen=True)
class EvolutionConfig:
    mode: str = "imaginary"
    dt: float = 0.01
    diag_shift: float = 1e-4
    integrator: str = "euler"
    n_steps: int = 100
    solver: str = "direct"
    rcond: float = 1e-10

    def __post_init__(self):
        if self.mode not in ("real", "imaginary"):
            raise DomainError(f"mode must be 'real' or 'imaginary', got {self.mode!r}")
        if self.integrator not in ("euler", "rk4"):
            raise DomainError(f"integrator must be 'euler' or 'rk4', got {self.integrator!r}")
        if self.solver not in ("direct", "pinv"):
            raise DomainError(f"solver must be 'direct' or 'pinv', got {self.solver!r}")
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        if self.diag_shift < 0:
            raise DomainError("diag_shift must be >= 0")

    @property
    def xi(self) -> complex:
        return 1j if self.mode == "real" else 1.0

    @property
    def duration(self) -> float:
        return self.dt * self.n_steps


def solve_qgt(qgt: Qgt, rhs: np.ndarray, solver: str = "direct", rcond: float = 1e-10) -> np.ndarray:
    if rhs.size == 0:
        return rhs.copy()
    a = qgt.regularized()
    try:
        if solver == "direct":
            x = scipy.linalg.solve(a, rhs, assume_a="her")
        else:
            vals, vecs = np.linalg.eigh(a)
            cut = rcond * max(abs(vals).max(), 1e-300)
            inv = np.where(np.abs(vals) > cut, 1.0 / np.where(vals == 0, 1.0, vals), 0.0)
            x = vecs @ (inv * (vecs.conj().T @ rhs))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise NumericalError(f"regularized geometric tensor is singular: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite parameter velocity")
    return x


def parameter_velocity(op, ansatz, batch, config: EvolutionConfig) -> np.ndarray:
    qgt = qgt_and_forces(op, ansatz, batch, config.diag_shift)
    return solve_qgt(qgt, -config.xi * qgt.forces, config.solver, config.rcond)


def time_step(op: LocalOperator, ansatz: Ansatz, batch: SampleBatch, config: EvolutionConfig, source=None) -> Ansatz:
    """Advance the parameters by one step of length ``config.dt``.

    RK4 evaluates its three later stages on fresh batches from ``source``
    (defaults to full summation when ``batch`` is a full-basis batch).
    """
    theta = ansatz.parameters
    dt = config.dt
    k1 = parameter_velocity(op, ansatz, batch, config)
    if config.integrator == "euler":
        return ansatz.with_parameters(theta + dt * k1)
    if source is None:
        if not batch.exact:
            raise DomainError("rk4 with sampled batches needs a batch source")
        source = ExactSource()

    def stage(params):
        a = ansatz.with_parameters(params)
        return parameter_velocity(op, a, source(a), config)

    k2 = stage(theta + 0.5 * dt * k1)
    k3 = stage(theta + 0.5 * dt * k2)
    k4 = stage(theta + dt * k3)
    return ansatz.with_parameters(theta + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))


# -- optimization --------------------------------------------------------------


@dataclass
class Trajectory:
    ansatz: Ansatz
    energies: list = field(default_factory=list)
    acceptance: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def rows(self):
        """Energy-log rows ``(step, re, im, stderr, acceptance, seconds)``."""
        for k, (e, a, t) in enumerate(zip(self.energies, self.acceptance, self.seconds)):
            yield k, e.mean.real, e.mean.imag, e.stderr, a, t


def _acceptance(batch):
    return float(np.mean(batch.acceptance)) if batch.acceptance is not None else 1.0


def _optimize(op, ansatz, source, n_steps, update, checkpoint_every, callback):
    traj = Trajectory(ansatz)
    start = time.perf_counter()
    for step in range(n_steps):
        batch = source(ansatz)
        est = expectation_estimate(op, ansatz, batch)
        if not np.isfinite(est.mean):
            raise OptimizationError(f"energy became non-finite at step {step}", last_good=ansatz)
        traj.energies.append(est)
        traj.acceptance.append(_acceptance(batch))
        traj.seconds.append(time.perf_counter() - start)
        if checkpoint_every and step % checkpoint_every == 0:
            traj.checkpoints.append((step, ansatz))
        if callback is not None:
            callback(step, ansatz, est)
        try:
            new = update(ansatz, batch)
        except (NumericalError, DomainError) as exc:
            raise OptimizationError(f"update failed at step {step}: {exc}", last_good=ansatz) from exc
        if not np.all(np.isfinite(new.parameters)):
            raise OptimizationError(f"parameters became non-finite at step {step}", last_good=ansatz)
        ansatz = new
    traj.ansatz = ansatz
    if checkpoint_every:
        traj.checkpoints.append((n_steps, ansatz))
    return traj


def sgd_ground_state(op, ansatz, source, lr: float, n_steps: int, checkpoint_every=0, callback=None) -> Trajectory:
    """Plain gradient descent ``theta <- theta - lr * energy_gradient``."""
    if lr < 0:
        raise DomainError("learning rate must be >= 0")

    def update(a, batch):
        return a.with_parameters(a.parameters - lr * energy_gradient(op, a, batch))

    return _optimize(op, ansatz, source, n_steps, update, checkpoint_every, callback)


def sr_ground_state(op, ansatz, source, config: EvolutionConfig, checkpoint_every=0, callback=None) -> Trajectory:
    """Stochastic reconfiguration: Euler steps of imaginary-time evolution."""
    if config.mode != "imaginary":
        raise DomainError("ground-state search needs imaginary-time mode")

    def update(a, batch):
        return time_step(op, a, batch, config, source)

    return _optimize(op, ansatz, source, config.n_steps, update, checkpoint_every, callback)


# -- real-time evolution -------------------------------------------------------


@dataclass
class TimeSeries:
    times: list
    values: dict
    ansatz: Ansatz


def evolve(op, ansatz, config: EvolutionConfig, source, observables: dict, record_every: int = 1) -> TimeSeries:
    """Integrate the variational equations and record observable estimates."""
    series = {name: [] for name in observables}
    times = []

    def record(t, a, batch):
        times.append(t)
        for name, obs in observables.items():
            series[name].append(expectation_estimate(obs, a, batch))

    batch = source(ansatz)
    record(0.0, ansatz, batch)
    for step in range(1, config.n_steps + 1):
        ansatz = time_step(op, ansatz, batch, config, source)
        batch = source(ansatz)
        if step % record_every == 0:
            record(step * config.dt, ansatz, batch)
    return TimeSeries(times, series, ansatz)


# -- gate application ----------------------------------------------------------


@dataclass
class GateResult:
    ansatz: Ansatz
    infidelity: float
    stderr: float
    history: list


def is_unitary(gate: LocalOperator, atol: float = 1e-10) -> bool:
    ident = LocalOperator(gate.n_sites, (PauliString(1.0, ()),))
    return (gate.adjoint() @ gate).equals(ident, atol=atol)


def _cross_ratios(gate, num: Ansatz, den: Ansatz, configs, den_logs):
    """``sum_s' <s|G|s'> num(s') / den(s)`` for every row of ``configs``."""
    targets, values = gate.connections(configs)
    logs = np.asarray(num.log_amplitude(targets))
    ratio = np.where(is_zero_amplitude(logs), 0.0, np.exp(logs - den_logs[:, None]))
    return (values * ratio).sum(axis=-1)


def gate_fidelity_terms(gate, target_base: Ansatz, trial: Ansatz, trial_batch, base_batch):
    """Estimates of ``<R>_trial``, ``<R'>_base`` and per-sample ``R`` for the infidelity."""
    r = _cross_ratios(gate, target_base, trial, trial_batch.configs, trial_batch.log_amps)
    r_back = _cross_ratios(gate.adjoint(), trial, target_base, base_batch.configs, base_batch.log_amps)
    return r, r_back


def apply_gate_variational(
    gate: LocalOperator,
    ansatz: Ansatz,
    source,
    n_steps: int = 200,
    lr: float = 0.05,
    diag_shift: float = 1e-3,
    initial: Ansatz | None = None,
    tol: float = 0.0,
) -> GateResult:
    """Fit a new ansatz to ``gate |ansatz>`` by maximizing the fidelity.

    Each step is a natural-gradient (geometric-tensor preconditioned) ascent
    step on ``log F`` with ``F = <R>_trial <R'>_base``.
    """
    if gate.n_sites != ansatz.n_sites:
        raise DomainError("gate and ansatz sizes differ")
    if not is_unitary(gate):
        raise DomainError("gate is not unitary")
    trial = initial if initial is not None else ansatz
    history = []
    infid, err = math.nan, math.nan
    for _ in range(n_steps + 1):
        tb = source(trial)
        bb = source(ansatz)
        r, r_back = gate_fidelity_terms(gate, ansatz, trial, tb, bb)
        mean_r = complex(_mean(r, tb.weights))
        mean_back = complex(_mean(r_back, bb.weights))
        if mean_r == 0:
            raise NumericalError("trial state has zero overlap with the target")
        fid = (mean_r * mean_back).real
        infid = 1.0 - fid
        est_r = summarize(r, tb)
        est_b = summarize(r_back, bb)
        rel = math.hypot(est_r.stderr / max(abs(mean_r), 1e-300),
                         est_b.stderr / max(abs(mean_back), 1e-300))
        err = abs(fid) * rel
        history.append((infid, err))
        if len(history) > n_steps or infid <= tol:
            break
        oc = _centered(trial, tb)
        grad = _mean(oc.conj() * (r / mean_r)[:, None], tb.weights)
        qgt = qgt_and_forces_from(oc, tb.weights, diag_shift)
        step = solve_qgt(qgt, grad)
        trial = trial.with_parameters(trial.parameters + lr * step)
    return GateResult(trial, infid, err, history)


def qgt_and_forces_from(oc, weights, diag_shift):
    w = np.full(oc.shape[0], 1.0 / oc.shape[0]) if weights is None else weights
    s = (oc.conj().T * w) @ oc
    return Qgt(0.5 * (s + s.conj().T), np.zeros(oc.shape[1], dtype=complex), diag_shift)
