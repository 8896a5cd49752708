"""Metropolis-Hastings sampling of |psi(s)|^2 with pluggable proposals.

All chains advance in lockstep so each Metropolis step is one vectorized
ansatz evaluation. Every chain owns a Philox stream keyed by
``(seed, chain, epoch)``; results therefore do not depend on how many
chains run side by side.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ansatz import Ansatz, is_zero_amplitude
from .basis import SpinConfiguration, as_array, encode
from .errors import ConfigError, DomainError, ProposalError, StateError
from .operators import LocalOperator

KERNELS = ("single_flip", "pair_exchange", "hamiltonian")
MAX_INIT_TRIES = 100_000


@dataclass(frozen=True)
class TransitionKernel:
    kind: str = "single_flip"
    operator: LocalOperator | None = None

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kind!r}", key="sampler.kernel")
        if self.kind == "hamiltonian" and self.operator is None:
            raise ConfigError("hamiltonian kernel needs an operator", key="sampler.kernel")

    @property
    def symmetric(self) -> bool:
        return self.kind != "hamiltonian"


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 16
    samples_per_chain: int = 64
    sweeps_per_sample: int = 1
    burn_in_sweeps: int | None = None
    seed: int = 0
    sector_constraint: int | None = None

    def __post_init__(self):
        for name in ("n_chains", "samples_per_chain", "sweeps_per_sample"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", key=f"sampler.{name}")
        if self.burn_in_sweeps is not None and self.burn_in_sweeps < 0:
            raise ConfigError("burn_in_sweeps must be >= 0", key="sampler.burn_in_sweeps")

    @property
    def burn_in(self) -> int:
        if self.burn_in_sweeps is not None:
            return self.burn_in_sweeps
        return math.ceil(0.1 * self.samples_per_chain * self.sweeps_per_sample)

    @property
    def n_samples(self) -> int:
        return self.n_chains * self.samples_per_chain


@dataclass
class ChainState:
    current: np.ndarray
    cached_log_amp: complex
    rng: np.random.Generator
    accepted: int = 0
    proposed: int = 0

    @property
    def configuration(self) -> SpinConfiguration:
        return SpinConfiguration.from_array(self.current)


@dataclass
class SampleBatch:
    """Samples sharing one ansatz snapshot.

    ``configs`` is chain-major: rows ``c * S .. (c + 1) * S`` belong to chain
    ``c``. ``weights`` is ``None`` for Markov-chain samples (uniform weights)
    and holds normalized Born weights for a full-basis batch.
    """

    configs: np.ndarray
    log_amps: np.ndarray
    weights: np.ndarray | None = None
    n_chains: int = 1
    acceptance: np.ndarray | None = None
    final_states: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return self.configs.shape[0]

    @property
    def exact(self) -> bool:
        return self.weights is not None

    def per_chain(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values).reshape(self.n_chains, -1, *np.shape(values)[1:])


def chain_rng(seed: int, chain: int, epoch: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, chain, epoch])))


# -- proposals -----------------------------------------------------------------


def hamiltonian_proposal(op: LocalOperator, s, rng):
    """Draw ``s'`` with probability proportional to ``|<s|H|s'>|`` (``s' != s``).

    Returns ``(s', forward_prob, reverse_prob)``.
    """
    s = as_array(s)
    new, fwd, rev = _hamiltonian_move(op, s[None, :], rng.random(1))
    return SpinConfiguration.from_array(new[0]), float(fwd[0]), float(rev[0])


def _offdiag_weights(op, configs):
    targets, values = op.connections(configs)
    w = np.abs(values)
    w[..., 0] = 0.0
    w[w < 1e-14] = 0.0
    return targets, w


def _hamiltonian_move(op, states, u):
    targets, w = _offdiag_weights(op, states)
    tot = w.sum(axis=-1)
    if np.any(tot == 0):
        raise ProposalError("configuration has no off-diagonal connections")
    cum = np.cumsum(w, axis=-1) / tot[:, None]
    k = (u[:, None] >= cum).sum(axis=-1)
    k = np.minimum(k, w.shape[-1] - 1)
    rows = np.arange(states.shape[0])
    new = targets[rows, k]
    fwd = w[rows, k] / tot
    # Flip patterns are involutions, so the reverse move uses the same pattern index.
    _, w_back = _offdiag_weights(op, new)
    rev = w_back[rows, k] / w_back.sum(axis=-1)
    return new, fwd, rev


def _pair_table(n):
    rows, cols = np.triu_indices(n, 1)
    return rows, cols


def _propose(kernel: TransitionKernel, states: np.ndarray, u: np.ndarray):
    """Proposals for every chain and ``log(T(s'->s) / T(s->s'))``."""
    c, n = states.shape
    if kernel.kind == "single_flip":
        # Index n is a null move. Without it a flat amplitude accepts every
        # flip and a sweep of N moves locks each chain into one parity class.
        site = np.minimum((u * (n + 1)).astype(np.intp), n)
        new = states.copy()
        move = site < n
        new[np.flatnonzero(move), site[move]] *= -1
        return new, np.zeros(c)
    if kernel.kind == "pair_exchange":
        rows, cols = _pair_table(n)
        k = np.minimum((u * rows.size).astype(np.intp), rows.size - 1)
        i, j = rows[k], cols[k]
        new = states.copy()
        r = np.arange(c)
        new[r, i], new[r, j] = states[r, j], states[r, i]
        return new, np.zeros(c)
    new, fwd, rev = _hamiltonian_move(kernel.operator, states, u)
    return new, np.log(rev) - np.log(fwd)


def proposal_distribution(kernel: TransitionKernel, s) -> dict:
    """Exact ``{encoded s': T(s -> s')}`` for exhaustive checks."""
    s = as_array(s)
    n = s.shape[0]
    out = {}
    if kernel.kind == "single_flip":
        out[encode(s)] = 1.0 / (n + 1)
        for site in range(n):
            t = s.copy()
            t[site] *= -1
            out[encode(t)] = out.get(encode(t), 0.0) + 1.0 / (n + 1)
    elif kernel.kind == "pair_exchange":
        rows, cols = _pair_table(n)
        for i, j in zip(rows, cols):
            t = s.copy()
            t[i], t[j] = s[j], s[i]
            out[encode(t)] = out.get(encode(t), 0.0) + 1.0 / rows.size
    else:
        targets, w = _offdiag_weights(kernel.operator, s)
        tot = w.sum()
        if tot == 0:
            raise ProposalError("configuration has no off-diagonal connections")
        for t, wk in zip(targets, w):
            if wk > 0:
                out[encode(t)] = out.get(encode(t), 0.0) + wk / tot
    return out


def acceptance_probability(kernel, ansatz, s, s2) -> float:
    """Metropolis-Hastings acceptance ``min(1, P(s')T(s'->s) / P(s)T(s->s'))``."""
    s, s2 = as_array(s), as_array(s2)
    ratio = abs(complex(ansatz.amplitude_ratio(s, s2))) ** 2
    if not kernel.symmetric:
        fwd = proposal_distribution(kernel, s).get(encode(s2), 0.0)
        rev = proposal_distribution(kernel, s2).get(encode(s), 0.0)
        if fwd == 0:
            return 0.0
        ratio *= rev / fwd
    return min(1.0, ratio)


# -- stepping ------------------------------------------------------------------


def _advance(kernel, ansatz, states, log_amps, u_prop, u_acc):
    proposals, log_t = _propose(kernel, states, u_prop)
    new_logs = ansatz.log_amplitude(proposals)
    log_p = 2.0 * np.real(new_logs - log_amps) + log_t
    with np.errstate(over="ignore"):
        accept_prob = np.minimum(1.0, np.exp(np.minimum(log_p, 0.0)))
    accept = u_acc < accept_prob
    states = np.where(accept[:, None], proposals, states)
    log_amps = np.where(accept, new_logs, log_amps)
    return states, log_amps, accept


def metropolis_step(chain: ChainState, kernel: TransitionKernel, ansatz: Ansatz) -> ChainState:
    if chain.current.shape[0] != ansatz.n_sites:
        raise DomainError("chain and ansatz site counts differ")
    if is_zero_amplitude(chain.cached_log_amp):
        raise StateError("current configuration has zero amplitude")
    u = chain.rng.random(2)
    states, logs, acc = _advance(
        kernel, ansatz, chain.current[None, :], np.array([chain.cached_log_amp]), u[:1], u[1:]
    )
    return ChainState(
        states[0], complex(logs[0]), chain.rng, chain.accepted + int(acc[0]), chain.proposed + 1
    )


def init_chain(ansatz: Ansatz, seed: int = 0, chain: int = 0, configuration=None) -> ChainState:
    rng = chain_rng(seed, chain)
    if configuration is None:
        configuration = rng.choice(np.array([-1, 1], dtype=np.int8), size=ansatz.n_sites)
    s = np.array(as_array(configuration))
    return ChainState(s, complex(ansatz.log_amplitude(s)), rng)


def _random_start(rng, n, sector):
    if sector is None:
        return rng.choice(np.array([-1, 1], dtype=np.int8), size=n)
    n_up = (n + sector) // 2
    s = np.full(n, -1, dtype=np.int8)
    s[rng.permutation(n)[:n_up]] = 1
    return s


def run_chain(
    config: SamplerConfig,
    kernel: TransitionKernel,
    ansatz: Ansatz,
    initial: np.ndarray | None = None,
    epoch: int = 0,
) -> SampleBatch:
    """Run ``config.n_chains`` Markov chains and keep every ``sweeps_per_sample``-th sweep.

    ``initial`` (shape ``(n_chains, N)``) warm-starts the chains, typically with
    ``final_states`` of a previous batch; ``epoch`` selects fresh random streams.
    """
    n = ansatz.n_sites
    sector = config.sector_constraint
    if sector is not None:
        if kernel.kind != "pair_exchange":
            raise ConfigError("a magnetization sector needs the pair_exchange kernel",
                              key="sampler.kernel")
        if abs(sector) > n or (n + sector) % 2:
            raise ConfigError(f"sector {sector} impossible on {n} sites",
                              key="sampler.sector_constraint")
    c = config.n_chains
    rngs = [chain_rng(config.seed, k, epoch) for k in range(c)]

    states = np.empty((c, n), dtype=np.int8)
    for k, rng in enumerate(rngs):
        s = None if initial is None else np.array(as_array(initial[k]))
        for _ in range(MAX_INIT_TRIES):
            if s is not None and not is_zero_amplitude(ansatz.log_amplitude(s)):
                break
            s = _random_start(rng, n, sector)
        else:
            raise StateError("could not find a starting configuration with nonzero amplitude")
        states[k] = s
    log_amps = np.asarray(ansatz.log_amplitude(states), dtype=complex)

    burn = config.burn_in * n
    spacing = config.sweeps_per_sample * n
    total = burn + config.samples_per_chain * spacing
    draws = np.stack([rng.random((total, 2)) for rng in rngs], axis=1)

    kept = np.empty((config.samples_per_chain, c, n), dtype=np.int8)
    kept_logs = np.empty((config.samples_per_chain, c), dtype=complex)
    accepted = np.zeros(c)
    for step in range(total):
        states, log_amps, acc = _advance(
            kernel, ansatz, states, log_amps, draws[step, :, 0], draws[step, :, 1]
        )
        accepted += acc
        done = step + 1 - burn
        if done > 0 and done % spacing == 0:
            kept[done // spacing - 1] = states
            kept_logs[done // spacing - 1] = log_amps
    return SampleBatch(
        configs=kept.transpose(1, 0, 2).reshape(-1, n),
        log_amps=kept_logs.T.reshape(-1),
        n_chains=c,
        acceptance=accepted / total,
        final_states=states.copy(),
    )


# -- diagnostics ---------------------------------------------------------------


@dataclass(frozen=True)
class BinningResult:
    errors: np.ndarray
    error_bars: np.ndarray
    plateau_level: int
    converged: bool
    tau: float
    tau_error: float

    @property
    def stderr(self) -> float:
        return float(self.errors[self.plateau_level])


def binning_analysis(data, min_bins: int = 32) -> BinningResult:
    """Blocking analysis of a real series shaped ``(chains, samples)`` or ``(samples,)``.

    The autocorrelation time is ``(eps_plateau / eps_0)**2``, so it is 1 for
    independent samples.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    errors, bars = [], []
    level = data
    while level.size >= min_bins and level.shape[1] >= 1:
        nb = level.size
        means = level.ravel()
        var = means.var(ddof=1) if nb > 1 else 0.0
        err = math.sqrt(var / nb)
        errors.append(err)
        bars.append(err / math.sqrt(2.0 * (nb - 1)))
        if level.shape[1] < 2:
            break
        half = level.shape[1] // 2
        level = 0.5 * (level[:, 0:2 * half:2] + level[:, 1:2 * half:2])
    if not errors:
        nb = data.size
        err = math.sqrt(data.var(ddof=1) / nb) if nb > 1 else 0.0
        errors, bars = [err], [0.0]
    errors, bars = np.array(errors), np.array(bars)
    plateau, converged = len(errors) - 1, False
    for lvl in range(len(errors) - 1):
        later = errors[lvl + 1:]
        if np.all(later - errors[lvl] <= 2.0 * np.hypot(bars[lvl], bars[lvl + 1:])):
            plateau, converged = lvl, True
            break
    if errors[0] == 0:
        return BinningResult(errors, bars, plateau, converged, 1.0, 0.0)
    tau = (errors[plateau] / errors[0]) ** 2
    tau_err = 2.0 * tau * bars[plateau] / errors[plateau] if errors[plateau] else 0.0
    return BinningResult(errors, bars, plateau, converged, float(tau), float(tau_err))


@dataclass(frozen=True)
class ChainDiagnostics:
    acceptance: np.ndarray
    tau: float
    tau_error: float
    effective_samples: float
    converged: bool


def diagnostics(batch: SampleBatch, observable=None) -> ChainDiagnostics:
    """Acceptance per chain and autocorrelation of a scalar observable.

    The default observable is the Z magnetization per site.
    """
    if len(batch) == 0:
        raise DomainError("empty batch")
    values = batch.configs.mean(axis=-1) if observable is None else np.real(observable)
    res = binning_analysis(batch.per_chain(values))
    acc = batch.acceptance if batch.acceptance is not None else np.ones(batch.n_chains)
    return ChainDiagnostics(acc, res.tau, res.tau_error, len(batch) / max(res.tau, 1e-300),
                            res.converged)


def dump_samples(batch: SampleBatch) -> str:
    lines = []
    for s, la in zip(batch.configs, batch.log_amps):
        lines.append(f"{SpinConfiguration.from_array(s).to_token()} {float(la.real)!r} {float(la.imag)!r}")
    return "\n".join(lines) + "\n"
