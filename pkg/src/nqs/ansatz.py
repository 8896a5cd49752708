"""Variational wavefunctions behind one contract.

Every ansatz exposes

* ``log_amplitude(s)``: complex ``log <s|psi>`` for one configuration or a batch,
* ``log_ratio(s, s2)``: ``log psi(s2) - log psi(s)``,
* ``log_derivatives(s)``: ``O_p(s) = d log psi(s) / d theta_p`` (holomorphic),
* ``parameters`` / ``with_parameters``: a flat complex vector.

Instances are immutable snapshots; updating parameters returns a new object.
A configuration with zero amplitude has log-amplitude :data:`LOG_ZERO`.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .basis import as_array, encode_array
from .errors import DomainError

LOG_ZERO = -1.0e30
_ZERO_THRESHOLD = LOG_ZERO / 2


def is_zero_amplitude(log_amp) -> np.ndarray:
    return np.real(log_amp) <= _ZERO_THRESHOLD


def log_2cosh(x):
    """log(2 cosh x) for complex ``x`` without overflow."""
    x = np.asarray(x)
    x = np.where(x.real < 0, -x, x)
    return x + np.log1p(np.exp(-2.0 * x))


def sum_log_2cosh(x, axis=-1):
    """``log_2cosh(x).sum(axis)`` with one logarithm per row.

    Each factor ``1 + exp(-2x)`` has modulus at most 2 once ``Re x >= 0``, so
    the product stays finite. The imaginary part may differ by multiples of 2 pi.
    """
    x = np.asarray(x)
    x = np.where(x.real < 0, -x, x)
    return x.sum(axis=axis) + np.log(np.prod(1.0 + np.exp(-2.0 * x), axis=axis))


class Ansatz:
    kind = "abstract"

    def __init__(self, n_sites: int, params):
        params = np.array(params, dtype=complex).ravel()
        if params.shape[0] != self.expected_params(n_sites):
            raise DomainError(
                f"{self.kind} on {n_sites} sites needs {self.expected_params(n_sites)} "
                f"parameters, got {params.shape[0]}"
            )
        if not np.all(np.isfinite(params)):
            raise DomainError("parameters must be finite")
        params.setflags(write=False)
        self.n_sites = n_sites
        self._params = params

    def expected_params(self, n_sites):
        raise NotImplementedError

    @property
    def n_params(self) -> int:
        return self._params.shape[0]

    @property
    def parameters(self) -> np.ndarray:
        return self._params.copy()

    def with_parameters(self, params) -> "Ansatz":
        raise NotImplementedError

    def _configs(self, s):
        s = as_array(s)
        if s.shape[-1] != self.n_sites:
            raise DomainError(f"configuration has {s.shape[-1]} sites, ansatz {self.n_sites}")
        return s

    def log_amplitude(self, s):
        raise NotImplementedError

    def log_ratio(self, s, s2):
        return self.log_amplitude(s2) - self.log_amplitude(s)

    def amplitude_ratio(self, s, s2):
        """psi(s2) / psi(s); zero where psi(s2) vanishes."""
        return np.exp(self.log_ratio(s, s2))

    def log_derivatives(self, s):
        raise NotImplementedError

    def header(self) -> dict:
        return {"kind": self.kind, "n_sites": self.n_sites}

    def __repr__(self):
        return f"{type(self).__name__}(n_sites={self.n_sites}, n_params={self.n_params})"


class RBM(Ansatz):
    """Restricted Boltzmann machine with the hidden layer summed out.

    ``log psi(s) = b_v . s + sum_j log 2cosh(b_h[j] + W[j] . s)``. Parameters
    are flattened as ``[b_v, b_h, W.ravel()]`` (``W`` has shape ``(M, N)``).
    """

    kind = "rbm"

    def __init__(self, n_sites: int, n_hidden: int, params=None):
        if n_hidden < 1:
            raise DomainError(f"need at least one hidden unit, got {n_hidden}")
        self.n_hidden = n_hidden
        if params is None:
            params = np.zeros(self.expected_params(n_sites), dtype=complex)
        super().__init__(n_sites, params)
        n, m = n_sites, n_hidden
        self.visible_bias = self._params[:n]
        self.hidden_bias = self._params[n:n + m]
        self.weights = self._params[n + m:].reshape(m, n)

    @classmethod
    def from_arrays(cls, visible_bias, hidden_bias, weights):
        weights = np.asarray(weights, dtype=complex)
        m, n = weights.shape
        flat = np.concatenate([np.ravel(visible_bias), np.ravel(hidden_bias), weights.ravel()])
        return cls(n, m, flat)

    @property
    def alpha(self) -> float:
        return self.n_hidden / self.n_sites

    def expected_params(self, n_sites):
        return n_sites + self.n_hidden + self.n_hidden * n_sites

    def with_parameters(self, params):
        return RBM(self.n_sites, self.n_hidden, params)

    def _theta(self, s):
        return s @ self.weights.T + self.hidden_bias

    def log_amplitude(self, s):
        s = self._configs(s).astype(float)
        return s @ self.visible_bias + sum_log_2cosh(self._theta(s))

    def log_derivatives(self, s):
        s = self._configs(s).astype(float)
        t = np.tanh(self._theta(s))
        w = t[..., :, None] * s[..., None, :]
        return np.concatenate(
            [s.astype(complex), t, w.reshape(w.shape[:-2] + (-1,))], axis=-1
        )

    def header(self):
        return {**super().header(), "n_hidden": self.n_hidden}


@dataclass(frozen=True)
class SymmetryGroup:
    """Site permutations ``T_k``; ``(T_k s)_j = s[perm_k[j]]``."""

    permutations: tuple

    def __post_init__(self):
        perms = tuple(tuple(int(i) for i in p) for p in self.permutations)
        if not perms:
            raise DomainError("symmetry group needs at least one element")
        n = len(perms[0])
        for p in perms:
            if sorted(p) != list(range(n)):
                raise DomainError(f"{p} is not a permutation of {n} sites")
        object.__setattr__(self, "permutations", perms)

    @property
    def n_sites(self):
        return len(self.permutations[0])

    @property
    def order(self):
        return len(self.permutations)

    @classmethod
    def translations(cls, n_sites: int) -> "SymmetryGroup":
        return cls(tuple(tuple((j + k) % n_sites for j in range(n_sites)) for k in range(n_sites)))

    @classmethod
    def trivial(cls, n_sites: int) -> "SymmetryGroup":
        return cls((tuple(range(n_sites)),))

    def apply(self, s):
        """All images of ``s``: shape ``(..., K, N)``."""
        return as_array(s)[..., np.array(self.permutations)]


class SymmetricRBM(Ansatz):
    """RBM whose hidden units are shared across the orbit of a symmetry group.

    With ``alpha`` feature filters the parameters are ``[b_v (alpha), b_h (alpha),
    W (alpha, N)]``; the amplitude is invariant under every group element.
    """

    kind = "symrbm"

    def __init__(self, group: SymmetryGroup, alpha: int = 1, params=None):
        if alpha < 1:
            raise DomainError(f"feature count must be >= 1, got {alpha}")
        self.group = group
        self.alpha = alpha
        n = group.n_sites
        if params is None:
            params = np.zeros(self.expected_params(n), dtype=complex)
        super().__init__(n, params)
        a = alpha
        self.visible_bias = self._params[:a]
        self.hidden_bias = self._params[a:2 * a]
        self.weights = self._params[2 * a:].reshape(a, n)
        self._perms = np.array(group.permutations)

    def expected_params(self, n_sites):
        return 2 * self.alpha + self.alpha * n_sites

    def with_parameters(self, params):
        return SymmetricRBM(self.group, self.alpha, params)

    def log_amplitude(self, s):
        s = self._configs(s)
        images = s[..., self._perms].astype(float)
        theta = images @ self.weights.T + self.hidden_bias
        k = self.group.order
        total = s.astype(float).sum(axis=-1)
        return k * total * self.visible_bias.sum() + sum_log_2cosh(theta, axis=(-1, -2))

    def log_derivatives(self, s):
        s = self._configs(s)
        images = s[..., self._perms].astype(float)
        t = np.tanh(images @ self.weights.T + self.hidden_bias)
        k = self.group.order
        total = s.astype(float).sum(axis=-1)
        dv = np.repeat((k * total)[..., None], self.alpha, axis=-1).astype(complex)
        dh = t.sum(axis=-2)
        dw = np.einsum("...kf,...kj->...fj", t, images)
        return np.concatenate([dv, dh, dw.reshape(dw.shape[:-2] + (-1,))], axis=-1)

    def header(self):
        return {
            **super().header(),
            "alpha": self.alpha,
            "permutations": [list(p) for p in self.group.permutations],
        }


class Jastrow(Ansatz):
    """Two-body Jastrow factor ``log psi = -sum_{i<j} theta_ij s_i s_j``.

    Parameters are the upper triangle in ``np.triu_indices(N, 1)`` order.
    """

    kind = "jastrow"

    def __init__(self, n_sites: int, params=None):
        if params is None:
            params = np.zeros(self.expected_params(n_sites), dtype=complex)
        super().__init__(n_sites, params)
        self._rows, self._cols = np.triu_indices(n_sites, 1)

    def expected_params(self, n_sites):
        return n_sites * (n_sites - 1) // 2

    def with_parameters(self, params):
        return Jastrow(self.n_sites, params)

    @property
    def couplings(self) -> np.ndarray:
        table = np.zeros((self.n_sites, self.n_sites), dtype=complex)
        table[self._rows, self._cols] = self._params
        return table

    def _pairs(self, s):
        s = self._configs(s).astype(float)
        return s[..., self._rows] * s[..., self._cols]

    def log_amplitude(self, s):
        return -(self._pairs(s) @ self._params)

    def log_derivatives(self, s):
        return -self._pairs(s).astype(complex)


class MeanField(Ansatz):
    """Product state; site ``i`` holds ``(theta_up, theta_down)`` at params ``[2i, 2i+1]``."""

    kind = "meanfield"

    def __init__(self, n_sites: int, params=None):
        if params is None:
            params = np.tile([1.0, 1.0], n_sites) / np.sqrt(2.0)
        super().__init__(n_sites, params)
        self.components = self._params.reshape(n_sites, 2)

    def expected_params(self, n_sites):
        return 2 * n_sites

    def with_parameters(self, params):
        return MeanField(self.n_sites, params)

    def normalized(self) -> "MeanField":
        norms = np.sqrt((np.abs(self.components) ** 2).sum(axis=1, keepdims=True))
        if np.any(norms == 0):
            raise DomainError("site with both components zero cannot be normalized")
        return MeanField(self.n_sites, (self.components / norms).ravel())

    def _selected(self, s):
        s = self._configs(s)
        idx = (s < 0).astype(np.intp)
        return np.take_along_axis(
            np.broadcast_to(self.components, s.shape + (2,)), idx[..., None], axis=-1
        )[..., 0], idx

    def log_amplitude(self, s):
        sel, _ = self._selected(s)
        zero = np.any(sel == 0, axis=-1)
        with np.errstate(divide="ignore"):
            logs = np.log(np.where(sel == 0, 1.0, sel)).sum(axis=-1)
        return np.where(zero, LOG_ZERO, logs)

    def log_derivatives(self, s):
        sel, idx = self._selected(s)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(sel == 0, 0.0, 1.0 / np.where(sel == 0, 1.0, sel))
        out = np.zeros(sel.shape + (2,), dtype=complex)
        np.put_along_axis(out, idx[..., None], inv[..., None], axis=-1)
        return out.reshape(out.shape[:-2] + (-1,))


class TableAnsatz(Ansatz):
    """Exposes a dense amplitude vector through the ansatz contract (no parameters)."""

    kind = "table"

    def __init__(self, amplitudes, n_sites: int | None = None):
        amps = np.array(amplitudes, dtype=complex).ravel()
        if n_sites is None:
            n_sites = int(round(np.log2(amps.shape[0])))
        if amps.shape[0] != 1 << n_sites:
            raise DomainError(f"table of length {amps.shape[0]} does not match {n_sites} sites")
        amps.setflags(write=False)
        self.amplitudes = amps
        super().__init__(n_sites, [])
        with np.errstate(divide="ignore"):
            logs = np.log(np.where(amps == 0, 1.0, amps))
        self._logs = np.where(amps == 0, LOG_ZERO, logs)

    def expected_params(self, n_sites):
        return 0

    def with_parameters(self, params):
        if np.asarray(params).size:
            raise DomainError("table ansatz has no parameters")
        return self

    def log_amplitude(self, s):
        return self._logs[encode_array(self._configs(s))]

    def amplitude_ratio(self, s, s2):
        a = self.amplitudes[encode_array(self._configs(s))]
        b = self.amplitudes[encode_array(self._configs(s2))]
        return b / a

    def log_derivatives(self, s):
        s = self._configs(s)
        return np.zeros(s.shape[:-1] + (0,), dtype=complex)


def apply_z_gate_analytic(rbm: RBM, site: int) -> RBM:
    """RBM parameters for ``Z_site |psi>`` up to a global phase.

    With spins valued +1/-1, ``exp(i pi/2 s)`` equals ``i * (-1)**[s == -1]``, so
    shifting one visible bias by ``i pi/2`` applies Z exactly.
    """
    if not 0 <= site < rbm.n_sites:
        raise DomainError(f"site {site} out of range for {rbm.n_sites} sites")
    params = rbm.parameters
    params[site] += 0.5j * np.pi
    return rbm.with_parameters(params)


def init_parameters(kind: str, n_sites: int, alpha=1, scale=0.01, seed=0, group=None,
                    phase_spread=0.0, site_phase=None) -> Ansatz:
    """Fresh ansatz with complex Gaussian parameters (std ``scale`` per real/imag part).

    For RBM kinds, ``phase_spread > 0`` adds zero-mean uniform imaginary parts in
    ``[-phase_spread, phase_spread]`` to the visible biases. Starting every site
    with a random local phase breaks the spin-flip symmetry of the near-uniform
    initial state, which otherwise keeps the visible-bias forces at zero and lets
    sign structure get trapped in the hidden layer.

    For RBM kinds, ``site_phase`` instead starts from a global-flip-even point:
    hidden biases zero and a visible factor ``exp(i site_phase s_j)`` on every
    site, with only the weights random. ``site_phase = -pi/2`` gives the sign
    ``(-1)^(number of down spins)`` of ground states with a ``+h X`` field. The
    amplitude is then even under flipping all spins when N is even, and
    full-summation SR keeps it so. This avoids symmetry-broken minima near and
    below the critical field.
    """
    if not scale > 0:
        raise DomainError(f"scale must be positive, got {scale}")
    if phase_spread < 0:
        raise DomainError(f"phase_spread must be non-negative, got {phase_spread}")
    rng = np.random.default_rng(seed)

    def noise(size):
        return rng.normal(0.0, scale, size) + 1j * rng.normal(0.0, scale, size)

    if kind == "rbm":
        m = int(round(alpha * n_sites))
        shell = RBM(n_sites, m)
        params = noise(shell.n_params)
        if phase_spread > 0:
            params[:n_sites] += 1j * rng.uniform(-phase_spread, phase_spread, n_sites)
        if site_phase is not None:
            params[:n_sites + m] = 0.0
            params[:n_sites] = 1j * site_phase
        return shell.with_parameters(params)
    if kind == "symrbm":
        group = group or SymmetryGroup.translations(n_sites)
        k = int(alpha)
        shell = SymmetricRBM(group, k)
        params = noise(shell.n_params)
        if phase_spread > 0:
            params[:k] += 1j * rng.uniform(-phase_spread, phase_spread, k)
        if site_phase is not None:
            # The visible term is |G| * sum(s) * sum(b_v).
            params[:2 * k] = 0.0
            params[0] = 1j * site_phase / shell.group.order
        return shell.with_parameters(params)
    if kind == "jastrow":
        shell = Jastrow(n_sites)
        return shell.with_parameters(noise(shell.n_params))
    if kind == "meanfield":
        base = np.tile([1.0, 1.0], n_sites) / np.sqrt(2.0)
        return MeanField(n_sites, base + noise(2 * n_sites)).normalized()
    raise DomainError(f"unknown ansatz kind {kind!r}")


# -- checkpoints ---------------------------------------------------------------

_MAGIC = b"NQSCKPT\x00"
_VERSION = 1


def checkpoint_bytes(ansatz: Ansatz) -> bytes:
    if isinstance(ansatz, TableAnsatz):
        raise DomainError("table ansatz cannot be checkpointed")
    header = json.dumps(ansatz.header(), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<Q", ansatz.n_params))
    buf.write(ansatz.parameters.astype("<c16").tobytes())
    return buf.getvalue()


def ansatz_from_header(header: dict, params=None) -> Ansatz:
    kind = header["kind"]
    n = header["n_sites"]
    if kind == "rbm":
        return RBM(n, header["n_hidden"], params)
    if kind == "symrbm":
        return SymmetricRBM(SymmetryGroup(header["permutations"]), header["alpha"], params)
    if kind == "jastrow":
        return Jastrow(n, params)
    if kind == "meanfield":
        return MeanField(n, params)
    raise DomainError(f"unknown ansatz kind {kind!r} in checkpoint")


def ansatz_from_bytes(data: bytes) -> Ansatz:
    if data[:8] != _MAGIC:
        raise DomainError("not an nqs checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != _VERSION:
        raise DomainError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    (count,) = struct.unpack("<Q", data[16 + hlen:24 + hlen])
    params = np.frombuffer(data[24 + hlen:24 + hlen + 16 * count], dtype="<c16")
    return ansatz_from_header(header, params.astype(complex))


def checkpoint_text(ansatz: Ansatz) -> str:
    lines = ["# nqs-checkpoint " + json.dumps(ansatz.header(), sort_keys=True)]
    lines += [f"{float(p.real)!r} {float(p.imag)!r}" for p in ansatz.parameters]
    return "\n".join(lines) + "\n"


def ansatz_from_text(text: str) -> Ansatz:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# nqs-checkpoint "):
        raise DomainError("not an nqs checkpoint export")
    header = json.loads(lines[0][len("# nqs-checkpoint "):])
    params = [complex(float(a), float(b)) for a, b in (ln.split() for ln in lines[1:])]
    return ansatz_from_header(header, params)


def save_checkpoint(ansatz: Ansatz, path) -> Path:
    """Write ``path`` (binary) and ``path`` + ``.txt`` (readable export)."""
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ansatz))
    path.with_name(path.name + ".txt").write_text(checkpoint_text(ansatz))
    return path


def load_checkpoint(path) -> Ansatz:
    return ansatz_from_bytes(Path(path).read_bytes())
