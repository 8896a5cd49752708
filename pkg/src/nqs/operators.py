"""Pauli-string operators, model Hamiltonians and connected matrix elements.

An operator is a complex-weighted sum of Pauli strings. The only access
pattern the Monte Carlo code needs is row enumeration: for a configuration
``s`` list every ``s'`` with ``<s|O|s'> != 0``. Because a Pauli string maps
a basis state to exactly one basis state, a row never has more entries than
there are distinct flip patterns among the terms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .basis import MAX_ENUM_SITES, SpinConfiguration, as_array
from .errors import CapacityError, DomainError

LETTERS = ("X", "Y", "Z")

# (a, b) -> (phase, c) with sigma_a sigma_b = phase * sigma_c ; "I" is identity.
_PRODUCT = {}
for _a in ("I",) + LETTERS:
    _PRODUCT[("I", _a)] = (1, _a)
    _PRODUCT[(_a, "I")] = (1, _a)
for _a in LETTERS:
    _PRODUCT[(_a, _a)] = (1, "I")
for _a, _b, _c in (("X", "Y", "Z"), ("Y", "Z", "X"), ("Z", "X", "Y")):
    _PRODUCT[(_a, _b)] = (1j, _c)
    _PRODUCT[(_b, _a)] = (-1j, _c)

_SINGLE = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


@dataclass(frozen=True)
class PauliString:
    """``coefficient`` times a tensor product of Paulis; unlisted sites are identity."""

    coefficient: complex
    factors: tuple = ()

    def __post_init__(self):
        items = self.factors.items() if isinstance(self.factors, dict) else self.factors
        facs = tuple(sorted((int(site), str(letter).upper()) for site, letter in items))
        sites = [site for site, _ in facs]
        if len(set(sites)) != len(sites):
            raise DomainError(f"site repeated in Pauli string {facs}")
        for site, letter in facs:
            if letter not in LETTERS:
                raise DomainError(f"unknown Pauli letter {letter!r}")
            if site < 0:
                raise DomainError(f"negative site {site}")
        object.__setattr__(self, "factors", facs)
        object.__setattr__(self, "coefficient", complex(self.coefficient))

    @property
    def sites(self):
        return tuple(site for site, _ in self.factors)

    @property
    def key(self):
        return (self.sites, tuple(letter for _, letter in self.factors))

    @property
    def locality(self) -> int:
        return len(self.factors)

    def adjoint(self) -> "PauliString":
        # Paulis are Hermitian and factors on distinct sites commute.
        return PauliString(self.coefficient.conjugate(), self.factors)

    def __mul__(self, other: "PauliString") -> "PauliString":
        left = dict(self.factors)
        right = dict(other.factors)
        phase = self.coefficient * other.coefficient
        out = {}
        for site in sorted(set(left) | set(right)):
            ph, letter = _PRODUCT[(left.get(site, "I"), right.get(site, "I"))]
            phase *= ph
            if letter != "I":
                out[site] = letter
        return PauliString(phase, out)


def pauli(coefficient, spec: str = "") -> PauliString:
    """Shorthand: ``pauli(0.5, "X0 Z3")``."""
    factors = {}
    for token in spec.split():
        factors[int(token[1:])] = token[0]
    return PauliString(coefficient, factors)


@dataclass(frozen=True)
class MatrixElement:
    target: SpinConfiguration
    value: complex


@dataclass(frozen=True)
class LocalOperator:
    n_sites: int
    terms: tuple = field(default=())

    def __post_init__(self):
        terms = tuple(self.terms)
        if self.n_sites < 1:
            raise DomainError(f"n_sites must be positive, got {self.n_sites}")
        for t in terms:
            if not isinstance(t, PauliString):
                raise DomainError(f"terms must be PauliString, got {type(t).__name__}")
            if t.sites and max(t.sites) >= self.n_sites:
                raise DomainError(f"term {t} acts outside {self.n_sites} sites")
        object.__setattr__(self, "terms", terms)

    # -- algebra -----------------------------------------------------------

    def simplify(self, atol: float = 0.0) -> "LocalOperator":
        """Merge identical strings, drop zero coefficients, sort canonically."""
        parts = {}
        for t in self.terms:
            parts.setdefault(t.key, []).append(complex(t.coefficient))
        terms = []
        for key in sorted(parts):
            # Correctly rounded sums make the result independent of term order.
            c = complex(math.fsum(z.real for z in parts[key]), math.fsum(z.imag for z in parts[key]))
            if abs(c) > atol:
                terms.append(PauliString(c, tuple(zip(*key))))
        return LocalOperator(self.n_sites, tuple(terms))

    def adjoint(self) -> "LocalOperator":
        return LocalOperator(self.n_sites, tuple(t.adjoint() for t in self.terms))

    def __add__(self, other):
        _same_size(self, other)
        return LocalOperator(self.n_sites, self.terms + other.terms)

    def __sub__(self, other):
        return self + (-1.0) * other

    def __mul__(self, scalar):
        scalar = complex(scalar)
        return LocalOperator(
            self.n_sites, tuple(PauliString(scalar * t.coefficient, t.factors) for t in self.terms)
        )

    __rmul__ = __mul__

    def __matmul__(self, other):
        _same_size(self, other)
        return LocalOperator(
            self.n_sites, tuple(a * b for a in self.terms for b in other.terms)
        ).simplify()

    def equals(self, other, atol=1e-12) -> bool:
        diff = (self - other).simplify(atol=atol)
        return self.n_sites == other.n_sites and not diff.terms

    # -- row enumeration ---------------------------------------------------

    @cached_property
    def _compiled(self):
        n = self.n_sites
        mask_index = {}
        flip_masks = [np.zeros(n, dtype=bool)]
        mask_index[()] = 0
        term_mask = []
        sign_sites = np.zeros((len(self.terms), n), dtype=np.int64)
        coeffs = np.zeros(len(self.terms), dtype=complex)
        for k, t in enumerate(self.terms):
            flips = tuple(site for site, letter in t.factors if letter in "XY")
            if flips not in mask_index:
                mask_index[flips] = len(flip_masks)
                m = np.zeros(n, dtype=bool)
                m[list(flips)] = True
                flip_masks.append(m)
            term_mask.append(mask_index[flips])
            n_y = 0
            for site, letter in t.factors:
                if letter in "YZ":
                    sign_sites[k, site] = 1
                n_y += letter == "Y"
            # <s|Y|s'> = -i s for the flipped partner, so each Y contributes -i * s_site.
            coeffs[k] = t.coefficient * (-1j) ** n_y
        flip_masks = np.array(flip_masks)
        assign = np.zeros((len(self.terms), len(flip_masks)), dtype=complex)
        assign[np.arange(len(self.terms)), term_mask] = 1.0
        flip_sign = np.where(flip_masks, -1, 1).astype(np.int8)
        return flip_sign, sign_sites, coeffs, assign

    @property
    def n_connections(self) -> int:
        return self._compiled[0].shape[0]

    def connections(self, configs):
        """Vectorized row enumeration.

        Returns ``(targets, values)`` with shapes ``(..., K, N)`` and ``(..., K)``
        where ``K`` is the number of distinct flip patterns (pattern 0 is the
        diagonal). Entries that cancel come back as exact or near zeros.
        """
        s = as_array(configs)
        if s.shape[-1] != self.n_sites:
            raise DomainError(f"configuration has {s.shape[-1]} sites, operator {self.n_sites}")
        flip_sign, sign_sites, coeffs, assign = self._compiled
        negative = (s < 0).astype(np.int64)
        parity = (negative @ sign_sites.T) & 1
        term_values = coeffs * (1 - 2 * parity)
        values = term_values @ assign
        targets = s[..., None, :] * flip_sign
        return targets, values

    def connected_elements(self, config) -> list:
        s = as_array(config)
        if s.ndim != 1:
            raise DomainError("connected_elements expects a single configuration")
        targets, values = self.connections(s)
        scale = max(1.0, sum(abs(t.coefficient) for t in self.terms))
        out = [
            MatrixElement(SpinConfiguration.from_array(t), complex(v))
            for t, v in zip(targets, values)
            if abs(v) > 1e-14 * scale
        ]
        assert len(out) <= len(self.terms) + 1
        return out

    # -- matrices ----------------------------------------------------------

    def sparse_matrix(self) -> sp.csr_matrix:
        return self._sparse

    @cached_property
    def _sparse(self):
        _check_dense(self.n_sites)
        dim = 1 << self.n_sites
        total = sp.csr_matrix((dim, dim), dtype=complex)
        for t in self.terms:
            letters = dict(t.factors)
            mat = sp.identity(1, dtype=complex, format="csr")
            # Site 0 is the least significant bit, so it is the rightmost factor.
            for site in reversed(range(self.n_sites)):
                mat = sp.kron(mat, sp.csr_matrix(_SINGLE[letters.get(site, "I")]), format="csr")
            total = total + t.coefficient * mat
        return total.tocsr()

    def dense_matrix(self) -> np.ndarray:
        return self.sparse_matrix().toarray()

    # -- text format -------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"# nqs-operator n_sites={self.n_sites}"]
        for t in self.terms:
            body = " ".join(f"{site}:{letter}" for site, letter in t.factors)
            lines.append(f"{t.coefficient.real!r} {t.coefficient.imag!r} {body}".rstrip())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LocalOperator":
        n_sites = None
        terms = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "n_sites=" in line:
                    n_sites = int(line.split("n_sites=")[1].split()[0])
                continue
            parts = line.split()
            coef = complex(float(parts[0]), float(parts[1]))
            factors = {}
            for tok in parts[2:]:
                site, letter = tok.split(":")
                factors[int(site)] = letter
            terms.append(PauliString(coef, factors))
        if n_sites is None:
            raise DomainError("operator text lacks the n_sites header")
        return cls(n_sites, tuple(terms))


def _same_size(a, b):
    if a.n_sites != b.n_sites:
        raise DomainError(f"operators act on {a.n_sites} and {b.n_sites} sites")


def _check_dense(n_sites):
    if n_sites > MAX_ENUM_SITES:
        raise CapacityError(f"dense matrices limited to {MAX_ENUM_SITES} sites, got {n_sites}")


def connected_elements(op: LocalOperator, config) -> list:
    return op.connected_elements(config)


def dense_matrix(op: LocalOperator) -> np.ndarray:
    return op.dense_matrix()


def hermitian_check(op: LocalOperator, atol: float = 1e-12) -> bool:
    return op.simplify().equals(op.adjoint().simplify(), atol=atol)


# -- model Hamiltonians ------------------------------------------------------


def _bonds(n_sites, periodic):
    bonds = [(j, j + 1) for j in range(n_sites - 1)]
    if periodic and n_sites > 2:
        bonds.append((n_sites - 1, 0))
    return bonds


def build_tfi(n_sites: int, J: float = 1.0, h: float = 1.0, periodic: bool = False) -> LocalOperator:
    """H = -J sum_j Z_j Z_{j+1} + h sum_j X_j."""
    if n_sites < 2:
        raise DomainError(f"TFI chain needs at least 2 sites, got {n_sites}")
    terms = [PauliString(-J, {i: "Z", j: "Z"}) for i, j in _bonds(n_sites, periodic)]
    terms += [PauliString(h, {j: "X"}) for j in range(n_sites)]
    return LocalOperator(n_sites, tuple(terms))


def build_heisenberg_benchmark(n_sites: int = 4, J=(1.0, 1.0, -1.0), h=(1.0, 1.5, 3.0)) -> LocalOperator:
    """Open-chain XYZ model with a uniform field on every site."""
    if n_sites < 2:
        raise DomainError(f"Heisenberg chain needs at least 2 sites, got {n_sites}")
    if len(J) != 3 or len(h) != 3:
        raise DomainError("J and h must be triples (x, y, z)")
    terms = []
    for i in range(n_sites - 1):
        for coupling, letter in zip(J, LETTERS):
            terms.append(PauliString(float(coupling), {i: letter, i + 1: letter}))
    for i in range(n_sites):
        for field_, letter in zip(h, LETTERS):
            terms.append(PauliString(float(field_), {i: letter}))
    return LocalOperator(n_sites, tuple(terms))


def jordan_wigner_free_fermions(n_sites: int) -> LocalOperator:
    """Open hopping chain -1/2 sum_j (s+_j s-_{j+1} + s+_{j+1} s-_j) as XX + YY."""
    if n_sites < 2:
        raise DomainError(f"hopping chain needs at least 2 sites, got {n_sites}")
    terms = []
    for j in range(n_sites - 1):
        terms.append(PauliString(-0.25, {j: "X", j + 1: "X"}))
        terms.append(PauliString(-0.25, {j: "Y", j + 1: "Y"}))
    return LocalOperator(n_sites, tuple(terms))


def raising(n_sites: int, site: int) -> LocalOperator:
    return LocalOperator(n_sites, (pauli(0.5, f"X{site}"), pauli(0.5j, f"Y{site}")))


def lowering(n_sites: int, site: int) -> LocalOperator:
    return LocalOperator(n_sites, (pauli(0.5, f"X{site}"), pauli(-0.5j, f"Y{site}")))


def fermion_annihilation(n_sites: int, site: int) -> LocalOperator:
    """c_j = (prod_{k<j} Z_k) s-_j."""
    string = LocalOperator(n_sites, (PauliString(1.0, {k: "Z" for k in range(site)}),))
    return string @ lowering(n_sites, site)


def fermion_creation(n_sites: int, site: int) -> LocalOperator:
    string = LocalOperator(n_sites, (PauliString(1.0, {k: "Z" for k in range(site)}),))
    return string @ raising(n_sites, site)


def free_fermion_hopping_unsimplified(n_sites: int) -> LocalOperator:
    """-1/2 sum_j (c_j c+_{j+1} + h.c.) expanded through the full Jordan-Wigner strings."""
    total = LocalOperator(n_sites, ())
    for j in range(n_sites - 1):
        hop = fermion_annihilation(n_sites, j) @ fermion_creation(n_sites, j + 1)
        total = total + (-0.5) * (hop + hop.adjoint())
    return total.simplify(atol=1e-15)


def hopping_single_particle_energies(n_sites: int) -> np.ndarray:
    """Eigenvalues of the open-chain hopping matrix with amplitude -1/2."""
    t = np.zeros((n_sites, n_sites))
    for j in range(n_sites - 1):
        t[j, j + 1] = t[j + 1, j] = -0.5
    return np.linalg.eigvalsh(t)


def single_site(n_sites: int, site: int, letter: str, coefficient=1.0) -> LocalOperator:
    return LocalOperator(n_sites, (PauliString(coefficient, {site: letter}),))


def magnetization(n_sites: int, letter: str = "X") -> LocalOperator:
    """Site-averaged (1/N) sum_i sigma^letter_i."""
    return LocalOperator(
        n_sites, tuple(PauliString(1.0 / n_sites, {i: letter}) for i in range(n_sites))
    )


def hadamard(n_sites: int, site: int) -> LocalOperator:
    c = 1.0 / math.sqrt(2.0)
    return LocalOperator(n_sites, (pauli(c, f"X{site}"), pauli(c, f"Z{site}")))
