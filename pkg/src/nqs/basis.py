"""Spin-1/2 configurations on a chain and their integer encoding.

Site ``b`` is stored in bit ``b`` of the basis index; a set bit means the
spin points down (sigma = -1), so the all-up configuration is index 0.

Internally configurations travel as ``int8`` arrays of +1/-1 with shape
``(n_sites,)`` or ``(batch, n_sites)``. :class:`SpinConfiguration` is the
immutable single-configuration value used at API boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import CapacityError, DomainError

MAX_SITES = 30
MAX_ENUM_SITES = 14


@dataclass(frozen=True)
class SpinConfiguration:
    values: tuple

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        if not vals:
            raise DomainError("configuration needs at least one site")
        if len(vals) > MAX_SITES:
            raise CapacityError(f"at most {MAX_SITES} sites supported, got {len(vals)}")
        if any(v not in (1, -1) for v in vals):
            raise DomainError(f"spin values must be +1 or -1, got {vals}")
        object.__setattr__(self, "values", vals)

    @property
    def n_sites(self) -> int:
        return len(self.values)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def __iter__(self):
        return iter(self.values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype or np.int8)

    def to_token(self) -> str:
        return "".join("u" if v == 1 else "d" for v in self.values)

    @classmethod
    def from_token(cls, token: str) -> "SpinConfiguration":
        try:
            return cls(tuple({"u": 1, "d": -1}[c] for c in token.strip()))
        except KeyError as exc:
            raise DomainError(f"bad configuration token {token!r}") from exc

    @classmethod
    def from_array(cls, arr) -> "SpinConfiguration":
        return cls(tuple(np.asarray(arr).ravel().tolist()))

    def __str__(self):
        return self.to_token()


def as_array(config) -> np.ndarray:
    """Return configurations as an int8 array of +1/-1 (no copy if already one)."""
    arr = np.asarray(config)
    if arr.dtype != np.int8:
        arr = arr.astype(np.int8)
    return arr


def encode(config) -> int:
    arr = as_array(config)
    if arr.ndim != 1:
        raise DomainError("encode expects a single configuration")
    return int(encode_array(arr))


def decode(index: int, n_sites: int) -> SpinConfiguration:
    _check_n(n_sites)
    if not 0 <= index < (1 << n_sites):
        raise DomainError(f"index {index} out of range for {n_sites} sites")
    return SpinConfiguration.from_array(decode_array(np.array([index]), n_sites)[0])


def encode_array(configs: np.ndarray) -> np.ndarray:
    """Vectorized :func:`encode` over the last axis."""
    configs = np.asarray(configs)
    n = configs.shape[-1]
    weights = np.left_shift(np.int64(1), np.arange(n, dtype=np.int64))
    return ((configs < 0).astype(np.int64) * weights).sum(axis=-1)


def decode_array(indices: np.ndarray, n_sites: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    bits = (indices[..., None] >> np.arange(n_sites, dtype=np.int64)) & 1
    return (1 - 2 * bits).astype(np.int8)


def flip(config, site: int) -> SpinConfiguration:
    arr = np.array(as_array(config))
    if not 0 <= site < arr.shape[-1]:
        raise DomainError(f"site {site} out of range for {arr.shape[-1]} sites")
    arr[site] = -arr[site]
    return SpinConfiguration.from_array(arr)


def total_magnetization(config) -> int:
    return int(as_array(config).astype(np.int64).sum())


def all_configurations(n_sites: int) -> np.ndarray:
    """Every basis configuration, row ``k`` being ``decode(k)``."""
    _check_n(n_sites)
    if n_sites > MAX_ENUM_SITES:
        raise CapacityError(f"full enumeration limited to {MAX_ENUM_SITES} sites, got {n_sites}")
    return decode_array(np.arange(1 << n_sites), n_sites)


def iter_configurations(n_sites: int) -> Iterable[SpinConfiguration]:
    for row in all_configurations(n_sites):
        yield SpinConfiguration.from_array(row)


def _check_n(n_sites):
    if n_sites < 1:
        raise DomainError(f"n_sites must be positive, got {n_sites}")
    if n_sites > MAX_SITES:
        raise CapacityError(f"at most {MAX_SITES} sites supported, got {n_sites}")
