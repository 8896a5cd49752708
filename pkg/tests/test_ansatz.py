import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nqs.ansatz import (
    LOG_ZERO, RBM, Jastrow, MeanField, SymmetricRBM, SymmetryGroup, TableAnsatz, ansatz_from_bytes,
    ansatz_from_text, apply_z_gate_analytic, checkpoint_bytes, checkpoint_text, init_parameters,
    is_zero_amplitude, load_checkpoint, log_2cosh, save_checkpoint,
)
from nqs.basis import all_configurations, encode
from nqs.errors import DomainError
from nqs.exact import StateVector, expectation, fidelity, state_from_ansatz
from nqs.operators import LocalOperator, pauli

KINDS = ["rbm", "symrbm", "jastrow", "meanfield"]


def make(kind, n, seed, scale=0.3):
    return init_parameters(kind, n, 2 if kind != "symrbm" else 2, scale, seed)


def raw_state(a):
    return np.exp(a.log_amplitude(all_configurations(a.n_sites)))


def fd_derivatives(a, s, h=1e-5):
    p = a.parameters
    out = np.zeros(a.n_params, dtype=complex)
    for k in range(a.n_params):
        e = np.zeros_like(p)
        e[k] = h
        out[k] = (a.with_parameters(p + e).log_amplitude(s) - a.with_parameters(p - e).log_amplitude(s)) / (2 * h)
    return out


# -- RBM ------------------------------------------------------------------------


def test_rbm_zero_parameters():
    a = RBM(5, 3)
    np.testing.assert_allclose(a.log_amplitude(all_configurations(5)), 3 * math.log(2), atol=1e-14)
    d = a.log_derivatives(np.array([1, -1, 1, 1, -1]))
    np.testing.assert_array_equal(d[5:8], 0)


def test_rbm_visible_only():
    c = 0.37 - 0.2j
    a = RBM.from_arrays([c, 0, 0], np.zeros(2), np.zeros((2, 3)))
    s = all_configurations(3)
    np.testing.assert_allclose(a.log_amplitude(s), c * s[:, 0] + 2 * math.log(2), atol=1e-14)


def test_rbm_hidden_bias_shift_by_i_pi_flips_sign():
    a = init_parameters("rbm", 4, 1, 0.5, 0)
    p = a.parameters
    p[4 + 2] += 1j * math.pi
    np.testing.assert_allclose(raw_state(a.with_parameters(p)), -raw_state(a), rtol=1e-12)


def test_rbm_derivative_layout():
    a = init_parameters("rbm", 3, 2, 0.4, 1)
    m = a.n_hidden
    assert m == 6
    s = np.array([1, -1, -1])
    d = a.log_derivatives(s)
    theta = a.weights @ s + a.hidden_bias
    np.testing.assert_array_equal(d[:3], s)
    np.testing.assert_allclose(d[3:3 + m], np.tanh(theta))
    np.testing.assert_allclose(d[3 + m:].reshape(m, 3), np.tanh(theta)[:, None] * s[None, :])


def test_rbm_dimension_mismatch():
    with pytest.raises(DomainError):
        RBM(3, 2).log_amplitude(np.array([1, 1]))
    with pytest.raises(DomainError):
        RBM(3, 0)


def test_log_2cosh_overflow_safe():
    x = np.array([700.0, -700.0, 700 + 1j, -700 + 2j, 0.3 - 0.1j])
    y = log_2cosh(x)
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y[:2].real, 700.0)
    np.testing.assert_allclose(np.exp(y[4]), 2 * np.cosh(x[4]))


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 30), st.floats(-10, 10))
def test_log_2cosh_matches_direct(re, im):
    x = complex(re, im)
    direct = 2 * np.cosh(x)
    if abs(direct) > 1e-8:
        assert np.exp(log_2cosh(x)) == pytest.approx(direct, rel=1e-9, abs=1e-12)


# -- symmetric RBM --------------------------------------------------------------


def test_symmetric_rbm_translation_invariance():
    a = init_parameters("symrbm", 4, 2, 0.4, 3)
    s = all_configurations(4)
    for k in range(1, 4):
        np.testing.assert_allclose(a.log_amplitude(np.roll(s, k, axis=1)), a.log_amplitude(s), atol=1e-12)


def test_symmetric_rbm_trivial_group_is_rbm():
    n, f = 4, 2
    sym = init_parameters("symrbm", n, f, 0.4, 5, group=SymmetryGroup.trivial(n))
    bv = np.full(n, sym.visible_bias.sum())
    rbm = RBM.from_arrays(bv, sym.hidden_bias, sym.weights)
    s = all_configurations(n)
    np.testing.assert_allclose(sym.log_amplitude(s), rbm.log_amplitude(s), atol=1e-12)


def test_symmetric_rbm_argmax_is_union_of_orbits():
    a = init_parameters("symrbm", 5, 1, 0.6, 7)
    s = all_configurations(5)
    amp = np.abs(raw_state(a))
    best = set(np.flatnonzero(np.isclose(amp, amp.max(), rtol=1e-12)).tolist())
    for idx in list(best):
        for k in range(5):
            assert encode(np.roll(s[idx], k)) in best


def test_symmetry_group_validation():
    with pytest.raises(DomainError):
        SymmetryGroup(((0, 0, 1),))
    with pytest.raises(DomainError):
        SymmetricRBM(SymmetryGroup.translations(3), 0)


# -- Jastrow and mean field -----------------------------------------------------


def test_jastrow_examples():
    s = all_configurations(4)
    np.testing.assert_array_equal(Jastrow(4).log_amplitude(s), 0)
    p = np.zeros(6, dtype=complex)
    p[0] = 0.7  # (0, 1)
    a = Jastrow(4, p)
    assert a.log_amplitude(np.ones(4, dtype=np.int8)) == pytest.approx(-0.7)
    assert a.couplings[0, 1] == 0.7
    b = make("jastrow", 4, 2)
    np.testing.assert_allclose(b.log_amplitude(-s), b.log_amplitude(s))


def test_mean_field_examples():
    a = MeanField(3, np.tile([1.0, 0.0], 3))
    logs = a.log_amplitude(all_configurations(3))
    assert logs[0] == 0
    assert np.all(is_zero_amplitude(logs[1:]))
    assert np.all(logs[1:] == LOG_ZERO)
    u = MeanField(4)
    p = np.abs(raw_state(u)) ** 2
    np.testing.assert_allclose(p, 2.0 ** -4)


def test_mean_field_magnetization():
    a = init_parameters("meanfield", 4, scale=0.5, seed=3)
    comps = a.components
    np.testing.assert_allclose((np.abs(comps) ** 2).sum(axis=1), 1, atol=1e-10)
    psi = state_from_ansatz(a)
    for i in range(4):
        z = expectation(LocalOperator(4, (pauli(1, f"Z{i}"),)), psi).real
        assert z == pytest.approx(abs(comps[i, 0]) ** 2 - abs(comps[i, 1]) ** 2, abs=1e-12)


# -- contract -------------------------------------------------------------------


@pytest.mark.parametrize("kind", KINDS)
def test_contract_ratio_and_derivatives(kind):
    rng = np.random.default_rng(0)
    for trial in range(50):
        a = make(kind, 5, 100 + trial)
        s = rng.choice([-1, 1], size=5).astype(np.int8)
        s2 = rng.choice([-1, 1], size=5).astype(np.int8)
        assert abs(a.log_ratio(s, s2) - (a.log_amplitude(s2) - a.log_amplitude(s))) < 1e-10
        if trial < 10:
            np.testing.assert_allclose(a.log_derivatives(s), fd_derivatives(a, s), atol=1e-6)


@pytest.mark.parametrize("kind", KINDS)
def test_batched_evaluation_matches_single(kind):
    a = make(kind, 4, 9)
    s = all_configurations(4)
    batch = a.log_amplitude(s)
    single = np.array([a.log_amplitude(row) for row in s])
    np.testing.assert_allclose(batch, single)
    np.testing.assert_allclose(a.log_derivatives(s)[5], a.log_derivatives(s[5]))


def test_table_ansatz_zero_amplitude():
    t = TableAnsatz(np.array([1.0, 0.0, 0.5, 0.0]))
    logs = t.log_amplitude(all_configurations(2))
    assert is_zero_amplitude(logs).tolist() == [False, True, False, True]


# -- Z gate ---------------------------------------------------------------------


def test_z_gate_zero_rbm_ratio():
    a = apply_z_gate_analytic(RBM(2, 2), 0)
    ratio = a.amplitude_ratio(np.array([1, 1]), np.array([-1, 1]))
    assert ratio == pytest.approx(-1, abs=1e-15)


@pytest.mark.parametrize("site", range(4))
def test_z_gate_matches_dense(site):
    a = init_parameters("rbm", 4, 1, 0.4, 11)
    z = LocalOperator(4, (pauli(1, f"Z{site}"),)).dense_matrix()
    target = StateVector(4, z @ state_from_ansatz(a).amplitudes)
    new = apply_z_gate_analytic(a, site)
    assert abs(1 - fidelity(target, state_from_ansatz(new))) < 1e-10
    np.testing.assert_allclose(np.abs(raw_state(new)), np.abs(raw_state(a)), rtol=1e-12)
    twice = apply_z_gate_analytic(new, site)
    assert fidelity(state_from_ansatz(twice), state_from_ansatz(a)) == pytest.approx(1, abs=1e-12)
    with pytest.raises(DomainError):
        apply_z_gate_analytic(a, 4)


# -- initialization and checkpoints --------------------------------------------


def test_init_deterministic_and_centered():
    a = init_parameters("rbm", 10, 100, 0.01, 4)
    b = init_parameters("rbm", 10, 100, 0.01, 4)
    assert a.parameters.tobytes() == b.parameters.tobytes()
    p = a.parameters
    assert p.size > 10_000
    assert abs(p.real.mean()) < 3 * 0.01 / math.sqrt(p.size)
    assert abs(p.imag.mean()) < 3 * 0.01 / math.sqrt(p.size)
    assert np.std(p.real) == pytest.approx(0.01, rel=0.05)
    with pytest.raises(DomainError):
        init_parameters("rbm", 4, 1, 0.0, 0)
    with pytest.raises(DomainError):
        init_parameters("mystery", 4)


def test_init_phase_spread_only_touches_visible_phases():
    a = init_parameters("rbm", 6, 1, 0.01, 2)
    b = init_parameters("rbm", 6, 1, 0.01, 2, phase_spread=math.pi)
    np.testing.assert_array_equal(a.parameters.real, b.parameters.real)
    np.testing.assert_array_equal(a.parameters[6:], b.parameters[6:])
    assert np.all(np.abs(b.visible_bias.imag) <= math.pi + 0.1)


@given(st.sampled_from(["rbm", "symrbm"]), st.sampled_from([2, 4, 6]), st.integers(1, 3), st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_init_site_phase_is_flip_even(kind, n, alpha, seed):
    a = init_parameters(kind, n, alpha, 0.3, seed, site_phase=-math.pi / 2)
    c = all_configurations(n)
    ratio = np.exp(a.log_amplitude(-c) - a.log_amplitude(c))
    np.testing.assert_allclose(ratio, 1.0, atol=1e-9)


@pytest.mark.parametrize("kind", ["rbm", "symrbm"])
def test_init_site_phase_sign_structure(kind):
    # With negligible weights only the visible factor exp(-i pi/2 s_j) remains:
    # amplitudes carry the sign (-1)^(number of down spins) up to a global phase.
    a = init_parameters(kind, 6, 1, 1e-9, 3, site_phase=-math.pi / 2)
    psi = raw_state(a)
    psi = psi / psi[0]
    signs = [(-1) ** int(np.sum(s < 0)) for s in all_configurations(6)]
    np.testing.assert_allclose(psi, signs, atol=1e-6)


@pytest.mark.parametrize("n", [4, 6, 8])
def test_init_nondegenerate(n):
    for kind in KINDS:
        a = init_parameters(kind, n, 1, 0.01, n)
        assert not np.any(is_zero_amplitude(a.log_amplitude(all_configurations(n))))
        assert np.isfinite(np.linalg.norm(raw_state(a)))


@pytest.mark.parametrize("kind", KINDS)
def test_checkpoint_round_trip(kind, tmp_path):
    a = make(kind, 4, 12)
    b = ansatz_from_bytes(checkpoint_bytes(a))
    assert type(b) is type(a) and b.parameters.tobytes() == a.parameters.tobytes()
    c = ansatz_from_text(checkpoint_text(a))
    assert c.parameters.tobytes() == a.parameters.tobytes()
    path = save_checkpoint(a, tmp_path / "x.ckpt")
    assert load_checkpoint(path).parameters.tobytes() == a.parameters.tobytes()
    assert (tmp_path / "x.ckpt.txt").exists()
    s = all_configurations(4)
    np.testing.assert_array_equal(b.log_amplitude(s), a.log_amplitude(s))


def test_checkpoint_rejects_garbage():
    with pytest.raises(DomainError):
        ansatz_from_bytes(b"not a checkpoint at all")
    with pytest.raises(DomainError):
        ansatz_from_text("hello")


def test_parameters_are_immutable():
    a = init_parameters("rbm", 3, 1, 0.1, 0)
    p = a.parameters
    p[0] = 99
    assert a.parameters[0] != 99
    with pytest.raises(ValueError):
        a.visible_bias[0] = 1
