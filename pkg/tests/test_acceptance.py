"""End-to-end acceptance checks.

Each test prints one ``CRITERION n PASS|FAIL`` line with the measured numbers
and then asserts the criterion at its stated tolerance.
"""
import math
import time

import numpy as np
import pytest

from nqs.ansatz import TableAnsatz, apply_z_gate_analytic, init_parameters
from nqs.basis import all_configurations, encode_array
from nqs.cli import main
from nqs.exact import (
    dense_operator_state, evolve_observables, exact_energy, expectation, fidelity, ground_state, state_from_ansatz,
    table_ansatz,
)
from nqs.operators import (
    build_heisenberg_benchmark, build_tfi, dense_matrix, fermion_annihilation, fermion_creation,
    free_fermion_hopping_unsimplified, hadamard, hopping_single_particle_energies, jordan_wigner_free_fermions,
    magnetization, single_site,
)
from nqs.sampler import SamplerConfig, TransitionKernel, acceptance_probability, proposal_distribution, run_chain
from nqs.tomography import born_tv_distance, generate_snapshots, reconstruct_fidelity, train_tomography
from nqs.vmc import (
    EvolutionConfig, ExactSource, MonteCarloSource, apply_gate_variational, energy_gradient,
    exact_batch, expectation_estimate, forces, sr_ground_state, time_step,
)


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# -- criteria 1 and 2: SR ground states on TFI(10, 1, 1, periodic) -------------

ALPHAS = (1, 2, 4)
SEEDS = (0, 1, 2, 3, 4)
# (steps, learning rate, chains, diagonal shift) with 32 samples per chain. The
# large early shift keeps the lr=0.1 phase out of single-configuration collapse.
SR_PHASES = ((300, 0.1, 64, 1e-2), (200, 0.05, 128, 1e-3), (150, 0.01, 256, 1e-4))
CHECKPOINT_EVERY = 25


def sr_run(op, e0, alpha, seed):
    # Flip-even start with the sign of the +h X ground state; random phases
    # instead let some seeds settle into a symmetry-broken minimum.
    a = init_parameters("rbm", op.n_sites, alpha, 0.01, seed, site_phase=-np.pi / 2)
    start = time.perf_counter()
    checkpoint_energies, sampled_margin = [], math.inf
    for k, (steps, lr, chains, shift) in enumerate(SR_PHASES):
        source = MonteCarloSource(SamplerConfig(n_chains=chains, samples_per_chain=32, seed=seed + 1000 * k))
        traj = sr_ground_state(op, a, source, EvolutionConfig("imaginary", lr, shift, "euler", steps),
                               checkpoint_every=CHECKPOINT_EVERY)
        checkpoint_energies += [exact_energy(op, c) for _, c in traj.checkpoints]
        sampled_margin = min(sampled_margin,
                             min((e.mean.real - e0) / e.stderr if e.stderr > 0 else math.inf for e in traj.energies))
        a = traj.ansatz
    return {
        "error": abs(exact_energy(op, a) - e0) / abs(e0),
        "seconds": time.perf_counter() - start,
        "checkpoint_margin": min(checkpoint_energies) - e0,
        "sampled_margin": sampled_margin,
    }


@pytest.fixture(scope="module")
def sr_runs():
    op = build_tfi(10, 1.0, 1.0, periodic=True)
    e0 = ground_state(op).ground_energy
    return {(alpha, seed): sr_run(op, e0, alpha, seed) for alpha in ALPHAS for seed in SEEDS}


def test_criterion_01_oracle_energy(capsys, sr_runs):
    errors = {a: [sr_runs[a, s]["error"] for s in SEEDS] for a in ALPHAS}
    medians = [float(np.median(errors[a])) for a in ALPHAS]
    worst_time = max(r["seconds"] for r in sr_runs.values())
    ok = (max(errors[1]) < 1e-2 and max(errors[4]) < 1e-3
          and all(x >= y for x, y in zip(medians, medians[1:])) and worst_time <= 600)
    detail = (f"median rel. error alpha=1,2,4: {', '.join(f'{m:.2e}' for m in medians)}; "
              f"max alpha=1 {max(errors[1]):.2e}, max alpha=4 {max(errors[4]):.2e}; "
              f"slowest run {worst_time:.0f}s")
    report(capsys, 1, ok, detail)


def test_criterion_02_variational_principle(capsys, sr_runs):
    full = min(r["checkpoint_margin"] for r in sr_runs.values())
    sampled = min(r["sampled_margin"] for r in sr_runs.values())
    ok = full >= -1e-10 and sampled >= -3.0
    detail = (f"min full-summation E - E0 over checkpoints {full:.3e}; "
              f"min sampled (E - E0)/eps {sampled:.2f}")
    report(capsys, 2, ok, detail)


# -- criterion 3: gradient oracle ----------------------------------------------


def fd_gradient(op, a, eps=1e-5):
    theta = a.parameters
    out = np.empty(theta.size, dtype=complex)
    for p in range(theta.size):
        vals = []
        for d in (eps, -eps, 1j * eps, -1j * eps):
            t = theta.copy()
            t[p] += d
            vals.append(exact_energy(op, a.with_parameters(t)))
        out[p] = (vals[0] - vals[1]) / (2 * eps) + 1j * (vals[2] - vals[3]) / (2 * eps)
    return out


def test_criterion_03_gradient_oracle(capsys):
    op = build_tfi(6, 1.0, 1.0, periodic=True)
    worst = {}
    start = time.perf_counter()
    for kind in ("rbm", "jastrow", "symrbm"):
        worst[kind] = 0.0
        for draw in range(20):
            a = init_parameters(kind, 6, 1, 0.5, 100 + draw)
            diff = energy_gradient(op, a, exact_batch(a)) - fd_gradient(op, a)
            worst[kind] = max(worst[kind], float(np.max(np.abs(diff))))
    ok = all(v < 1e-6 for v in worst.values())
    detail = ", ".join(f"{k} max|diff| {v:.1e}" for k, v in worst.items()) + f" ({time.perf_counter() - start:.0f}s)"
    report(capsys, 3, ok, detail)


# -- criterion 4: detailed balance ---------------------------------------------


def test_criterion_04_detailed_balance(capsys):
    op = build_tfi(4, 1.0, 1.0)
    gs = ground_state(op).ground_state
    table = table_ansatz(gs)
    p = gs.probabilities()
    cfgs = all_configurations(4)
    residual = {}
    for kernel in (TransitionKernel("single_flip"), TransitionKernel("hamiltonian", op)):
        worst = 0.0
        for a in range(16):
            for b in range(16):
                if a == b:
                    continue
                tab = proposal_distribution(kernel, cfgs[a]).get(b, 0.0)
                tba = proposal_distribution(kernel, cfgs[b]).get(a, 0.0)
                flow_ab = p[a] * tab * (acceptance_probability(kernel, table, cfgs[a], cfgs[b]) if tab else 0.0)
                flow_ba = p[b] * tba * (acceptance_probability(kernel, table, cfgs[b], cfgs[a]) if tba else 0.0)
                worst = max(worst, abs(flow_ab - flow_ba))
        residual[kernel.kind] = worst
    batch = run_chain(SamplerConfig(n_chains=1000, samples_per_chain=1000, seed=2024),
                      TransitionKernel("single_flip"), table)
    freq = np.bincount(encode_array(batch.configs), minlength=16) / len(batch)
    tv = 0.5 * float(np.abs(freq - p).sum())
    ok = all(r < 1e-12 for r in residual.values()) and tv < 0.02 and len(batch) == 10 ** 6
    detail = ", ".join(f"{k} residual {v:.1e}" for k, v in residual.items()) + f"; TV at 1e6 samples {tv:.4f}"
    report(capsys, 4, ok, detail)


# -- criterion 5: zero variance ------------------------------------------------


def test_criterion_05_zero_variance(capsys):
    # Uniform amplitudes are the ground state of -sum_j X_j. Every amplitude
    # ratio is exactly 1, so every local energy is exactly -N.
    n = 6
    op = build_tfi(n, 0.0, -1.0)
    table = TableAnsatz(np.full(1 << n, 0.125))
    batch = run_chain(SamplerConfig(n_chains=100, samples_per_chain=1000, seed=5), TransitionKernel("single_flip"), table)
    est = expectation_estimate(op, table, batch)
    ok = len(batch) == 10 ** 5 and est.variance == 0.0 and est.mean == -float(n)
    detail = f"{len(batch)} samples, variance {est.variance!r}, mean {est.mean.real!r}"
    # Generic eigenstates only reach the round-off floor.
    tfi = build_tfi(4, 1.0, 1.0)
    gs_table = table_ansatz(ground_state(tfi).ground_state)
    gs_batch = run_chain(SamplerConfig(n_chains=100, samples_per_chain=1000, seed=6), TransitionKernel(), gs_table)
    detail += f"; TFI(4,1,1) ground state variance {expectation_estimate(tfi, gs_table, gs_batch).variance:.1e}"
    report(capsys, 5, ok, detail)


# -- criterion 6: 1/sqrt(M) scaling --------------------------------------------


def test_criterion_06_statistical_scaling(capsys):
    op = build_tfi(8, 1.0, 1.0)
    a = init_parameters("rbm", 8, 1, 0.3, 7)
    sizes = (10 ** 3, 10 ** 4, 10 ** 5, 10 ** 6)
    errors = []
    for m in sizes:
        batch = MonteCarloSource(SamplerConfig(n_chains=m // 1000, samples_per_chain=1000, seed=31))(a)
        errors.append(expectation_estimate(op, a, batch).stderr)
    slope = float(np.polyfit(np.log(sizes), np.log(errors), 1)[0])
    ok = abs(slope + 0.5) <= 0.1
    detail = f"slope {slope:.3f}; eps = {', '.join(f'{e:.2e}' for e in errors)}"
    report(capsys, 6, ok, detail)


# -- criterion 7: quench dynamics ----------------------------------------------

QUENCH_N = 8
QUENCH_DT = 0.02
QUENCH_RECORD = 5


def quench_run(alpha, seed):
    h0 = build_tfi(QUENCH_N, 1.0, 0.5, periodic=True)
    h1 = build_tfi(QUENCH_N, 1.0, 1.0, periodic=True)
    mx = magnetization(QUENCH_N, "X")
    # Translation-symmetric RBM started at the flip-even sign-structured point.
    # On the ferromagnetic side the parity gap is tiny, so energy minimization
    # alone would not select the even ground state.
    start = init_parameters("symrbm", QUENCH_N, alpha, 0.01, seed, site_phase=-np.pi / 2)
    a = sr_ground_state(h0, start, ExactSource(), EvolutionConfig("imaginary", 0.05, 1e-4, "euler", 600)).ansatz
    steps = int(round(1.0 / QUENCH_DT))
    times, ref = evolve_observables(h1, ground_state(h0).ground_state, 1.0, steps, {"x": mx},
                                    record_every=QUENCH_RECORD)
    source = MonteCarloSource(SamplerConfig(n_chains=256, samples_per_chain=32, seed=seed))
    cfg = EvolutionConfig("real", QUENCH_DT, 1e-4, "rk4", steps)
    sampled, summed = [], []
    batch = source(a)
    for step in range(steps + 1):
        if step % QUENCH_RECORD == 0:
            sampled.append(expectation_estimate(mx, a, batch).mean.real)
            summed.append(expectation(mx, state_from_ansatz(a)).real)
        if step < steps:
            a = time_step(h1, a, batch, cfg, source)
            batch = source(a)
    track = float(np.abs(np.array(sampled) - ref["x"].real).max())
    integrated = float(np.trapz(np.abs(np.array(summed) - ref["x"].real), times))
    return track, integrated


def test_criterion_07_quench_dynamics(capsys):
    start = time.perf_counter()
    runs = {(alpha, seed): quench_run(alpha, seed) for alpha in (2, 4) for seed in (0, 1, 2)}
    elapsed = time.perf_counter() - start
    worst_alpha2 = max(runs[2, s][0] for s in range(3))
    improves = [runs[4, s][1] < runs[2, s][1] for s in range(3)]
    ok = worst_alpha2 < 0.05 and all(improves) and elapsed <= 1200
    detail = (f"alpha=2 max |dx| {worst_alpha2:.4f}; integrated error alpha=2 "
              f"{', '.join(f'{runs[2, s][1]:.1e}' for s in range(3))} vs alpha=4 "
              f"{', '.join(f'{runs[4, s][1]:.1e}' for s in range(3))}; {elapsed:.0f}s")
    report(capsys, 7, ok, detail)


# -- criterion 8: imaginary-time monotonicity, real-time conservation ----------


def energy_change(h, a, b):
    """Exact E(b) - E(a) without subtracting two rounded energies.

    With psi_b = psi_a + delta, the change is
    (2 Re <delta|(H - E_a) psi_a> + <delta|(H - E_a)|delta>) / <psi_b|psi_b>, which
    stays accurate when the change is far below the resolution of E itself.
    """
    c = all_configurations(a.n_sites)
    la = a.log_amplitude(c)
    psi = np.exp(la - la.real.max())
    delta = psi * np.expm1(b.log_amplitude(c) - la)
    e = np.vdot(psi, h @ psi).real / np.vdot(psi, psi).real
    num = 2 * np.vdot(delta, h @ psi - e * psi).real + np.vdot(delta, h @ delta - e * delta).real
    return num / np.vdot(psi + delta, psi + delta).real


def test_criterion_08_time_stepping(capsys):
    op = build_tfi(4, 1.0, 1.0)
    h = dense_matrix(op)
    a = init_parameters("rbm", 4, 1, 0.2, 3, phase_spread=np.pi)
    cfg = EvolutionConfig("imaginary", 0.01, 1e-4)
    steps, largest_change, force = 0, -math.inf, math.inf
    while steps < 20_000:
        force = float(np.linalg.norm(forces(op, a, exact_batch(a))))
        if force < 1e-8:
            break
        new = time_step(op, a, exact_batch(a), cfg)
        largest_change = max(largest_change, energy_change(h, a, new))
        a = new
        steps += 1
    b = init_parameters("rbm", 4, 1, 0.3, 4)
    real_cfg = EvolutionConfig("real", 1e-3, 1e-4, "rk4")
    drift = 0.0
    for _ in range(20):
        before = exact_energy(op, b)
        b = time_step(op, b, exact_batch(b), real_cfg)
        drift = max(drift, abs(exact_energy(op, b) - before) / abs(before))
    ok = largest_change < 0 and force < 1e-8 and drift < 1e-6
    detail = (f"{steps} imaginary steps to |f| {force:.1e}, largest per-step energy change {largest_change:.1e}; "
              f"max real-step drift {drift:.1e}")
    report(capsys, 8, ok, detail)


# -- criterion 9: gates --------------------------------------------------------


def test_criterion_09_gates(capsys):
    a = init_parameters("rbm", 4, 1, 0.3, 9)
    z = single_site(4, 2, "Z")
    analytic = fidelity(state_from_ansatz(apply_z_gate_analytic(a, 2)), dense_operator_state(z, state_from_ansatz(a)))
    had = {}
    for n in (2, 4):
        base = init_parameters("rbm", n, 1, 0.3, n)
        gate = hadamard(n, 0)
        res = apply_gate_variational(gate, base, ExactSource(), n_steps=400, lr=0.1)
        had[n] = fidelity(state_from_ansatz(res.ansatz), dense_operator_state(gate, state_from_ansatz(base)))
    res = apply_gate_variational(z, a, ExactSource(), n_steps=300, lr=0.1)
    var_z = fidelity(state_from_ansatz(res.ansatz), state_from_ansatz(apply_z_gate_analytic(a, 2)))
    ok = abs(analytic - 1) <= 1e-10 and all(f > 0.99 for f in had.values()) and var_z > 0.999
    detail = (f"analytic Z 1-F {1 - analytic:.1e}; Hadamard N=2 F {had[2]:.5f}, N=4 F {had[4]:.5f}; "
              f"variational Z vs analytic F {var_z:.6f}")
    report(capsys, 9, ok, detail)


# -- criterion 10: Jordan-Wigner -----------------------------------------------


def test_criterion_10_jordan_wigner(capsys):
    n = 5
    c = [dense_matrix(fermion_annihilation(n, j)) for j in range(n)]
    cd = [dense_matrix(fermion_creation(n, j)) for j in range(n)]
    eye = np.eye(1 << n)
    worst = 0.0
    for i in range(n):
        for j in range(n):
            worst = max(worst, np.abs(c[i] @ cd[j] + cd[j] @ c[i] - (i == j) * eye).max())
            worst = max(worst, np.abs(c[i] @ c[j] + c[j] @ c[i]).max())
    eps = hopping_single_particle_energies(6)
    filled = float(eps[eps < 0].sum())
    e_jw = ground_state(jordan_wigner_free_fermions(6)).ground_energy
    e_raw = ground_state(free_fermion_hopping_unsimplified(6)).ground_energy
    ok = worst <= 1e-12 and abs(e_jw - filled) <= 1e-10 and abs(e_raw - filled) <= 1e-10
    detail = f"anticommutator residual {worst:.1e}; E0 {e_jw:.12f} vs filled sum {filled:.12f}"
    report(capsys, 10, ok, detail)


# -- criterion 11: Heisenberg benchmark ----------------------------------------


def test_criterion_11_heisenberg(capsys):
    op = build_heisenberg_benchmark()
    e0 = ground_state(op).ground_energy
    start = time.perf_counter()
    a = init_parameters("rbm", 4, 1, 0.01, 0, phase_spread=np.pi)
    source = MonteCarloSource(SamplerConfig(n_chains=16, samples_per_chain=64, seed=0))
    a = sr_ground_state(op, a, source, EvolutionConfig("imaginary", 0.05, 1e-2, "euler", 300)).ansatz
    elapsed = time.perf_counter() - start
    err = abs(exact_energy(op, a) - e0) / abs(e0)
    ok = err < 1e-3 and elapsed <= 300
    report(capsys, 11, ok, f"relative error {err:.2e} in {elapsed:.0f}s (E0 {e0:.6f})")


# -- criterion 12: tomography --------------------------------------------------


def tomography_fit(target, bases, seed):
    data = generate_snapshots(target, bases, 100_000, seed=seed)
    a = init_parameters("rbm", target.n_sites, 1, 0.01, seed, phase_spread=np.pi)
    res = train_tomography(a, data, 0.05, 1000)
    return reconstruct_fidelity(res.ansatz, target), born_tv_distance(res.ansatz, target)


def test_criterion_12_tomography(capsys):
    target = ground_state(build_tfi(4, 1.0, 1.0)).ground_state
    multi, z_only = [], []
    for seed in range(5):
        multi.append(tomography_fit(target, ["ZZZZ", "XXXX"], seed))
        z_only.append(tomography_fit(target, ["ZZZZ"], seed))
    ok = (multi[0][0] > 0.99 and all(tv < 0.02 for _, tv in z_only)
          and all(m[0] > z[0] for m, z in zip(multi, z_only)))
    detail = (f"Z+X fidelity {[round(f, 4) for f, _ in multi]}; Z-only fidelity {[round(f, 4) for f, _ in z_only]}, "
              f"Z-only TV {[round(tv, 4) for _, tv in z_only]}")
    report(capsys, 12, ok, detail)


# -- criterion 13: determinism -------------------------------------------------

WALL_CLOCK = {"seconds", "wall_seconds"}


def strip_wall_clock(path):
    if path.suffix == ".csv":
        rows = [r.split(",") for r in path.read_text().splitlines()]
        keep = [k for k, name in enumerate(rows[0]) if name not in WALL_CLOCK]
        return "\n".join(",".join(r[k] for k in keep) for r in rows).encode()
    return path.read_bytes()


def test_criterion_13_determinism(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("NQS_THREADS", "1")
    commands = [
        ("gs", "model=tfi", "n=6", "steps=30", "chains=8", "samples_per_chain=32"),
        ("evolve", "model=tfi", "n=4", "steps=20", "duration=0.1", "chains=8", "samples_per_chain=32"),
        ("gate", "model=tfi", "n=4", "steps=10", "chains=8", "samples_per_chain=32"),
        ("tomo", "model=tfi", "n=4", "steps=30", "shots=2000"),
        ("exact", "model=tfi", "n=6", "duration=0.5"),
        ("sample", "model=heisenberg", "n=4", "chains=4", "samples_per_chain=50"),
    ]
    mismatched, compared = [], 0
    for argv in commands:
        outs = []
        for rep in range(2):
            out = tmp_path / f"{argv[0]}{rep}"
            assert main([*argv, "--seed", "11", "--out", str(out)]) == 0
            outs.append(out)
        for f in sorted(outs[0].iterdir()):
            if f.name in ("manifest.json", "config.txt"):
                continue
            compared += 1
            if strip_wall_clock(f) != strip_wall_clock(outs[1] / f.name):
                mismatched.append(f"{argv[0]}/{f.name}")
    ok = not mismatched and compared > 0
    report(capsys, 13, ok, f"{compared} output files compared over {len(commands)} commands; mismatched {mismatched}")
