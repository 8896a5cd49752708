"""Batch driver: ``nqs COMMAND [--config PATH] [--out DIR] [key=value ...]``.

Config files hold ``key=value`` tokens, optionally grouped under ``[section]``
headers; ``#`` starts a comment. A key may be written bare (``lr=0.05``) or with
its section (``optimizer.lr=0.05``). Flags and command-line ``key=value``
overrides beat file values.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import math
import os
import platform
import shlex
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .ansatz import (
    RBM, apply_z_gate_analytic, checkpoint_text, init_parameters, load_checkpoint, save_checkpoint,
)
from .errors import ConfigError, DomainError, NQSError
from .exact import (
    StateVector, evolve_observables, exact_energy, fidelity, ground_state, state_from_ansatz,
)
from .operators import build_heisenberg_benchmark, build_tfi, hadamard, jordan_wigner_free_fermions, magnetization, single_site
from .sampler import SamplerConfig, TransitionKernel, diagnostics, dump_samples, run_chain
from .vmc import (
    EvolutionConfig, ExactSource, MonteCarloSource, apply_gate_variational, evolve, sgd_ground_state,
    sr_ground_state,
)

COMMANDS = ("gs", "evolve", "gate", "tomo", "exact", "sample")
REQUIRED = object()


def _floats(text):
    parts = [p for p in str(text).replace(" ", "").split(",") if p]
    if len(parts) != 3:
        raise ValueError("expected three comma-separated numbers")
    return tuple(float(p) for p in parts)


def _bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


# key -> (section, parser, default)
SCHEMA = {
    "command": ("run", _choice(*COMMANDS), REQUIRED),
    "out": ("run", str, "nqs-out"),
    "seed": ("run", int, 0),
    "model": ("model", _choice("tfi", "heisenberg", "hopping"), REQUIRED),
    "n": ("model", int, 8),
    "J": ("model", float, 1.0),
    "h": ("model", float, 1.0),
    "boundary": ("model", _choice("open", "periodic"), "open"),
    "J_xyz": ("model", _floats, (1.0, 1.0, -1.0)),
    "h_xyz": ("model", _floats, (1.0, 1.5, 3.0)),
    "ansatz": ("ansatz", _choice("rbm", "symrbm", "jastrow", "meanfield"), "rbm"),
    "alpha": ("ansatz", int, 1),
    "init_scale": ("ansatz", float, 0.01),
    "phase_spread": ("ansatz", float, math.pi),
    "checkpoint": ("ansatz", str, ""),
    "chains": ("sampler", int, 16),
    "samples_per_chain": ("sampler", int, 64),
    "sweeps_per_sample": ("sampler", int, 1),
    "burn_in": ("sampler", int, -1),
    "kernel": ("sampler", _choice("single_flip", "pair_exchange", "hamiltonian"), "single_flip"),
    "full_summation": ("sampler", _bool, False),
    "optimizer": ("optimizer", _choice("sr", "sgd"), "sr"),
    "lr": ("optimizer", float, 0.05),
    "steps": ("optimizer", int, 200),
    "diag_shift": ("optimizer", float, 1e-4),
    "solver": ("optimizer", _choice("direct", "pinv"), "direct"),
    "checkpoint_every": ("optimizer", int, 0),
    "h_initial": ("evolution", float, 0.5),
    "dt": ("evolution", float, 0.01),
    "duration": ("evolution", float, 1.0),
    "integrator": ("evolution", _choice("euler", "rk4"), "rk4"),
    "observable": ("evolution", _choice("X", "Y", "Z"), "X"),
    "record_every": ("evolution", int, 1),
    "gate": ("gate", _choice("hadamard", "z"), "hadamard"),
    "site": ("gate", int, 0),
    "method": ("gate", _choice("variational", "analytic"), "variational"),
    "bases": ("tomo", str, "Z,X"),
    "shots": ("tomo", int, 100_000),
    "reference": ("exact", str, ""),
}
SECTIONS = sorted({sec for sec, _, _ in SCHEMA.values()})


@dataclass
class RunConfig:
    values: dict
    sources: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def echo(self) -> str:
        lines = []
        for section in SECTIONS:
            keys = [k for k, (sec, _, _) in SCHEMA.items() if sec == section]
            lines.append(f"[{section}]")
            for k in keys:
                lines.append(f"{k}={_format(self.values[k])}")
            lines.append("")
        return "\n".join(lines)


def _format(value):
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def _tokens(text: str, origin: str):
    """Yield ``(key path, value)`` pairs from config text."""
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{origin}:{lineno}: unknown section [{section}]", key=section)
            continue
        for token in shlex.split(line):
            if "=" not in token:
                raise ConfigError(f"{origin}:{lineno}: expected key=value, got {token!r}", key=token)
            key, value = token.split("=", 1)
            yield (f"{section}.{key}" if section else key), value


def _resolve(path: str) -> str:
    if "." in path:
        section, key = path.split(".", 1)
        if key not in SCHEMA or SCHEMA[key][0] != section:
            raise ConfigError(f"unknown key {path!r}", key=path)
        return key
    if path not in SCHEMA:
        raise ConfigError(f"unknown key {path!r}", key=path)
    return path


def parse_config(text: str = "", overrides=(), origin: str = "<config>") -> RunConfig:
    """Validate config text plus ``key=value`` overrides into a :class:`RunConfig`."""
    raw, sources = {}, {}
    for path, value in _tokens(text, origin):
        key = _resolve(path)
        raw[key], sources[key] = value, origin
    for token in overrides:
        if "=" not in token:
            raise ConfigError(f"expected key=value override, got {token!r}", key=token)
        path, value = token.split("=", 1)
        key = _resolve(path)
        raw[key], sources[key] = value, "override"
    values = {}
    for key, (section, parse, default) in SCHEMA.items():
        if key not in raw:
            if default is REQUIRED:
                raise ConfigError(f"missing required key {section}.{key}", key=f"{section}.{key}")
            values[key] = default
            sources[key] = "default"
            continue
        try:
            values[key] = parse(raw[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}={raw[key]!r}: {exc}",
                              key=f"{section}.{key}") from exc
    _validate(values)
    return RunConfig(values, sources)


def _validate(v):
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"{SCHEMA[key][0]}.{key}: {msg}", key=f"{SCHEMA[key][0]}.{key}")

    need(2 <= v["n"] <= 14, "n", "must lie in [2, 14]")
    need(v["alpha"] >= 1, "alpha", "must be >= 1")
    need(v["init_scale"] > 0, "init_scale", "must be positive")
    need(v["phase_spread"] >= 0, "phase_spread", "must be >= 0")
    for key in ("chains", "samples_per_chain", "sweeps_per_sample", "record_every", "shots"):
        need(v[key] >= 1, key, "must be >= 1")
    need(v["steps"] >= 0, "steps", "must be >= 0")
    need(v["lr"] > 0, "lr", "must be positive")
    need(v["dt"] > 0, "dt", "must be positive")
    need(v["duration"] >= 0, "duration", "must be >= 0")
    need(v["diag_shift"] >= 0, "diag_shift", "must be >= 0")
    need(0 <= v["site"] < v["n"], "site", "must index a site of the chain")
    need(v["checkpoint_every"] >= 0, "checkpoint_every", "must be >= 0")
    bases = [b.strip().upper() for b in v["bases"].split(",") if b.strip()]
    need(bases and all(len(b) == 1 and b in "ZXY" for b in bases), "bases",
         "comma-separated letters from Z, X, Y")
    need("Z" in bases, "bases", "must include Z")


# -- builders ------------------------------------------------------------------


def build_model(cfg: RunConfig, h=None):
    if cfg.model == "tfi":
        return build_tfi(cfg.n, cfg.J, cfg.h if h is None else h, cfg.boundary == "periodic")
    if cfg.model == "heisenberg":
        return build_heisenberg_benchmark(cfg.n, cfg.J_xyz, cfg.h_xyz)
    return jordan_wigner_free_fermions(cfg.n)


def build_ansatz(cfg: RunConfig, seed_offset: int = 0):
    if cfg.checkpoint:
        return load_checkpoint(cfg.checkpoint)
    return init_parameters(cfg.ansatz, cfg.n, cfg.alpha, cfg.init_scale, cfg.seed + seed_offset,
                           phase_spread=cfg.phase_spread)


def build_source(cfg: RunConfig, op=None, seed_offset: int = 0):
    if cfg.full_summation:
        return ExactSource()
    return MonteCarloSource(_sampler_config(cfg, seed_offset), _kernel(cfg, op))


def _sampler_config(cfg, seed_offset=0):
    return SamplerConfig(
        n_chains=cfg.chains, samples_per_chain=cfg.samples_per_chain,
        sweeps_per_sample=cfg.sweeps_per_sample,
        burn_in_sweeps=None if cfg.burn_in < 0 else cfg.burn_in, seed=cfg.seed + seed_offset,
    )


def _kernel(cfg, op):
    return TransitionKernel(cfg.kernel, op if cfg.kernel == "hamiltonian" else None)


def _sr_config(cfg, mode="imaginary", dt=None, steps=None, integrator="euler"):
    return EvolutionConfig(mode, cfg.lr if dt is None else dt, cfg.diag_shift, integrator,
                           cfg.steps if steps is None else steps, cfg.solver)


# -- outputs -------------------------------------------------------------------


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, complex):
        return [x.real, x.imag]
    raise TypeError(type(x))


def _series_rows(times, estimates):
    for t, e in zip(times, estimates):
        yield t, e.mean.real, e.mean.imag, e.stderr


SERIES_HEADER = ("t", "value_re", "value_im", "stderr")
ENERGY_HEADER = ("step", "energy_re", "energy_im", "stderr", "acceptance", "seconds")


# -- commands ------------------------------------------------------------------


def _optimize(cfg, op, ansatz, source, steps=None, checkpoint_every=0):
    if cfg.optimizer == "sgd":
        return sgd_ground_state(op, ansatz, source, cfg.lr, cfg.steps if steps is None else steps,
                                checkpoint_every)
    return sr_ground_state(op, ansatz, source, _sr_config(cfg, steps=steps), checkpoint_every)


def cmd_gs(cfg, out: Path):
    op = build_model(cfg)
    traj = _optimize(cfg, op, build_ansatz(cfg), build_source(cfg, op), checkpoint_every=cfg.checkpoint_every)
    _write_csv(out / "energy.csv", ENERGY_HEADER, traj.rows())
    save_checkpoint(traj.ansatz, out / "final.ckpt")
    for step, a in traj.checkpoints:
        save_checkpoint(a, out / f"step{step:06d}.ckpt")
    final = traj.energies[-1] if traj.energies else None
    summary = {"steps": len(traj.energies), "final_checkpoint": "final.ckpt"}
    if final is not None:
        summary.update(energy=final.mean.real, energy_im=final.mean.imag, stderr=final.stderr)
    if cfg.n <= 14:
        summary["energy_full_summation"] = exact_energy(op, traj.ansatz)
    _write_json(out / "summary.json", summary)
    return summary


def _prepare_quench(cfg, out):
    """Ground state at ``h_initial``: from the checkpoint if given, else by SR."""
    if cfg.checkpoint:
        return load_checkpoint(cfg.checkpoint)
    prep_op = build_model(cfg, h=cfg.h_initial)
    traj = _optimize(cfg, prep_op, build_ansatz(cfg), build_source(cfg, prep_op, 1))
    _write_csv(out / "prep_energy.csv", ENERGY_HEADER, traj.rows())
    return traj.ansatz


def cmd_evolve(cfg, out: Path):
    a0 = _prepare_quench(cfg, out)
    op = build_model(cfg)
    obs = magnetization(cfg.n, cfg.observable)
    steps = int(round(cfg.duration / cfg.dt))
    conf = EvolutionConfig("real", cfg.dt, cfg.diag_shift, cfg.integrator, steps, cfg.solver)
    ts = evolve(op, a0, conf, build_source(cfg, op, 2), {"m": obs}, cfg.record_every)
    name = f"magnetization_{cfg.observable}.csv"
    _write_csv(out / name, SERIES_HEADER, _series_rows(ts.times, ts.values["m"]))
    save_checkpoint(ts.ansatz, out / "final.ckpt")
    summary = {"series": name, "steps": steps, "final_checkpoint": "final.ckpt"}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_gate(cfg, out: Path):
    if cfg.checkpoint:
        base = load_checkpoint(cfg.checkpoint)
    else:
        op = build_model(cfg)
        base = _optimize(cfg, op, build_ansatz(cfg), build_source(cfg, op, 1)).ansatz
    gate = hadamard(cfg.n, cfg.site) if cfg.gate == "hadamard" else single_site(cfg.n, cfg.site, "Z")
    rows = []
    if cfg.method == "analytic":
        if cfg.gate != "z" or not isinstance(base, RBM):
            raise DomainError("analytic application is only available for Z on an RBM")
        new = apply_z_gate_analytic(base, cfg.site)
    else:
        res = apply_gate_variational(gate, base, build_source(cfg, None, 3), n_steps=cfg.steps, lr=cfg.lr,
                                     diag_shift=max(cfg.diag_shift, 1e-6))
        new = res.ansatz
        rows = [(k, i, e) for k, (i, e) in enumerate(res.history)]
    _write_csv(out / "infidelity.csv", ("step", "infidelity", "stderr"), rows)
    save_checkpoint(new, out / "final.ckpt")
    summary = {"gate": cfg.gate, "site": cfg.site, "method": cfg.method}
    if cfg.n <= 14:
        target = StateVector(cfg.n, gate.sparse_matrix() @ state_from_ansatz(base).amplitudes)
        summary["oracle_fidelity"] = fidelity(target, state_from_ansatz(new))
    _write_json(out / "summary.json", summary)
    return summary


def cmd_tomo(cfg, out: Path):
    from .tomography import generate_snapshots, reconstruct_fidelity, born_tv_distance, train_tomography

    target = ground_state(build_model(cfg)).ground_state
    bases = [b.strip().upper() * cfg.n for b in cfg.bases.split(",") if b.strip()]
    data = generate_snapshots(target, bases, cfg.shots, seed=cfg.seed)
    sampler = None if cfg.full_summation or cfg.n <= 10 else _sampler_config(cfg, 4)
    res = train_tomography(build_ansatz(cfg), data, cfg.lr, cfg.steps, sampler,
                           diag_shift=max(cfg.diag_shift, 1e-6) if cfg.optimizer == "sr" else None)
    floor = data.entropy_floor()
    _write_csv(out / "loss.csv", ("step", "loss", "loss_minus_floor"),
               ((k, l, l - floor) for k, l in enumerate(res.losses)))
    save_checkpoint(res.ansatz, out / "final.ckpt")
    summary = {
        "bases": bases, "shots_per_basis": cfg.shots, "entropy_floor": floor,
        "final_loss": res.losses[-1] if res.losses else None,
        "fidelity": reconstruct_fidelity(res.ansatz, target),
        "born_tv_distance": born_tv_distance(res.ansatz, target),
    }
    _write_json(out / "fidelity.json", summary)
    return summary


def cmd_exact(cfg, out: Path):
    op = build_model(cfg)
    spectrum = ground_state(op)
    report = {"ground_energy": spectrum.ground_energy, "gap": spectrum.gap, "n_sites": cfg.n}
    (out / "ground_energy.txt").write_text(f"{spectrum.ground_energy!r}\n")
    (out / "ground_state.bin").write_bytes(spectrum.ground_state.to_bytes())
    if cfg.model == "tfi" and cfg.duration > 0:
        start = ground_state(build_model(cfg, h=cfg.h_initial)).ground_state
        steps = int(round(cfg.duration / cfg.dt))
        times, series = evolve_observables(op, start, cfg.duration, steps,
                                           {"m": magnetization(cfg.n, cfg.observable)}, cfg.record_every)
        rows = ((t, v.real, v.imag, 0.0) for t, v in zip(times, series["m"]))
        _write_csv(out / f"exact_magnetization_{cfg.observable}.csv", SERIES_HEADER, rows)
    if cfg.reference:
        ref = json.loads((Path(cfg.reference) / "summary.json").read_text())
        e_var = ref.get("energy_full_summation", ref.get("energy"))
        report["variational_energy"] = e_var
        report["relative_error"] = abs(e_var - spectrum.ground_energy) / abs(spectrum.ground_energy)
    _write_json(out / "spectrum.json", report)
    return report


def cmd_sample(cfg, out: Path):
    op = build_model(cfg)
    if cfg.checkpoint:
        ansatz = load_checkpoint(cfg.checkpoint)
    else:
        from .exact import table_ansatz

        ansatz = table_ansatz(ground_state(op).ground_state)
    batch = run_chain(_sampler_config(cfg), _kernel(cfg, op), ansatz)
    (out / "samples.txt").write_text(dump_samples(batch))
    diag = diagnostics(batch)
    mz = batch.configs.mean(axis=1)
    summary = {
        "n_samples": int(batch.configs.shape[0]), "acceptance": float(np.mean(batch.acceptance)),
        "magnetization_z": float(mz.mean()), "tau": diag.tau,
        "effective_samples": diag.effective_samples, "converged": bool(diag.converged),
    }
    if cfg.model == "tfi" and cfg.n <= 14:
        from .tomography import generate_snapshots

        bases = [b.strip().upper() * cfg.n for b in cfg.bases.split(",") if b.strip()]
        data = generate_snapshots(ground_state(op).ground_state, bases, cfg.shots, seed=cfg.seed)
        (out / "snapshots.txt").write_text(data.to_text())
    _write_json(out / "summary.json", summary)
    return summary


DISPATCH = {"gs": cmd_gs, "evolve": cmd_evolve, "gate": cmd_gate, "tomo": cmd_tomo,
            "exact": cmd_exact, "sample": cmd_sample}


# -- entry point ---------------------------------------------------------------


def _threads():
    env = os.environ.get("NQS_THREADS")
    if not env:
        return contextlib.nullcontext()
    try:
        limit = int(env)
    except ValueError:
        raise ConfigError(f"NQS_THREADS must be an integer, got {env!r}", key="NQS_THREADS") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, limit))


def _arg_parser():
    p = argparse.ArgumentParser(prog="nqs", description="Neural quantum state workflows.")
    p.add_argument("command", nargs="?", help=f"one of {', '.join(COMMANDS)}; may come from --config")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--force", action="store_true")
    return p


def load_run_config(args) -> RunConfig:
    text, origin = "", "<none>"
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", key="--config") from exc
        origin = str(args.config)
    overrides = list(args.overrides)
    if args.command and "=" in args.command:
        overrides.insert(0, args.command)
    elif args.command:
        overrides.insert(0, f"command={args.command}")
    for flag in ("out", "seed", "chains"):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{flag}={value}")
    return parse_config(text, overrides, origin)


def _prepare_out(path: Path, force: bool):
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} exists; pass --force to overwrite", key="out")
    path.mkdir(parents=True, exist_ok=True)


def main(argv=None) -> int:
    args = _arg_parser().parse_args(argv)
    out = None
    cfg = None
    t0 = time.perf_counter()
    try:
        cfg = load_run_config(args)
        _prepare_out(Path(cfg.out), args.force)
        out = Path(cfg.out)
        (out / "config.txt").write_text(cfg.echo())
        with _threads():
            summary = DISPATCH[cfg.command](cfg, out)
    except (NQSError, OSError, ValueError, ArithmeticError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        if getattr(exc, "key", None):
            record["key"] = exc.key
        print(f"nqs: {type(exc).__name__}: {exc}", file=sys.stderr)
        if out is not None:
            _write_json(out / "error.json", record)
        return 2 if isinstance(exc, ConfigError) else 1
    manifest = {
        "command": cfg.command,
        "config": {k: _format(v) for k, v in cfg.values.items()},
        "config_sources": cfg.sources,
        "seeds": {"run": cfg.seed, "ansatz": cfg.seed, "sampler": cfg.seed},
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "timings": {"wall_seconds": time.perf_counter() - t0},
    }
    _write_json(out / "manifest.json", manifest)
    print(json.dumps(summary, sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
