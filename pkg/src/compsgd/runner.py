"""Experiment orchestration: builds problems and algorithm configs from a
parsed configuration, runs (algorithm, seed) trajectories, and writes traces
and summaries.

Every (algorithm, seed) pair is independent; with --jobs they run in a
process pool.  Outputs are written to temporary files and atomically
renamed, so parallel runs never interleave writes.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .algorithms import (SINGLE_AVERAGED, STATUS_DIVERGED, AlgoConfig,
                         StepPolicy, decaying_policy, gamma_max,
                         gamma_schedule, init_state, preset, step)
from .compressors import spec_from_config
from .config import AlgoBlock, ConfigError, ExperimentConfig, parse_gamma_spec
from .metrics import RunSummary, RunTrace, aggregate, record_iteration, write_trace_csv
from .problems import BatchSpec, Problem, synth_problem


@dataclass
class ExperimentResult:
    problem: Problem
    configs: dict[str, AlgoConfig]
    warnings: dict[str, list[str]]
    summaries: dict[str, RunSummary]
    traces: dict[tuple[str, int], RunTrace]
    trace_paths: dict[tuple[str, int], str]


def build_problem(exp: ExperimentConfig) -> Problem:
    pb = exp.problem
    return synth_problem(pb.family, pb.d, pb.n_per_worker, pb.workers,
                         hetero=pb.hetero, delta=pb.delta, seed=pb.seed,
                         noise_std=pb.noise_std)


def build_algo(block: AlgoBlock, problem: Problem,
               batch: BatchSpec) -> tuple[AlgoConfig, list[str]]:
    """Materialize one algorithm block against a problem.  Returns the
    config and any warnings (an over-large constant step is a warning, not
    an error: the ablations need over-large steps)."""
    up = spec_from_config(dict(block.up), problem.d)
    dwn = spec_from_config(dict(block.dwn), problem.d)
    kind, value = parse_gamma_spec(block.gamma)
    # need a provisional config to evaluate gamma_max for this algorithm
    provisional = preset(block.name, up, dwn, StepPolicy(kind="constant", gamma=1.0),
                         batch=batch, n_groups=block.groups,
                         participation_q=block.participation,
                         reset_every=block.reset_every,
                         alpha_up=block.alpha_up, alpha_dwn=block.alpha_dwn)
    gmax = gamma_max(provisional, problem, problem.n_workers)
    if kind == "constant_abs":
        policy = StepPolicy(kind="constant", gamma=value)
    elif kind == "constant_over_L":
        policy = StepPolicy(kind="constant", gamma=value / problem.L)
    elif kind == "gamma_max":
        policy = StepPolicy(kind="constant", gamma=gmax)
    else:
        policy = decaying_policy(problem.mu, gmax)
    cfg = replace(provisional, gamma=policy)
    if block.memory == "single_averaged":
        if block.name != "RandMCM":
            raise ConfigError("single_averaged memory is a RandMCM variant")
        cfg = replace(cfg, memory_mode=SINGLE_AVERAGED)
    warnings = []
    if policy.kind == "constant" and policy.gamma > gmax * (1.0 + 1e-12):
        warnings.append(f"gamma={policy.gamma:.6g} exceeds gamma_max={gmax:.6g}")
    return cfg, warnings


def run_single(problem: Problem, cfg: AlgoConfig, iterations: int, seed: int,
               algorithm: str, warnings: list[str] | None = None) -> RunTrace:
    """One (algorithm, seed) trajectory of K iterations, recorded at every
    iterate k = 0..K.  Stops stepping once diverged; the trace keeps the
    rows produced so far."""
    run_id = f"{algorithm}-s{seed}"
    trace = RunTrace(run_id=run_id, seed=seed, algorithm=algorithm,
                     warnings=list(warnings or []))
    state = init_state(cfg, problem, np.zeros(problem.d), seed)
    trace.records.append(record_iteration(problem, cfg, state,
                                          gamma_schedule(cfg.gamma, 0)))
    for _ in range(iterations):
        state = step(cfg, problem, state)
        trace.records.append(record_iteration(problem, cfg, state,
                                              gamma_schedule(cfg.gamma, state.k)))
        if state.status == STATUS_DIVERGED:
            break
    trace.status = state.status
    return trace


def _atomic_write(path: str, writer) -> None:
    tmp = path + ".tmp~"
    writer(tmp)
    os.replace(tmp, path)


def _job(args):
    problem, cfg, iterations, seed, name, warnings, path = args
    trace = run_single(problem, cfg, iterations, seed, name, warnings)
    if path is not None:
        _atomic_write(path, lambda p: write_trace_csv(p, trace))
    return (name, seed), trace


def summary_to_dict(s: RunSummary, warnings: list[str]) -> dict:
    return {"schema": "compsgd-summary-1", "algorithm": s.algorithm,
            "seeds": s.seeds, "statuses": s.statuses,
            "saturation_level": s.saturation_level,
            "mean_log10_excess": s.mean_log10_excess.tolist(),
            "std_log10_excess": s.std_log10_excess.tolist(),
            "warnings": warnings}


def run_experiment(exp: ExperimentConfig, output_dir: str | None = None,
                   jobs: int = 1, seed_offset: int = 0) -> ExperimentResult:
    problem = build_problem(exp)
    batch = BatchSpec(b=exp.run.batch, full_batch=exp.run.full_batch)
    seeds = [s + seed_offset for s in exp.run.seeds]
    configs = {}
    warnings = {}
    for block in exp.algorithms:
        cfg, warns = build_algo(block, problem, batch)
        configs[block.name] = cfg
        warnings[block.name] = warns

    trace_dir = None
    if output_dir is not None:
        trace_dir = os.path.join(output_dir, "traces")
        os.makedirs(trace_dir, exist_ok=True)
        os.makedirs(os.path.join(output_dir, "summaries"), exist_ok=True)

    jobs_args = []
    for name, cfg in configs.items():
        for seed in seeds:
            path = (os.path.join(trace_dir, f"{name}_seed{seed}.csv")
                    if trace_dir else None)
            jobs_args.append((problem, cfg, exp.run.iterations, seed, name,
                              warnings[name], path))

    traces = {}
    paths = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for key, trace in pool.map(_job, jobs_args):
                traces[key] = trace
    else:
        for args in jobs_args:
            key, trace = _job(args)
            traces[key] = trace
    for args in jobs_args:
        if args[6] is not None:
            paths[(args[4], args[3])] = args[6]

    summaries = {}
    for name in configs:
        algo_traces = [traces[(name, s)] for s in seeds]
        summary = aggregate(algo_traces)
        summaries[name] = summary
        if output_dir is not None:
            spath = os.path.join(output_dir, "summaries", f"{name}.json")
            payload = summary_to_dict(summary, warnings[name])
            _atomic_write(spath, lambda p, payload=payload: json.dump(
                payload, open(p, "w", encoding="utf-8"), indent=1))
    return ExperimentResult(problem=problem, configs=configs,
                            warnings=warnings, summaries=summaries,
                            traces=traces, trace_paths=paths)


def all_diverged(result: ExperimentResult) -> bool:
    return all(t.status == STATUS_DIVERGED for t in result.traces.values())


# ---------------------------------------------------------------------------
# parameter sweeps

SWEEP_AXES = ("gamma", "alpha_dwn", "s", "q")


def _apply_axis(exp: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    algos = []
    for block in exp.algorithms:
        b = replace(block)
        if axis == "gamma":
            b.gamma = float(value)
        elif axis == "alpha_dwn":
            b.alpha_dwn = float(value)
        elif axis == "q":
            b.participation = float(value)
        else:  # s
            for side in ("up", "dwn"):
                spec = dict(getattr(b, side))
                if spec.get("kind") == "quantize":
                    spec["s"] = int(value)
                    setattr(b, side, spec)
        algos.append(b)
    return ExperimentConfig(problem=exp.problem, run=exp.run, algorithms=algos)


def _axis_valid(exp: ExperimentConfig, axis: str) -> None:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    if axis == "s":
        for block in exp.algorithms:
            kinds = {dict(block.up).get("kind"), dict(block.dwn).get("kind")}
            if "quantize" not in kinds:
                raise ConfigError(
                    f"s-sweep needs a quantize compressor in {block.name}")


def sweep(exp: ExperimentConfig, axis: str, values, output_dir=None,
          jobs: int = 1, seed_offset: int = 0) -> list[dict]:
    """One full run per axis value; returns table rows of saturation levels.
    Rows whose constant step exceeds gamma_max are flagged."""
    _axis_valid(exp, axis)
    rows = []
    for value in values:
        sub = _apply_axis(exp, axis, value)
        out = (os.path.join(output_dir, f"{axis}={value}")
               if output_dir is not None else None)
        result = run_experiment(sub, output_dir=out, jobs=jobs,
                                seed_offset=seed_offset)
        for block in sub.algorithms:
            cfg = result.configs[block.name]
            summary = result.summaries[block.name]
            gmax = gamma_max(cfg, result.problem, result.problem.n_workers)
            rows.append({
                "axis": axis, "value": value, "algorithm": block.name,
                "saturation_level": summary.saturation_level,
                "gamma": cfg.gamma.gamma if cfg.gamma.kind == "constant" else None,
                "gamma_max": gmax,
                "gamma_exceeds_max": bool(result.warnings[block.name]),
                "n_diverged": sum(1 for st in summary.statuses
                                  if st == STATUS_DIVERGED),
            })
    return rows


def write_sweep_csv(path: str, rows: list[dict]) -> None:
    import csv as _csv
    cols = ["axis", "value", "algorithm", "saturation_level", "gamma",
            "gamma_max", "gamma_exceeds_max", "n_diverged"]
    def _write(p):
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = _csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)
    _atomic_write(path, _write)
