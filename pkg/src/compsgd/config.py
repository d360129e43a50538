"""Experiment configuration: a single TOML file with nested blocks.

Unknown keys are errors, not warnings; a silently ignored knob would
invalidate algorithm comparisons.  Example:

    [problem]
    family = "lsr"
    d = 20
    n_per_worker = 200
    workers = 20
    hetero = "none"          # none | shifted_means
    delta = 0.0
    noise_std = 0.0
    seed = 7

    [run]
    iterations = 600
    batch = 50               # or full_batch = true
    seeds = [1, 2, 3, 4, 5]
    output = "results"

    [[algorithm]]
    name = "MCM"
    up = { kind = "quantize", s = 1 }
    dwn = { kind = "quantize", s = 1 }
    gamma = "1/L"            # number | "c/L" | "gamma_max" | "decaying"
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .problems import FAMILIES


class ConfigError(Exception):
    """Invalid experiment configuration; the message names the field."""


_GAMMA_OVER_L = re.compile(r"^\s*([0-9.eE+-]+)\s*/\s*L\s*$")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _check_keys(block: dict, allowed: set, where: str) -> None:
    unknown = set(block) - allowed
    _require(not unknown, f"unknown key(s) in [{where}]: {sorted(unknown)}")


@dataclass
class ProblemBlock:
    family: str = "lsr"
    d: int = 10
    n_per_worker: int = 50
    workers: int = 1
    hetero: str = "none"
    delta: float = 0.0
    noise_std: float = 0.0
    seed: int = 0


@dataclass
class RunBlock:
    iterations: int = 100
    batch: int = 1
    full_batch: bool = False
    seeds: list[int] = field(default_factory=lambda: [0])
    output: str = "results"


@dataclass
class AlgoBlock:
    name: str
    up: dict = field(default_factory=lambda: {"kind": "identity"})
    dwn: dict = field(default_factory=lambda: {"kind": "identity"})
    gamma: object = "1/L"
    alpha_up: float | None = None
    alpha_dwn: float | None = None
    participation: float = 1.0
    groups: int | None = None
    memory: str | None = None
    reset_every: int = 0


@dataclass
class ExperimentConfig:
    problem: ProblemBlock
    run: RunBlock
    algorithms: list[AlgoBlock]


def parse_gamma_spec(value) -> tuple[str, float]:
    """Returns ("constant_abs", g) | ("constant_over_L", c) |
    ("gamma_max", 0) | ("decaying", 0)."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        _require(value > 0, f"gamma must be positive, got {value}")
        return "constant_abs", float(value)
    if isinstance(value, str):
        if value == "gamma_max":
            return "gamma_max", 0.0
        if value == "decaying":
            return "decaying", 0.0
        m = _GAMMA_OVER_L.match(value)
        if m:
            c = float(m.group(1))
            _require(c > 0, f"gamma scale must be positive, got {value!r}")
            return "constant_over_L", c
    raise ConfigError(f"cannot parse gamma spec {value!r}")


def _parse_problem(block: dict) -> ProblemBlock:
    _check_keys(block, {"family", "d", "n_per_worker", "workers", "hetero",
                        "delta", "noise_std", "seed"}, "problem")
    pb = ProblemBlock(**block)
    _require(pb.family in FAMILIES, f"problem.family must be one of {FAMILIES}")
    _require(pb.d >= 1, "problem.d must be >= 1")
    _require(pb.workers >= 1, "problem.workers must be >= 1")
    _require(pb.n_per_worker >= pb.d,
             "problem.n_per_worker must be >= problem.d")
    _require(pb.hetero in ("none", "shifted_means"),
             "problem.hetero must be 'none' or 'shifted_means'")
    return pb


def _parse_run(block: dict) -> RunBlock:
    _check_keys(block, {"iterations", "batch", "full_batch", "seeds",
                        "output"}, "run")
    rb = RunBlock(**block)
    _require(rb.iterations >= 1, "run.iterations must be >= 1")
    _require(rb.batch >= 1, "run.batch must be >= 1")
    _require(len(rb.seeds) > 0, "run.seeds must be non-empty")
    return rb


def _parse_algorithm(block: dict, idx: int) -> AlgoBlock:
    where = f"algorithm #{idx + 1}"
    _check_keys(block, {"name", "up", "dwn", "gamma", "alpha_up", "alpha_dwn",
                        "participation", "groups", "memory", "reset_every"},
                where)
    _require("name" in block, f"{where} needs a name")
    ab = AlgoBlock(**block)
    parse_gamma_spec(ab.gamma)
    _require(0.0 <= ab.participation <= 1.0,
             f"{where}: participation must be in [0, 1]")
    if ab.memory is not None:
        _require(ab.memory == "single_averaged",
                 f"{where}: only the 'single_averaged' memory override exists")
    return ab


def parse_config_dict(data: dict) -> ExperimentConfig:
    _check_keys(data, {"problem", "run", "algorithm"}, "top level")
    _require("problem" in data, "missing [problem] block")
    _require("run" in data, "missing [run] block")
    _require("algorithm" in data and data["algorithm"],
             "need at least one [[algorithm]] block")
    try:
        problem = _parse_problem(dict(data["problem"]))
        run = _parse_run(dict(data["run"]))
        algos = [_parse_algorithm(dict(b), i)
                 for i, b in enumerate(data["algorithm"])]
    except TypeError as exc:  # bad field type surfacing from dataclass call
        raise ConfigError(str(exc)) from exc
    names = [a.name for a in algos]
    _require(len(set(names)) == len(names),
             f"algorithm names must be unique, got {names}")
    return ExperimentConfig(problem=problem, run=run, algorithms=algos)


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
    return parse_config_dict(data)
