"""Per-iteration diagnostics and multi-seed aggregation.

Tracked quantities, sampled on the single trajectory of each seed:

  excess loss   F(w_k) - F*
  upsilon       (1/N) sum_i ||w_k - H_{k-1}^i||^2   (local-model variance)
  xi            (1/N^2) sum_i ||h_k^i - grad F_i(w*)||^2  (heterogeneity)
  lyapunov      ||w_k - w*||^2 + 32 * gamma * L * omega_dwn^2 * upsilon

plus cumulative uplink/downlink bits.  Aggregation across seeds works on
log10 of the excess loss (floored at 1e-16 so noiseless runs stay
plottable); the saturation level is the mean over the final 10% of
iterations, diverged seeds excluded.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .algorithms import AlgoConfig, AlgoState, STATUS_DIVERGED
from .problems import Problem, grad_full, loss

CSV_COLUMNS = ["run_id", "seed", "algorithm", "k", "gamma_k", "excess_loss",
               "grad_norm_sq", "upsilon", "xi", "lyapunov", "bits_up_cum",
               "bits_dwn_cum", "status"]
SCHEMA_VERSION = "compsgd-trace-1"

EXCESS_FLOOR = 1e-16
_EXCESS_CAP = 1e300

PHI_VARIANTS = ("base", "ghost", "heterog", "noncvx", "rand_quadratic")


@dataclass
class IterRecord:
    k: int
    excess_loss: float
    grad_norm_sq: float
    upsilon: float
    xi: float
    lyapunov: float
    bits_up_cum: int
    bits_dwn_cum: int
    gamma_k: float


@dataclass
class RunTrace:
    run_id: str
    seed: int
    algorithm: str
    records: list[IterRecord] = field(default_factory=list)
    status: str = "OK"
    warnings: list[str] = field(default_factory=list)

    def excess_series(self) -> np.ndarray:
        return np.array([r.excess_loss for r in self.records])

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class RunSummary:
    algorithm: str
    seeds: list[int]
    statuses: list[str]
    mean_log10_excess: np.ndarray
    std_log10_excess: np.ndarray
    saturation_level: float


def upsilon(state: AlgoState) -> float:
    diff = state.w[None, :] - state.H_prev
    return float(np.mean(np.einsum("ij,ij->i", diff, diff)))


def xi(problem: Problem, state: AlgoState) -> float:
    diff = state.h - problem.grads_at_opt
    n = state.n_workers
    return float(np.sum(diff * diff)) / n**2


def record_iteration(problem: Problem, cfg: AlgoConfig, state: AlgoState,
                     gamma_k: float) -> IterRecord:
    g = grad_full(problem, state.w)
    dist = state.w - problem.w_star
    ups = upsilon(state)
    lyap = float(dist @ dist) + 32.0 * gamma_k * problem.L * cfg.dwn.omega**2 * ups
    return IterRecord(
        k=state.k,
        excess_loss=loss(problem, state.w) - problem.f_star,
        grad_norm_sq=float(g @ g),
        upsilon=ups,
        xi=xi(problem, state),
        lyapunov=lyap,
        bits_up_cum=state.bits_up_cum,
        bits_dwn_cum=state.bits_dwn_cum,
        gamma_k=gamma_k,
    )


def phi(variant: str, gamma_l: float, omega_up: float, omega_dwn: float,
        n_workers: int = 1, alpha_dwn: float | None = None, c: float = 1.0,
        k_iters: int = 1) -> float:
    """Theoretical variance prefactor.  `gamma_l` is the product gamma * L.

    base:           (1 + w_up) (1 + 64 gL w_dwn^2)
    ghost:          (1 + w_up) (1 + 2 gL w_dwn)
    heterog:        (1 + 8 w_up) (1 + 8 gL w_dwn / alpha_dwn)
    noncvx:         (1 + w_up) (1 + 32 gL w_dwn^2)
    rand_quadratic: (1 + w_up) (1 + (4 (gL)^2 w_dwn / K) (1/c + w_up/N))
    """
    if variant == "base":
        return (1.0 + omega_up) * (1.0 + 64.0 * gamma_l * omega_dwn**2)
    if variant == "ghost":
        return (1.0 + omega_up) * (1.0 + 2.0 * gamma_l * omega_dwn)
    if variant == "heterog":
        if alpha_dwn is None or alpha_dwn <= 0:
            raise ValueError("heterog variant needs alpha_dwn > 0")
        return (1.0 + 8.0 * omega_up) * (1.0 + 8.0 * gamma_l * omega_dwn / alpha_dwn)
    if variant == "noncvx":
        return (1.0 + omega_up) * (1.0 + 32.0 * gamma_l * omega_dwn**2)
    if variant == "rand_quadratic":
        term = (4.0 * gamma_l**2 * omega_dwn / k_iters) * (1.0 / c + omega_up / n_workers)
        return (1.0 + omega_up) * (1.0 + term)
    raise ValueError(f"unknown phi variant {variant!r}; "
                     f"expected one of {PHI_VARIANTS}")


def predicted_saturation(variant: str, gamma: float, L: float, sigma_sq: float,
                         n_workers: int, b: int, omega_up: float,
                         omega_dwn: float, **kw) -> float:
    """gamma^2 sigma^2 Phi(gamma) / (N b), the theory's plateau scale."""
    f = phi(variant, gamma * L, omega_up, omega_dwn, n_workers=n_workers, **kw)
    return gamma**2 * sigma_sq * f / (n_workers * b)


def _log10_series(trace: RunTrace, length: int) -> np.ndarray:
    vals = trace.excess_series()
    if len(vals) < length:  # diverged early: pad with the last value
        vals = np.concatenate([vals, np.full(length - len(vals), vals[-1])])
    clipped = np.clip(vals, EXCESS_FLOOR, _EXCESS_CAP)
    return np.log10(clipped)


def aggregate(traces: list[RunTrace]) -> RunSummary:
    """Pointwise mean/std of log10 excess across seeds.  Diverged traces are
    padded with their last record and excluded from the saturation level."""
    if not traces:
        raise ValueError("no traces to aggregate")
    length = max(len(t) for t in traces)
    curves = np.stack([_log10_series(t, length) for t in traces])
    mean = curves.mean(axis=0)
    std = curves.std(axis=0)
    ok = [i for i, t in enumerate(traces) if t.status != STATUS_DIVERGED]
    if ok:
        window = max(1, length // 10)
        saturation = float(curves[ok, -window:].mean())
    else:
        saturation = math.nan
    return RunSummary(algorithm=traces[0].algorithm,
                      seeds=[t.seed for t in traces],
                      statuses=[t.status for t in traces],
                      mean_log10_excess=mean, std_log10_excess=std,
                      saturation_level=saturation)


# ---------------------------------------------------------------------------
# trace CSV I/O


def write_trace_csv(path, trace: RunTrace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema={SCHEMA_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in trace.records:
            writer.writerow([trace.run_id, trace.seed, trace.algorithm, r.k,
                             repr(r.gamma_k), repr(r.excess_loss),
                             repr(r.grad_norm_sq), repr(r.upsilon), repr(r.xi),
                             repr(r.lyapunov), r.bits_up_cum, r.bits_dwn_cum,
                             trace.status])


def read_trace_csv(path) -> RunTrace:
    with open(path, newline="", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != f"# schema={SCHEMA_VERSION}":
            raise ValueError(f"unexpected trace schema line: {header!r}")
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"unexpected trace columns: {reader.fieldnames}")
        records = []
        run_id = seed = algorithm = status = None
        for row in reader:
            run_id = row["run_id"]
            seed = int(row["seed"])
            algorithm = row["algorithm"]
            status = row["status"]
            records.append(IterRecord(
                k=int(row["k"]), gamma_k=float(row["gamma_k"]),
                excess_loss=float(row["excess_loss"]),
                grad_norm_sq=float(row["grad_norm_sq"]),
                upsilon=float(row["upsilon"]), xi=float(row["xi"]),
                lyapunov=float(row["lyapunov"]),
                bits_up_cum=int(row["bits_up_cum"]),
                bits_dwn_cum=int(row["bits_dwn_cum"])))
    if not records:
        raise ValueError("empty trace file")
    return RunTrace(run_id=run_id, seed=seed, algorithm=algorithm,
                    records=records, status=status)
