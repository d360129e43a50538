"""Objective families, per-worker data synthesis, and gradient oracles.

A problem is N data shards plus cached constants.  Per-worker objectives:

* lsr:       F_i(w) = 1/(2 n_i) ||X_i w - y_i||^2
* logistic:  F_i(w) = 1/n_i sum_j log(1 + exp(-y_j x_j.w)),  y in {-1, +1}
* quadratic: least squares on a synthetic design with a prescribed spectrum,
  so the Hessian (1/n) X^T X is exactly the requested SPD matrix

and F = (1/N) sum_i F_i.  Stochastic gradients sample b data points with
replacement, so draws are independent across iterations.

Heterogeneity is synthesized by shifting worker feature means: worker i's
features are G_i + i*delta*u for a fixed unit direction u, while targets are
generated from the centered part G_i.  A pure mean shift with exactly linear
targets would leave every worker optimal at the same point; tying targets to
the centered features makes the per-worker gradients at the global optimum
nonzero, with magnitude controlled by delta.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rng import PHASE_PROBLEM, PHASE_SIGMA, stream

FAMILIES = ("lsr", "logistic", "quadratic")

_SIGMA_DRAWS = 10_000
_MAX_SYNTH_ATTEMPTS = 5
_OPT_MAX_ITERS = 10_000_000


@dataclass
class BatchSpec:
    """Mini-batch size for the stochastic oracle; full_batch short-circuits
    sampling and returns the exact shard gradient."""

    b: int = 1
    full_batch: bool = False

    def __post_init__(self):
        if self.b < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class Problem:
    family: str
    shards: list[tuple[np.ndarray, np.ndarray]]
    L: float
    mu: float
    w_star: np.ndarray
    f_star: float
    sigma_sq_at_opt: float
    hetero_B_sq: float
    grads_at_opt: np.ndarray = field(repr=False)  # (N, d) worker gradients at w*
    meta: dict = field(default_factory=dict)

    @property
    def n_workers(self) -> int:
        return len(self.shards)

    @property
    def d(self) -> int:
        return self.shards[0][0].shape[1]


# ---------------------------------------------------------------------------
# objective values and gradients


def _shard_value(family: str, X: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    n = X.shape[0]
    if family in ("lsr", "quadratic"):
        r = X @ w - y
        return float(r @ r) / (2.0 * n)
    margins = y * (X @ w)
    return float(np.mean(np.logaddexp(0.0, -margins)))


def _shard_grad(family: str, X: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    if family in ("lsr", "quadratic"):
        return X.T @ (X @ w - y) / n
    margins = y * (X @ w)
    # sigmoid(-m) computed stably
    sig = 0.5 * (1.0 + np.tanh(-margins / 2.0))
    return -(X.T @ (y * sig)) / n


def loss(p: Problem, w: np.ndarray) -> float:
    return sum(_shard_value(p.family, X, y, w) for X, y in p.shards) / p.n_workers


def grad_full(p: Problem, w: np.ndarray) -> np.ndarray:
    """Exact gradient of F: average of per-worker gradients in ascending
    worker order."""
    w = np.asarray(w, dtype=float)
    if w.shape[0] != p.d:
        raise ValueError(f"dimension mismatch: got {w.shape[0]}, problem has {p.d}")
    g = np.zeros(p.d)
    for X, y in p.shards:
        g += _shard_grad(p.family, X, y, w)
    return g / p.n_workers


def grad_worker(p: Problem, worker_i: int, w: np.ndarray) -> np.ndarray:
    X, y = p.shards[worker_i]
    return _shard_grad(p.family, X, y, w)


def grad_stochastic(p: Problem, worker_i: int, w: np.ndarray, batch: BatchSpec,
                    rng: np.random.Generator) -> np.ndarray:
    """Mini-batch gradient of worker i, sampling b points with replacement."""
    X, y = p.shards[worker_i]
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty shard")
    if batch.full_batch:
        return _shard_grad(p.family, X, y, w)
    if batch.b > n:
        raise ValueError(f"batch size {batch.b} exceeds shard size {n}")
    idx = rng.integers(0, n, size=batch.b)
    return _shard_grad(p.family, X[idx], y[idx], w)


# ---------------------------------------------------------------------------
# constants


def _hessian(p_family: str, shards) -> np.ndarray:
    d = shards[0][0].shape[1]
    H = np.zeros((d, d))
    for X, _ in shards:
        H += X.T @ X / X.shape[0]
    H /= len(shards)
    if p_family == "logistic":
        H /= 4.0
    return H


def _power_top(H: np.ndarray, rel_tol: float, max_iters: int) -> float:
    """Top eigenvalue of a PSD matrix by power iteration, stopping on the
    eigen-residual ||Hv - lam*v|| <= rel_tol * lam."""
    d = H.shape[0]
    v = np.full(d, 1.0 / np.sqrt(d))
    lam = 0.0
    for _ in range(max_iters):
        hv = H @ v
        nrm = np.linalg.norm(hv)
        if nrm == 0.0:
            return 0.0
        v = hv / nrm
        hv = H @ v
        lam = float(v @ hv)
        if np.linalg.norm(hv - lam * v) <= rel_tol * max(lam, 1e-300):
            break
    return lam


def _power_extreme(H: np.ndarray, rel_tol: float = 1e-10,
                   max_iters: int = 200_000) -> tuple[float, float]:
    """Extreme eigenvalues of an SPD matrix: power iteration for the top,
    shifted power iteration on lam_max*I - H for the bottom."""
    lam_max = _power_top(H, rel_tol, max_iters)
    if lam_max == 0.0:
        return 0.0, 0.0
    shifted = lam_max * np.eye(H.shape[0]) - H
    lam_min = lam_max - _power_top(shifted, rel_tol, max_iters)
    return lam_max, max(lam_min, 0.0)


def _smoothness_from_shards(family: str, shards) -> tuple[float, float]:
    H = _hessian(family, shards)
    lam_max, lam_min = _power_extreme(H)
    if family == "logistic":
        return lam_max, 0.0
    return lam_max, lam_min


def smoothness_constants(p: Problem) -> tuple[float, float]:
    """(L, mu) of F.  lsr/quadratic: extreme Hessian eigenvalues by power
    iteration to 1e-10 relative; logistic: L = lam_max(A^T A)/(4n) over the
    pooled design, mu = 0 (unregularized)."""
    return _smoothness_from_shards(p.family, p.shards)


def cocoercivity_constant(p: Problem, batch: BatchSpec) -> float:
    """Smallest constant making the stochastic oracles L-cocoercive in
    quadratic mean.  The global smoothness L of F is not enough on
    heterogeneous shards: a single worker's curvature can exceed it.
    Full batch: max over workers of the shard Hessian's top eigenvalue;
    sampled batches: max over data points of ||x||^2 (almost-sure
    cocoercivity of the per-point gradients)."""
    if batch.full_batch:
        worst = 0.0
        for X, _ in p.shards:
            Hi = X.T @ X / X.shape[0]
            if p.family == "logistic":
                Hi /= 4.0
            worst = max(worst, float(np.linalg.eigvalsh(Hi)[-1]))
        return worst
    worst = max(float(np.max(np.einsum("ij,ij->i", X, X))) for X, _ in p.shards)
    if p.family == "logistic":
        worst /= 4.0
    return worst


def solve_optimum(p: Problem, tol: float = 1e-12) -> tuple[np.ndarray, float]:
    """Ground-truth optimum of an assembled problem (see _solve_optimum)."""
    return _solve_optimum(p.family, p.shards, p.L, tol=tol)


def _solve_optimum(family: str, shards, L: float, tol: float = 1e-12
                   ) -> tuple[np.ndarray, float]:
    """Ground-truth optimum.  lsr/quadratic solve the normal equations;
    logistic runs deterministic full-gradient descent with step 1/L until
    ||grad F|| <= tol."""
    d = shards[0][0].shape[1]
    N = len(shards)
    if family in ("lsr", "quadratic"):
        H = _hessian(family, shards)
        rhs = np.zeros(d)
        for X, y in shards:
            rhs += X.T @ y / X.shape[0]
        rhs /= N
        w_star = np.linalg.solve(H, rhs)
    else:
        w_star = np.zeros(d)
        for _ in range(_OPT_MAX_ITERS):
            g = np.zeros(d)
            for X, y in shards:
                g += _shard_grad(family, X, y, w_star)
            g /= N
            if np.linalg.norm(g) <= tol:
                break
            w_star = w_star - g / L
        else:
            raise RuntimeError("logistic optimum solve did not converge")
    f_star = sum(_shard_value(family, X, y, w_star) for X, y in shards) / N
    return w_star, f_star


def _estimate_sigma_sq(p_family, shards, w_star, grads_at_opt, seed) -> float:
    """Empirical single-sample noise at the optimum: mean over 1e4 draws of
    ||g_i(w*) - grad F_i(w*)||^2, draws split across workers."""
    N = len(shards)
    per_worker = max(1, _SIGMA_DRAWS // N)
    total = 0.0
    count = 0
    for i, (X, y) in enumerate(shards):
        rng = stream(seed, PHASE_SIGMA, entity=i)
        idx = rng.integers(0, X.shape[0], size=per_worker)
        if p_family in ("lsr", "quadratic"):
            resid = X[idx] @ w_star - y[idx]
            g = X[idx] * resid[:, None]
        else:
            margins = y[idx] * (X[idx] @ w_star)
            sig = 0.5 * (1.0 + np.tanh(-margins / 2.0))
            g = -(X[idx] * (y[idx] * sig)[:, None])
        diff = g - grads_at_opt[i]
        total += float(np.sum(diff * diff))
        count += per_worker
    return total / count


def from_shards(family: str, shards, seed: int = 0, meta: dict | None = None,
                opt_tol: float = 1e-12) -> Problem:
    """Assemble a Problem from explicit shards, solving for all constants."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    L, mu = _smoothness_from_shards(family, shards)
    w_star, f_star = _solve_optimum(family, shards, L, tol=opt_tol)
    grads_at_opt = np.stack([_shard_grad(family, X, y, w_star) for X, y in shards])
    if family in ("lsr", "quadratic"):
        worst = float(np.max(np.abs(grads_at_opt.mean(axis=0))))
        if worst > 1e-10:
            raise RuntimeError(f"optimum residual too large: {worst:.2e}")
    b_sq = float(np.mean(np.einsum("ij,ij->i", grads_at_opt, grads_at_opt)))
    sigma_sq = _estimate_sigma_sq(family, shards, w_star, grads_at_opt, seed)
    return Problem(family=family, shards=list(shards), L=L, mu=mu,
                   w_star=w_star, f_star=f_star, sigma_sq_at_opt=sigma_sq,
                   hetero_B_sq=b_sq, grads_at_opt=grads_at_opt,
                   meta=dict(meta or {}))


# ---------------------------------------------------------------------------
# synthesis


def _synth_shards(family, d, n_per_worker, N, hetero, delta, noise_std, rng):
    if hetero not in ("none", "shifted_means"):
        raise ValueError(f"unknown heterogeneity mode {hetero!r}")
    w_true = rng.standard_normal(d)
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    shards = []
    if family == "quadratic":
        # shared spectrum, per-worker orthogonal factors: Hessian of every
        # worker is exactly V diag(lams) V^T
        lams = np.linspace(0.1, 1.0, d)
        V, _ = np.linalg.qr(rng.standard_normal((d, d)))
        for i in range(1, N + 1):
            Q, _ = np.linalg.qr(rng.standard_normal((n_per_worker, d)))
            X = Q * np.sqrt(n_per_worker * lams)
            X = X @ V.T
            center = w_true + (i * delta) * u if hetero == "shifted_means" else w_true
            y = X @ center
            shards.append((X, y))
        return shards
    for i in range(1, N + 1):
        G = rng.standard_normal((n_per_worker, d))
        shift = (i * delta) * u if hetero == "shifted_means" else 0.0
        X = G + shift
        if family == "lsr":
            y = G @ w_true
            if noise_std > 0.0:
                y = y + noise_std * rng.standard_normal(n_per_worker)
        else:
            logits = G @ w_true
            prob = 0.5 * (1.0 + np.tanh(logits / 2.0))
            y = np.where(rng.random(n_per_worker) < prob, 1.0, -1.0)
        shards.append((X, y))
    return shards


def synth_problem(family: str, d: int, n_per_worker: int, N: int,
                  hetero: str = "none", delta: float = 0.0, seed: int = 0,
                  noise_std: float = 0.0) -> Problem:
    """Deterministic synthetic problem.  `noise_std` adds label noise to lsr
    targets so the stochastic oracle has nonzero variance at the optimum."""
    if d < 1 or N < 1:
        raise ValueError("d and N must be >= 1")
    if n_per_worker < d:
        raise ValueError("need n_per_worker >= d for a well-posed shard")
    last_err = None
    for attempt in range(_MAX_SYNTH_ATTEMPTS):
        rng = stream(seed, PHASE_PROBLEM, entity=attempt)
        shards = _synth_shards(family, d, n_per_worker, N, hetero, delta,
                               noise_std, rng)
        if family in ("lsr", "quadratic"):
            degenerate = any(np.linalg.matrix_rank(X) < d for X, _ in shards)
            if degenerate:
                last_err = RuntimeError(f"rank-deficient shard at attempt {attempt}")
                continue
        meta = {"family": family, "d": d, "n_per_worker": n_per_worker, "N": N,
                "hetero": hetero, "delta": delta, "seed": seed,
                "noise_std": noise_std}
        return from_shards(family, shards, seed=seed, meta=meta)
    raise RuntimeError(f"could not synthesize a well-posed problem: {last_err}")


# ---------------------------------------------------------------------------
# serialization


def to_dict(p: Problem) -> dict:
    return {
        "schema": "compsgd-problem-1",
        "family": p.family,
        "shards": [{"features": X.tolist(), "targets": y.tolist()}
                   for X, y in p.shards],
        "L": p.L,
        "mu": p.mu,
        "w_star": p.w_star.tolist(),
        "f_star": p.f_star,
        "sigma_sq_at_opt": p.sigma_sq_at_opt,
        "hetero_B_sq": p.hetero_B_sq,
        "grads_at_opt": p.grads_at_opt.tolist(),
        "meta": p.meta,
    }


def from_dict(data: dict) -> Problem:
    if data.get("schema") != "compsgd-problem-1":
        raise ValueError("not a problem snapshot")
    shards = [(np.asarray(s["features"], dtype=float),
               np.asarray(s["targets"], dtype=float)) for s in data["shards"]]
    return Problem(family=data["family"], shards=shards, L=data["L"],
                   mu=data["mu"], w_star=np.asarray(data["w_star"], dtype=float),
                   f_star=data["f_star"], sigma_sq_at_opt=data["sigma_sq_at_opt"],
                   hetero_B_sq=data["hetero_B_sq"],
                   grads_at_opt=np.asarray(data["grads_at_opt"], dtype=float),
                   meta=data.get("meta", {}))


def save_json(p: Problem, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(p), fh)


def load_json(path) -> Problem:
    with open(path, encoding="utf-8") as fh:
        return from_dict(json.load(fh))
