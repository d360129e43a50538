"""Unified engine for distributed SGD under bidirectional compression.

One step of the engine, from iterate w_k:

  uplink    per active worker i:  D_i = g_{k+1}^i(w_hat_k^i) - h_k^i,
            Dhat_i = C_up(D_i),  h_{k+1}^i = h_k^i + alpha_up * Dhat_i
  aggregate ghat = mean over active workers of (Dhat_i + h_k^i)
  update    non-degraded: w_{k+1} = w_k - gamma_k * ghat
            degraded:     w_{k+1} = w_k - gamma_k * C_dwn(ghat)
  downlink  depends on the style:
            model_diff (memory mechanism): per group O = w_{k+1} - H^g,
              Ohat = C_dwn,g(O), w_hat = H + Ohat, H += alpha_dwn * Ohat
            gradient (degraded):     w_hat = w_{k+1}
            gradient (non-degraded): w_hat -= gamma_k * C_dwn(ghat)
            ghost:                   w_hat = w_k - gamma_k * C_dwn(ghat)

Named presets select the knobs; with identity compressors every preset
collapses to plain SGD.  The global model of the non-degraded styles is
measurable w.r.t. uplink randomness only: replaying the downlink phase with
a different salt leaves w_{k+1} bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .compressors import CompressorSpec, compress, make_spec
from .problems import BatchSpec, Problem, grad_stochastic
from .rng import (PHASE_DWN, PHASE_GRAD, PHASE_PARTICIPATION, PHASE_UP,
                  StreamPool, stream)

# engine-internal re-keyed generator; single-threaded per process (parallel
# runs use a process pool, each with its own module instance)
_POOL = StreamPool()

ALGORITHMS = ("SGD", "Diana", "Artemis", "ArtemisND", "Ghost", "MCM",
              "RandMCM", "RandMCM_G", "MCM_alpha0", "MCM_alpha1")

# downlink styles
MODEL_DIFF = "model_diff"
GRADIENT_DEGRADED = "gradient_degraded"
GRADIENT_ND = "gradient_nd"
GHOST = "ghost"

# downlink memory modes
SHARED = "shared"
PER_WORKER = "per_worker"
GROUPED = "grouped"
SINGLE_AVERAGED = "single_averaged"

STATUS_OK = "OK"
STATUS_DIVERGED = "DIVERGED"

_DIVERGE_NORM = 1e100


@dataclass
class StepPolicy:
    """Step-size schedule: constant gamma, or the decaying
    2 / (mu * (k + 1) + L_tilde)."""

    kind: str = "constant"
    gamma: float = 0.0
    mu: float = 0.0
    l_tilde: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "decaying"):
            raise ValueError(f"unknown step policy {self.kind!r}")


def gamma_schedule(policy: StepPolicy, k: int) -> float:
    if k < 0:
        raise ValueError("k must be >= 0")
    if policy.kind == "constant":
        return policy.gamma
    return 2.0 / (policy.mu * (k + 1) + policy.l_tilde)


@dataclass
class AlgoConfig:
    name: str
    up: CompressorSpec
    dwn: CompressorSpec
    alpha_up: float
    alpha_dwn: float
    gamma: StepPolicy
    update_mode: str = "non_degraded"          # degraded | non_degraded
    dwn_style: str = MODEL_DIFF
    memory_mode: str = SHARED
    n_groups: int = 1
    reset_every: int = 0
    participation_q: float = 1.0
    batch: BatchSpec = field(default_factory=BatchSpec)

    def __post_init__(self):
        if self.update_mode not in ("degraded", "non_degraded"):
            raise ValueError(f"bad update_mode {self.update_mode!r}")
        if self.memory_mode not in (SHARED, PER_WORKER, GROUPED, SINGLE_AVERAGED):
            raise ValueError(f"bad memory_mode {self.memory_mode!r}")
        if not 0.0 <= self.participation_q <= 1.0:
            raise ValueError("participation probability must be in [0, 1]")
        if not 0.0 <= self.alpha_up <= 1.0 or not 0.0 <= self.alpha_dwn <= 1.0:
            raise ValueError("memory rates must be in [0, 1]")


def default_alphas(up: CompressorSpec, dwn: CompressorSpec) -> tuple[float, float]:
    """Memory rates 1 / (2 * (1 + omega)) on each side."""
    return 1.0 / (2.0 * (1.0 + up.omega)), 1.0 / (2.0 * (1.0 + dwn.omega))


def preset(name: str, up: CompressorSpec, dwn: CompressorSpec,
           gamma: StepPolicy, batch: BatchSpec | None = None,
           n_groups: int | None = None, reset_every: int = 0,
           participation_q: float = 1.0, alpha_up: float | None = None,
           alpha_dwn: float | None = None) -> AlgoConfig:
    """Build a named algorithm configuration.

    SGD and Diana force an identity downlink.  RandMCM_G requires n_groups.
    MCM_alpha0 / MCM_alpha1 are the downlink-memory ablations.
    """
    if name not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {name!r}; expected one of {ALGORITHMS}")
    a_up, a_dwn = default_alphas(up, dwn)
    if alpha_up is not None:
        a_up = alpha_up
    if alpha_dwn is not None:
        a_dwn = alpha_dwn
    kw = dict(name=name, up=up, dwn=dwn, alpha_up=a_up, alpha_dwn=a_dwn,
              gamma=gamma, batch=batch or BatchSpec(),
              participation_q=participation_q, reset_every=reset_every)
    if name == "SGD":
        ident = make_spec("identity", up.d)
        return AlgoConfig(update_mode="non_degraded", dwn_style=MODEL_DIFF,
                          memory_mode=SHARED,
                          **{**kw, "up": ident, "dwn": ident})
    if name == "Diana":
        ident = make_spec("identity", dwn.d)
        return AlgoConfig(update_mode="non_degraded", dwn_style=MODEL_DIFF,
                          memory_mode=SHARED, **{**kw, "dwn": ident})
    if name == "Artemis":
        return AlgoConfig(update_mode="degraded", dwn_style=GRADIENT_DEGRADED,
                          memory_mode=SHARED, **kw)
    if name == "ArtemisND":
        return AlgoConfig(update_mode="non_degraded", dwn_style=GRADIENT_ND,
                          memory_mode=SHARED, **kw)
    if name == "Ghost":
        return AlgoConfig(update_mode="non_degraded", dwn_style=GHOST,
                          memory_mode=SHARED, **kw)
    if name == "MCM":
        return AlgoConfig(update_mode="non_degraded", dwn_style=MODEL_DIFF,
                          memory_mode=SHARED, **kw)
    if name == "MCM_alpha0":
        kw["alpha_dwn"] = 0.0
        return AlgoConfig(update_mode="non_degraded", dwn_style=MODEL_DIFF,
                          memory_mode=SHARED, **kw)
    if name == "MCM_alpha1":
        kw["alpha_dwn"] = 1.0
        return AlgoConfig(update_mode="non_degraded", dwn_style=MODEL_DIFF,
                          memory_mode=SHARED, **kw)
    if name == "RandMCM":
        return AlgoConfig(update_mode="non_degraded", dwn_style=MODEL_DIFF,
                          memory_mode=PER_WORKER, **kw)
    # RandMCM_G
    if n_groups is None or n_groups < 1:
        raise ValueError("RandMCM_G needs n_groups >= 1")
    return AlgoConfig(update_mode="non_degraded", dwn_style=MODEL_DIFF,
                      memory_mode=GROUPED, n_groups=n_groups, **kw)


@dataclass
class AlgoState:
    k: int
    w: np.ndarray                  # global model w_k
    w_hat: np.ndarray              # (N, d) local models
    h: np.ndarray                  # (N, d) uplink memories
    H: np.ndarray                  # (N, d) downlink memories (current)
    H_prev: np.ndarray             # (N, d) memories before the last downlink
    rng_root: int
    bits_up_cum: int = 0
    bits_dwn_cum: int = 0
    status: str = STATUS_OK
    H_bar: np.ndarray | None = None  # single-averaged server memory

    @property
    def n_workers(self) -> int:
        return self.w_hat.shape[0]

    def copy(self) -> "AlgoState":
        return AlgoState(k=self.k, w=self.w.copy(), w_hat=self.w_hat.copy(),
                         h=self.h.copy(), H=self.H.copy(),
                         H_prev=self.H_prev.copy(), rng_root=self.rng_root,
                         bits_up_cum=self.bits_up_cum,
                         bits_dwn_cum=self.bits_dwn_cum, status=self.status,
                         H_bar=None if self.H_bar is None else self.H_bar.copy())


def group_ids(cfg: AlgoConfig, n_workers: int) -> np.ndarray:
    """Downlink group of each worker.  shared -> one group; per_worker and
    single_averaged -> one per worker; grouped -> contiguous blocks (G = N
    reproduces per-worker ids, G = 1 the shared id)."""
    if cfg.memory_mode == SHARED:
        return np.zeros(n_workers, dtype=int)
    if cfg.memory_mode in (PER_WORKER, SINGLE_AVERAGED):
        return np.arange(n_workers, dtype=int)
    g = cfg.n_groups
    if not 1 <= g <= n_workers:
        raise ValueError("need 1 <= n_groups <= N")
    return (np.arange(n_workers, dtype=int) * g) // n_workers


def init_state(cfg: AlgoConfig, problem: Problem, w0: np.ndarray,
               seed: int) -> AlgoState:
    """Memories start at h_0^i = g_1^i(w_0) and H = w_0; local models at w_0.

    The iteration-0 gradient streams are consumed here and reused by the
    first step (whose local models still equal w_0), so the first uplink
    difference is exactly zero and the first update is a plain SGD step.
    """
    w0 = np.asarray(w0, dtype=float)
    if w0.shape[0] != problem.d:
        raise ValueError("w0 dimension mismatch")
    n = problem.n_workers
    h = np.stack([grad_stochastic(problem, i, w0, cfg.batch,
                                  _POOL.stream(seed, PHASE_GRAD, i, 0))
                  for i in range(n)])
    tile = np.tile(w0, (n, 1))
    return AlgoState(k=0, w=w0.copy(), w_hat=tile.copy(), h=h, H=tile.copy(),
                     H_prev=tile.copy(), rng_root=seed,
                     H_bar=w0.copy() if cfg.memory_mode == SINGLE_AVERAGED else None)


def _participation(cfg: AlgoConfig, state: AlgoState, k: int) -> np.ndarray:
    n = state.n_workers
    if cfg.participation_q >= 1.0:
        return np.ones(n, dtype=bool)
    draw = _POOL.stream(state.rng_root, PHASE_PARTICIPATION, 0, k).random(n)
    return draw < cfg.participation_q


def _uplink(cfg: AlgoConfig, problem: Problem, state: AlgoState,
            active: np.ndarray, salt: int = 0
            ) -> tuple[np.ndarray, np.ndarray, int]:
    """Gradient draws + uplink compression for active workers.

    Returns (ghat, new uplink memories, uplink bits).  Inactive workers'
    memories stay frozen.
    """
    k = state.k
    root = state.rng_root
    h_new = state.h.copy()
    acc = np.zeros(problem.d)
    bits = 0
    for i in np.flatnonzero(active):
        g = grad_stochastic(problem, i, state.w_hat[i], cfg.batch,
                            _POOL.stream(root, PHASE_GRAD, i, k, salt))
        delta = g - state.h[i]
        dhat, b = compress(cfg.up, delta, _POOL.stream(root, PHASE_UP, i, k, salt))
        h_new[i] = state.h[i] + cfg.alpha_up * dhat
        acc += dhat + state.h[i]
        bits += b
    ghat = acc / int(active.sum())
    return ghat, h_new, bits


def _downlink_model_diff(cfg: AlgoConfig, state: AlgoState, w_next: np.ndarray,
                         active: np.ndarray, salt: int
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, int]:
    """Memory-mechanism downlink.  One message per group; shared and grouped
    memories are broadcast to every member so their rows stay identical,
    per-worker and single-averaged messages reach active workers only."""
    k = state.k
    root = state.rng_root
    n = state.n_workers
    w_hat_new = state.w_hat.copy()
    H_new = state.H.copy()
    bits = 0

    if cfg.memory_mode == SINGLE_AVERAGED:
        H_bar = state.H_bar.copy()
        omega_vec = w_next - state.H_bar
        acc = np.zeros_like(H_bar)
        for i in np.flatnonzero(active):
            ohat, b = compress(cfg.dwn, omega_vec,
                               _POOL.stream(root, PHASE_DWN, i, k, salt))
            w_hat_new[i] = state.H[i] + ohat
            H_new[i] = state.H[i] + cfg.alpha_dwn * ohat
            acc += ohat
            bits += b
        H_bar = H_bar + (cfg.alpha_dwn / n) * acc
        if cfg.reset_every > 0 and (k + 1) % cfg.reset_every == 0:
            H_new[:] = H_bar
            bits += 32 * w_next.shape[0]
        return w_hat_new, H_new, H_bar, bits

    gids = group_ids(cfg, n)
    for g in np.unique(gids):
        members = np.flatnonzero(gids == g)
        if cfg.memory_mode == PER_WORKER and not active[members[0]]:
            continue
        ref = state.H[members[0]]
        ohat, b = compress(cfg.dwn, w_next - ref,
                           _POOL.stream(root, PHASE_DWN, int(g), k, salt))
        w_hat_new[members] = ref + ohat
        H_new[members] = ref + cfg.alpha_dwn * ohat
        bits += b
    return w_hat_new, H_new, None, bits


def step(cfg: AlgoConfig, problem: Problem, state: AlgoState,
         dwn_salt: int = 0) -> AlgoState:
    """Advance one full round.  `dwn_salt` re-randomizes the downlink phase
    only (validation hook); it must not affect the non-degraded w_{k+1}."""
    if state.status == STATUS_DIVERGED:
        out = state.copy()
        out.k += 1
        return out
    k = state.k
    gamma_k = gamma_schedule(cfg.gamma, k)

    active = _participation(cfg, state, k)
    if not active.any():
        out = state.copy()
        out.k += 1
        return out

    ghat, h_new, bits_up = _uplink(cfg, problem, state, active)

    bits_dwn = 0
    H_bar_new = None if state.H_bar is None else state.H_bar.copy()
    if cfg.dwn_style == MODEL_DIFF:
        w_next = state.w - gamma_k * ghat
        w_hat_new, H_new, H_bar_new, bits_dwn = _downlink_model_diff(
            cfg, state, w_next, active, dwn_salt)
        H_prev_new = state.H.copy()
    elif cfg.dwn_style == GRADIENT_DEGRADED:
        ghat_c, bits_dwn = compress(cfg.dwn, ghat,
                                    _POOL.stream(state.rng_root, PHASE_DWN, 0, k, dwn_salt))
        w_next = state.w - gamma_k * ghat_c
        w_hat_new = np.tile(w_next, (state.n_workers, 1))
        H_new = w_hat_new.copy()
        H_prev_new = state.w_hat.copy()
    elif cfg.dwn_style == GRADIENT_ND:
        w_next = state.w - gamma_k * ghat
        ghat_c, bits_dwn = compress(cfg.dwn, ghat,
                                    _POOL.stream(state.rng_root, PHASE_DWN, 0, k, dwn_salt))
        w_hat_new = state.w_hat - gamma_k * ghat_c
        H_new = w_hat_new.copy()
        H_prev_new = state.w_hat.copy()
    elif cfg.dwn_style == GHOST:
        w_next = state.w - gamma_k * ghat
        ghat_c, bits_dwn = compress(cfg.dwn, ghat,
                                    _POOL.stream(state.rng_root, PHASE_DWN, 0, k, dwn_salt))
        w_hat_new = np.tile(state.w - gamma_k * ghat_c, (state.n_workers, 1))
        H_new = w_hat_new.copy()
        H_prev_new = state.w_hat.copy()
    else:
        raise ValueError(f"unknown downlink style {cfg.dwn_style!r}")

    status = STATUS_OK
    if (not np.all(np.isfinite(w_next)) or not np.all(np.isfinite(w_hat_new))
            or np.max(np.abs(w_next)) > _DIVERGE_NORM
            or np.max(np.abs(w_hat_new)) > _DIVERGE_NORM):
        status = STATUS_DIVERGED

    return AlgoState(k=k + 1, w=w_next, w_hat=w_hat_new, h=h_new, H=H_new,
                     H_prev=H_prev_new, rng_root=state.rng_root,
                     bits_up_cum=state.bits_up_cum + bits_up,
                     bits_dwn_cum=state.bits_dwn_cum + bits_dwn,
                     status=status, H_bar=H_bar_new)


# ---------------------------------------------------------------------------
# step-size bounds


def gamma_max(cfg: AlgoConfig, problem: Problem, n_workers: int) -> float:
    """Largest admissible constant step.

    Non-degraded framework: min of
      gamma_up  = 1 / (2 L (1 + omega_up / N))
      gamma_dwn = 1 / (8 L omega_dwn)
      gamma_ups = 1 / (8 sqrt(2) L omega_dwn sqrt(8 omega_dwn + omega_up / N))
    where any bound with a zero omega factor in its denominator is dropped.
    Degraded (Artemis-style) framework:
      1 / (8 L (1 + omega_dwn) (1 + omega_up / N)).
    """
    L = problem.L
    w_up = cfg.up.omega
    w_dwn = cfg.dwn.omega
    if cfg.update_mode == "degraded":
        return 1.0 / (8.0 * L * (1.0 + w_dwn) * (1.0 + w_up / n_workers))
    return gamma_max_bounds(L, w_up, w_dwn, n_workers)["gamma_max"]


def gamma_max_bounds(L: float, omega_up: float, omega_dwn: float,
                     n_workers: int) -> dict:
    """All non-degraded bounds plus their min, with inf for dropped ones."""
    if L <= 0:
        raise ValueError("L must be positive")
    g_up = 1.0 / (2.0 * L * (1.0 + omega_up / n_workers))
    if omega_dwn > 0:
        g_dwn = 1.0 / (8.0 * L * omega_dwn)
        g_ups = 1.0 / (8.0 * math.sqrt(2.0) * L * omega_dwn
                       * math.sqrt(8.0 * omega_dwn + omega_up / n_workers))
    else:
        g_dwn = math.inf
        g_ups = math.inf
    return {"gamma_up": g_up, "gamma_dwn": g_dwn, "gamma_upsilon": g_ups,
            "gamma_max": min(g_up, g_dwn, g_ups)}


def l_tilde(gmax: float) -> float:
    """L_tilde defined through gamma_max = 1 / (2 L_tilde)."""
    return 1.0 / (2.0 * gmax)


def decaying_policy(mu: float, gmax: float) -> StepPolicy:
    return StepPolicy(kind="decaying", mu=mu, l_tilde=l_tilde(gmax))


def constant_policy(gamma: float) -> StepPolicy:
    return StepPolicy(kind="constant", gamma=gamma)


# ---------------------------------------------------------------------------
# iterate averaging


def polyak_ruppert_weighted(iterates, policy: StepPolicy):
    """Weighted average of iterates with lambda_j = 1 / gamma_j; constant
    policies degenerate to the uniform mean."""
    arr = np.asarray(iterates, dtype=float)
    scalar = arr.ndim == 1
    if scalar:
        arr = arr[:, None]
    if arr.shape[0] == 0:
        raise ValueError("empty iterate trace")
    if policy.kind == "constant":
        out = arr.mean(axis=0)
    else:
        lam = np.array([1.0 / gamma_schedule(policy, j)
                        for j in range(arr.shape[0])])
        out = (lam[:, None] * arr).sum(axis=0) / lam.sum()
    return float(out[0]) if scalar else out


def run_trajectory(cfg: AlgoConfig, problem: Problem, w0: np.ndarray, seed: int,
                   iterations: int, record=None) -> list[AlgoState]:
    """Run `iterations` steps from w0 and return all states (k = 0..K).
    Stops stepping early on divergence; `record(state)` is called per state."""
    state = init_state(cfg, problem, w0, seed)
    states = [state]
    if record is not None:
        record(state)
    for _ in range(iterations):
        state = step(cfg, problem, state)
        states.append(state)
        if record is not None:
            record(state)
        if state.status == STATUS_DIVERGED:
            break
    return states
