"""Independent Monte-Carlo oracles certifying the implementation.

Each check replays one phase of the engine many times with fresh randomness
and asserts a moment identity or a one-step inequality, with slack measured
in standard errors of the Monte-Carlo estimate (3 or 4 depending on the
check).  Reports are deterministic given (seed, trials).

The noise level entering the inequality bounds is measured empirically at
the evaluation point rather than taken from a uniform assumption, and the
cocoercivity constant of the stochastic oracles is used where a bound needs
it (the global smoothness of F is not cocoercive per worker on
heterogeneous shards).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .algorithms import (MODEL_DIFF, AlgoConfig, AlgoState, constant_policy,
                         init_state, preset, run_trajectory, step)
from .compressors import (CompressorSpec, compress, make_spec,
                          quantize_rows_batch, sparsify_rows_batch)
from .metrics import upsilon, xi
from .problems import (BatchSpec, Problem, cocoercivity_constant, grad_full,
                       grad_stochastic, synth_problem)
from .rng import PHASE_CHECK, stream

PASS = "PASS"
FAIL = "FAIL"
NOT_APPLICABLE = "NOT_APPLICABLE"

_CHUNK = 10_000

# sub-stream blocks inside PHASE_CHECK
_SUB_VEC = 0
_SUB_GRAD = 1
_SUB_UP = 2
_SUB_DWN = 3


def _check_stream(seed: int, sub: int, entity: int, trial: int = 0):
    if entity >= 1024:
        raise ValueError("too many workers for check streams")
    return stream(seed, PHASE_CHECK, sub * 1024 + entity, trial)


@dataclass
class CheckReport:
    check: str
    status: str
    statistic: float
    bound: float
    stderr: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"check": self.check, "status": self.status,
                "statistic": self.statistic, "bound": self.bound,
                "stderr": self.stderr, "details": self.details}


# ---------------------------------------------------------------------------
# compressor moments


def _moment_stats(spec: CompressorSpec, v: np.ndarray, trials: int,
                  rng) -> tuple[np.ndarray, np.ndarray, float]:
    """(mean, per-coordinate stderr, variance ratio) over `trials` draws."""
    d = v.shape[0]
    sum_c = np.zeros(d)
    sumsq_c = np.zeros(d)
    sum_err = 0.0
    done = 0
    vsq = float(v @ v)
    while done < trials:
        m = min(_CHUNK, trials - done)
        rows = np.tile(v, (m, 1))
        u = rng.random((m, d))
        if spec.kind == "quantize":
            out = quantize_rows_batch(rows, u, spec.s)
        elif spec.kind == "sparsify":
            out = sparsify_rows_batch(rows, u, spec.p)
        else:
            out = rows
        sum_c += out.sum(axis=0)
        sumsq_c += np.einsum("ij,ij->j", out, out)
        diff = out - v
        sum_err += float(np.einsum("ij,ij->", diff, diff))
        done += m
    mean = sum_c / trials
    var = np.maximum(sumsq_c / trials - mean**2, 0.0)
    stderr = np.sqrt(var / trials)
    ratio = (sum_err / trials) / vsq if vsq > 0 else 0.0
    return mean, stderr, ratio


def check_compressor_moments(spec: CompressorSpec | None, d: int,
                             trials: int = 100_000, seed: int = 0,
                             n_vectors: int = 20, compress_fn=None,
                             omega: float | None = None) -> CheckReport:
    """Unbiasedness within 4*stderr per coordinate and variance ratio
    <= omega * 1.02, over `n_vectors` random vectors.

    `compress_fn(v, rng) -> vector` with an explicit `omega` substitutes for
    the spec (fault-injection hook for testing the check itself).
    """
    if trials < 10_000:
        raise ValueError("need at least 1e4 trials")
    w = spec.omega if omega is None else omega
    max_z = 0.0
    max_ratio = 0.0
    worst_stderr = 0.0
    for vec_idx in range(n_vectors):
        v = _check_stream(seed, _SUB_VEC, 0, vec_idx).standard_normal(d)
        rng = _check_stream(seed, _SUB_VEC, 1, vec_idx)
        if compress_fn is not None:
            outs = np.stack([compress_fn(v, rng) for _ in range(trials)])
            mean = outs.mean(axis=0)
            stderr = outs.std(axis=0) / np.sqrt(trials)
            diff = outs - v
            ratio = float(np.einsum("ij,ij->", diff, diff)) / trials / float(v @ v)
        else:
            mean, stderr, ratio = _moment_stats(spec, v, trials, rng)
        dev = np.abs(mean - v)
        z = np.max(dev / np.maximum(4.0 * stderr, 1e-300)) if np.any(dev) else 0.0
        max_z = max(max_z, float(z))
        max_ratio = max(max_ratio, ratio)
        worst_stderr = max(worst_stderr, float(stderr.max()))
    unbiased_ok = max_z <= 1.0
    var_ok = max_ratio <= w * 1.02 + 1e-12
    status = PASS if (unbiased_ok and var_ok) else FAIL
    return CheckReport(
        check="compressor_moments", status=status, statistic=max_ratio,
        bound=w * 1.02, stderr=worst_stderr,
        details={"kind": spec.label() if spec is not None else "injected",
                 "d": d, "trials": trials, "omega": w,
                 "max_mean_dev_over_4stderr": max_z})


# ---------------------------------------------------------------------------
# squared norm of compressed stochastic gradients


def check_grad_sto_lemma(problem: Problem, cfg: AlgoConfig, state: AlgoState,
                         trials: int = 2_000, seed: int = 0) -> CheckReport:
    """E||g_tilde||^2 <= (1 + w_up/N) ||grad F(w_hat)||^2
    + sigma_hat^2 (1 + w_up) / (N b), with sigma_hat measured at w_hat from
    the same draws (paired statistic, 3*stderr slack)."""
    if problem.hetero_B_sq > 1e-6:
        return CheckReport("grad_sto_lemma", NOT_APPLICABLE, 0.0, 0.0, 0.0,
                           {"reason": "heterogeneous problem"})
    n = problem.n_workers
    w_hat = state.w_hat[0]
    g_ref = grad_full(problem, w_hat)
    g_ref_sq = float(g_ref @ g_ref)
    w_up = cfg.up.omega
    d_samples = np.empty(trials)
    for m in range(trials):
        acc = np.zeros(problem.d)
        noise = 0.0
        for i in range(n):
            g = grad_stochastic(problem, i, w_hat, cfg.batch,
                                _check_stream(seed, _SUB_GRAD, i, m))
            c, _ = compress(cfg.up, g, _check_stream(seed, _SUB_UP, i, m))
            acc += c
            dgi = g - g_ref
            noise += float(dgi @ dgi)
        gt = acc / n
        a_m = float(gt @ gt)
        s_m = noise / n
        d_samples[m] = a_m - (1.0 + w_up / n) * g_ref_sq - (1.0 + w_up) / n * s_m
    stat = float(d_samples.mean())
    se = float(d_samples.std() / np.sqrt(trials))
    status = PASS if stat <= 3.0 * se else FAIL
    return CheckReport("grad_sto_lemma", status, stat, 0.0, se,
                       {"trials": trials, "grad_sq": g_ref_sq,
                        "omega_up": w_up})


# ---------------------------------------------------------------------------
# one-step contraction of the local-model variance


def _replay_downlink(problem, cfg, state, seed, trial):
    """Re-randomize the downlink that produced state.w_hat from
    (state.w, state.H_prev); returns (w_hat', H')."""
    n = state.n_workers
    from .algorithms import group_ids
    gids = group_ids(cfg, n)
    w_hat = np.empty_like(state.w_hat)
    H = np.empty_like(state.H)
    for g in np.unique(gids):
        members = np.flatnonzero(gids == g)
        ref = state.H_prev[members[0]]
        ohat, _ = compress(cfg.dwn, state.w - ref,
                           _check_stream(seed, _SUB_DWN, int(g), trial))
        w_hat[members] = ref + ohat
        H[members] = ref + cfg.alpha_dwn * ohat
    return w_hat, H


def check_contraction_thm3(problem: Problem, cfg: AlgoConfig,
                           states: AlgoState | list[AlgoState],
                           trials: int = 10_000, seed: int = 0) -> CheckReport:
    """One-step recursive control of Upsilon = mean_i ||w - H^i||^2:

      E[Ups_k] <= (1 - a/2) Ups_{k-1}
                  + 2 g^2 (1/a + w_up/N) E||grad F(w_hat)||^2
                  + 2 g^2 sigma_hat^2 (1 + w_up) / (N b)

    checked by replaying (previous downlink + next uplink) with fresh
    randomness, paired across the gradient term, 3*stderr slack.  Requires
    gamma <= 1/(8 w_dwn L) and alpha_dwn <= 1/(8 w_dwn)."""
    if isinstance(states, AlgoState):
        states = [states]
    w_dwn = cfg.dwn.omega
    a = cfg.alpha_dwn
    gamma = cfg.gamma.gamma
    if cfg.dwn_style != MODEL_DIFF:
        return CheckReport("contraction_thm3", NOT_APPLICABLE, 0.0, 0.0, 0.0,
                           {"reason": "no downlink memory in this style"})
    if w_dwn > 0 and (gamma > 1.0 / (8.0 * w_dwn * problem.L) or
                      a > 1.0 / (8.0 * w_dwn)):
        return CheckReport("contraction_thm3", NOT_APPLICABLE, 0.0, 0.0, 0.0,
                           {"reason": "outside step/memory-rate preconditions",
                            "gamma": gamma, "alpha_dwn": a})
    from .algorithms import group_ids
    n = problem.n_workers
    gids = group_ids(cfg, n)
    w_up = cfg.up.omega
    worst = -np.inf
    worst_se = 0.0
    per_state = []
    for idx, st in enumerate(states):
        ups_prev = upsilon(st)
        d_samples = np.empty(trials)
        noise_acc = 0.0
        for m in range(trials):
            trial = idx * trials + m
            w_hat, H = _replay_downlink(problem, cfg, st, seed, trial)
            grads = {int(g): grad_full(problem, w_hat[np.flatnonzero(gids == g)[0]])
                     for g in np.unique(gids)}
            acc = np.zeros(problem.d)
            gsq = 0.0
            for i in range(n):
                g = grad_stochastic(problem, i, w_hat[i], cfg.batch,
                                    _check_stream(seed, _SUB_GRAD, i, trial))
                delta = g - st.h[i]
                c, _ = compress(cfg.up, delta,
                                _check_stream(seed, _SUB_UP, i, trial))
                acc += c + st.h[i]
                gf = grads[int(gids[i])]
                gsq += float(gf @ gf)
                dgi = g - gf
                noise_acc += float(dgi @ dgi)
            ghat = acc / n
            w_next = st.w - gamma * ghat
            diff = w_next[None, :] - H
            ups = float(np.mean(np.einsum("ij,ij->i", diff, diff)))
            d_samples[m] = ups - 2.0 * gamma**2 * (1.0 / a + w_up / n) * (gsq / n)
        sigma_hat_over_b = noise_acc / (trials * n)
        rhs = ((1.0 - a / 2.0) * ups_prev
               + 2.0 * gamma**2 * (1.0 + w_up) / n * sigma_hat_over_b)
        stat = float(d_samples.mean()) - rhs
        se = float(d_samples.std() / np.sqrt(trials))
        per_state.append({"k": st.k, "margin": stat, "stderr": se})
        if stat - 3.0 * se > worst:
            worst = stat - 3.0 * se
            worst_se = se
    status = PASS if worst <= 0.0 else FAIL
    return CheckReport("contraction_thm3", status, worst, 0.0, worst_se,
                       {"states": per_state, "trials": trials,
                        "alpha_dwn": a, "gamma": gamma})


# ---------------------------------------------------------------------------
# unbiased perturbed gradients on quadratics


def check_quadratic_unbiased_grad(problem: Problem, cfg: AlgoConfig,
                                  state: AlgoState, trials: int = 10_000,
                                  seed: int = 0) -> CheckReport:
    """For quadratic objectives the gradient at the reconstructed local
    model is unbiased for the gradient at the global model: Monte-Carlo mean
    of grad F(w_hat) within 4*stderr per coordinate of grad F(w)."""
    if problem.family == "logistic":
        return CheckReport("quadratic_unbiased_grad", NOT_APPLICABLE,
                           0.0, 0.0, 0.0, {"reason": "quadratic-only property"})
    target = grad_full(problem, state.w)
    samples = np.empty((trials, problem.d))
    for m in range(trials):
        w_hat, _ = _replay_downlink(problem, cfg, state, seed, m)
        samples[m] = grad_full(problem, w_hat[0])
    mean = samples.mean(axis=0)
    stderr = samples.std(axis=0) / np.sqrt(trials)
    dev = np.abs(mean - target)
    z = float(np.max(dev / np.maximum(4.0 * stderr, 1e-300))) if dev.any() else 0.0
    status = PASS if z <= 1.0 else FAIL
    return CheckReport("quadratic_unbiased_grad", status, z, 1.0,
                       float(stderr.max()),
                       {"trials": trials, "max_abs_dev": float(dev.max())})


# ---------------------------------------------------------------------------
# recursion of the uplink-memory heterogeneity term


def check_xi_recursion(problem: Problem, cfg: AlgoConfig, state: AlgoState,
                       trials: int = 2_000, seed: int = 0) -> CheckReport:
    """One-step recursion of Xi = (1/N^2) sum_i ||h^i - grad F_i(w*)||^2:

      E[Xi_k] <= (1 - a_up) Xi_{k-1}
                 + (2 a_up L_coco / N) <grad F(w_hat), w_hat - w*>
                 + 2 a_up sigma_*^2 / (N b)

    with L_coco the cocoercivity constant of the oracles and sigma_*^2 the
    measured single-sample noise at the optimum (zero under full batch).
    Requires alpha_up (1 + w_up) <= 1."""
    a_up = cfg.alpha_up
    w_up = cfg.up.omega
    if a_up * (1.0 + w_up) > 1.0 + 1e-12:
        return CheckReport("xi_recursion", NOT_APPLICABLE, 0.0, 0.0, 0.0,
                           {"reason": "alpha_up (1 + omega_up) > 1"})
    n = problem.n_workers
    l_coco = cocoercivity_constant(problem, cfg.batch)
    w_hat = state.w_hat[0]
    g_ref = grad_full(problem, w_hat)
    inner = float(g_ref @ (w_hat - problem.w_star))
    xi_prev = xi(problem, state)
    xi_samples = np.empty(trials)
    for m in range(trials):
        h_next = state.h.copy()
        for i in range(n):
            g = grad_stochastic(problem, i, w_hat, cfg.batch,
                                _check_stream(seed, _SUB_GRAD, i, m))
            delta = g - state.h[i]
            c, _ = compress(cfg.up, delta, _check_stream(seed, _SUB_UP, i, m))
            h_next[i] = state.h[i] + a_up * c
        dh = h_next - problem.grads_at_opt
        xi_samples[m] = float(np.sum(dh * dh)) / n**2
    sigma_sq = 0.0 if cfg.batch.full_batch else problem.sigma_sq_at_opt / cfg.batch.b
    bound = ((1.0 - a_up) * xi_prev
             + 2.0 * a_up * l_coco / n * max(inner, 0.0)
             + 2.0 * a_up / n * sigma_sq)
    stat = float(xi_samples.mean())
    se = float(xi_samples.std() / np.sqrt(trials))
    status = PASS if stat <= bound + 3.0 * se else FAIL
    return CheckReport("xi_recursion", status, stat, bound, se,
                       {"trials": trials, "xi_prev": xi_prev,
                        "l_coco": l_coco, "inner": inner})


# ---------------------------------------------------------------------------
# full suite


def _canonical_states(problem, cfg, w0, seed, positions):
    states = run_trajectory(cfg, problem, w0, seed, max(positions))
    return [states[p] for p in positions]


def run_full_suite(trials: int = 10_000, seed: int = 0) -> list[CheckReport]:
    """The canonical small-problem checks gating experiment commands."""
    reports = []
    for kind, d, s, p in (("identity", 20, 1, 1.0), ("quantize", 301, 1, 1.0),
                          ("quantize", 64, 2, 1.0), ("sparsify", 69, 1, 0.1)):
        spec = make_spec(kind, d, s=s, p=p)
        reports.append(check_compressor_moments(spec, d, trials=max(trials, 10_000),
                                                seed=seed))

    lsr = synth_problem("lsr", d=8, n_per_worker=40, N=5, seed=3,
                        noise_std=0.3)
    batch = BatchSpec(b=5)
    q1 = make_spec("quantize", lsr.d, s=1)
    cfg = preset("MCM", q1, q1, constant_policy(0.5 / lsr.L), batch=batch)
    w0 = np.zeros(lsr.d)
    st = _canonical_states(lsr, cfg, w0, seed=11, positions=[4])[0]
    reports.append(check_grad_sto_lemma(lsr, cfg, st,
                                        trials=max(200, trials // 20), seed=seed))

    quad = synth_problem("quadratic", d=10, n_per_worker=20, N=5, seed=5)
    qq = make_spec("quantize", quad.d, s=1)
    gam = 1.0 / (8.0 * qq.omega * quad.L)
    cfgq = preset("MCM", qq, qq, constant_policy(gam),
                  batch=BatchSpec(full_batch=True),
                  alpha_dwn=1.0 / (8.0 * qq.omega))
    w0q = quad.w_star + _check_stream(seed, _SUB_VEC, 2, 0).standard_normal(quad.d)
    stsq = _canonical_states(quad, cfgq, w0q, seed=13, positions=[2, 6, 12])
    reports.append(check_contraction_thm3(quad, cfgq, stsq,
                                          trials=max(500, trials // 10),
                                          seed=seed))

    small = synth_problem("lsr", d=5, n_per_worker=20, N=3, seed=9)
    qs = make_spec("quantize", small.d, s=1)
    cfgs = preset("MCM", qs, qs, constant_policy(0.2 / small.L),
                  batch=BatchSpec(full_batch=True))
    sts = _canonical_states(small, cfgs, np.ones(small.d), seed=17,
                            positions=[3])[0]
    reports.append(check_quadratic_unbiased_grad(small, cfgs, sts,
                                                 trials=max(1000, trials // 10),
                                                 seed=seed))

    het = synth_problem("lsr", d=6, n_per_worker=30, N=5,
                        hetero="shifted_means", delta=0.4, seed=21)
    qh = make_spec("quantize", het.d, s=1)
    cfgh = preset("MCM", qh, qh, constant_policy(0.2 / het.L),
                  batch=BatchSpec(full_batch=True))
    sth = _canonical_states(het, cfgh, np.zeros(het.d), seed=23,
                            positions=[5])[0]
    reports.append(check_xi_recursion(het, cfgh, sth,
                                      trials=max(200, trials // 20), seed=seed))
    return reports


def suite_passed(reports: list[CheckReport]) -> bool:
    return all(r.status != FAIL for r in reports)
