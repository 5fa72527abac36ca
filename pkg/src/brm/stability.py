"""Stability experiments for SGDA on the Bellman residual saddle problem.

Covers replace-one neighbors, shared-index coupled runs, the empirical
on-average argument stability, constants estimation, the stability bound
evaluators, and generalization / excess-risk estimators against the true MDP.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import rng as rngmod
from .errors import (ConvergenceError, CoverageError, DualCoverageError, EstimationError, PreconditionError, ScheduleError,
                     UnboundedError)
from .mdp import TabularMdp, Transition, TransitionDataset, draw_transition, population_dataset, sampling_law
from .objective import (
    Columns,
    Parameterization,
    ParamPoint,
    columns,
    dual_argmax,
    dual_curvature,
    full_batch,
    phi_eval,
    sample_gradients,
)
from .sgda import SgdaRunConfig, default_init, draw_indices, run_stacked


# ----------------------------------------------------------------------------
# deterministic saddle solver

class SaddleSolution(NamedTuple):
    x_star: np.ndarray
    v_star: np.ndarray
    phi_star: float
    grad_norm: float
    iterations: int


def minimize(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0: np.ndarray, tol: float,
             max_iter: int = 200_000, lower: float = -1e12) -> tuple[np.ndarray, float, np.ndarray, int]:
    """Gradient descent with Barzilai-Borwein trial steps and Armijo backtracking.

    Returns ``(x, f(x), grad f(x), iterations)`` once the gradient norm is at most
    ``tol``. Raises :class:`ConvergenceError` at the iteration cap or when the
    objective drops below ``lower`` (unbounded below).
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    step = 1.0
    for it in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return x, f, g, it
        if f < lower:
            raise UnboundedError("objective appears unbounded below", gnorm)
        gg = gnorm * gnorm
        s = step
        while True:
            x_new = x - s * g
            f_new, g_new = fun(x_new)
            if f_new <= f - 1e-4 * s * gg:
                break
            # near machine precision the Armijo test is all rounding; fall back to gradient decrease
            if s < 1e-14 or (abs(f_new - f) <= 1e-15 * max(1.0, abs(f)) and np.linalg.norm(g_new) < gnorm):
                break
            s *= 0.5
        dx = x_new - x
        dg = g_new - g
        curv = float(dx @ dg)
        step = float(dx @ dx) / curv if curv > 0 else 2.0 * s
        step = min(max(step, 1e-10), 1e10)
        x, f, g = x_new, f_new, g_new
    raise ConvergenceError(f"no convergence in {max_iter} iterations", float(np.linalg.norm(g)))


def solve_saddle(param: Parameterization, data: TransitionDataset, tol: float = 1e-10,
                 init_w: np.ndarray | None = None, max_iter: int = 200_000) -> SaddleSolution:
    """Minimize Phi_D by full-batch descent; the dual comes from the closed form."""
    if not tol > 0:
        raise PreconditionError("tol must be positive")
    x0 = np.zeros(param.dim_primal) if init_w is None else np.asarray(init_w, dtype=float)

    def fun(w):
        ev = phi_eval(param, w, data)
        return ev.value, ev.grad_w

    x, f, g, it = minimize(fun, x0, tol, max_iter)
    return SaddleSolution(x, dual_argmax(param, x, data), float(f), float(np.linalg.norm(g)), it)


def min_over_primal(param: Parameterization, v: np.ndarray, data: TransitionDataset, w0: np.ndarray,
                    tol: float = 1e-9, max_iter: int = 50_000) -> tuple[np.ndarray, float]:
    """Local minimum of F_D(., v) reached by monotone descent from ``w0``."""

    def fun(w):
        ev = full_batch(param, ParamPoint(w, v), data)
        return ev.value, ev.grad_w

    x, f, _, _ = minimize(fun, w0, tol, max_iter)
    return x, float(f)


# ----------------------------------------------------------------------------
# neighbors and coupled runs

class NeighborPair(NamedTuple):
    base: TransitionDataset
    replaced_index: int
    replacement: Transition
    neighbor: TransitionDataset


def make_neighbor(mdp: TabularMdp, data: TransitionDataset, i: int, seed: int,
                  visited: np.ndarray | None = None, replacement: Transition | None = None,
                  max_tries: int = 10_000) -> NeighborPair:
    """Replace sample ``i`` by a fresh draw from the generation law.

    The draw is repeated until its (s, a) pair is one of the ``visited`` pairs
    (default: the pairs present in ``data``), so the dual dimension is unchanged.
    """
    if not 0 <= i < len(data):
        raise IndexError(f"index {i} out of range for dataset of size {len(data)}")
    if visited is None:
        visited = data.pair_counts(mdp.n_states, mdp.n_actions) > 0
    if replacement is None:
        gen = rngmod.stream(seed, rngmod.NEIGHBOR + i)
        for _ in range(max_tries):
            z = draw_transition(mdp, data.behavior_policy, data.mode, gen)
            if visited[z.s, z.a]:
                replacement = z
                break
        else:
            raise CoverageError(f"no replacement with a visited pair after {max_tries} draws")
    return NeighborPair(data, i, replacement, data.replace(i, replacement))


def _stack_columns(param: Parameterization, datasets: list[TransitionDataset]) -> Columns:
    per = [columns(param, d) for d in datasets]
    return Columns(*(np.stack(c) for c in zip(*per)))


def coupled_stability(param: Parameterization, pair: NeighborPair, cfg: SgdaRunConfig,
                      init: ParamPoint, index_override: np.ndarray | None = None) -> tuple[float, float]:
    """Final-iterate distances of two SGDA runs sharing one index sequence."""
    idx = draw_indices(cfg, len(pair.base)) if index_override is None else np.asarray(index_override)
    cols = _stack_columns(param, [pair.base, pair.neighbor])
    W0 = np.stack([init.w, init.w])
    V0 = np.stack([init.v, init.v])
    W, V, _ = run_stacked(param, cols, idx, cfg.etas(), W0, V0, clip_radius=cfg.clip_radius,
                          tags=["base", f"neighbor[{pair.replaced_index}]"])
    return float(np.linalg.norm(W[0] - W[1])), float(np.linalg.norm(V[0] - V[1]))


def replicate_neighbors(mdp: TabularMdp, param: Parameterization, data: TransitionDataset, rep: int, seed: int,
                        n_positions: int) -> list[NeighborPair]:
    """Neighbors used by replicate ``rep``: all positions, or a uniform subsample of them."""
    n = len(data)
    if n_positions >= n:
        ii = np.arange(n)
    else:
        ii = np.sort(rngmod.stream(seed, rngmod.SUBSAMPLE + rep).choice(n, n_positions, replace=False))
    visited = param.dual_index >= 0
    rep_seed = seed * 1_000_003 + rep
    return [make_neighbor(mdp, data, int(i), rep_seed, visited) for i in ii]


@dataclass
class StabilityReport:
    n: int
    T: int
    replicates: int
    eps_T_mean: float
    eps_T_stderr: float
    bound_value: float = math.nan
    per_i_distances: dict = field(default_factory=dict)
    gen_gap_primal: float = math.nan
    gen_gap_pd: float = math.nan
    # raw per-(replicate, i) values; not serialized
    distances: np.ndarray | None = field(default=None, repr=False)
    hit: np.ndarray | None = field(default=None, repr=False)
    indices: np.ndarray | None = field(default=None, repr=False)
    base_final: ParamPoint | None = field(default=None, repr=False)  # replicate 0, unperturbed data

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items()}
        for key in ("distances", "hit", "indices", "base_final"):
            out.pop(key)
        return out


def estimate_eps_T(mdp: TabularMdp, param: Parameterization, data: TransitionDataset, cfg: SgdaRunConfig,
                   init: ParamPoint | None = None, replicates: int = 20, i_subsample: int | None = None,
                   seed: int = 0, max_rows: int = 256) -> StabilityReport:
    """Empirical on-average argument stability eps_T.

    Replicate ``r`` uses index stream ``cfg.index_stream + r``, a fresh uniform
    subsample of positions ``i`` and fresh replacement draws. All neighbor runs
    of a replicate share that replicate's index sequence with the base run.
    """
    if replicates < 1:
        raise PreconditionError("replicates must be at least 1")
    if init is None:
        init = default_init(param, data)
    n = len(data)
    n_i = n if i_subsample is None else min(int(i_subsample), n)
    etas = cfg.etas()

    plans = []
    for rep in range(replicates):
        pairs = replicate_neighbors(mdp, param, data, rep, seed, n_i)
        ii = np.array([p.replaced_index for p in pairs], dtype=np.int64)
        idx = draw_indices(cfg, n, stream_id=cfg.index_stream + rep)
        plans.append((ii, pairs, idx))

    dist = np.zeros((replicates, n_i))
    hit = np.zeros((replicates, n_i), dtype=bool)
    per_group = max(1, max_rows // (n_i + 1))
    base_cols = columns(param, data)
    for g0 in range(0, replicates, per_group):
        group = plans[g0:g0 + per_group]
        sets, idx_rows = [], []
        for ii, pairs, idx in group:
            sets.append(base_cols)
            sets.extend(columns(param, p.neighbor) for p in pairs)
            idx_rows.extend([idx] * (len(pairs) + 1))
        cols = Columns(*(np.stack(c) for c in zip(*sets)))
        K = len(sets)
        idx_all = np.stack(idx_rows, axis=1) if cfg.T else np.zeros((0, K, cfg.batch_size), dtype=np.int64)
        W0 = np.repeat(init.w[None], K, axis=0)
        V0 = np.repeat(init.v[None], K, axis=0)
        W, V, _ = run_stacked(param, cols, idx_all, etas, W0, V0, clip_radius=cfg.clip_radius)
        row = 0
        for j, (ii, pairs, idx) in enumerate(group):
            b = row
            if g0 + j == 0:
                base_final = ParamPoint(W[b].copy(), V[b].copy())
            for q in range(len(pairs)):
                row += 1
                dist[g0 + j, q] = np.linalg.norm(W[b] - W[row]) + np.linalg.norm(V[b] - V[row])
                hit[g0 + j, q] = bool(np.any(idx == ii[q]))
            row += 1

    rep_means = dist.mean(axis=1)
    stderr = float(rep_means.std(ddof=1) / math.sqrt(replicates)) if replicates > 1 else math.nan
    summary = {
        "min": float(dist.min()), "median": float(np.median(dist)), "max": float(dist.max()),
        "n_positions": int(n_i), "zero_hit_runs": int((~hit).sum()),
        "zero_hit_max_distance": float(dist[~hit].max()) if (~hit).any() else 0.0,
    }
    return StabilityReport(n, cfg.T, replicates, float(dist.mean()), stderr, per_i_distances=summary,
                           distances=dist, hit=hit, indices=np.array([p[0] for p in plans]),
                           base_final=base_final)


def loglog_slope(ns, eps) -> float:
    """Least-squares slope of log eps against log n."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(eps, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


# ----------------------------------------------------------------------------
# potential and constants

def lyapunov_potential(param: Parameterization, p: ParamPoint, data: TransitionDataset, alpha: float,
                       saddle: SaddleSolution) -> float:
    """(Phi_D(w) - Phi_D*) + alpha * (Phi_D(w) - F_D(w, v))."""
    phi = phi_eval(param, p.w, data).value
    f = full_batch(param, p, data).value
    return (phi - saddle.phi_star) + alpha * (phi - f)


@dataclass
class ConstantsEstimate:
    L_hat: float
    rho_hat: float
    G_hat: float
    mu_pl_hat: float
    mu_qg_hat: float
    alpha: float
    c_hat: float
    method_notes: str = ""
    radius: float = math.nan

    def to_dict(self) -> dict:
        return asdict(self)


def _joint_grad(param, z, data):
    d = param.dim_primal
    return full_batch(param, ParamPoint(z[:d], z[d:]), data).flat_grad()


def hessian_norm(param: Parameterization, z: np.ndarray, data: TransitionDataset, h: float = 1e-5) -> float:
    """Spectral norm of the joint Hessian of F_D at ``z`` by central differences."""
    dim = len(z)
    H = np.empty((dim, dim))
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = h
        H[:, j] = (_joint_grad(param, z + e, data) - _joint_grad(param, z - e, data)) / (2 * h)
    H = 0.5 * (H + H.T)
    return float(np.max(np.abs(np.linalg.eigvalsh(H))))


def _ball(gen, center, radius, count):
    dirs = gen.standard_normal((count, len(center)))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = radius * gen.random(count) ** (1.0 / len(center))
    return center + dirs * radii[:, None]


def estimate_constants(param: Parameterization, data: TransitionDataset, probe_budget: int = 200,
                       seed: int = 0, radius: float | None = None, saddle: SaddleSolution | None = None,
                       support: TransitionDataset | None = None, hessian_probes: int | None = None
                       ) -> ConstantsEstimate:
    """Probe-based estimates of L, rho, G, mu_PL and mu_QG on a ball around the saddle.

    rho is exact (the dual Hessian is diagonal). L is the largest gradient
    difference quotient over random probe pairs, together with the largest
    Hessian norm seen at probe points (the zero-separation limit of the same
    quotient). G takes per-sample gradients over ``support`` (default: the
    samples of ``data``) at every probe. The default radius is 5% beyond the
    distance from the default initialization to the saddle.
    """
    if probe_budget < 100:
        raise PreconditionError("probe_budget must be at least 100")
    if saddle is None:
        saddle = solve_saddle(param, data)
    center = np.concatenate([saddle.x_star, saddle.v_star])
    if radius is None:
        init = default_init(param, data)
        radius = max(1.05 * float(np.linalg.norm(init.flat() - center)), 0.1)
    gen = rngmod.stream(seed, rngmod.PROBE)
    d = param.dim_primal
    probes = _ball(gen, center, radius, probe_budget)
    partners = _ball(gen, center, radius, probe_budget)
    grads = np.array([_joint_grad(param, z, data) for z in probes])
    grads2 = np.array([_joint_grad(param, z, data) for z in partners])
    with np.errstate(invalid="ignore", divide="ignore"):
        quot = np.linalg.norm(grads - grads2, axis=1) / np.linalg.norm(probes - partners, axis=1)
    n_h = probe_budget if hessian_probes is None else hessian_probes
    hess = [hessian_norm(param, z, data) for z in probes[:n_h]]
    hess.append(hessian_norm(param, center, data))
    L_hat = float(max(quot.max(), max(hess)))

    rho_hat = float(dual_curvature(param, data).min()) if param.dim_dual else 0.0

    sup = data if support is None else support
    G_hat = 0.0
    for z in np.vstack([center[None], probes]):
        gw, gv = sample_gradients(param, ParamPoint(z[:d], z[d:]), sup)
        G_hat = max(G_hat, float(np.linalg.norm(gw, axis=1).max()), float(np.abs(gv).max()))

    pl, qg = [], []
    for z in probes:
        w = z[:d]
        ev = phi_eval(param, w, data)
        gap = ev.value - saddle.phi_star
        if gap < 1e-14:
            continue
        pl.append(0.5 * float(ev.grad_w @ ev.grad_w) / gap)
        qg.append(2.0 * gap / float(np.sum((w - saddle.x_star) ** 2)))
    if not pl:
        raise EstimationError("every probe was degenerate (Phi gap below 1e-14)")
    mu_pl, mu_qg = float(min(pl)), float(min(qg))
    alpha = 4.0 * L_hat ** 2 / rho_hat ** 2 if rho_hat > 0 else math.inf
    notes = (f"probe ball radius {radius:.6g} around the empirical saddle; {probe_budget} probes, "
             f"{len(pl)} usable for PL/QG; L from pair quotients and {len(hess)} FD Hessians; "
             f"G over {'support enumeration' if support is not None else 'dataset samples'}")
    if rho_hat == 0:
        notes += "; degenerate dual (rho = 0)"
    return ConstantsEstimate(L_hat, rho_hat, G_hat, mu_pl, mu_qg, alpha, min(mu_pl / 2, rho_hat / 2),
                             notes, float(radius))


# ----------------------------------------------------------------------------
# bound evaluators

STATEMENT = "statement"
PROOF = "proof"


def c_dist(k: ConstantsEstimate) -> float:
    L, rho = k.L_hat, k.rho_hat
    return math.sqrt((1 + L / rho) ** 2 * 2.0 / k.mu_qg_hat + 2.0 / (k.alpha * rho))


def c_hit(k: ConstantsEstimate, variant: str = STATEMENT, b1: float = 8.0) -> float:
    """Hit constant: 2 B1 G / (2L) as stated, or (2 B1 G + 2G(1 + L/rho)) / (2L) from the proof."""
    L, rho, G = k.L_hat, k.rho_hat, k.G_hat
    if variant == STATEMENT:
        return 2.0 * b1 * G / (2.0 * L)
    if variant == PROOF:
        return (2.0 * b1 * G + 2.0 * G * (1 + L / rho)) / (2.0 * L)
    raise ValueError(f"unknown C_hit variant {variant!r}")


def _decay(k: ConstantsEstimate, kernel: str) -> float:
    c = min(k.mu_pl_hat / 2, k.rho_hat / 2)
    if kernel == STATEMENT:
        return 0.75 * c
    if kernel == PROOF:
        return 0.5 * c
    raise ValueError(f"unknown kernel {kernel!r}")


def _variance_scale(k: ConstantsEstimate, c_var: float) -> float:
    L, rho = k.L_hat, k.rho_hat
    return c_var * (L * (1 + L / rho) + k.alpha * L ** 2 / rho) * k.G_hat ** 2


def sample_terms(k: ConstantsEstimate, n: int) -> float:
    """The O(1/n) part without C_hit: (2G/n)((1 + L/rho)^2 / sqrt(mu_PL mu_QG) + 1/rho)."""
    L, rho = k.L_hat, k.rho_hat
    return 2.0 * k.G_hat / n * ((1 + L / rho) ** 2 / math.sqrt(k.mu_pl_hat * k.mu_qg_hat) + 1.0 / rho)


def kernel_sums(etas: np.ndarray, decay: float) -> tuple[float, float]:
    """exp(-decay * sum eta) and sum_t eta_t^2 exp(-decay * sum_{s>t} eta_s)."""
    total = float(np.sum(etas))
    tail = np.concatenate([np.cumsum(etas[::-1])[::-1][1:], [0.0]]) if len(etas) else np.zeros(0)
    return math.exp(-decay * total), float(np.sum(etas ** 2 * np.exp(-decay * tail)))


def theorem1_bound(k: ConstantsEstimate, cfg: SgdaRunConfig, n: int, psi0_max: float, T: int | None = None,
                   c_var: float = 1.0, hit_variant: str = STATEMENT, kernel: str = STATEMENT) -> float:
    """Stability bound with the exponential-kernel sums evaluated numerically."""
    T = cfg.T if T is None else T
    etas = cfg.replace(T=T).etas()
    init_decay, var_sum = kernel_sums(etas, _decay(k, kernel))
    opt = init_decay * psi0_max + _variance_scale(k, c_var) * var_sum
    return 2.0 * c_dist(k) * math.sqrt(opt) + sample_terms(k, n) + c_hit(k, hit_variant) / n


def corollary_terms(k: ConstantsEstimate, cfg: SgdaRunConfig, T: int, psi0_max: float,
                    c_var: float = 1.0, kernel: str = STATEMENT) -> tuple[float, float]:
    """Closed-form (optimization bias, stochastic variance) terms under the harmonic schedule."""
    kappa = _decay(k, kernel)
    denom = 1.0 - kappa * cfg.c1
    if denom <= 0:
        raise ScheduleError(f"1 - kappa*c1 = {denom:.4g} <= 0; the harmonic closed form does not apply")
    bias = (cfg.c2 / (cfg.c2 + T)) ** (kappa * cfg.c1) * psi0_max
    var = _variance_scale(k, c_var) * cfg.c1 ** 2 / (denom * (cfg.c2 + T))
    return bias, var


def corollary_bound(k: ConstantsEstimate, cfg: SgdaRunConfig, n: int, T: int | None, psi0_max: float,
                    c_var: float = 1.0, hit_variant: str = STATEMENT, kernel: str = STATEMENT) -> float:
    T = cfg.T if T is None else T
    bias, var = corollary_terms(k, cfg, T, psi0_max, c_var, kernel)
    return 2.0 * c_dist(k) * math.sqrt(bias + var) + sample_terms(k, n) + c_hit(k, hit_variant) / n


def psi0_max(param: Parameterization, init: ParamPoint, datasets: list[TransitionDataset], alpha: float,
             tol: float = 1e-10) -> float:
    """Largest initial potential over the given datasets (base plus neighbors)."""
    best = 0.0
    for d in datasets:
        sol = solve_saddle(param, d, tol)
        best = max(best, lyapunov_potential(param, init, d, alpha, sol))
    return best


# ----------------------------------------------------------------------------
# generalization and excess risk

def population_param(param: Parameterization, pop: TransitionDataset) -> Parameterization:
    return param.with_dual_from(pop)


def _map_dual(param: Parameterization, pop_param: Parameterization, v: np.ndarray) -> np.ndarray:
    out = np.empty(pop_param.dim_dual)
    for k, (s, a) in enumerate(pop_param.dual_pairs()):
        j = int(param.dual_index[s, a])
        if j < 0:
            raise DualCoverageError(f"population pair ({s}, {a}) has no empirical dual coordinate")
        out[k] = v[j]
    return out


def pd_risk(param: Parameterization, p: ParamPoint, data: TransitionDataset, tol: float = 1e-9) -> float:
    """Weak primal-dual risk max_v' F(w, v') - min_w' F(w', v); the min is a local one reached from w.

    Returns +inf when F(., v) is unbounded below along the descent path.
    """
    upper = phi_eval(param, p.w, data).value
    try:
        _, lower = min_over_primal(param, p.v, data, p.w, tol)
    except UnboundedError:
        return math.inf
    return upper - lower


def generalization_gap(mdp: TabularMdp, param: Parameterization, data: TransitionDataset, final: ParamPoint,
                       weight: np.ndarray | None = None, with_pd: bool = True) -> tuple[float, float]:
    """(R(w) - R_n(w), Delta_PD(w, v) - Delta_PD_n(w, v)) at the SGDA output.

    R uses the true kernel with weight ``weight`` (default: the generation law of
    ``data``); R_n is Phi_D. The PD gap is NaN when an inner minimization over w
    fails (F(., v) need not be bounded below).
    """
    if weight is None:
        weight = sampling_law(mdp, data.behavior_policy, data.mode)
    pop = population_dataset(mdp, weight, data.behavior_policy, data.mode)
    pparam = population_param(param, pop)
    primal = phi_eval(pparam, final.w, pop).value - phi_eval(param, final.w, data).value
    pd = math.nan
    if with_pd:
        try:
            v_pop = _map_dual(param, pparam, final.v)
            a, b = pd_risk(pparam, ParamPoint(final.w, v_pop), pop), pd_risk(param, final, data)
            pd = a - b if math.isfinite(a) and math.isfinite(b) else math.nan
        except (ConvergenceError, DualCoverageError):
            pd = math.nan
    return float(primal), float(pd)


def population_risk(mdp: TabularMdp, param: Parameterization, w: np.ndarray, weight: np.ndarray) -> float:
    """R(w) = max_v F(w, v) under the true kernel."""
    pop = population_dataset(mdp, weight)
    return phi_eval(population_param(param, pop), w, pop).value


def excess_risk(mdp: TabularMdp, param: Parameterization, final: ParamPoint, weight: np.ndarray,
                theta_star: SaddleSolution | None = None, tol: float = 1e-10) -> float:
    """R(w_T) - R(theta*), theta* the population minimizer."""
    pop = population_dataset(mdp, weight)
    pparam = population_param(param, pop)
    if theta_star is None:
        theta_star = solve_saddle(pparam, pop, tol)
    return phi_eval(pparam, final.w, pop).value - theta_star.phi_star
