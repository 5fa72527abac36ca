"""Executable checks of the auxiliary inequalities behind the stability bound.

Each checker draws random probes, evaluates both sides with the estimated
constants, and returns a :class:`LemmaResult` listing every violation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .mdp import TabularMdp, TransitionDataset, uniform_policy
from .objective import Parameterization, ParamPoint, dual_argmax, full_batch, gamma_value, phi_eval
from .stability import (
    ConstantsEstimate,
    SaddleSolution,
    _ball,
    c_dist,
    estimate_constants,
    lyapunov_potential,
    make_neighbor,
    solve_saddle,
)

REL_TOL = 1e-9
ABS_TOL = 1e-12


@dataclass
class Failure:
    lemma: str
    inequality: str
    probe: list
    lhs: float
    rhs: float


@dataclass
class LemmaResult:
    lemma: str
    n_probes: int
    max_ratio: float = 0.0  # largest lhs / rhs seen
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def _holds(res: LemmaResult, name: str, probe, lhs: float, rhs: float) -> None:
    if rhs > 0:
        res.max_ratio = max(res.max_ratio, lhs / rhs)
    if not lhs <= rhs * (1 + REL_TOL) + ABS_TOL:
        res.failures.append(Failure(res.lemma, name, np.ravel(probe).tolist(), float(lhs), float(rhs)))


def check_mismatch(param, data, k: ConstantsEstimate, saddle: SaddleSolution, probes: int, gen) -> LemmaResult:
    """||grad_w F(w,v) - grad Phi(w)|| <= L ||v - v*(w)|| and ||v - v*(w)||^2 <= (2/rho) Gamma(w,v)."""
    res = LemmaResult("mismatch", probes)
    d = param.dim_primal
    center = np.concatenate([saddle.x_star, saddle.v_star])
    for z in _ball(gen, center, k.radius, probes):
        w, v = z[:d], z[d:]
        vs = dual_argmax(param, w, data)
        gap_v = float(np.linalg.norm(v - vs))
        gw = full_batch(param, ParamPoint(w, v), data).grad_w
        gphi = phi_eval(param, w, data).grad_w
        _holds(res, "gradient mismatch", z, float(np.linalg.norm(gw - gphi)), k.L_hat * gap_v)
        _holds(res, "dual distance", z, gap_v ** 2, 2.0 / k.rho_hat * gamma_value(param, ParamPoint(w, v), data))
    return res


def check_value_smoothness(param, data, k: ConstantsEstimate, saddle: SaddleSolution, probes: int, gen) -> LemmaResult:
    """v*(.) is (L/rho)-Lipschitz and grad Phi is L(1 + L/rho)-Lipschitz."""
    res = LemmaResult("value_smoothness", probes)
    ws = _ball(gen, saddle.x_star, k.radius, probes)
    us = _ball(gen, saddle.x_star, k.radius, probes)
    kappa = k.L_hat / k.rho_hat
    for w, u in zip(ws, us):
        dist = float(np.linalg.norm(w - u))
        probe = np.concatenate([w, u])
        dv = np.linalg.norm(dual_argmax(param, w, data) - dual_argmax(param, u, data))
        _holds(res, "dual map Lipschitz", probe, float(dv), kappa * dist)
        dg = np.linalg.norm(phi_eval(param, w, data).grad_w - phi_eval(param, u, data).grad_w)
        _holds(res, "Phi gradient Lipschitz", probe, float(dg), k.L_hat * (1 + kappa) * dist)
    return res


def check_potential_distance(param, data, k: ConstantsEstimate, saddle: SaddleSolution, probes: int, gen
                             ) -> LemmaResult:
    """||w - x*|| + ||v - v*|| <= C_dist sqrt(Psi(w, v)); the saddle itself is always probed."""
    res = LemmaResult("potential_distance", probes)
    d = param.dim_primal
    center = np.concatenate([saddle.x_star, saddle.v_star])
    cd = c_dist(k)
    pts = np.vstack([center[None], _ball(gen, center, k.radius, probes - 1)])
    for z in pts:
        p = ParamPoint(z[:d], z[d:])
        lhs = float(np.linalg.norm(p.w - saddle.x_star) + np.linalg.norm(p.v - saddle.v_star))
        psi = max(lyapunov_potential(param, p, data, k.alpha, saddle), 0.0)
        _holds(res, "potential to distance", z, lhs, cd * math.sqrt(psi))
    return res


def sensitivity_bound(k: ConstantsEstimate, n: int) -> float:
    L, rho = k.L_hat, k.rho_hat
    return 2.0 * k.G_hat / n * ((1 + L / rho) ** 2 / math.sqrt(k.mu_pl_hat * k.mu_qg_hat) + 1.0 / rho)


def check_saddle_sensitivity(mdp: TabularMdp, param, data, k: ConstantsEstimate, saddle: SaddleSolution,
                             probes: int, seed: int, tol: float = 1e-11) -> LemmaResult:
    """Saddle shift across replace-one neighbors stays below the sensitivity bound."""
    res = LemmaResult("saddle_sensitivity", probes)
    n = len(data)
    rhs = sensitivity_bound(k, n)
    positions = rngmod.stream(seed, rngmod.SUBSAMPLE).integers(0, n, probes)
    for j, i in enumerate(positions):
        pair = make_neighbor(mdp, data, int(i), seed * 7919 + j, visited=param.dual_index >= 0)
        other = solve_saddle(param, pair.neighbor, tol, init_w=saddle.x_star)
        lhs = float(np.linalg.norm(saddle.x_star - other.x_star) + np.linalg.norm(saddle.v_star - other.v_star))
        _holds(res, "saddle shift", [int(i), *pair.replacement], lhs, rhs)
    return res


def check_one_step_ascent(probes: int, gen) -> tuple[LemmaResult, float]:
    """Scalar quadratic g(v) = -(rho/2)(v - v*)^2 with L = rho.

    Returns the result and the largest deviation between (1 - rho eta)^2 and
    1 - 2 rho eta + rho^2 eta^2.
    """
    res = LemmaResult("one_step_ascent", probes)
    worst = 0.0
    for _ in range(probes):
        rho = float(gen.uniform(0.01, 10.0))
        eta = float(gen.uniform(0.0, 1.0 / rho))
        vstar, v = gen.normal(size=2)
        theta = 0.5 * rho * (v - vstar) ** 2
        v_next = v - eta * rho * (v - vstar)
        theta_next = 0.5 * rho * (v_next - vstar) ** 2
        factor = (1 - rho * eta) ** 2
        expanded = 1 - 2 * rho * eta + rho * rho * eta * eta
        worst = max(worst, abs(factor - expanded))
        probe = [rho, eta, v, vstar]
        _holds(res, "contraction identity", probe, abs(theta_next - factor * theta), 1e-12 * max(theta, 1.0))
        _holds(res, "one-step ascent", probe, theta_next, expanded * theta)
    return res, worst


def lemma_checkers(mdp: TabularMdp, param: Parameterization, data: TransitionDataset, probe_budget: int = 100,
                   seed: int = 0, consts: ConstantsEstimate | None = None,
                   saddle: SaddleSolution | None = None, sensitivity_probes: int | None = None) -> dict:
    """Run all five checkers; returns ``{lemma: LemmaResult}`` plus the equality gap of the ascent check.

    Constants default to :func:`estimate_constants` with the per-sample gradient
    bound taken over every (s, a, s') transition with a visited pair, so that
    replacement samples are covered.
    """
    if saddle is None:
        saddle = solve_saddle(param, data, 1e-11)
    if consts is None:
        consts = estimate_constants(param, data, max(probe_budget, 100), seed, saddle=saddle,
                                    support=support_dataset(mdp, param))
    gen = rngmod.stream(seed, rngmod.PROBE + 1)
    out = {
        "mismatch": check_mismatch(param, data, consts, saddle, probe_budget, gen),
        "value_smoothness": check_value_smoothness(param, data, consts, saddle, probe_budget, gen),
        "potential_distance": check_potential_distance(param, data, consts, saddle, probe_budget, gen),
        "saddle_sensitivity": check_saddle_sensitivity(mdp, param, data, consts, saddle,
                                        sensitivity_probes or probe_budget, seed),
    }
    b7, worst = check_one_step_ascent(probe_budget, gen)
    out["one_step_ascent"] = b7
    out["ascent_equality_gap"] = worst
    return out


def support_dataset(mdp: TabularMdp, param: Parameterization) -> TransitionDataset:
    """Every (s, a, s') with P > 0 whose (s, a) has a dual coordinate."""
    s, a, sn = np.nonzero((mdp.transition > 0) & (param.dual_index >= 0)[:, :, None])
    return TransitionDataset(s, a, mdp.reward[s, a], sn, uniform_policy(mdp.n_states, mdp.n_actions))
