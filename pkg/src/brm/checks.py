"""Self-validating identity checks run by ``brm verify``.

Each check returns a dict with the worst observed error, its tolerance and a
``passed`` flag. Random points come from the PROBE stream of the given seed.
"""
from __future__ import annotations

import numpy as np

from . import rng as rngmod
from .mdp import TabularMdp, TransitionDataset, population_dataset, sampling_law, soft_bellman_apply
from .numerics import logsumexp
from .objective import (
    Parameterization,
    ParamPoint,
    biconjugate_check,
    msbe_exact,
    mstde_exact,
    next_value_variance,
    per_sample_objective,
    phi_eval,
)


def _result(name, worst, tol, **extra) -> dict:
    return {"check": name, "max_error": float(worst), "tol": tol, "passed": bool(worst <= tol), **extra}


def random_primal(param: Parameterization, gen, count: int, scale: float = 2.0) -> np.ndarray:
    return gen.normal(scale=scale, size=(count, param.dim_primal))


def check_unbiasedness(mdp: TabularMdp, param: Parameterization, ws, tol: float = 1e-12) -> dict:
    """Exact expectation of the TD error over s' equals the Bellman error at every (s, a)."""
    worst = 0.0
    for w in ws:
        q = param.q(w)
        v = logsumexp(q, axis=-1)
        delta = mdp.reward[:, :, None] + mdp.discount * v[None, None, :] - q[:, :, None]
        expected = np.sum(mdp.transition * delta, axis=-1)
        worst = max(worst, float(np.max(np.abs(expected - (soft_bellman_apply(mdp, q) - q)))))
    return _result("td_unbiasedness", worst, tol)


def check_double_sampling(mdp: TabularMdp, param: Parameterization, ws, weight, tol: float = 1e-10) -> dict:
    """MSBE = MSTDE - beta^2 E[Var V(s')]; also reports the largest bias term seen."""
    worst, bias = 0.0, 0.0
    for w in ws:
        var = next_value_variance(mdp, param, w, weight)
        lhs = msbe_exact(mdp, param, w, weight)
        rhs = mstde_exact(mdp, param, w, weight) - mdp.discount ** 2 * var
        worst = max(worst, abs(lhs - rhs))
        bias = max(bias, mdp.discount ** 2 * var)
    return _result("double_sampling_identity", worst, tol, max_bias_term=float(bias))


def check_biconjugate(mdp: TabularMdp, param: Parameterization, ws, weight, tol: float = 1e-10) -> dict:
    """Population minimax objective at the inner optimum equals the MSBE."""
    pop = population_dataset(mdp, weight)
    pparam = param.with_dual_from(pop)
    worst = 0.0
    for w in ws:
        worst = max(worst, abs(phi_eval(pparam, w, pop).value - msbe_exact(mdp, param, w, weight)))
    for b in (0.0, 3.0, -1.7):
        worst = max(worst, abs(biconjugate_check(b) - b * b))
    return _result("biconjugate_equivalence", worst, tol)


def check_gradients(param: Parameterization, data: TransitionDataset, gen, probes: int = 100,
                    h: float = 1e-5, tol: float = 1e-6) -> dict:
    """Analytic per-sample gradients against central differences (relative error)."""
    worst = 0.0
    dim = param.dim_primal + param.dim_dual
    d = param.dim_primal
    for _ in range(probes):
        z = data[int(gen.integers(len(data)))]
        x = gen.normal(size=dim)
        ev = per_sample_objective(param, ParamPoint(x[:d], x[d:]), z)
        fd = np.empty(dim)
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = h
            up = per_sample_objective(param, ParamPoint((x + e)[:d], (x + e)[d:]), z).value
            dn = per_sample_objective(param, ParamPoint((x - e)[:d], (x - e)[d:]), z).value
            fd[j] = (up - dn) / (2 * h)
        g = ev.flat_grad()
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-8)))
    return _result("gradient_fd", worst, tol)


def run_identity_checks(mdp: TabularMdp, param: Parameterization, data: TransitionDataset, seed: int = 0,
                        n_points: int = 20, grad_probes: int = 100) -> list[dict]:
    gen = rngmod.stream(seed, rngmod.PROBE + 2)
    ws = random_primal(param, gen, n_points)
    weight = sampling_law(mdp, data.behavior_policy, data.mode)
    return [
        check_unbiasedness(mdp, param, ws),
        check_double_sampling(mdp, param, ws, weight),
        check_biconjugate(mdp, param, ws, weight),
        check_gradients(param, data, gen, grad_probes),
    ]
