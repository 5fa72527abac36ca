"""Per-sample saddle objective for Bellman residual minimization.

For a sample z = (s, a, r, s') the objective is

    f(w, v; z) = delta_w(z)^2 - beta^2 (V_w(s') - v[k(s, a)])^2,

with delta_w the soft TD error, V_w the log-sum-exp value and ``k`` the dual
coordinate of the pair. ``w`` is minimized, ``v`` maximized.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, DomainError, DualCoverageError, PreconditionError
from .mdp import TabularMdp, Transition, TransitionDataset, soft_bellman_apply
from .numerics import logsumexp_softmax

TABULAR = "tabular"
LINEAR = "linear"


@dataclass(frozen=True, eq=False)
class Parameterization:
    kind: str
    features: np.ndarray  # phi[s, a, :]
    dual_index: np.ndarray  # (S, A), -1 where the pair has no dual coordinate
    discount: float

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        idx = np.asarray(self.dual_index, dtype=np.int64)
        if feats.ndim != 3 or idx.shape != feats.shape[:2]:
            raise DimensionError("features must be (S, A, d) and dual_index (S, A)")
        if self.kind not in (TABULAR, LINEAR):
            raise DomainError(f"unknown parameterization {self.kind!r}")
        feats.setflags(write=False)
        idx.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "dual_index", idx)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.features.shape[0]

    @property
    def n_actions(self) -> int:
        return self.features.shape[1]

    @property
    def dim_primal(self) -> int:
        return self.features.shape[2]

    @property
    def dim_dual(self) -> int:
        return int(self.dual_index.max()) + 1 if self.dual_index.size else 0

    def dual_pairs(self) -> list[tuple[int, int]]:
        """(s, a) pair owning each dual coordinate, in coordinate order."""
        pairs = [None] * self.dim_dual
        for s, a in np.argwhere(self.dual_index >= 0):
            pairs[self.dual_index[s, a]] = (int(s), int(a))
        return pairs

    def dual_coord(self, s: int, a: int) -> int:
        k = int(self.dual_index[s, a])
        if k < 0:
            raise DualCoverageError(f"pair ({s}, {a}) has no dual coordinate")
        return k

    def q(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim_primal,):
            raise DimensionError(f"w must have length {self.dim_primal}, got {w.shape}")
        if self.kind == TABULAR:
            return w.reshape(self.n_states, self.n_actions)
        return (self.features * w).sum(axis=-1)

    def primal_from_q(self, q: np.ndarray) -> np.ndarray:
        """Least-squares primal vector whose Q-values best match ``q``."""
        if self.kind == TABULAR:
            return np.asarray(q, dtype=float).ravel().copy()
        F = self.features.reshape(-1, self.dim_primal)
        return np.linalg.lstsq(F, np.asarray(q, dtype=float).ravel(), rcond=None)[0]

    def with_dual_from(self, data: TransitionDataset) -> "Parameterization":
        return Parameterization(self.kind, self.features, _dual_index_from(data, self.n_states, self.n_actions),
                                self.discount)


def _dual_index_from(data: TransitionDataset, S: int, A: int) -> np.ndarray:
    mass = data.pair_counts(S, A) > 0
    idx = np.full((S, A), -1, dtype=np.int64)
    idx[mass] = np.arange(int(mass.sum()))
    return idx


def tabular(n_states: int, n_actions: int, discount: float, data: TransitionDataset) -> Parameterization:
    """One-hot features over (s, a); dual coordinates for the pairs present in ``data``."""
    feats = np.eye(n_states * n_actions).reshape(n_states, n_actions, n_states * n_actions)
    return Parameterization(TABULAR, feats, _dual_index_from(data, n_states, n_actions), discount)


def linear(features: np.ndarray, discount: float, data: TransitionDataset,
           rank_tol: float = 1e-10) -> Parameterization:
    feats = np.asarray(features, dtype=float)
    S, A, d = feats.shape
    sv = np.linalg.svd(feats.reshape(S * A, d), compute_uv=False)
    if d > S * A or sv[-1] <= rank_tol * max(sv[0], 1.0):
        raise DomainError("features must have full column rank")
    return Parameterization(LINEAR, feats, _dual_index_from(data, S, A), discount)


def for_mdp(mdp: TabularMdp, data: TransitionDataset, features: np.ndarray | None = None) -> Parameterization:
    if features is None:
        return tabular(mdp.n_states, mdp.n_actions, mdp.discount, data)
    return linear(features, mdp.discount, data)


@dataclass(frozen=True)
class ParamPoint:
    w: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))

    def check(self, param: Parameterization) -> "ParamPoint":
        if self.w.shape != (param.dim_primal,) or self.v.shape != (param.dim_dual,):
            raise DimensionError(
                f"point dims ({self.w.shape}, {self.v.shape}) do not match "
                f"({param.dim_primal},), ({param.dim_dual},)")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.v))):
            raise DomainError("point has non-finite entries")
        return self

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w, self.v])

    def __eq__(self, other):
        return (isinstance(other, ParamPoint) and np.array_equal(self.w, other.w)
                and np.array_equal(self.v, other.v))


class ObjectiveEval(NamedTuple):
    value: float
    grad_w: np.ndarray
    grad_v: np.ndarray

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([self.grad_w, self.grad_v])


def soft_values(param: Parameterization, w: np.ndarray):
    """V_w(s), pi_w(a|s) and grad_w V_w(s) for every state."""
    q = param.q(w)
    v, pi = logsumexp_softmax(q)
    grad = np.einsum("sa,sad->sd", pi, param.features)
    return v, pi, grad


def td_error(param: Parameterization, w: np.ndarray, z: Transition) -> float:
    s, a, r, sn = z
    _check_pair(param, s, a, sn)
    q = param.q(w)
    v_next, _ = logsumexp_softmax(q[sn])
    return float(r + param.discount * v_next - q[s, a])


def _check_pair(param, s, a, sn):
    S, A = param.n_states, param.n_actions
    if not (0 <= s < S and 0 <= a < A and 0 <= sn < S):
        raise DimensionError(f"sample indices {(s, a, sn)} out of range")


def per_sample_objective(param: Parameterization, p: ParamPoint, z: Transition) -> ObjectiveEval:
    s, a, r, sn = z
    _check_pair(param, s, a, sn)
    k = param.dual_coord(s, a)
    p.check(param)
    beta = param.discount
    q = param.q(p.w)
    v_next, pi_next = logsumexp_softmax(q[sn])
    grad_vnext = pi_next @ param.features[sn]
    delta = r + beta * v_next - q[s, a]
    gap = v_next - p.v[k]
    value = delta * delta - beta * beta * gap * gap
    grad_w = 2.0 * delta * (beta * grad_vnext - param.features[s, a]) - 2.0 * beta * beta * gap * grad_vnext
    grad_v = np.zeros(param.dim_dual)
    grad_v[k] = 2.0 * beta * beta * gap
    return ObjectiveEval(float(value), grad_w, grad_v)


class Columns(NamedTuple):
    """Sample columns with a leading stack axis, plus dual coordinates."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    k: np.ndarray


def columns(param: Parameterization, data: TransitionDataset) -> Columns:
    k = param.dual_index[data.s, data.a]
    if np.any(k < 0):
        bad = int(np.argmax(k < 0))
        raise DualCoverageError(f"sample {bad} at pair ({data.s[bad]}, {data.a[bad]}) has no dual coordinate")
    return Columns(data.s, data.a, data.r, data.s_next, k)


def stack_terms(param: Parameterization, W: np.ndarray, V: np.ndarray, cols: Columns,
                weights: np.ndarray | None = None, with_value: bool = True):
    """Objective value and gradients for K stacked runs at once.

    ``W`` is (K, d), ``V`` is (K, m) and every column is (K, B). Returns mean
    values (K,), grad_w (K, d) and grad_v (K, m), averaged over the B axis (or
    weighted by ``weights`` of shape (B,)). Each row only touches its own data,
    so a row's result does not depend on what else is in the stack.
    """
    beta = param.discount
    K = W.shape[0]
    S, A, d = param.features.shape
    rows = np.arange(K)[:, None]
    if param.kind == TABULAR:
        Q = W.reshape(K, S, A)
    else:
        Q = (W[:, None, None, :] * param.features[None]).sum(axis=-1)
    s, a, r, sn, k = cols
    v_next, pi_next = logsumexp_softmax(Q[rows, sn])  # (K, B), (K, B, A)
    grad_vnext = (pi_next[..., None] * param.features[sn]).sum(axis=-2)  # (K, B, d)
    delta = r + beta * v_next - Q[rows, s, a]
    gap = v_next - V[rows, k]
    gw = (2.0 * delta)[..., None] * (beta * grad_vnext - param.features[s, a]) \
        - (2.0 * beta * beta * gap)[..., None] * grad_vnext
    gv_terms = 2.0 * beta * beta * gap
    gv = np.zeros_like(V)
    at = (rows + np.zeros_like(k), k)
    vals = delta * delta - (beta * beta) * gap * gap if with_value else None
    if weights is None:
        B = s.shape[1]
        np.add.at(gv, at, gv_terms)
        return (vals.sum(axis=1) / B if with_value else None), gw.sum(axis=1) / B, gv / B
    total = weights.sum()
    np.add.at(gv, at, gv_terms * weights)
    val = (vals * weights).sum(axis=1) / total if with_value else None
    return val, (gw * weights[:, None]).sum(axis=1) / total, gv / total


def sample_gradients(param: Parameterization, p: ParamPoint, data: TransitionDataset):
    """Per-sample ``(grad_w f, d f / d v_k)`` for every sample: shapes (n, d) and (n,).

    grad_v f is nonzero only at the sample's own dual coordinate, so its norm is
    the absolute value of the second output.
    """
    p.check(param)
    s, a, r, sn, k = columns(param, data)
    beta = param.discount
    q = param.q(p.w)
    v_next, pi_next = logsumexp_softmax(q[sn])
    grad_vnext = (pi_next[..., None] * param.features[sn]).sum(axis=-2)
    delta = r + beta * v_next - q[s, a]
    gap = v_next - p.v[k]
    gw = (2.0 * delta)[:, None] * (beta * grad_vnext - param.features[s, a]) \
        - (2.0 * beta * beta * gap)[:, None] * grad_vnext
    return gw, 2.0 * beta * beta * gap


def full_batch(param: Parameterization, p: ParamPoint, data: TransitionDataset) -> ObjectiveEval:
    """F_D(w, v): mean (or law-weighted mean) of the per-sample objective."""
    if len(data) == 0:
        raise PreconditionError("dataset is empty")
    p.check(param)
    cols = Columns(*(c[None] for c in columns(param, data)))
    val, gw, gv = stack_terms(param, p.w[None], p.v[None], cols, data.weights)
    return ObjectiveEval(float(val[0]), gw[0], gv[0])


def dual_weights(param: Parameterization, data: TransitionDataset) -> np.ndarray:
    """Sample mass per dual coordinate (counts / n, or law mass)."""
    k = columns(param, data).k
    wts = np.ones(len(data)) if data.weights is None else data.weights
    return np.bincount(k, weights=wts, minlength=param.dim_dual) / wts.sum()


def dual_curvature(param: Parameterization, data: TransitionDataset) -> np.ndarray:
    """Diagonal of -Hessian_v F_D, i.e. 2 beta^2 count(s, a) / n per coordinate."""
    return 2.0 * param.discount ** 2 * dual_weights(param, data)


def dual_argmax(param: Parameterization, w: np.ndarray, data: TransitionDataset) -> np.ndarray:
    """Closed-form maximizer of F_D(w, .): per-pair mean of V_w(s').

    Coordinates with no samples (possible only in a neighbor dataset) are set to 0;
    F_D does not depend on them.
    """
    if len(data) == 0:
        raise PreconditionError("dataset is empty")
    k = columns(param, data).k
    v_state, _, _ = soft_values(param, w)
    wts = np.ones(len(data)) if data.weights is None else data.weights
    num = np.bincount(k, weights=wts * v_state[data.s_next], minlength=param.dim_dual)
    den = np.bincount(k, weights=wts, minlength=param.dim_dual)
    out = np.zeros(param.dim_dual)
    np.divide(num, den, out=out, where=den > 0)
    return out


def phi_eval(param: Parameterization, w: np.ndarray, data: TransitionDataset) -> ObjectiveEval:
    """Phi_D(w) = max_v F_D(w, v) and its gradient (Danskin: grad_w F at the maximizer)."""
    return full_batch(param, ParamPoint(w, dual_argmax(param, w, data)), data)


def phi_value(param: Parameterization, w: np.ndarray, data: TransitionDataset) -> float:
    return phi_eval(param, w, data).value


def gamma_value(param: Parameterization, p: ParamPoint, data: TransitionDataset) -> float:
    """Gamma(w, v) = Phi_D(w) - F_D(w, v) >= 0."""
    return phi_value(param, p.w, data) - full_batch(param, p, data).value


def _check_weight(weight: np.ndarray, mdp: TabularMdp) -> np.ndarray:
    weight = np.asarray(weight, dtype=float)
    if weight.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionError("weight must have shape (S, A)")
    if abs(weight.sum() - 1.0) > 1e-9 or np.any(weight < 0):
        raise PreconditionError("weight must be a distribution over (s, a)")
    return weight


def msbe_exact(mdp: TabularMdp, param: Parameterization, w: np.ndarray, weight: np.ndarray) -> float:
    """Population mean squared Bellman error under the true kernel."""
    weight = _check_weight(weight, mdp)
    q = param.q(w)
    resid = soft_bellman_apply(mdp, q) - q
    return float(np.sum(weight * resid * resid))


def mstde_exact(mdp: TabularMdp, param: Parameterization, w: np.ndarray, weight: np.ndarray) -> float:
    """Population mean squared TD error: E_{(s,a)~weight} E_{s'~P}[delta^2]."""
    weight = _check_weight(weight, mdp)
    q = param.q(w)
    v, _ = logsumexp_softmax(q)
    delta = mdp.reward[:, :, None] + mdp.discount * v[None, None, :] - q[:, :, None]  # (S, A, S')
    return float(np.sum(weight * np.sum(mdp.transition * delta * delta, axis=-1)))


def next_value_variance(mdp: TabularMdp, param: Parameterization, w: np.ndarray, weight: np.ndarray) -> float:
    """E_{(s,a)~weight} Var_{s'~P(s,a)}[V_w(s')]."""
    weight = _check_weight(weight, mdp)
    v, _ = logsumexp_softmax(param.q(w))
    mean = mdp.transition @ v
    # two-pass form avoids cancellation for nearly deterministic rows
    var = np.sum(mdp.transition * (v[None, None, :] - mean[..., None]) ** 2, axis=-1)
    return float(np.sum(weight * var))


def biconjugate_check(b: float) -> float:
    """max_h 2 b h - h^2, attained at h = b."""
    h = b
    return 2.0 * b * h - h * h

