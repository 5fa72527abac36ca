"""Finite MDPs, the soft Bellman operator, and offline dataset generation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import rng as rngmod
from .errors import (
    ConvergenceError,
    CoverageError,
    DimensionError,
    DomainError,
    InvariantError,
    PreconditionError,
)
from .numerics import logsumexp_softmax

IID_PAIRS = "iid_pairs"
SINGLE_TRAJECTORY = "single_trajectory"
MODES = (IID_PAIRS, SINGLE_TRAJECTORY)

_STOCH_TOL = 1e-12


def _check_stochastic(x: np.ndarray, name: str) -> None:
    if np.any(x < 0) or not np.all(np.abs(x.sum(axis=-1) - 1.0) <= _STOCH_TOL):
        raise DomainError(f"{name} must be nonnegative with rows summing to 1")


@dataclass(frozen=True, eq=False)
class TabularMdp:
    transition: np.ndarray  # P[s, a, s']
    reward: np.ndarray  # r[s, a]
    discount: float
    init_dist: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        nu = np.asarray(self.init_dist, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise DimensionError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if r.shape != (S, A):
            raise DimensionError(f"reward must have shape {(S, A)}, got {r.shape}")
        if nu.shape != (S,):
            raise DimensionError(f"init_dist must have shape {(S,)}, got {nu.shape}")
        if not np.all(np.isfinite(r)):
            raise DomainError("reward must be finite")
        _check_stochastic(P, "transition")
        _check_stochastic(nu, "init_dist")
        # beta = 0 is admitted as the myopic limit; user-facing entry points require (0, 1)
        if not 0.0 <= float(self.discount) < 1.0:
            raise DomainError(f"discount must lie in [0, 1), got {self.discount}")
        for name, arr in (("transition", P), ("reward", r), ("init_dist", nu)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_discount(self, discount: float) -> "TabularMdp":
        return TabularMdp(self.transition, self.reward, discount, self.init_dist)


class SoftSolution(NamedTuple):
    q_star: np.ndarray
    v_star: np.ndarray
    pi_star: np.ndarray
    residual: float


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """Logged transitions in generation order.

    ``weights`` is ``None`` for ordinary datasets. A weighted dataset encodes a
    population law (every ``(s, a, s')`` with its exact probability) so the same
    objective code evaluates population quantities.
    """

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    behavior_policy: np.ndarray
    seed: int = 0
    mode: str = IID_PAIRS
    weights: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.int64)
        a = np.asarray(self.a, dtype=np.int64)
        r = np.asarray(self.r, dtype=float)
        sn = np.asarray(self.s_next, dtype=np.int64)
        if not (s.ndim == a.ndim == r.ndim == sn.ndim == 1) or not (
            len(s) == len(a) == len(r) == len(sn)
        ):
            raise DimensionError("sample columns must be 1-D and of equal length")
        if self.mode not in MODES:
            raise DomainError(f"unknown mode {self.mode!r}")
        for name, arr in (("s", s), ("a", a), ("r", r), ("s_next", sn)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        pol = np.asarray(self.behavior_policy, dtype=float)
        pol.setflags(write=False)
        object.__setattr__(self, "behavior_policy", pol)
        if self.weights is not None:
            wts = np.asarray(self.weights, dtype=float)
            if wts.shape != s.shape:
                raise DimensionError("weights must match the number of samples")
            wts.setflags(write=False)
            object.__setattr__(self, "weights", wts)

    def __len__(self) -> int:
        return len(self.s)

    @property
    def n(self) -> int:
        return len(self.s)

    def __getitem__(self, i: int) -> Transition:
        return Transition(int(self.s[i]), int(self.a[i]), float(self.r[i]), int(self.s_next[i]))

    @property
    def samples(self) -> list[Transition]:
        return [self[i] for i in range(len(self))]

    def pair_counts(self, n_states: int, n_actions: int) -> np.ndarray:
        """Visit counts per (s, a); weighted datasets return probability mass instead."""
        flat = self.s * n_actions + self.a
        out = np.bincount(flat, weights=self.weights, minlength=n_states * n_actions)
        return out.reshape(n_states, n_actions)

    def replace(self, i: int, z: Transition) -> "TransitionDataset":
        if not 0 <= i < len(self):
            raise IndexError(f"index {i} out of range for dataset of size {len(self)}")
        cols = [np.array(c) for c in (self.s, self.a, self.r, self.s_next)]
        for col, val in zip(cols, z):
            col[i] = val
        return TransitionDataset(*cols, behavior_policy=self.behavior_policy, seed=self.seed,
                                 mode=self.mode, weights=self.weights, meta=dict(self.meta))

    def concat(self, other: "TransitionDataset") -> "TransitionDataset":
        cols = [np.concatenate([x, y]) for x, y in zip(
            (self.s, self.a, self.r, self.s_next), (other.s, other.a, other.r, other.s_next))]
        return TransitionDataset(*cols, behavior_policy=self.behavior_policy, seed=self.seed,
                                 mode=self.mode, meta=dict(self.meta))

    def validate(self, mdp: TabularMdp) -> None:
        """Raise :class:`InvariantError` naming the first bad row."""
        S, A = mdp.n_states, mdp.n_actions
        for i in range(len(self)):
            s, a, r, sn = self[i]
            if not (0 <= s < S and 0 <= a < A and 0 <= sn < S):
                raise InvariantError(f"index out of range in {(s, a, sn)}", row=i)
            if r != mdp.reward[s, a]:
                raise InvariantError(f"reward {r!r} != r[{s}][{a}] = {mdp.reward[s, a]!r}", row=i)


def soft_bellman_apply(mdp: TabularMdp, q: np.ndarray) -> np.ndarray:
    """(T Q)(s, a) = r(s, a) + beta * E_{s'}[logsumexp_a' Q(s', a')]."""
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionError(f"q must have shape {(mdp.n_states, mdp.n_actions)}, got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise DomainError("q must be finite")
    v, _ = logsumexp_softmax(q)
    return mdp.reward + mdp.discount * (mdp.transition @ v)


def solve_soft_optimal(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 100_000) -> SoftSolution:
    """Soft value iteration from Q = 0.

    Stops once successive iterates differ by at most ``tol * (1 - beta) / beta``
    in sup-norm, which bounds the distance of the returned Q to Q* by ``tol``.
    """
    if not tol > 0:
        raise PreconditionError("tol must be positive")
    beta = mdp.discount
    thresh = tol * (1.0 - beta) / beta if beta > 0 else np.inf
    q = np.zeros((mdp.n_states, mdp.n_actions))
    change = np.inf
    for _ in range(max_iter):
        q_next = soft_bellman_apply(mdp, q)
        change = float(np.max(np.abs(q_next - q)))
        q = q_next
        if change <= thresh:
            break
    else:
        raise ConvergenceError(f"soft value iteration did not converge in {max_iter} iterations", change)
    v, pi = logsumexp_softmax(q)
    residual = float(np.max(np.abs(soft_bellman_apply(mdp, q) - q)))
    return SoftSolution(q, v, pi, residual)


def uniform_policy(n_states: int, n_actions: int) -> np.ndarray:
    return np.full((n_states, n_actions), 1.0 / n_actions)


def policy_transition(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """State-to-state kernel P_pi[s, s'] under ``policy``."""
    return np.einsum("sa,sat->st", policy, mdp.transition)


def discounted_occupancy(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """(s, a) law of a chain restarted from nu0 with probability 1 - beta per step.

    The stationary law of that restart chain is the normalized discounted
    visitation ``(1 - beta) nu0^T (I - beta P_pi)^{-1}``.
    """
    P_pi = policy_transition(mdp, policy)
    S = mdp.n_states
    d = np.linalg.solve((np.eye(S) - mdp.discount * P_pi).T, (1.0 - mdp.discount) * mdp.init_dist)
    d = np.clip(d, 0.0, None)
    d /= d.sum()
    return d[:, None] * policy


def stationary_pair_law(mdp: TabularMdp, policy: np.ndarray, max_iter: int = 100_000) -> np.ndarray:
    """Long-run (s, a) frequencies of a single trajectory under ``policy``.

    Power iteration from nu0; periodic chains fall back to the Cesaro average.
    """
    P_pi = policy_transition(mdp, policy)
    d = mdp.init_dist.copy()
    acc = np.zeros_like(d)
    for _ in range(max_iter):
        acc += d
        nxt = d @ P_pi
        if np.max(np.abs(nxt - d)) < 1e-15:
            d = nxt
            break
        d = nxt
    else:
        d = acc
    d = d / d.sum()
    return d[:, None] * policy


def sampling_law(mdp: TabularMdp, policy: np.ndarray, mode: str) -> np.ndarray:
    """Population (s, a) weights matching ``generate_dataset``'s mode."""
    if mode == IID_PAIRS:
        return discounted_occupancy(mdp, policy)
    if mode == SINGLE_TRAJECTORY:
        return stationary_pair_law(mdp, policy)
    raise DomainError(f"unknown mode {mode!r}")


def population_dataset(mdp: TabularMdp, weight: np.ndarray, policy: np.ndarray | None = None,
                       mode: str = IID_PAIRS) -> TransitionDataset:
    """Every (s, a, s') with positive probability, weighted by weight(s, a) P(s'|s, a)."""
    weight = np.asarray(weight, dtype=float)
    if abs(weight.sum() - 1.0) > 1e-9 or np.any(weight < 0):
        raise DomainError("weight must be a distribution over (s, a)")
    joint = weight[:, :, None] * mdp.transition
    s, a, sn = np.nonzero(joint > 0)
    if policy is None:
        policy = uniform_policy(mdp.n_states, mdp.n_actions)
    return TransitionDataset(s, a, mdp.reward[s, a], sn, behavior_policy=policy, mode=mode,
                             weights=joint[s, a, sn], meta={"population": True})


def _categorical(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws; ``cdf`` rows are cumulative sums, ``u`` uniforms."""
    idx = (np.asarray(u)[..., None] >= cdf).sum(axis=-1)
    return np.minimum(idx, cdf.shape[-1] - 1)


def _draw_iid(mdp, policy, n, gen):
    law = discounted_occupancy(mdp, policy).ravel()
    flat = _categorical(np.cumsum(law), gen.random(n))
    s, a = np.divmod(flat, mdp.n_actions)
    sn = _categorical(np.cumsum(mdp.transition[s, a], axis=-1), gen.random(n))
    return s, a, sn


def _draw_trajectory(mdp, policy, n, gen):
    pol_cdf = np.cumsum(policy, axis=-1)
    p_cdf = np.cumsum(mdp.transition, axis=-1)
    u = gen.random((n, 2))
    s = np.empty(n, dtype=np.int64)
    a = np.empty(n, dtype=np.int64)
    sn = np.empty(n, dtype=np.int64)
    cur = int(_categorical(np.cumsum(mdp.init_dist), gen.random(1))[0])
    for t in range(n):
        act = int(_categorical(pol_cdf[cur], u[t, 0]))
        nxt = int(_categorical(p_cdf[cur, act], u[t, 1]))
        s[t], a[t], sn[t] = cur, act, nxt
        cur = nxt
    return s, a, sn


def _missing_pairs(policy, s, a, n_actions, min_visits):
    counts = np.bincount(s * n_actions + a, minlength=policy.size).reshape(policy.shape)
    need = (policy > 0) & (counts < min_visits)
    return [tuple(int(x) for x in p) for p in np.argwhere(need)]


def generate_dataset(mdp: TabularMdp, policy: np.ndarray | None = None, n: int = 100,
                     mode: str = IID_PAIRS, seed: int = 0, min_visits: int = 1,
                     max_retries: int = 100) -> TransitionDataset:
    """Draw ``n`` logged transitions under the behavior ``policy``.

    ``iid_pairs`` samples (s, a) independently from the discounted occupancy of
    the policy, then s' ~ P(s, a). ``single_trajectory`` rolls one dependent
    trajectory from s0 ~ nu0. Draws are repeated (on the same stream) until every
    pair with positive policy probability appears at least ``min_visits`` times.
    """
    if n < 1:
        raise PreconditionError("n must be at least 1")
    if min_visits < 0:
        raise PreconditionError("min_visits must be nonnegative")
    if policy is None:
        policy = uniform_policy(mdp.n_states, mdp.n_actions)
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionError(f"policy must have shape {(mdp.n_states, mdp.n_actions)}")
    _check_stochastic(policy, "policy")
    if mode not in MODES:
        raise DomainError(f"unknown mode {mode!r}")

    gen = rngmod.stream(seed, rngmod.DATA)
    draw = _draw_iid if mode == IID_PAIRS else _draw_trajectory
    missing = []
    for attempt in range(max_retries + 1):
        s, a, sn = draw(mdp, policy, n, gen)
        missing = _missing_pairs(policy, s, a, mdp.n_actions, min_visits)
        if not missing:
            meta = {"sampling_measure": "discounted_occupancy" if mode == IID_PAIRS else "trajectory",
                    "min_visits": int(min_visits), "attempts": attempt + 1}
            return TransitionDataset(s, a, mdp.reward[s, a], sn, behavior_policy=policy,
                                     seed=int(seed), mode=mode, meta=meta)
    raise CoverageError(
        f"pairs {missing} visited fewer than {min_visits} times after {max_retries} retries", missing)


def draw_transition(mdp: TabularMdp, policy: np.ndarray, mode: str, gen: np.random.Generator) -> Transition:
    """One fresh sample from the generation law of ``mode``.

    For trajectory data the replacement is drawn from the chain's long-run
    pair law, the natural "independent copy" of a single position.
    """
    law = sampling_law(mdp, policy, mode).ravel()
    flat = int(_categorical(np.cumsum(law), gen.random(1))[0])
    s, a = divmod(flat, mdp.n_actions)
    sn = int(_categorical(np.cumsum(mdp.transition[s, a]), gen.random(1))[0])
    return Transition(s, a, float(mdp.reward[s, a]), sn)


def random_mdp(n_states: int, n_actions: int, beta: float, seed: int = 0,
               deterministic: bool = False) -> TabularMdp:
    """Dirichlet(1) transitions, U[0, 1] rewards, uniform initial law."""
    if n_states < 1 or n_actions < 1:
        raise PreconditionError("n_states and n_actions must be positive")
    gen = rngmod.stream(seed, rngmod.MDP)
    if deterministic:
        nxt = gen.integers(0, n_states, size=(n_states, n_actions))
        P = np.zeros((n_states, n_actions, n_states))
        np.put_along_axis(P, nxt[..., None], 1.0, axis=-1)
    else:
        P = gen.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        P /= P.sum(axis=-1, keepdims=True)
    r = gen.random((n_states, n_actions))
    nu = np.full(n_states, 1.0 / n_states)
    return TabularMdp(P, r, beta, nu)


def preset_mdp(name: str, beta: float = 0.9) -> TabularMdp:
    """Small named instances used by tests and the CLI demos."""
    if name == "two_state":
        P = np.full((2, 2, 2), 0.5)
        return TabularMdp(P, np.array([[1.0, 0.0], [0.0, 1.0]]), beta, np.array([0.5, 0.5]))
    if name == "ring":
        # deterministic 3-state ring: action 0 stays, action 1 moves right
        P = np.zeros((3, 2, 3))
        for s in range(3):
            P[s, 0, s] = 1.0
            P[s, 1, (s + 1) % 3] = 1.0
        r = np.array([[0.0, 0.5], [1.0, 0.2], [0.3, 0.8]])
        return TabularMdp(P, r, beta, np.full(3, 1.0 / 3))
    if name == "demo":
        return random_mdp(3, 2, beta, seed=2024)
    raise DomainError(f"unknown preset {name!r}")
