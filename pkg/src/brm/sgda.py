"""Minibatch stochastic gradient descent-ascent with harmonic stepsizes."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import rng as rngmod
from .errors import DimensionError, DivergenceError, PreconditionError, ScheduleError
from .mdp import TransitionDataset
from .objective import (
    Columns,
    Parameterization,
    ParamPoint,
    columns,
    dual_argmax,
    full_batch,
    phi_eval,
    stack_terms,
)

WITH_REPLACEMENT = "with_replacement"
WITHOUT_REPLACEMENT = "without_replacement"


def harmonic_stepsize(c1: float, c2: float, t):
    """eta_t = c1 / (c2 + t); ``t`` may be an array."""
    if not (c1 > 0 and c2 >= 1):
        raise ScheduleError("need c1 > 0 and c2 >= 1")
    if np.any(np.asarray(t) < 0):
        raise ScheduleError("t must be nonnegative")
    return c1 / (c2 + np.asarray(t, dtype=float)) if np.ndim(t) else c1 / (c2 + t)


@dataclass(frozen=True)
class SgdaRunConfig:
    batch_size: int = 1
    c1: float = 1.0
    c2: float = 10.0
    T: int = 1000
    sampling: str = WITH_REPLACEMENT
    seed: int = 0
    index_stream: int = 0
    record_every: int = 10
    stepsize_cap: float | None = None
    clip_radius: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise PreconditionError("batch_size must be at least 1")
        if self.T < 0:
            raise PreconditionError("T must be nonnegative")
        if self.sampling not in (WITH_REPLACEMENT, WITHOUT_REPLACEMENT):
            raise PreconditionError(f"unknown sampling mode {self.sampling!r}")
        if not (self.c1 > 0 and self.c2 >= 1):
            raise ScheduleError("need c1 > 0 and c2 >= 1")
        # the schedule is decreasing, so checking t = 0 covers every step
        if self.stepsize_cap is not None and self.c1 / self.c2 > self.stepsize_cap:
            raise ScheduleError(
                f"eta_0 = {self.c1 / self.c2:.4g} exceeds the stepsize cap {self.stepsize_cap:.4g}")

    def etas(self) -> np.ndarray:
        return harmonic_stepsize(self.c1, self.c2, np.arange(self.T))

    def replace(self, **changes) -> "SgdaRunConfig":
        return SgdaRunConfig(**{**asdict(self), **changes})


def stepsize_cap(L: float, rho: float) -> float:
    """Largest admissible stepsize min{1/(4L), 1/rho}."""
    return min(1.0 / (4.0 * L), 1.0 / rho)


def draw_indices(cfg: SgdaRunConfig, n: int, stream_id: int | None = None, chunk: int = 4096) -> np.ndarray:
    """(T, B) minibatch index sequence for the configured stream."""
    B = cfg.batch_size
    if cfg.sampling == WITHOUT_REPLACEMENT and B > n:
        raise PreconditionError(f"batch size {B} exceeds dataset size {n} without replacement")
    gen = rngmod.stream(cfg.seed, rngmod.INDEX + (cfg.index_stream if stream_id is None else stream_id))
    if cfg.sampling == WITH_REPLACEMENT:
        return gen.integers(0, n, size=(cfg.T, B), dtype=np.int64)
    out = np.empty((cfg.T, B), dtype=np.int64)
    for start in range(0, cfg.T, chunk):
        stop = min(start + chunk, cfg.T)
        out[start:stop] = np.argsort(gen.random((stop - start, n)), axis=1, kind="stable")[:, :B]
    return out


@dataclass
class RunTrace:
    record_t: np.ndarray  # steps at which iterates were recorded
    w_hist: np.ndarray
    v_hist: np.ndarray
    index_log: np.ndarray  # (T, B)
    f_log: np.ndarray  # F_D(w_t, v_t) at record_t
    phi_log: np.ndarray  # Phi_D(w_t) at record_t
    etas: np.ndarray
    final: ParamPoint

    @property
    def iterates(self) -> list[tuple[int, ParamPoint]]:
        return [(int(t), ParamPoint(w, v)) for t, w, v in zip(self.record_t, self.w_hist, self.v_hist)]


def _project(X: np.ndarray, radius: float) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X * np.minimum(1.0, radius / np.maximum(norms, 1e-300))


def run_stacked(param: Parameterization, cols: Columns, idx: np.ndarray, etas: np.ndarray,
                W0: np.ndarray, V0: np.ndarray, record_every: int = 0, clip_radius: float | None = None,
                tags=None):
    """SGDA on K datasets at once.

    ``cols`` fields are (K, n). ``idx`` is (T, B), shared by every row, or
    (T, K, B) with one index stream per row. Rows never interact, so a row gives
    the same iterates whatever else is stacked with it. Returns the final
    ``(W, V)`` and, when ``record_every > 0``, the recorded ``(t, W, V)`` history.
    """
    W = np.array(W0, dtype=float)
    V = np.array(V0, dtype=float)
    K = W.shape[0]
    rows = np.arange(K)[:, None]
    shared = idx.ndim == 2
    T = len(etas)
    if len(idx) != T:
        raise DimensionError(f"index sequence has length {len(idx)}, expected {T}")
    hist_t, hist_w, hist_v = [], [], []
    for t in range(T):
        if record_every and t % record_every == 0:
            hist_t.append(t)
            hist_w.append(W.copy())
            hist_v.append(V.copy())
        it = idx[t]
        if shared:
            batch = Columns(*(c[:, it] for c in cols))
        else:
            batch = Columns(*(c[rows, it] for c in cols))
        eta = etas[t]
        with np.errstate(over="ignore", invalid="ignore"):
            # overflow is caught just below and reported as divergence
            _, gw, gv = stack_terms(param, W, V, batch, with_value=False)
            W -= eta * gw
            V += eta * gv
        if clip_radius is not None:
            W = _project(W, clip_radius)
            V = _project(V, clip_radius)
        if not (np.isfinite(W).all() and np.isfinite(V).all()):
            bad = int(np.argmax(~(np.isfinite(W).all(axis=1) & np.isfinite(V).all(axis=1))))
            tag = tags[bad] if tags is not None else f"row {bad}"
            raise DivergenceError(t, ParamPoint(W[bad].copy(), V[bad].copy()), tag)
    if record_every:
        hist_t.append(T)
        hist_w.append(W.copy())
        hist_v.append(V.copy())
    return W, V, (np.array(hist_t, dtype=np.int64), hist_w, hist_v)


def default_init(param: Parameterization, data: TransitionDataset, dual: str = "argmax") -> ParamPoint:
    """w = 0 with v at the dual maximizer (Gamma_0 = 0), or v = 0."""
    w = np.zeros(param.dim_primal)
    v = dual_argmax(param, w, data) if dual == "argmax" else np.zeros(param.dim_dual)
    return ParamPoint(w, v)


def run_sgda(param: Parameterization, data: TransitionDataset, cfg: SgdaRunConfig,
             init: ParamPoint | None = None, index_override: np.ndarray | None = None,
             tag: str = "", log_objective: bool = True) -> RunTrace:
    """Minibatch SGDA: descend w and ascend v along minibatch-averaged gradients."""
    if init is None:
        init = default_init(param, data)
    init.check(param)
    n = len(data)
    if index_override is not None:
        idx = np.asarray(index_override, dtype=np.int64)
        if idx.shape != (cfg.T, cfg.batch_size) or np.any(idx < 0) or np.any(idx >= n):
            raise PreconditionError(f"index_override must be a ({cfg.T}, {cfg.batch_size}) array of indices in [0, {n})")
    else:
        idx = draw_indices(cfg, n)
    cols = Columns(*(c[None] for c in columns(param, data)))
    etas = cfg.etas()
    W, V, (rec_t, hw, hv) = run_stacked(param, cols, idx, etas, init.w[None], init.v[None],
                                        record_every=cfg.record_every, clip_radius=cfg.clip_radius,
                                        tags=[tag or "run"])
    final = ParamPoint(W[0], V[0])
    w_hist = np.array([x[0] for x in hw]).reshape(len(hw), param.dim_primal)
    v_hist = np.array([x[0] for x in hv]).reshape(len(hv), param.dim_dual)
    f_log = np.full(len(rec_t), np.nan)
    phi_log = np.full(len(rec_t), np.nan)
    if log_objective:
        for j in range(len(rec_t)):
            f_log[j] = full_batch(param, ParamPoint(w_hist[j], v_hist[j]), data).value
            phi_log[j] = phi_eval(param, w_hist[j], data).value
    return RunTrace(rec_t, w_hist, v_hist, idx, f_log, phi_log, etas, final)


def suboptimality_curve(trace: RunTrace, phi_star: float) -> np.ndarray:
    """(t, Phi_D(w_t) - Phi_D*) rows at the recorded cadence.

    Gaps below zero can only come from the tolerance of ``phi_star`` and are
    reported as 0.
    """
    gap = np.maximum(trace.phi_log - phi_star, 0.0)
    return np.column_stack([trace.record_t.astype(float), gap])
