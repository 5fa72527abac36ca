import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from brm.errors import DivergenceError, PreconditionError, ScheduleError
from brm.mdp import generate_dataset, random_mdp
from brm.objective import ParamPoint, dual_argmax, for_mdp, full_batch
from brm.sgda import (
    WITHOUT_REPLACEMENT,
    SgdaRunConfig,
    draw_indices,
    harmonic_stepsize,
    run_sgda,
    stepsize_cap,
    suboptimality_curve,
)
from brm.stability import solve_saddle


class TestStepsize:
    def test_values(self):
        assert harmonic_stepsize(1, 10, 0) == 0.1
        assert harmonic_stepsize(1, 10, 90) == 0.01

    @given(st.floats(0.01, 50), st.floats(1, 1000), st.integers(1, 5000))
    def test_partial_sum_lower_bound(self, c1, c2, T):
        total = float(np.sum(harmonic_stepsize(c1, c2, np.arange(T))))
        assert total >= c1 * math.log((c2 + T) / c2) - 1e-9

    def test_bad_schedule(self):
        with pytest.raises(ScheduleError):
            harmonic_stepsize(0, 10, 0)
        with pytest.raises(ScheduleError):
            SgdaRunConfig(c1=1, c2=0.5)

    def test_cap_checked_at_start(self):
        cap = stepsize_cap(2.0, 0.5)
        assert cap == 1 / 8
        SgdaRunConfig(c1=1, c2=8, stepsize_cap=cap)
        with pytest.raises(ScheduleError):
            SgdaRunConfig(c1=1, c2=7, stepsize_cap=cap)

    def test_cap_respected_everywhere(self):
        cfg = SgdaRunConfig(c1=2, c2=20, T=500, stepsize_cap=0.1)
        assert np.all(cfg.etas() <= 0.1)


class TestIndices:
    def test_shapes_and_ranges(self):
        idx = draw_indices(SgdaRunConfig(batch_size=4, T=50), 9)
        assert idx.shape == (50, 4) and idx.min() >= 0 and idx.max() < 9

    def test_without_replacement_distinct(self):
        idx = draw_indices(SgdaRunConfig(batch_size=5, T=100, sampling=WITHOUT_REPLACEMENT), 7)
        assert all(len(set(row)) == 5 for row in idx)

    def test_without_replacement_too_large(self):
        with pytest.raises(PreconditionError):
            draw_indices(SgdaRunConfig(batch_size=8, T=1, sampling=WITHOUT_REPLACEMENT), 7)

    def test_streams_differ(self):
        cfg = SgdaRunConfig(T=100)
        assert not np.array_equal(draw_indices(cfg, 50, 0), draw_indices(cfg, 50, 1))

    def test_uniform_marginal(self):
        idx = draw_indices(SgdaRunConfig(batch_size=1, T=40_000), 8).ravel()
        counts = np.bincount(idx, minlength=8)
        assert np.all(np.abs(counts - 5000) <= 4 * math.sqrt(40_000 / 8 * 7 / 8))


@pytest.fixture(scope="module")
def setup():
    mdp = random_mdp(3, 2, 0.4, seed=17)
    data = generate_dataset(mdp, n=80, seed=5, min_visits=2)
    return mdp, data, for_mdp(mdp, data)


class TestRun:
    def test_stationary_start(self, setup):
        _, data, param = setup
        sad = solve_saddle(param, data, 1e-13)
        init = ParamPoint(sad.x_star, dual_argmax(param, sad.x_star, data))
        tr = run_sgda(param, data, SgdaRunConfig(batch_size=80, T=50, sampling=WITHOUT_REPLACEMENT), init)
        np.testing.assert_allclose(tr.final.w, init.w, atol=1e-11)
        np.testing.assert_allclose(tr.final.v, init.v, atol=1e-11)

    def test_one_full_batch_step(self, setup, rng):
        _, data, param = setup
        init = ParamPoint(rng.normal(size=6), rng.normal(size=param.dim_dual))
        cfg = SgdaRunConfig(batch_size=80, T=1, c1=1.0, c2=10.0, sampling=WITHOUT_REPLACEMENT)
        tr = run_sgda(param, data, cfg, init)
        ev = full_batch(param, init, data)
        np.testing.assert_allclose(tr.final.w, init.w - 0.1 * ev.grad_w, atol=1e-14)
        np.testing.assert_allclose(tr.final.v, init.v + 0.1 * ev.grad_v, atol=1e-14)

    def test_minibatch_mean_equals_full_batch(self, setup, rng):
        # with B = n without replacement every step is a full-batch step
        _, data, param = setup
        init = ParamPoint(rng.normal(size=6), rng.normal(size=param.dim_dual))
        cfg = SgdaRunConfig(batch_size=80, T=20, c1=1.0, c2=10.0, sampling=WITHOUT_REPLACEMENT, record_every=1)
        tr = run_sgda(param, data, cfg, init)
        p = init
        for t, eta in enumerate(cfg.etas()):
            np.testing.assert_allclose(tr.w_hist[t], p.w, atol=1e-12)
            ev = full_batch(param, p, data)
            p = ParamPoint(p.w - eta * ev.grad_w, p.v + eta * ev.grad_v)
        np.testing.assert_allclose(tr.final.w, p.w, atol=1e-12)

    def test_deterministic(self, setup):
        _, data, param = setup
        cfg = SgdaRunConfig(batch_size=4, T=300, seed=9)
        a, b = run_sgda(param, data, cfg), run_sgda(param, data, cfg)
        assert a.final.w.tobytes() == b.final.w.tobytes()
        assert np.array_equal(a.index_log, b.index_log)
        assert a.phi_log.tobytes() == b.phi_log.tobytes()

    def test_replay(self, setup):
        _, data, param = setup
        a = run_sgda(param, data, SgdaRunConfig(batch_size=3, T=200, seed=1))
        b = run_sgda(param, data, SgdaRunConfig(batch_size=3, T=200, seed=999), index_override=a.index_log)
        assert a.final.w.tobytes() == b.final.w.tobytes()
        assert a.final.v.tobytes() == b.final.v.tobytes()

    def test_bad_override(self, setup):
        _, data, param = setup
        with pytest.raises(PreconditionError):
            run_sgda(param, data, SgdaRunConfig(batch_size=2, T=5), index_override=np.zeros((5, 3), dtype=int))
        with pytest.raises(PreconditionError):
            run_sgda(param, data, SgdaRunConfig(batch_size=1, T=1), index_override=[[80]])

    def test_divergence(self, setup):
        _, data, param = setup
        with pytest.raises(DivergenceError) as exc:
            run_sgda(param, data, SgdaRunConfig(batch_size=8, T=500, c1=1e6, c2=1.0))
        assert exc.value.t < 500
        assert not np.all(np.isfinite(exc.value.iterate.flat()))

    def test_record_cadence(self, setup):
        _, data, param = setup
        tr = run_sgda(param, data, SgdaRunConfig(T=95, record_every=10))
        assert tr.record_t.tolist() == list(range(0, 95, 10)) + [95]
        assert len(tr.index_log) == 95


class TestSuboptimality:
    def test_zero_at_saddle(self, setup):
        _, data, param = setup
        sad = solve_saddle(param, data, 1e-13)
        init = ParamPoint(sad.x_star, sad.v_star)
        tr = run_sgda(param, data, SgdaRunConfig(batch_size=80, T=10, sampling=WITHOUT_REPLACEMENT), init)
        assert np.all(suboptimality_curve(tr, sad.phi_star)[:, 1] <= 1e-15)

    def test_nonnegative(self, setup):
        _, data, param = setup
        sad = solve_saddle(param, data)
        tr = run_sgda(param, data, SgdaRunConfig(batch_size=4, T=2000, c1=20, c2=100, record_every=50))
        assert np.all(suboptimality_curve(tr, sad.phi_star)[:, 1] >= 0)
