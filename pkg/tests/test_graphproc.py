import numpy as np
import pytest

from shapedmlp.errors import ProbabilityOverflow
from shapedmlp.features import ShapeParams, build_hat_dataset, embed
from shapedmlp.graphproc import estimate_moment, initial_state, run_chain, step
from shapedmlp.network import NetworkConfig
from shapedmlp.oracles import linear_exact_moments

from conftest import make_raw


def overlap_of(raw):
    return raw.X.T @ raw.X / raw.n0


class TestChainMechanics:
    def test_q1_psi_zero_never_shuffles(self, rng):
        cfg = NetworkConfig.equal_widths(6, 10, 30, 0.0, 0.0)
        state = run_chain((0,), (1,), cfg, rng, record=True)
        assert state.shuffled == 0
        assert state.edges == [(0, 1)]
        # |E| = 1 throughout: C(1,2) = 0, no shuffle possible
        assert all(h[1] == 1 for h in state.history)

    def test_psi_zero_no_loops(self, rng):
        cfg = NetworkConfig.equal_widths(6, 12, 25, 0.0, 0.5)
        state = run_chain((0, 1), (1, 2), cfg, rng)
        assert state.total_loops == 0

    def test_probability_overflow_boundary(self, rng):
        # q=3, N=4, |E|=3: shuffle probability (2/4) C(3,2) = 1.5 > 1
        cfg = NetworkConfig.equal_widths(6, 4, 10, 0.0, 0.0)
        state = initial_state((0, 1, 2), (0, 1, 2), 10)
        with pytest.raises(ProbabilityOverflow):
            step(state, cfg, rng)

    def test_edge_count_invariant(self, rng):
        cfg = NetworkConfig.equal_widths(6, 300, 60, 0.5, 0.0)
        for trial in range(20):
            state = initial_state((0, 1), (1, 2), 60)
            births = 0
            while state.layer > 0:
                before = len(state.edges)
                step(state, cfg, rng)
                births += len(state.edges) - before
            # shuffles preserve cardinality; only births extend the multiset
            assert len(state.edges) == 2 + births

    def test_nonloop_count_without_shuffles(self, rng):
        cfg = NetworkConfig.equal_widths(6, 10**9, 40, 0.7, 0.0)  # shuffles off
        state = run_chain((0, 1), (1, 2), cfg, rng)
        nonloop = sum(1 for i, j in state.edges if i != j)
        assert nonloop == 2


class TestEstimator:
    def test_psi_zero_q1_deterministic(self):
        raw = make_raw(8, 3, 30, with_test=False)
        cfg = NetworkConfig.equal_widths(8, 50, 12, 0.0, 0.3)
        est, se = estimate_moment((0,), (1,), overlap_of(raw), cfg, n_samples=150, seed=0)
        want = cfg.sigma2 ** (cfg.depth + 1) * overlap_of(raw)[0, 1]
        assert se < 1e-15 * abs(want)    # deterministic up to fp rounding
        assert est == pytest.approx(want, rel=1e-12)
        # sigma-free convention drops exactly one sigma^2 per factor
        est2, _ = estimate_moment((0,), (1,), overlap_of(raw), cfg, n_samples=150, seed=0,
                                  include_sigma_edge_weight=False)
        exact = linear_exact_moments(cfg, raw.X, (0, 1), q=1)
        assert est2 == pytest.approx(exact, rel=1e-12)

    def test_psi_zero_q2_matches_wishart(self):
        raw = make_raw(8, 3, 31, with_test=False)
        cfg = NetworkConfig.equal_widths(8, 250, 14, 0.0, 0.3, seed=9)
        exact = linear_exact_moments(cfg, raw.X, ((0, 1), (0, 1)), q=2)
        est, se = estimate_moment((0, 0), (1, 1), overlap_of(raw), cfg,
                                  n_samples=60_000, seed=9,
                                  include_sigma_edge_weight=False)
        assert abs(est - exact) < 3.5 * se

    def test_mu_nu_exchange_symmetry(self):
        raw = make_raw(8, 3, 32, with_test=False)
        cfg = NetworkConfig.equal_widths(8, 2000, 16, 0.4, 0.2, seed=4)
        a, sa = estimate_moment((0, 1), (2, 0), overlap_of(raw), cfg, n_samples=30_000, seed=4)
        b, sb = estimate_moment((2, 0), (0, 1), overlap_of(raw), cfg, n_samples=30_000, seed=5)
        assert abs(a - b) < 3.5 * np.hypot(sa, sb)

    def test_diagonal_matches_selfloop_closed_form(self):
        # q=1, mu=nu: the closed large-(N, L) limit is the hat-space norm
        raw = make_raw(8, 3, 33, with_test=False)
        shape = ShapeParams(-0.4, 0.25)
        cfg = NetworkConfig.equal_widths(8, 2500, 50, shape.psi, shape.eta, seed=6)
        want = float(np.sum(embed(raw.X[:, 1], shape) ** 2))
        est, se = estimate_moment((1,), (1,), overlap_of(raw), cfg, n_samples=40_000, seed=6)
        band = 2.0 / cfg.depth * abs(want)
        assert abs(est - want) < 3 * se + band

    def test_trace_recording(self, rng):
        raw = make_raw(6, 2, 34, with_test=False)
        cfg = NetworkConfig.equal_widths(6, 400, 10, 0.5, 0.0, seed=1)
        est, se, histories = estimate_moment((0,), (1,), overlap_of(raw), cfg,
                                             n_samples=128, seed=1, record=True)
        assert len(histories) == 128
        layers = [row[0] for row in histories[0]]
        assert layers == list(range(9, -1, -1))
