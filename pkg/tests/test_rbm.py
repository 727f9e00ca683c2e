"""Hidden-unit machine: joint law, the two projections, trainers, charts.

Structure checks pin the bipartite zero pattern of the natural
coordinates and the factorized hidden conditional. The projection pair
is checked by its defining properties: the data-side projection holds
the visible marginal fixed and minimizes divergence over that set, the
manifold-side projection never increases divergence and is idempotent
on machine members. The alternating trainer's interleaved divergence
chain must be non-increasing when the analytic projection is used.
"""

import numpy as np
import pytest

from igboltz.errors import BadLength, Diverged, DimensionMismatch
from igboltz.evaluate import draw_samples, empirical_distribution, sample_target
from igboltz.rbm import (
    FractionalMixed,
    JointDistribution,
    RbmParams,
    _collapse,
    _exact_model_stats,
    _free_masks,
    _sigmoid,
    best_ip_select,
    embed_joint_theta,
    fractional_from_joint,
    gamma_b,
    gamma_h,
    gamma_h_sampled,
    joint_from_fractional,
    rbm_cond_h_given_x,
    rbm_joint,
    rbm_marginal_x,
    rbm_params_from_json,
    rbm_params_to_json,
    rbm_sample_x,
    rbm_train_cd1,
    rbm_train_ip,
    rbm_train_ml,
)
from igboltz.sbm import TrainConfig
from igboltz.simplex import (
    Distribution,
    kl_divergence,
    state_matrix,
    theta_from_p,
)


def rand_machine(rng, n_x=3, n_h=2, scale=0.8):
    return RbmParams(n_x, n_h, rng.normal(0.0, scale, (n_x, n_h)),
                     rng.normal(0.0, 0.5, n_x), rng.normal(0.0, 0.5, n_h))


def seeded_data(seed, n, count):
    rng = np.random.default_rng(seed)
    return draw_samples(sample_target(n, rng), count, rng)


def joint_as_dist(j):
    return Distribution(j.n, j.p)


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

class TestParams:
    def test_shape_validation(self):
        with pytest.raises(DimensionMismatch):
            RbmParams(3, 2, np.zeros((2, 3)), np.zeros(3), np.zeros(2))
        with pytest.raises(DimensionMismatch):
            RbmParams(3, 2, np.zeros((3, 2)), np.zeros(2), np.zeros(2))
        with pytest.raises(DimensionMismatch):
            RbmParams(2, 2, np.full((2, 2), np.nan), np.zeros(2), np.zeros(2))

    def test_arrays_are_frozen(self):
        p = rand_machine(np.random.default_rng(0))
        for arr in (p.W, p.b, p.d):
            with pytest.raises(ValueError):
                arr.flat[0] = 1.0

    def test_json_round_trip(self):
        p = rand_machine(np.random.default_rng(1), n_x=4, n_h=3)
        q = rbm_params_from_json(rbm_params_to_json(p))
        assert (q.n_x, q.n_h) == (4, 3)
        np.testing.assert_array_equal(q.W, p.W)
        np.testing.assert_array_equal(q.b, p.b)
        np.testing.assert_array_equal(q.d, p.d)
        with pytest.raises(BadLength):
            rbm_params_from_json({"n_x": 2, "n_h": 1})

    def test_joint_table_validation(self):
        with pytest.raises(BadLength):
            JointDistribution(2, 1, np.ones(4))
        with pytest.raises(DimensionMismatch):
            JointDistribution(1, 1, np.array([0.5, 0.0, 0.25, 0.25]))
        j = JointDistribution(1, 1, np.array([2.0, 1.0, 1.0, 4.0]))
        assert j.p.sum() == pytest.approx(1.0)
        assert j.n == 2


# ---------------------------------------------------------------------------
# joint law
# ---------------------------------------------------------------------------

class TestJointLaw:
    def test_unnormalized_weights(self):
        """Each joint entry is proportional to exp(x'Wh + b'x + d'h)."""
        rng = np.random.default_rng(2)
        for _ in range(10):
            p = rand_machine(rng, n_x=2, n_h=2)
            j = rbm_joint(p)
            sx = state_matrix(2)
            w = np.empty(16)
            for hm in range(4):
                h = sx[hm].astype(float)
                for xm in range(4):
                    x = sx[xm].astype(float)
                    w[(hm << 2) | xm] = np.exp(x @ p.W @ h + p.b @ x + p.d @ h)
            np.testing.assert_allclose(j.p, w / w.sum(), rtol=1e-12)

    def test_natural_coordinates_respect_bipartition(self):
        p = rand_machine(np.random.default_rng(3), n_x=3, n_h=2)
        th = theta_from_p(joint_as_dist(rbm_joint(p)))
        full = np.zeros(1 << 5)
        full[1:] = th.theta
        embedded = embed_joint_theta(p)
        np.testing.assert_allclose(full, embedded, atol=1e-9)
        # within-layer pairs sit at zero even though both units are live
        assert abs(full[0b00011]) < 1e-9      # two visibles
        assert abs(full[0b11000]) < 1e-9      # two hiddens
        assert abs(full[0b01001] - p.W[0, 0]) < 1e-9
        assert abs(full[0b10001] - p.W[0, 1]) < 1e-9

    def test_marginal_matches_brute_force(self):
        p = rand_machine(np.random.default_rng(4))
        j = rbm_joint(p)
        marg = rbm_marginal_x(j)
        brute = np.zeros(1 << p.n_x)
        for m, prob in enumerate(j.p):
            brute[m & ((1 << p.n_x) - 1)] += prob
        np.testing.assert_allclose(marg.p, brute, atol=1e-15)

    def test_hidden_conditional_factorizes(self):
        """Per-unit firing probabilities against the enumerated joint."""
        rng = np.random.default_rng(5)
        p = rand_machine(rng, n_x=2, n_h=2)
        j = rbm_joint(p)
        table = j.p.reshape(4, 4)      # (h, x)
        for xm in range(4):
            x = np.array([(xm >> k) & 1 for k in range(2)], dtype=float)
            cond = table[:, xm] / table[:, xm].sum()
            fire = rbm_cond_h_given_x(p, x)
            for k in range(2):
                on = sum(cond[hm] for hm in range(4) if (hm >> k) & 1)
                assert on == pytest.approx(fire[k], abs=1e-12)

    def test_conditional_saturates(self):
        p = RbmParams(2, 1, np.array([[30.0], [30.0]]),
                      np.zeros(2), np.array([-45.0]))
        assert rbm_cond_h_given_x(p, [1, 1]) == pytest.approx([1.0], abs=1e-6)
        assert rbm_cond_h_given_x(p, [0, 0]) == pytest.approx([0.0], abs=1e-6)
        with pytest.raises(DimensionMismatch):
            rbm_cond_h_given_x(p, [1, 0, 1])


# ---------------------------------------------------------------------------
# the two projections
# ---------------------------------------------------------------------------

class TestDataSideProjection:
    def test_visible_marginal_is_held_exactly(self):
        rng = np.random.default_rng(6)
        p = rand_machine(rng)
        q_x = sample_target(3, rng)
        j = gamma_h(p, q_x)
        np.testing.assert_allclose(rbm_marginal_x(j).p, q_x.p, atol=1e-15)

    def test_projection_minimizes_divergence_over_the_fiber(self):
        """Any other joint with the same visible marginal sits at least
        as far from the machine."""
        rng = np.random.default_rng(7)
        p = rand_machine(rng, n_x=2, n_h=2)
        q_x = sample_target(2, rng)
        model = joint_as_dist(rbm_joint(p))
        best = kl_divergence(joint_as_dist(gamma_h(p, q_x)), model)
        for _ in range(25):
            cond = rng.dirichlet(np.ones(4), size=4)       # per-x h table
            alt = (cond * q_x.p[:, None]).T.ravel()
            rival = kl_divergence(Distribution(4, alt), model)
            assert rival >= best - 1e-12

    def test_divergence_identity_with_the_marginal(self):
        """Projecting costs exactly the marginal divergence: the joint
        gap to the machine equals the visible gap to its marginal."""
        rng = np.random.default_rng(8)
        p = rand_machine(rng)
        q_x = sample_target(3, rng)
        joint_gap = kl_divergence(joint_as_dist(gamma_h(p, q_x)),
                                  joint_as_dist(rbm_joint(p)))
        marg_gap = kl_divergence(q_x, rbm_marginal_x(rbm_joint(p)))
        assert joint_gap == pytest.approx(marg_gap, abs=1e-12)

    def test_sampled_variant_marginal_is_the_smoothed_empirical(self):
        rng = np.random.default_rng(9)
        p = rand_machine(rng)
        data = seeded_data(10, 3, 250)
        j = gamma_h_sampled(p, data, np.random.default_rng(0))
        np.testing.assert_allclose(rbm_marginal_x(j).p,
                                   empirical_distribution(data).p,
                                   atol=1e-15)

    def test_rejects_marginal_of_wrong_size(self):
        p = rand_machine(np.random.default_rng(11))
        with pytest.raises(DimensionMismatch):
            gamma_h(p, sample_target(4, np.random.default_rng(0)))


class TestManifoldSideProjection:
    def test_idempotent_on_machine_members(self):
        """A joint already on the manifold projects to itself: the
        gradient vanishes at the start so the parameters come back
        bit for bit."""
        p = rand_machine(np.random.default_rng(12))
        q = rbm_joint(p)
        back = gamma_b(q, TrainConfig(ip_sub_epochs=100), init=p)
        np.testing.assert_array_equal(back.W, p.W)
        np.testing.assert_array_equal(back.b, p.b)
        np.testing.assert_array_equal(back.d, p.d)

    def test_fit_preserves_sufficient_moments(self):
        """At the stopping gradient norm the fitted machine carries the
        target's singleton and cross moments to the same precision."""
        rng = np.random.default_rng(13)
        q_x = sample_target(3, rng)
        q = gamma_h(rand_machine(rng), q_x)
        fit = gamma_b(q, TrainConfig(learning_rate=1.0, ip_sub_epochs=5000))
        free = _free_masks(3, 2)
        from igboltz.simplex import superset_zeta
        want = superset_zeta(q.p, 5)[free]
        got = superset_zeta(rbm_joint(fit).p, 5)[free]
        assert np.abs(want - got).max() < 2e-5

    def test_never_lands_farther_than_the_start(self):
        rng = np.random.default_rng(14)
        p0 = rand_machine(rng)
        q = gamma_h(rand_machine(rng), sample_target(3, rng))
        before = kl_divergence(joint_as_dist(q), joint_as_dist(rbm_joint(p0)))
        fit = gamma_b(q, TrainConfig(ip_sub_epochs=200), init=p0)
        after = kl_divergence(joint_as_dist(q), joint_as_dist(rbm_joint(fit)))
        assert after <= before + 1e-12


# ---------------------------------------------------------------------------
# trainers
# ---------------------------------------------------------------------------

class TestMlTrainer:
    def test_collapse_preserves_weighted_moments(self):
        rows = np.asarray(seeded_data(15, 4, 500).rows)
        states, weights = _collapse(rows)
        assert len(states) <= 16
        assert weights.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(weights @ states, rows.mean(axis=0),
                                   atol=1e-12)

    def test_exact_negative_stats_match_enumeration(self):
        p = rand_machine(np.random.default_rng(16), n_x=2, n_h=2)
        stats = _exact_model_stats(p)
        j = rbm_joint(p).p
        sx = state_matrix(4).astype(float)       # joint states, x low bits
        manual = np.concatenate([
            j @ sx[:, :2],
            j @ sx[:, 2:],
            [j @ (sx[:, i] * sx[:, 2 + k]) for i in range(2) for k in range(2)],
        ])
        np.testing.assert_allclose(stats, manual, atol=1e-12)

    def test_fixed_point_balances_the_two_phases(self):
        """Converged likelihood ascent: positive statistics computed at
        the final parameters coincide with the model's own."""
        data = seeded_data(2, 3, 300)
        res = rbm_train_ml(data, TrainConfig(learning_rate=1.0,
                                             max_epochs=4000, n_hidden=2))
        rows = np.asarray(data.rows, dtype=np.int8)
        states, weights = _collapse(rows)
        fire = _sigmoid(states @ res.params.W + res.params.d)
        pos = np.concatenate([weights @ states, weights @ fire,
                              (states.T @ (fire * weights[:, None])).ravel()])
        assert np.abs(pos - _exact_model_stats(res.params)).max() < 1e-4

    def test_divergence_trace_improves(self):
        rng = np.random.default_rng(17)
        tgt = sample_target(3, rng)
        data = draw_samples(tgt, 400, rng)
        res = rbm_train_ml(data, TrainConfig(max_epochs=300, n_hidden=2),
                           target=tgt)
        assert res.trace.shape == (300, 3)
        assert np.all(np.isfinite(res.trace[:, 1:]))
        assert res.trace[-1, 1] < res.trace[0, 1]
        assert res.iterates == ()

    def test_runaway_rate_is_flagged_as_divergence(self):
        data = seeded_data(2, 3, 300)
        with pytest.raises(Diverged):
            rbm_train_ml(data, TrainConfig(learning_rate=2.0,
                                           max_epochs=4000, n_hidden=2))

    def test_sampled_negative_phase_runs(self):
        data = seeded_data(18, 3, 200)
        res = rbm_train_ml(data, TrainConfig(negative_phase="gibbs",
                                             max_epochs=25, n_hidden=2,
                                             gibbs_chains=40))
        assert np.all(np.isfinite(res.params.W))

    def test_seed_determinism(self):
        data = seeded_data(19, 3, 200)
        cfg = TrainConfig(max_epochs=30, n_hidden=2, seed=7)
        a = rbm_train_ml(data, cfg)
        b = rbm_train_ml(data, cfg)
        np.testing.assert_array_equal(a.params.W, b.params.W)


class TestCd1Trainer:
    def test_improves_fit_and_is_deterministic(self):
        data = seeded_data(20, 4, 400)
        cfg = TrainConfig(max_epochs=150, n_hidden=3, seed=1)
        a = rbm_train_cd1(data, cfg)
        assert a.trace[-1, 1] < a.trace[0, 1]
        b = rbm_train_cd1(data, cfg)
        np.testing.assert_array_equal(a.params.W, b.params.W)
        np.testing.assert_array_equal(a.trace, b.trace)


class TestAlternatingTrainer:
    def test_interleaved_divergence_chain_never_rises(self):
        """With the analytic data-side projection, reading the trace as
        d1, d1', d2, d2', ... gives a non-increasing sequence: each
        refit cannot hurt, and each re-projection minimizes over a set
        containing the previous joint."""
        data = seeded_data(2, 3, 300)
        cfg = TrainConfig(n_hidden=3, ip_iterations=12, ip_sub_epochs=150,
                          learning_rate=0.5)
        res = rbm_train_ip(data, cfg)
        chain = res.trace[:, 1:3].ravel()
        assert np.all(np.diff(chain) <= 1e-9)

    def test_iterates_and_best_selection(self):
        data = seeded_data(21, 3, 250)
        cfg = TrainConfig(n_hidden=2, ip_iterations=8, ip_sub_epochs=100)
        res = rbm_train_ip(data, cfg)
        assert len(res.iterates) == 8
        best = best_ip_select(res)
        assert best is res.iterates[int(np.argmin(res.trace[:, 3]))]

    def test_best_selection_requires_iterates(self):
        data = seeded_data(21, 3, 250)
        res = rbm_train_ml(data, TrainConfig(max_epochs=5, n_hidden=2))
        with pytest.raises(BadLength):
            best_ip_select(res)

    def test_warm_start_is_respected(self):
        data = seeded_data(22, 3, 250)
        p0 = rand_machine(np.random.default_rng(23))
        cfg = TrainConfig(n_hidden=2, ip_iterations=2, ip_sub_epochs=50)
        res = rbm_train_ip(data, cfg, p0=p0)
        emp = empirical_distribution(data)
        d0 = kl_divergence(joint_as_dist(gamma_h(p0, emp)),
                           joint_as_dist(rbm_joint(p0)))
        assert res.trace[0, 1] == pytest.approx(d0, abs=1e-12)

    def test_sampled_projection_path_runs_deterministically(self):
        data = seeded_data(24, 3, 200)
        cfg = TrainConfig(n_hidden=2, ip_iterations=4, ip_sub_epochs=60,
                          sampled_h=True, seed=3)
        a = rbm_train_ip(data, cfg)
        b = rbm_train_ip(data, cfg)
        np.testing.assert_array_equal(a.params.W, b.params.W)
        assert np.all(np.isfinite(a.trace[:, :4]))


class TestSampling:
    def test_visible_samples_match_the_marginal(self):
        p = RbmParams(3, 2, np.random.default_rng(4).normal(0, 0.8, (3, 2)),
                      np.array([0.3, -0.2, 0.1]), np.array([0.2, -0.4]))
        marg = rbm_marginal_x(rbm_joint(p)).p
        xs = rbm_sample_x(p, 40000, np.random.default_rng(1), sweeps=60)
        assert xs.shape == (40000, 3) and xs.dtype == np.int8
        freq = np.bincount(xs.astype(int) @ (1 << np.arange(3)),
                           minlength=8) / 40000
        assert 0.5 * np.abs(freq - marg).sum() < 0.02

    def test_seed_determinism(self):
        p = rand_machine(np.random.default_rng(25))
        a = rbm_sample_x(p, 100, np.random.default_rng(6), sweeps=5)
        b = rbm_sample_x(p, 100, np.random.default_rng(6), sweeps=5)
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# the split-order chart
# ---------------------------------------------------------------------------

class TestFractionalChart:
    def test_block_lengths_are_validated(self):
        with pytest.raises(DimensionMismatch):
            FractionalMixed(2, 1, np.zeros(2), np.zeros(1), np.zeros(1),
                            np.zeros(1), np.zeros(2), np.zeros(4))

    def test_machine_members_have_zero_natural_blocks(self):
        p = rand_machine(np.random.default_rng(26))
        fm = fractional_from_joint(rbm_joint(p))
        np.testing.assert_allclose(fm.theta_xx, 0.0, atol=1e-9)
        np.testing.assert_allclose(fm.theta_hh, 0.0, atol=1e-9)
        np.testing.assert_allclose(fm.theta_high, 0.0, atol=1e-9)

    def test_round_trip_through_the_chart(self):
        """Generic joint: split coordinates, solve back, recover the
        table."""
        rng = np.random.default_rng(27)
        w = rng.dirichlet(np.ones(32))
        j = JointDistribution(3, 2, 0.1 / 32 + 0.9 * w)
        fm = fractional_from_joint(j)
        back = joint_from_fractional(fm)
        np.testing.assert_allclose(back.p, j.p, atol=1e-8)

    def test_round_trip_on_a_machine_member(self):
        p = rand_machine(np.random.default_rng(28))
        j = rbm_joint(p)
        back = joint_from_fractional(fractional_from_joint(j))
        np.testing.assert_allclose(back.p, j.p, atol=1e-8)
