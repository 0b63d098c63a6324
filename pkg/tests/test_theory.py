import itertools
import math

import numpy as np
import pytest

from costar.theory import (
    BoundCheckConfig,
    GraphAssumptionParams,
    PositivePairGraph,
    check_assumptions,
    conductance_by_enumeration,
    decompose_risk,
    expansions,
    fit_graph_representations,
    pfa_fit,
    pfa_predict,
    spectral_contrastive_loss,
    spectral_loss_gradient,
    verify_l2_01_bound,
)


def random_graph(rng, n=8, n_clusters=2, self_loops=True):
    raw = rng.random((n, n)) + 0.05
    if not self_loops:
        np.fill_diagonal(raw, 0.0)
    clusters = rng.integers(0, n_clusters, size=n)
    for c in range(n_clusters):  # keep every cluster populated
        clusters[c] = c
    return PositivePairGraph.normalized(raw, clusters)


def two_disconnected_cliques(k=3):
    n = 2 * k
    raw = np.zeros((n, n))
    raw[:k, :k] = 1.0
    raw[k:, k:] = 1.0
    np.fill_diagonal(raw, 0.5)
    clusters = np.array([0] * k + [1] * k)
    return PositivePairGraph.normalized(raw, clusters, pairs=((0, 1),))


class TestGraphValidation:
    def test_asymmetric_rejected(self):
        w = np.array([[0.2, 0.3], [0.1, 0.4]])
        with pytest.raises(ValueError):
            PositivePairGraph(w, np.array([0, 0]))

    def test_sum_must_be_one(self):
        w = np.array([[0.2, 0.2], [0.2, 0.2]])
        with pytest.raises(ValueError):
            PositivePairGraph(w, np.array([0, 0]))

    def test_zero_marginal_rejected(self):
        w = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(ValueError):
            PositivePairGraph(w, np.array([0, 0]))

    def test_normalized_constructor(self):
        g = random_graph(np.random.default_rng(0))
        assert g.weights.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(g.weights, g.weights.T)


class TestExpansions:
    def test_no_edges_gives_zeros(self):
        g = two_disconnected_cliques()
        phi, hi, lo = expansions(g, [0, 1, 2], [3, 4, 5])
        assert (phi, hi, lo) == (0.0, 0.0, 0.0)

    def test_two_vertex_hand_value(self):
        # w(h1,h2)=0.3 each direction is 0.15; self weights 0.2 each
        w = np.array([[0.2, 0.15], [0.15, 0.2]])
        w = w / w.sum()
        g = PositivePairGraph(w, np.array([0, 1]))
        phi, hi, lo = expansions(g, [0], [1])
        assert phi == pytest.approx(0.15 / 0.35, abs=1e-12)
        assert hi == lo == phi  # singleton: all three coincide

    def test_hand_value_from_unnormalized_weights(self):
        # the documented example: symmetric weight 0.3 between the vertices,
        # self weights 0.2, so phi({h1},{h2}) = 0.3 / 0.5 = 0.6
        raw = np.array([[0.2, 0.3], [0.3, 0.2]])
        g = PositivePairGraph.normalized(raw, np.array([0, 1]))
        phi, _, _ = expansions(g, [0], [1])
        assert phi == pytest.approx(0.6, abs=1e-12)

    def test_ordering_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            g = random_graph(rng, n=9)
            a = [0, 2, 4]
            b = [1, 3]
            phi, hi, lo = expansions(g, a, b)
            assert 0.0 <= lo <= phi <= hi <= 1.0

    def test_overlap_rejected(self):
        g = random_graph(np.random.default_rng(2))
        with pytest.raises(ValueError):
            expansions(g, [0, 1], [1, 2])
        with pytest.raises(ValueError):
            expansions(g, [], [1])


def oracle_assumptions(graph, pairs=None):
    """Fully independent brute-force pass over the raw definitions."""
    w = graph.weights
    marg = w.sum(axis=1)
    labels = sorted(set(graph.clusters.tolist()))
    alpha = 0.0
    for h in range(w.shape[0]):
        outside = [j for j in range(w.shape[0]) if graph.clusters[j] != graph.clusters[h]]
        if outside:
            alpha = max(alpha, w[h, outside].sum() / marg[h])
    gamma = math.inf
    for label in labels:
        members = [i for i in range(w.shape[0]) if graph.clusters[i] == label]
        total = sum(marg[i] for i in members)
        for size in range(1, len(members) + 1):
            for combo in itertools.combinations(members, size):
                wa = sum(marg[i] for i in combo)
                if wa > total / 2:
                    continue
                rest = [i for i in members if i not in combo]
                if not rest:
                    continue
                cross = sum(w[i, j] for i in combo for j in rest)
                gamma = min(gamma, cross / wa)
    rho = None
    if pairs:
        rho = math.inf
        for s_label, t_label in pairs:
            t_members = [i for i in range(w.shape[0]) if graph.clusters[i] == t_label]
            s_members = [i for i in range(w.shape[0]) if graph.clusters[i] == s_label]
            rho = min(rho, min(w[h, s_members].sum() / marg[h] for h in t_members))
    return alpha, gamma, rho


class TestCheckAssumptions:
    def test_disconnected_cliques_have_zero_alpha(self):
        report = check_assumptions(two_disconnected_cliques())
        assert report.params.cross_cluster_bound == 0.0
        assert report.params.n_clusters == 2

    def test_matches_bruteforce_on_random_graphs(self):
        rng = np.random.default_rng(3)
        for trial in range(25):
            n = int(rng.integers(4, 13))
            m = int(rng.integers(1, 4))
            g = random_graph(rng, n=n, n_clusters=m)
            report = check_assumptions(g)
            alpha, gamma, rho = oracle_assumptions(g)
            assert report.params.cross_cluster_bound == pytest.approx(alpha, abs=1e-12)
            assert report.params.conductance == pytest.approx(gamma, abs=1e-12)

    def test_vectorized_and_reference_conductance_agree(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            g = random_graph(rng, n=10, n_clusters=2)
            report = check_assumptions(g)
            reference = min(conductance_by_enumeration(g, label) for label in g.cluster_labels())
            assert report.params.conductance == pytest.approx(reference, abs=1e-12)

    def test_complete_uniform_cluster_conductance(self):
        # complete graph on one 4-vertex cluster: every qualifying subset of a
        # uniform complete graph expands identically, verified by enumeration
        n = 4
        raw = np.ones((n, n))
        np.fill_diagonal(raw, 0.0)
        g = PositivePairGraph.normalized(raw, np.zeros(n, dtype=int))
        report = check_assumptions(g)
        assert report.params.conductance == pytest.approx(
            conductance_by_enumeration(g, 0), abs=1e-12
        )
        alpha, gamma, _ = oracle_assumptions(g)
        assert report.params.conductance == pytest.approx(gamma, abs=1e-12)

    def test_single_pair_relative_expansion(self):
        g = two_disconnected_cliques()
        report = check_assumptions(g)
        _, _, lo = expansions(g, g.cluster_members(1), g.cluster_members(0))
        assert report.params.relative_expansion == pytest.approx(lo, abs=1e-15)
        assert report.params.n_pairs == 1
        assert report.cross_pair_max_expansion is None

    def test_relative_expansion_matches_oracle_with_pairs(self):
        rng = np.random.default_rng(5)
        raw = rng.random((10, 10)) + 0.05
        clusters = np.array([0, 0, 0, 1, 1, 1, 2, 2, 3, 3])
        g = PositivePairGraph.normalized(raw, clusters, pairs=((0, 1), (2, 3)))
        report = check_assumptions(g)
        _, _, rho = oracle_assumptions(g, pairs=((0, 1), (2, 3)))
        assert report.params.relative_expansion == pytest.approx(rho, abs=1e-12)
        assert report.relative_expansion_vs_alpha_sq in (True, False)  # reported, not asserted

    def test_oversized_cluster_rejected(self):
        raw = np.ones((25, 25))
        g = PositivePairGraph.normalized(raw, np.zeros(25, dtype=int))
        with pytest.raises(ValueError):
            check_assumptions(g)

    def test_rep_dim_invariant(self):
        with pytest.raises(ValueError):
            GraphAssumptionParams(
                cross_cluster_bound=0.1,
                conductance=0.5,
                relative_expansion=0.2,
                n_clusters=3,
                n_pairs=1,
                rep_dim=5,  # needs >= 6
            )


class TestSpectralLoss:
    def test_zero_reps_forced_value(self):
        g = random_graph(np.random.default_rng(6), n=5)
        k = 3
        reps = np.zeros((5, k))
        assert spectral_contrastive_loss(reps, g, reg_weight=2.0) == pytest.approx(2.0 * k, abs=1e-12)

    def test_perfect_reps_give_zero(self):
        # two disconnected 2-vertex components, identity second moment
        raw = np.zeros((4, 4))
        raw[0, 1] = raw[1, 0] = 1.0
        raw[2, 3] = raw[3, 2] = 1.0
        g = PositivePairGraph.normalized(raw, np.array([0, 0, 1, 1]))
        s = math.sqrt(2.0)
        reps = np.array([[s, 0.0], [s, 0.0], [0.0, s], [0.0, s]])
        assert spectral_contrastive_loss(reps, g, reg_weight=1.0) == pytest.approx(0.0, abs=1e-12)

    def test_matches_termwise_enumeration(self):
        rng = np.random.default_rng(7)
        g = random_graph(rng, n=5)
        reps = rng.normal(size=(5, 3))
        sigma = 0.7
        pair = 0.0
        for h in range(5):
            for h2 in range(5):
                pair += g.weights[h, h2] * float(((reps[h] - reps[h2]) ** 2).sum())
        moment = np.zeros((3, 3))
        for h in range(5):
            moment += g.marginal[h] * np.outer(reps[h], reps[h])
        reg = float(((moment - np.eye(3)) ** 2).sum())
        expected = pair + sigma * reg
        assert spectral_contrastive_loss(reps, g, sigma) == pytest.approx(expected, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        g = random_graph(rng, n=4)
        reps = rng.normal(size=(4, 2))
        sigma = 1.3
        grad = spectral_loss_gradient(reps, g, sigma)
        h = 1e-6
        for i in range(4):
            for j in range(2):
                up = reps.copy()
                up[i, j] += h
                down = reps.copy()
                down[i, j] -= h
                fd = (spectral_contrastive_loss(up, g, sigma) - spectral_contrastive_loss(down, g, sigma)) / (2 * h)
                assert grad[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_gradient_descent_reaches_zero_loss_minimizer(self):
        # with rep_dim = number of components, a zero-loss table exists
        rng = np.random.default_rng(9)
        g = two_disconnected_cliques()
        reps, trace = fit_graph_representations(g, rep_dim=2, steps=600, rng=rng, learning_rate=0.3)
        assert trace[-1] < 1e-10
        # same-cluster vertices collapse together, clusters stay apart
        within = np.linalg.norm(reps[0] - reps[1])
        across = np.linalg.norm(reps[0] - reps[4])
        assert within < 1e-6 < across


class TestPFA:
    def test_one_hot_preconditioner(self):
        k = 5
        reps = np.eye(k)
        model = pfa_fit(reps, reps[:2], np.array([0.0, 1.0]), np.array([0.0, 1.0]), epsilon=0.0)
        np.testing.assert_allclose(model.preconditioner, np.eye(k) / k, atol=1e-12)

    def test_zero_epsilon_exact_class_average(self):
        rng = np.random.default_rng(10)
        reps = rng.normal(size=(6, 3))
        outcomes = np.array([0.0, 0.0, 1.0, 1.0, 1.0, 0.0])
        model = pfa_fit(reps, reps, outcomes, np.array([0.0, 1.0]), epsilon=0.0)
        class0 = reps[[0, 1, 5]].sum(axis=0) / 6.0  # indicator mean over all labeled
        np.testing.assert_allclose(model.class_features[0], class0, atol=1e-12)

    def test_duplicating_labeled_pairs_is_invariant(self):
        rng = np.random.default_rng(11)
        reps = rng.normal(size=(4, 3))
        outcomes = np.array([0.0, 1.0, 0.0, 1.0])
        values = np.array([0.0, 1.0])
        base = pfa_fit(reps, reps, outcomes, values, epsilon=0.25)
        doubled = pfa_fit(
            np.vstack([reps, reps]), np.vstack([reps, reps]), np.tile(outcomes, 2), values, epsilon=0.25
        )
        np.testing.assert_allclose(base.preconditioner, doubled.preconditioner, atol=1e-12)
        np.testing.assert_allclose(base.class_features, doubled.class_features, atol=1e-12)

    def test_empty_class_raises_with_name(self):
        reps = np.eye(3)
        with pytest.raises(ValueError, match="2.5"):
            pfa_fit(reps, reps, np.array([0.0, 1.0, 0.0]), np.array([0.0, 2.5]), epsilon=0.1)

    def test_identity_preconditioner_prediction(self):
        model = pfa_fit(
            np.eye(2) * 10,  # any marginal pool
            np.array([[1.0, 0.0], [0.0, 1.0]]),
            np.array([0.0, 1.0]),
            np.array([0.0, 1.0]),
            epsilon=0.0,
        )
        model.preconditioner = np.eye(2)
        assert pfa_predict(model.class_features[0], model, t_power=2) == 0.0
        assert pfa_predict(model.class_features[1], model, t_power=2) == 1.0

    def test_t_power_one_is_plain_feature_averaging(self):
        rng = np.random.default_rng(12)
        reps = rng.normal(size=(60, 4))
        outcomes = (reps[:, 0] > 0).astype(float)
        values = np.array([0.0, 1.0])
        model = pfa_fit(reps, reps, outcomes, values, epsilon=0.0)
        test_points = rng.normal(size=(100, 4))
        got = pfa_predict(test_points, model, t_power=1)
        # oracle: nearest class feature by inner product, no preconditioning
        scores = test_points @ model.class_features.T
        expected = values[scores.argmax(axis=1)]
        np.testing.assert_array_equal(got.ravel(), expected)

    def test_separated_clusters_zero_test_errors(self):
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            centers = np.array([[3.0, 0.0], [-3.0, 0.0]])
            labels = np.repeat([0, 1], 50)
            points = centers[labels] + rng.normal(scale=0.3, size=(100, 2))
            values = np.array([10.0, 20.0])
            outcomes = values[labels]
            train = rng.permutation(100)[:50]
            held_out = np.setdiff1d(np.arange(100), train)
            model = pfa_fit(points, points[train], outcomes[train], values, epsilon=0.0)
            preds = pfa_predict(points[held_out], model, t_power=3)
            assert np.array_equal(preds.ravel(), outcomes[held_out])

    def test_tie_breaks_to_lowest_index(self):
        model = pfa_fit(
            np.eye(2),
            np.array([[1.0, 0.0], [0.0, 1.0]]),
            np.array([5.0, 7.0]),
            np.array([5.0, 7.0]),
            epsilon=0.0,
        )
        # orthogonal class features, query orthogonal to both: all scores tie
        assert pfa_predict(np.zeros(2), model, t_power=1) == 5.0


class TestL2ZeroOneBound:
    def test_perfect_predictor(self):
        check = verify_l2_01_bound(np.zeros(5), np.zeros(5), epsilon=0.5, magnitude_bound=1.0)
        assert check.l2_risk == 0.0
        assert check.holds and check.bound == pytest.approx(0.25)

    def test_saturating_equality_case(self):
        check = verify_l2_01_bound(np.array([1.0]), np.array([-1.0]), epsilon=0.5, magnitude_bound=1.0)
        assert check.l2_risk == 4.0
        assert check.bound == 4.0
        assert check.holds

    def test_randomized_sweep_never_violates(self):
        rng = np.random.default_rng(13)
        for _ in range(300):
            b = float(rng.uniform(0.5, 3.0))
            eps = float(rng.uniform(1e-3, 2 * b - 1e-3))
            n = int(rng.integers(1, 40))
            d = int(rng.integers(1, 4))
            truths = rng.uniform(-1, 1, size=(n, d))
            preds = rng.uniform(-1, 1, size=(n, d))
            truths *= b / np.maximum(np.linalg.norm(truths, axis=1, keepdims=True), b)
            preds *= b / np.maximum(np.linalg.norm(preds, axis=1, keepdims=True), b)
            check = verify_l2_01_bound(preds, truths, eps, b)
            assert check.holds

    def test_magnitude_violation_rejected(self):
        with pytest.raises(ValueError):
            verify_l2_01_bound(np.array([3.0]), np.array([0.0]), epsilon=0.5, magnitude_bound=1.0)

    def test_bad_epsilon_rejected(self):
        with pytest.raises(ValueError):
            verify_l2_01_bound(np.array([0.5]), np.array([0.0]), epsilon=2.5, magnitude_bound=1.0)
        with pytest.raises(ValueError):
            BoundCheckConfig(epsilon=2.5, magnitude_bound=1.0)


class TestRiskDecomposition:
    def test_all_samples_match_plan(self):
        plans = np.zeros((4, 2))
        preds = np.array([1.0, 2.0, 3.0, 4.0])
        factual = np.array([1.0, 1.0, 1.0, 1.0])
        counterfactual = factual.copy()
        out = decompose_risk(plans, np.zeros(2), preds, factual, counterfactual)
        assert out.plan_probability == 1.0
        assert out.total_risk == pytest.approx(out.labeled_risk)

    def test_no_matching_sample_is_positivity_error(self):
        plans = np.zeros((3, 2))
        with pytest.raises(ValueError, match="positivity"):
            decompose_risk(plans, np.ones(2), np.zeros(3), np.zeros(3), np.zeros(3))

    def test_identity_on_mixed_plans(self):
        rng = np.random.default_rng(14)
        plans = rng.integers(0, 2, size=(30, 2)).astype(float)
        plans[0] = (1.0, 0.0)  # guarantee a match
        preds = rng.normal(size=30)
        factual = rng.normal(size=30)
        counterfactual = rng.normal(size=30)
        out = decompose_risk(plans, np.array([1.0, 0.0]), preds, factual, counterfactual)
        assert out.identity_ok
        assert out.identity_gap <= 1e-9

    def test_noise_free_simulator_toy(self):
        # 20 noise-free subjects; score a fixed estimator against simulator
        # counterfactual truth for one single-step plan
        from costar.pkpd import PKPDParams, PolicyParams, counterfactual_rollout, simulate_trajectory

        params = PKPDParams(
            carrying_capacity=30.0,
            growth_rate=0.08,
            chemo_sensitivity=0.05,
            radio_linear=0.05,
            radio_quadratic=0.005,
            noise_std=0.0,
        )
        policy = PolicyParams.from_gamma(0.0)
        anchor = 6
        plan = np.array([[1.0, 0.0]])
        rows = []
        for seed in range(20):
            traj = simulate_trajectory(params, policy, 10, np.random.default_rng(seed))
            cf = counterfactual_rollout(traj.truncated(anchor), plan, params, noise=np.zeros(1))
            rows.append(
                {
                    "factual_plan": traj.treatments[anchor - 1 : anchor],
                    "factual_outcome": traj.outcomes[anchor : anchor + 1, 0],
                    "counterfactual": cf[0, :, 0],
                    "prediction": traj.outcomes[anchor - 1, 0],  # last-value estimator
                }
            )
        plans = np.stack([r["factual_plan"] for r in rows])
        preds = np.array([r["prediction"] for r in rows])
        factual = np.stack([r["factual_outcome"] for r in rows])
        counterfactual = np.stack([r["counterfactual"] for r in rows])
        out = decompose_risk(plans, plan, preds, factual, counterfactual)
        assert 0.0 < out.plan_probability < 1.0
        assert out.identity_ok
        # consistency: on matching samples the factual outcome IS the
        # counterfactual outcome, so swapping them changes nothing
        matches = np.array([np.array_equal(p, plan) for p in plans])
        np.testing.assert_allclose(factual[matches], counterfactual[matches], atol=1e-12)
