import numpy as np
import pytest

from proxyconf.adjust import (
    NuisancePredictions,
    adjust_predictions,
    counterfactual_risk,
    estimate_effects,
    fit_nuisance,
    latent_u_given_c,
    marginal_u,
    recover,
    recovered_joint,
    restore,
    run_adjustment,
    subgroup_risk_ratio,
)
from proxyconf.core import Cohort, MisclassificationModel, row_normalize, table1_counts
from proxyconf.errors import (
    DegenerateCell,
    DimensionMismatch,
    EmptySubgroup,
    ExcessiveClamping,
    InsufficientData,
    InvalidConfig,
    MissingTruth,
)
from proxyconf.synth import (
    generate_cohort,
    population_tables,
    shipped_dgp,
    true_effects,
    true_marginal_u,
    true_subgroup_risk_ratios,
)

K2 = MisclassificationModel.from_pi([[0.9, 0.1], [0.2, 0.8]])


def single_unit(p_y, p_u, p_x):
    return NuisancePredictions(np.asarray(p_y, float)[None], np.asarray(p_u, float)[None],
                               np.array([p_x], float), np.ones(1))


class TestFitNuisance:
    def test_constant_treatment(self, k2_cohort):
        c = Cohort(y=k2_cohort.y, x=np.ones(k2_cohort.n, int), c=k2_cohort.c, u_star=k2_cohort.u_star, k=2)
        with pytest.raises(InsufficientData):
            fit_nuisance(c)

    def test_frequency_equals_counts(self, k2_cohort):
        nm = fit_nuisance(k2_cohort, backend="frequency")
        pred = nm.predict(k2_cohort.c, collapse=False)
        c, x, u, y = k2_cohort.c, k2_cohort.x, k2_cohort.u_star, k2_cohort.y
        for i in (0, 7, 123):
            same = np.all(c == c[i], axis=1)
            assert pred.p_x[i] == np.sum(same & (x == 1)) / np.sum(same)
            for xv in (0, 1):
                cell = same & (x == xv)
                for uv in range(2):
                    assert pred.p_u[i, xv, uv] == np.sum(cell & (u == uv)) / np.sum(cell)
                    n_cell = np.sum(cell & (u == uv))
                    assert pred.p_y[i, xv, uv] == np.sum(cell & (u == uv) & (y == 1)) / n_cell

    def test_collapse_is_a_regrouping(self, small_reference_cohort):
        nm = fit_nuisance(small_reference_cohort, backend="frequency")
        mis = MisclassificationModel.from_pi(shipped_dgp("reference").pi_true)
        a = adjust_predictions(nm.predict(small_reference_cohort.c), mis)
        b = adjust_predictions(nm.predict(small_reference_cohort.c, collapse=False), mis)
        assert a.weights.size < b.weights.size
        assert a.risk(1) == pytest.approx(b.risk(1), abs=1e-13)
        assert a.risk(0) == pytest.approx(b.risk(0), abs=1e-13)

    def test_wide_design(self):
        cohort = generate_cohort(shipped_dgp("paper_shaped"))
        nm = fit_nuisance(cohort)
        assert (cohort.n, cohort.p, cohort.k) == (4735, 39, 4)
        assert nm.outcome_design.width == 1 + 1 + 3 + 39 == 44
        assert nm.outcome_model.coefficients.shape == (44,)
        assert nm.proxy_model.coefficients.shape == (3, 41)
        assert nm.propensity_model.coefficients.shape == (40,)

    def test_unseen_pattern(self, k2_cohort):
        nm = fit_nuisance(k2_cohort, backend="frequency")
        with pytest.raises(InsufficientData):
            nm.predict(np.full((1, k2_cohort.p), 0.5))

    def test_frequency_needs_discrete_covariates(self):
        cohort = generate_cohort(shipped_dgp("paper_shaped").replace(n=300))
        with pytest.raises(InvalidConfig):
            fit_nuisance(cohort, backend="frequency")

    def test_missing_labels_must_be_handled(self, k2_cohort):
        u = k2_cohort.u_star.copy()
        u[0] = -1
        with pytest.raises(InsufficientData):
            fit_nuisance(k2_cohort.with_labels(u))

    def test_unknown_backend(self, k2_cohort):
        with pytest.raises(InvalidConfig):
            fit_nuisance(k2_cohort, backend="forest")


class TestRecovery:
    def test_identity_is_exact(self, small_reference_cohort):
        nm = fit_nuisance(small_reference_cohort)
        rec = recovered_joint(nm, MisclassificationModel.identity(3), small_reference_cohort.c[0])
        proxy = nm.predict(small_reference_cohort.c[:1]).proxy_joint()[0]
        np.testing.assert_array_equal(rec.q, proxy)
        assert rec.clamped_mass == 0.0

    def test_two_by_two_slice(self):
        latent = restore(K2.m_inverse, [0.6, 0.4])
        np.testing.assert_allclose(latent, [4 / 7, 3 / 7], atol=1e-12)
        np.testing.assert_allclose(latent, [0.571429, 0.428571], atol=1e-6)
        assert latent.sum() == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("name", ["reference", "binary_k2", "table1_k4"])
    def test_population_latent_joint(self, name):
        dgp = shipped_dgp(name)
        tables = population_tables(dgp)
        rec = recover(tables.predictions(), MisclassificationModel.from_pi(dgp.pi_true))
        np.testing.assert_allclose(rec.q, tables.latent, atol=1e-10)
        assert rec.clamped_mass == 0.0

    def test_excessive_clamping(self):
        mis = MisclassificationModel.from_pi([[0.6, 0.4], [0.4, 0.6]])
        pred = single_unit([[0.5, 0.5], [0.5, 0.5]], [[1.0, 0.0], [1.0, 0.0]], 0.5)
        with pytest.raises(ExcessiveClamping):
            recover(pred, mis)

    def test_mild_clamping_is_reported(self):
        mis = MisclassificationModel.from_pi([[0.9, 0.1], [0.1, 0.9]])
        pred = single_unit([[0.3, 0.6], [0.4, 0.7]], [[0.95, 0.05], [0.5, 0.5]], 0.5)
        rec = recover(pred, mis)
        assert 0 < rec.clamped_mass < 0.25
        assert rec.q.min() >= 0 and rec.q.sum() == pytest.approx(1.0)

    def test_dimension_mismatch(self):
        pred = single_unit([[0.5, 0.5], [0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]], 0.5)
        with pytest.raises(DimensionMismatch):
            recover(pred, MisclassificationModel.identity(3))


class TestMarginalU:
    def test_identity_average(self, small_reference_cohort):
        nm = fit_nuisance(small_reference_cohort)
        pred = nm.predict(small_reference_cohort.c)
        px = np.stack([1 - pred.p_x, pred.p_x], axis=1)
        expected = np.mean(np.sum(pred.p_u * px[:, :, None], axis=1), axis=0)
        np.testing.assert_allclose(marginal_u(nm, MisclassificationModel.identity(3), small_reference_cohort),
                                   expected, atol=1e-15)

    def test_identical_rows(self, small_reference_cohort):
        nm = fit_nuisance(small_reference_cohort)
        mis = MisclassificationModel.from_pi(shipped_dgp("reference").pi_true)
        rows = small_reference_cohort.take(np.zeros(25, dtype=int))
        single = small_reference_cohort.take([0])
        np.testing.assert_allclose(marginal_u(nm, mis, rows), marginal_u(nm, mis, single), atol=1e-15)

    @pytest.mark.parametrize("name", ["reference", "binary_k2", "table1_k4"])
    def test_population(self, name):
        dgp = shipped_dgp(name)
        adj = adjust_predictions(population_tables(dgp).predictions(), MisclassificationModel.from_pi(dgp.pi_true))
        np.testing.assert_allclose(adj.marginal_u, true_marginal_u(dgp), atol=1e-10)

    def test_per_unit_chain(self):
        pred = single_unit([[0.5, 0.5], [0.5, 0.5]], [[0.7, 0.3], [0.4, 0.6]], 0.25)
        mixed = 0.75 * np.array([0.7, 0.3]) + 0.25 * np.array([0.4, 0.6])
        np.testing.assert_allclose(latent_u_given_c(pred, K2)[0], K2.m_inverse @ mixed, atol=1e-15)


class TestBackdoor:
    @pytest.mark.parametrize("name", ["reference", "binary_k2", "table1_k4"])
    def test_population_risks_and_subgroups(self, name):
        dgp = shipped_dgp(name)
        truth = true_effects(dgp)
        adj = adjust_predictions(population_tables(dgp).predictions(), MisclassificationModel.from_pi(dgp.pi_true))
        assert adj.risk(1) == pytest.approx(truth.risk_treated, abs=1e-9)
        assert adj.risk(0) == pytest.approx(truth.risk_control, abs=1e-9)
        rr = [adj.subgroup_risk_ratio(u) for u in range(dgp.k)]
        np.testing.assert_allclose(rr, true_subgroup_risk_ratios(dgp), atol=1e-9)

    def test_null_effect(self):
        dgp = shipped_dgp("reference").replace(y_x=0.0)
        adj = adjust_predictions(population_tables(dgp).predictions(), MisclassificationModel.from_pi(dgp.pi_true))
        assert adj.risk(1) == pytest.approx(adj.risk(0), abs=1e-14)
        est = adj.estimate()
        assert est.risk_ratio == pytest.approx(1.0, abs=1e-12) and est.odds_ratio == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose([adj.subgroup_risk_ratio(u) for u in range(3)], 1.0, atol=1e-12)

    def test_identity_is_naive(self, small_reference_cohort):
        nm = fit_nuisance(small_reference_cohort)
        ident = MisclassificationModel.identity(3)
        pred = nm.predict(small_reference_cohort.c)
        px = np.stack([1 - pred.p_x, pred.p_x], axis=1)
        pu = np.sum(pred.p_u * px[:, :, None], axis=1)
        for x in (0, 1):
            # standard backdoor treating U* as U: average over units and u* of P(Y|x,C,u*) P(u*|C)
            expected = np.mean(np.sum(pred.p_y[:, x, :] * pu, axis=1))
            assert counterfactual_risk(nm, ident, small_reference_cohort, x) == pytest.approx(expected, abs=1e-14)

    def test_single_category(self):
        rng = np.random.default_rng(1)
        n = 500
        c = rng.integers(0, 2, (n, 1)).astype(float)
        x = rng.integers(0, 2, n)
        y = (rng.random(n) < 0.3 + 0.2 * x).astype(int)
        cohort = Cohort(y=y, x=x, c=c, u_star=np.zeros(n, int), k=1)
        nm = fit_nuisance(cohort)
        mis = MisclassificationModel.identity(1)
        adj, _ = run_adjustment(cohort, mis)
        assert subgroup_risk_ratio(nm, mis, cohort, 0) == pytest.approx(adj.estimate().risk_ratio, abs=1e-14)

    def test_empty_subgroup(self):
        pred = single_unit([[0.2, 0.3], [0.4, 0.5]], [[1.0, 0.0], [1.0, 0.0]], 0.5)
        adj = adjust_predictions(pred, MisclassificationModel.identity(2))
        with pytest.raises(EmptySubgroup):
            adj.subgroup_risk(1, 1)
        rows = adj.subgroups(["a", "b"])
        assert rows[1]["rr"] is None and rows[0]["rr"] == pytest.approx(2.0)

    def test_subgroup_table_weights(self, small_reference_cohort):
        adj, _ = run_adjustment(small_reference_cohort, MisclassificationModel.identity(3), "naive")
        rows = adj.subgroups(list(small_reference_cohort.category_names))
        assert [r["category"] for r in rows] == list(small_reference_cohort.category_names)
        assert sum(r["weight"] for r in rows) == pytest.approx(1.0)


class TestDegenerateCells:
    # Under this matrix the recovered P(X=1, U=1 | C) vanishes exactly for the unit below.
    MIS = MisclassificationModel.from_pi([[0.8, 0.2], [0.2, 0.8]])

    def pred(self, weight_share):
        # unit 0: x=1 slice of the proxy joint is (0.8, 0.2) * P(X=1), which maps to latent (1, 0)
        p_y = np.full((2, 2, 2), 0.4)
        p_u = np.array([[[0.5, 0.5], [0.8, 0.2]], [[0.5, 0.5], [0.5, 0.5]]])
        return NuisancePredictions(p_y, p_u, np.array([0.5, 0.5]), np.array([weight_share, 1 - weight_share]))

    def test_small_share_falls_back_to_arm_risk(self):
        adj = adjust_predictions(self.pred(1e-4), self.MIS)
        assert 0 < adj.degenerate_mass <= 1e-4
        # the fallback for the vanished cell is the unit's proxy-scale arm risk
        assert adj.p_y_latent[0, 1, 1] == pytest.approx(0.4)
        assert adj.estimate().degenerate_mass == adj.degenerate_mass

    def test_large_share_is_refused(self):
        with pytest.raises(DegenerateCell):
            adjust_predictions(self.pred(0.5), self.MIS)

    def test_strict_mode(self):
        with pytest.raises(DegenerateCell):
            adjust_predictions(self.pred(1e-4), self.MIS, max_degenerate=0.0)


class TestEstimateEffects:
    def test_oracle_equals_naive_when_labels_are_true(self, small_reference_cohort):
        c = small_reference_cohort
        exact = Cohort(y=c.y, x=c.x, c=c.c, u_star=c.u_true, k=c.k, u_true=c.u_true)
        a = estimate_effects(exact, None, "oracle")
        b = estimate_effects(exact, None, "naive")
        assert abs(a.risk_ratio - b.risk_ratio) < 1e-10 and abs(a.odds_ratio - b.odds_ratio) < 1e-10

    def test_oracle_needs_truth(self, small_reference_cohort):
        c = small_reference_cohort
        with pytest.raises(MissingTruth):
            estimate_effects(Cohort(y=c.y, x=c.x, c=c.c, u_star=c.u_star, k=c.k), None, "oracle")

    def test_adjusted_needs_matrix(self, small_reference_cohort):
        with pytest.raises(InvalidConfig):
            estimate_effects(small_reference_cohort, None, "matrix_adjust")

    def test_dropped_rows_reported(self):
        dgp = shipped_dgp("reference").replace(n=3000, seed=4, missing_rate=0.1)
        cohort = generate_cohort(dgp)
        mis = MisclassificationModel.from_pi(dgp.pi_true)
        est = estimate_effects(cohort, mis)
        assert est.dropped_rows == cohort.n_missing > 0
        relabelled = estimate_effects(cohort, mis, missing_as=2)
        assert relabelled.dropped_rows == cohort.n_missing
        assert relabelled.risk_ratio != est.risk_ratio

    def test_table1_on_paper_shaped_cohort(self):
        est = estimate_effects(generate_cohort(shipped_dgp("paper_shaped")), row_normalize(table1_counts()))
        assert 0.5 < est.risk_ratio < 1.5
        assert est.clamped_mass < 0.25 and est.degenerate_mass <= 1e-3
