import json

import numpy as np
import pytest

from proxyconf.errors import EnumerationTooLarge, InvalidConfig
from proxyconf.synth import (
    DgpConfig,
    DiscreteDgp,
    covariate_only_effects,
    generate_cohort,
    load_dgp,
    population_tables,
    shipped_config_names,
    shipped_dgp,
    true_effects,
    true_marginal_u,
    true_subgroup_risk_ratios,
)

REFERENCE_RR = 0.7495492822814374
REFERENCE_OR = 0.6470198278458038


@pytest.fixture(scope="module")
def reference():
    return shipped_dgp("reference")


class TestShipped:
    def test_names(self):
        assert shipped_config_names() == ["binary_k2", "coverage", "paper_shaped", "reference", "table1_k4"]

    def test_unknown(self):
        with pytest.raises(InvalidConfig):
            shipped_dgp("nope")

    def test_paper_shaped_layout(self):
        dgp = shipped_dgp("paper_shaped")
        assert (dgp.n, dgp.k, dgp.p) == (4735, 4, 39)
        assert not dgp.is_discrete

    def test_round_trip(self, reference, tmp_path):
        path = tmp_path / "d.json"
        path.write_text(json.dumps(reference.to_dict()))
        back = load_dgp(path)
        assert isinstance(back, DiscreteDgp)
        assert back.to_dict() == reference.to_dict()


class TestConfigValidation:
    def test_non_stochastic_pi(self, reference):
        with pytest.raises(InvalidConfig):
            reference.replace(pi_true=np.full((3, 3), 0.3))

    def test_shape_mismatch(self, reference):
        with pytest.raises(InvalidConfig):
            reference.replace(y_u=np.zeros(2))

    def test_missing_rate(self, reference):
        with pytest.raises(InvalidConfig):
            reference.replace(missing_rate=1.0)

    def test_bad_json(self, tmp_path):
        path = tmp_path / "d.json"
        path.write_text("{")
        with pytest.raises(InvalidConfig):
            load_dgp(path)
        path.write_text('{"k": 2}')
        with pytest.raises(InvalidConfig):
            load_dgp(path)

    def test_enumeration_limits(self, reference):
        with pytest.raises(EnumerationTooLarge):
            true_effects(shipped_dgp("paper_shaped"))
        wide = DgpConfig.from_dict({**reference.to_dict(), "covariates": {"binary": {"count": 7}},
                                    "u_given_c": {"c": 0.0}, "x_given_cu": {}, "y_given_xcu": {}})
        with pytest.raises(EnumerationTooLarge):
            population_tables(wide)


class TestGenerate:
    def test_deterministic(self, reference):
        a = generate_cohort(reference.replace(n=500))
        b = generate_cohort(reference.replace(n=500))
        np.testing.assert_array_equal(a.c, b.c)
        np.testing.assert_array_equal(a.u_star, b.u_star)
        c = generate_cohort(reference.replace(n=500, seed=2))
        assert (a.y != c.y).any()

    def test_single_row(self, reference):
        assert generate_cohort(reference.replace(n=1)).n == 1

    def test_identity_pi(self, reference):
        cohort = generate_cohort(reference.replace(n=2000, pi_true=np.eye(3)))
        np.testing.assert_array_equal(cohort.u_star, cohort.u_true)

    def test_transition_frequencies(self, reference):
        cohort = generate_cohort(reference.replace(n=100_000))
        for u in range(3):
            freq = np.bincount(cohort.u_star[cohort.u_true == u], minlength=3) / np.sum(cohort.u_true == u)
            np.testing.assert_allclose(freq, reference.pi_true[u], atol=0.01)

    def test_null_effect(self, reference):
        cohort = generate_cohort(reference.replace(n=100_000, y_x=0.0, x_u=np.zeros(3), x_coef=np.zeros(3)))
        rr = cohort.y[cohort.x == 1].mean() / cohort.y[cohort.x == 0].mean()
        assert rr == pytest.approx(1.0, abs=0.03)

    def test_missing_rate(self, reference):
        cohort = generate_cohort(reference.replace(n=20_000, missing_rate=0.1))
        assert cohort.n_missing / cohort.n == pytest.approx(0.1, abs=0.01)


class TestTruth:
    def test_reference_values(self, reference):
        eff = true_effects(reference)
        assert eff.risk_ratio == pytest.approx(REFERENCE_RR, abs=1e-12)
        assert eff.odds_ratio == pytest.approx(REFERENCE_OR, abs=1e-12)

    def test_against_monte_carlo(self, reference):
        # g-formula averaged over simulated (C, U) draws: an oracle independent of the enumeration
        cohort = generate_cohort(reference.replace(n=400_000, seed=9))
        r1 = reference.p_y_given_xcu(1, cohort.c, cohort.u_true).mean()
        r0 = reference.p_y_given_xcu(0, cohort.c, cohort.u_true).mean()
        assert r1 / r0 == pytest.approx(true_effects(reference).risk_ratio, abs=0.005)
        np.testing.assert_allclose(np.bincount(cohort.u_true, minlength=3) / cohort.n,
                                   true_marginal_u(reference), atol=0.005)

    def test_null(self, reference):
        eff = true_effects(reference.replace(y_x=0.0))
        assert eff.risk_ratio == 1.0 and eff.odds_ratio == 1.0

    def test_unconfounded_by_u(self, reference):
        dgp = reference.replace(x_u=np.zeros(3))
        a, b = true_effects(dgp), covariate_only_effects(dgp)
        assert abs(a.risk_ratio - b.risk_ratio) < 1e-12 and abs(a.odds_ratio - b.odds_ratio) < 1e-12

    def test_confounding_matters(self, reference):
        assert abs(true_effects(reference).risk_ratio - covariate_only_effects(reference).risk_ratio) > 0.01

    def test_subgroups(self, reference):
        rr = true_subgroup_risk_ratios(reference)
        assert rr.shape == (3,) and np.all(rr < 1)
        np.testing.assert_allclose(true_subgroup_risk_ratios(reference.replace(y_x=0.0)), 1.0, atol=1e-15)


class TestPopulationTables:
    def test_sums(self, reference):
        t = population_tables(reference)
        assert t.weights.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(t.latent.sum(axis=(1, 2, 3)), 1.0, atol=1e-12)
        np.testing.assert_allclose(t.p_u.sum(axis=2), 1.0, atol=1e-12)
        assert np.all((t.p_x > 0) & (t.p_x < 1))

    def test_identity_pi_recovers_latent(self, reference):
        t = population_tables(reference.replace(pi_true=np.eye(3)))
        latent_u = t.latent.sum(axis=1)
        np.testing.assert_allclose(t.p_u, latent_u / latent_u.sum(axis=2, keepdims=True), atol=1e-14)
        np.testing.assert_allclose(t.p_y, t.latent[:, 1] / latent_u, atol=1e-14)

    def test_proxy_mixture(self, reference):
        # the proxy distribution is the latent one pushed through pi
        t = population_tables(reference)
        latent_u = t.latent.sum(axis=(1, 2))
        proxy_u = np.einsum("cx,cxv->cv", np.column_stack([1 - t.p_x, t.p_x]), t.p_u)
        np.testing.assert_allclose(proxy_u, latent_u @ reference.pi_true, atol=1e-14)
