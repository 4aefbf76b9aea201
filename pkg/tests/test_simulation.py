import dataclasses
import json
import warnings

import numpy as np
import pytest

from nmmcaic import FitOptions, ModelSpec, ParameterVector, SimulationError, SpecError, fit
from nmmcaic.simulation import (
    SimConfig, aggregate, bc_est, bc_true, design_indices, draw_random_effects, relative_bias,
    replicate_rng, run_replicate, run_simulation, sample_ar1, simulate_dataset, true_eta,
    with_overrides,
)


def _config(family="gaussian", link="identity", T=4, A=2, n=2, disp=0.5, delta=0.4, **kw):
    spec = ModelSpec(family, link, T, A, replicates=n)
    theta = ParameterVector.from_natural(np.linspace(0.0, 1.0, A), 1.0, delta, 0.8, disp)
    kw.setdefault("n_out", 6)
    kw.setdefault("n_inner", 50)
    kw.setdefault("seed", 2024)
    return SimConfig(spec, theta, **kw)


class TestAR1:
    def test_iid_when_uncorrelated(self):
        rng = replicate_rng(1, 0)
        x = sample_ar1(100_000, 0.0, rng)
        assert np.var(x) == pytest.approx(1.0, abs=4 * np.sqrt(2 / 1e5))
        assert abs(np.corrcoef(x[1:], x[:-1])[0, 1]) < 4 / np.sqrt(1e5)

    def test_lag_one_autocorrelation(self):
        x = sample_ar1(100_000, 0.8, replicate_rng(2, 0))
        r1 = np.corrcoef(x[1:], x[:-1])[0, 1]
        # large-sample sd of the lag-1 estimate is sqrt((1 - rho^2) / N)
        assert r1 == pytest.approx(0.8, abs=4 * np.sqrt(0.36 / 1e5))

    @pytest.mark.parametrize("rho", [0.5, 0.95])
    def test_stationary_marginal_variance(self, rho):
        rng = replicate_rng(3, 0)
        last = np.array([sample_ar1(6, rho, rng)[-1] for _ in range(20_000)])
        assert np.var(last) == pytest.approx(1.0, abs=4 * np.sqrt(2 / 2e4))

    def test_rejects_unit_root(self):
        with pytest.raises(SpecError):
            sample_ar1(5, 1.0, replicate_rng(0, 0))


class TestStreams:
    def test_substreams_reproducible_and_distinct(self):
        a = replicate_rng(7, 3).standard_normal(5)
        b = replicate_rng(7, 3).standard_normal(5)
        c = replicate_rng(7, 4).standard_normal(5)
        d = replicate_rng(8, 3).standard_normal(5)
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c) and not np.allclose(a, d)


class TestSimulateDataset:
    def test_gaussian_cell_spread(self):
        cfg = _config(T=3, A=2, n=4000, disp=0.25)
        rng = replicate_rng(5, 0)
        u = draw_random_effects(cfg.spec, cfg.theta_true, rng)
        d = simulate_dataset(cfg, u, rng)
        eta = true_eta(cfg.spec, cfg.theta_true, u, d.t, d.a)
        for cell in range(6):
            sel = (d.t * 2 + d.a) == cell
            assert np.std(d.y[sel] - eta[sel]) == pytest.approx(0.25, rel=4 / np.sqrt(2 * 4000))

    def test_vanishing_random_effects(self):
        spec = ModelSpec("gaussian", "identity", 5, 3, replicates=500)
        theta = ParameterVector.from_natural([-1.0, 0.0, 2.0], 1e-8, 1e-8, 0.8, 0.5)
        cfg = SimConfig(spec, theta, 1, 1)
        rng = replicate_rng(6, 0)
        d = simulate_dataset(cfg, draw_random_effects(spec, theta, rng), rng)
        for a, qa in enumerate([-1.0, 0.0, 2.0]):
            ya = d.y[d.a == a]
            assert ya.mean() == pytest.approx(qa, abs=4 * 0.5 / np.sqrt(ya.size))

    @pytest.mark.parametrize("family,disp", [("gamma", 3.0), ("negbin", 0.5), ("tweedie", 0.3)])
    def test_log_link_cell_means(self, family, disp):
        cfg = _config(family, "log", T=2, A=2, n=20_000, disp=disp)
        rng = replicate_rng(9, 0)
        u = draw_random_effects(cfg.spec, cfg.theta_true, rng)
        d = simulate_dataset(cfg, u, rng)
        eta = true_eta(cfg.spec, cfg.theta_true, u, d.t, d.a)
        fam = cfg.spec.family_model()
        for cell in range(4):
            sel = (d.t * 2 + d.a) == cell
            mu, var = fam.moments(eta[sel][0], np.log(disp))
            assert d.y[sel].mean() == pytest.approx(mu, abs=4 * np.sqrt(var / sel.sum()))

    def test_layout(self):
        spec = ModelSpec("gamma", "log", 3, 2, replicates=2)
        t, a = design_indices(spec)
        assert t.tolist() == [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]
        assert a.tolist() == [0, 0, 1, 1] * 3

    def test_dimension_mismatch(self):
        cfg = _config()
        other = draw_random_effects(ModelSpec("gaussian", "identity", 5, 2), cfg.theta_true,
                                    replicate_rng(0, 0))
        with pytest.raises(SpecError):
            simulate_dataset(cfg, other, replicate_rng(0, 0))


class TestConfig:
    def test_method1_dropped_for_discrete(self):
        cfg = _config("negbin", "log", disp=0.3)
        assert cfg.methods == (2,)
        with pytest.raises(SpecError):
            _config("negbin", "log", disp=0.3, methods=(1,))

    @pytest.mark.parametrize("kw", [
        dict(n_out=0), dict(n_inner=0), dict(methods=(3,)), dict(method1_moments="x"),
        dict(prediction_mode="x"), dict(seed=-1),
    ])
    def test_invalid(self, kw):
        with pytest.raises(SpecError):
            _config(**kw)


class TestReplicate:
    def _analytic(self, cfg, index):
        """Exact conditional expectations for a Gaussian replicate."""
        spec, th = cfg.spec, cfg.theta_true
        rng = replicate_rng(cfg.seed, index)
        u = draw_random_effects(spec, th, rng)
        data = simulate_dataset(cfg, u, rng)
        res = fit(data, spec, cfg.fit_options)
        h = res.theta_hat
        mu_hat = h.q[data.a] + h.sigma * res.psi_hat.year_effects[data.t] \
            + h.delta * res.psi_hat.interaction_effects[data.t, data.a]
        mu = true_eta(spec, th, u, data.t, data.a)
        se2, sh2 = th.dispersion ** 2, h.dispersion ** 2
        lc_obs = np.sum(-0.5 * np.log(2 * np.pi * sh2) - (data.y - mu_hat) ** 2 / (2 * sh2))
        e_hat = np.sum(-0.5 * np.log(2 * np.pi * sh2) - ((mu - mu_hat) ** 2 + se2) / (2 * sh2))
        v_hat = np.sum(0.5 * (se2 / sh2) ** 2 + (mu - mu_hat) ** 2 * se2 / sh2 ** 2)
        lc_obs_true = np.sum(-0.5 * np.log(2 * np.pi * se2) - (data.y - mu) ** 2 / (2 * se2))
        e_true = data.n * (-0.5 * np.log(2 * np.pi * se2) - 0.5)
        return -2 * (e_hat - lc_obs), -2 * (e_true - lc_obs_true), v_hat

    def test_gaussian_closed_form_expectation(self):
        cfg = _config(n_inner=20_000, n_out=1)
        plain, control, v = self._analytic(cfg, 0)
        rec = run_replicate(cfg, 0)
        assert rec.kept
        # sd of the plain estimate is 2 sqrt(v / n_inner)
        assert rec.bc_plain == pytest.approx(plain, abs=5 * 2 * np.sqrt(v / cfg.n_inner))
        # the control contrast has conditional mean zero, so both centre on
        # the same value; its own MC error is of the same order
        assert rec.bc == pytest.approx(plain - control, abs=10 * 2 * np.sqrt(v / cfg.n_inner))

    def test_observed_mode_gives_zero(self):
        cfg = _config(prediction_mode="observed", n_inner=1)
        rec = run_replicate(cfg, 0)
        assert rec.bc == 0.0 and rec.bc_plain == 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            res = run_simulation(with_overrides(cfg, n_out=3))
        assert res.bc_true.value == 0.0
        assert np.isnan(res.rb[2])

    def test_no_random_effects_penalty_is_2pc(self):
        spec = ModelSpec("gamma", "log", 3, 2, replicates=3, year_effects=False,
                         interaction_effects=False)
        theta = ParameterVector.from_natural([0.0, 1.0], 1.0, 0.4, 0.8, 3.0)
        cfg = SimConfig(spec, theta, 2, 10, methods=(2,),
                        fit_options=FitOptions(fixed={"log_sigma", "log_delta", "rho_transform"},
                                               theta_init=theta))
        for k in range(2):
            rec = run_replicate(cfg, k)
            assert rec.penalties[2] == 2 * 3

    def test_record_json(self):
        rec = run_replicate(_config(), 1)
        d = json.loads(rec.to_json())
        assert d["index"] == 1 and d["kept"] is True
        assert set(d["penalties"]) == {"1", "2"}
        assert d["bc"] == rec.bc


@pytest.fixture(scope="module")
def result():
    return run_simulation(_config())


class TestSimulation:
    def test_deterministic(self, result):
        again = run_simulation(_config())
        assert [r.to_json() for r in again.records] == [r.to_json() for r in result.records]
        assert again.bc_true == result.bc_true

    def test_worker_count_invariance(self, result):
        par = run_simulation(_config(), workers=2)
        assert [r.to_json() for r in par.records] == [r.to_json() for r in result.records]
        assert par.rb == result.rb

    def test_rb_definition(self, result):
        for m in (1, 2):
            assert result.rb[m] == relative_bias(result.bc_est[m].value, result.bc_true.value)
            assert np.isfinite(result.rb_se[m]) and result.rb_se[m] > 0
        assert bc_true(result) == (result.bc_true.value, result.bc_true.se)
        assert bc_est(result, 2) == (result.bc_est[2].value, result.bc_est[2].se)
        assert result.bc_true.value > 0

    def test_paired_records(self, result):
        kept = [r for r in result.records if r.kept]
        assert len(kept) == result.n_converged
        pen = np.array([r.penalties[2] for r in kept])
        assert result.bc_est[2].value == pytest.approx(pen.mean(), rel=1e-14)
        assert result.bc_true.value == pytest.approx(np.mean([r.bc for r in kept]), rel=1e-14)

    def test_discards_removed_from_both(self, result):
        recs = list(result.records)
        for k in (1, 4):
            r = recs[k]
            recs[k] = dataclasses.replace(r, converged=False, kept=False, reason="not converged")
        with pytest.warns(RuntimeWarning, match="2 of 6"):
            agg = aggregate(_config(), recs)
        kept = [r for r in recs if r.kept]
        assert agg.n_converged == 4 and agg.n_discarded == 2
        assert agg.bc_true.value == pytest.approx(np.mean([r.bc for r in kept]), rel=1e-14)
        for m in (1, 2):
            assert agg.bc_est[m].value == pytest.approx(np.mean([r.penalties[m] for r in kept]),
                                                        rel=1e-14)

    def test_few_discards_are_silent(self, result):
        recs = list(result.records)
        recs[0] = dataclasses.replace(recs[0], kept=False, reason="not converged")
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            agg = aggregate(_config(), recs)
        assert agg.warnings == ()

    def test_no_usable_replicates(self):
        cfg = _config(n_out=2, fit_options=FitOptions(max_outer=0, polish_steps=0))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(SimulationError):
                run_simulation(cfg)

    def test_log_file(self, tmp_path):
        cfg = _config(n_out=2)
        run_simulation(cfg, log_path=tmp_path / "r.ndjson")
        lines = (tmp_path / "r.ndjson").read_text().splitlines()
        assert [json.loads(x)["index"] for x in lines] == [0, 1]


class TestRelativeBias:
    def test_examples(self):
        assert relative_bias(2.0, 2.0) == 0.0
        assert relative_bias(1.05 * 40.0, 40.0) == pytest.approx(0.05)

    def test_zero_truth(self):
        with pytest.raises(SimulationError):
            relative_bias(1.0, 0.0)
