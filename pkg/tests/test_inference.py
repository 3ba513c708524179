import math
import warnings

import numpy as np
import pytest
from scipy import stats

from fpls.cgpls import cg_pls
from fpls.fspace import Dataset, FunctionVec, Grid, center, compute_moments
from fpls.inference import (
    AsymptoticPremiseWarning,
    BoundaryWarning,
    Method,
    bootstrap_statistics,
    confidence_set,
    cosine_basis,
    critical_value_bootstrap,
    critical_value_simulated,
    prepare_inference,
    run_test,
    simulate_weighted_chi2,
    rng_stream,
    test_statistic as statistic,
    write_confidence_set,
    write_test_report,
)
from fpls.simlab import ModelSpec, shift_function, simulate_dataset
from fpls.spectral import spectrum_k_hat, variance_spectrum


@pytest.fixture(scope="module")
def m1_data():
    raw, beta = simulate_dataset(ModelSpec.m1(), 100, 11)
    return center(raw), beta


@pytest.fixture(scope="module")
def m1_setup(m1_data):
    return prepare_inference(m1_data[0], seed=5, n_sims=20_000)


class TestStatistic:
    def test_identity(self, m1_data):
        data, _ = m1_data
        mom = compute_moments(data)
        b = FunctionVec(data.grid, cg_pls(mom, 10).path[-1])
        assert statistic(mom, b, b) == 0.0

    def test_null_space_blind(self, rng):
        g = Grid(40)
        x = np.zeros((8, 40))
        x[:, :20] = rng.standard_normal((8, 20))
        data = center(Dataset(g, x, rng.standard_normal(8)))
        mom = compute_moments(data)
        b = FunctionVec(g, rng.standard_normal(40))
        v = np.zeros(40)
        v[25:] = 1.0
        assert statistic(mom, b, b + FunctionVec(g, v)) == pytest.approx(0.0, abs=1e-20)

    def test_dense_operator(self, rng):
        data = center(Dataset(Grid(30), rng.standard_normal((15, 30)), rng.standard_normal(15)))
        mom = compute_moments(data)
        bm = FunctionVec(data.grid, rng.standard_normal(30))
        b = FunctionVec(data.grid, rng.standard_normal(30))
        k = data.x.T @ data.x / (data.n * 30)
        diff = k @ (bm.values - b.values)
        ref = data.n * float(diff @ diff) / 30
        assert statistic(mom, bm, b) == pytest.approx(ref, rel=1e-8)

    def test_quadratic_in_shift(self, m1_setup):
        d = shift_function(m1_setup.data.grid)
        ts = [m1_setup.statistic(m1_setup.beta_m + t * d) for t in (-1.0, 0.0, 1.0, 2.0)]
        # second difference of a quadratic is constant
        assert ts[0] - 2 * ts[1] + ts[2] == pytest.approx(ts[1] - 2 * ts[2] + ts[3], rel=1e-8)


class TestCriticalValues:
    def test_chi2_one(self):
        z = critical_value_simulated(np.array([1.0]), 0.05, 50_000, seed=3)
        assert abs(z - stats.chi2.ppf(0.95, 1)) < 0.1

    def test_zero_weights(self):
        assert critical_value_simulated(np.zeros(4), 0.05, 1000, seed=0) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            critical_value_simulated(np.array([]), 0.05)

    def test_alpha_domain(self):
        for a in (0.0, 1.0, -0.1):
            with pytest.raises(ValueError):
                critical_value_simulated(np.ones(2), a)

    def test_deterministic(self, m1_data):
        data, beta = m1_data
        omega = variance_spectrum(data, beta)
        a = critical_value_simulated(omega, 0.05, 5000, seed=9)
        b = critical_value_simulated(omega, 0.05, 5000, seed=9)
        c = critical_value_simulated(omega, 0.05, 5000, seed=10)
        assert a == b and a != c

    def test_truncates_to_top_100(self):
        w = np.r_[np.ones(100), np.full(50, 1e3)]
        z_all = critical_value_simulated(w, 0.1, 2000, seed=1)
        # the top 100 include the 50 large weights
        assert z_all > 1e4

    def test_population_weights_agree(self):
        # the spectrum at the true slope; the quantile rides on lambda_1,
        # whose estimate has ~4.5% sampling error at n=1000, so compare the median
        from fpls.simlab import population_weights

        spec = ModelSpec.m1()
        pop = critical_value_simulated(population_weights(spec), 0.05, 50_000, seed=2)
        ratios = []
        for seed in range(9):
            raw, beta = simulate_dataset(spec, 1000, seed)
            data = center(raw)
            est = critical_value_simulated(variance_spectrum(data, beta), 0.05, 50_000, seed=2)
            ratios.append(est / pop - 1)
        assert abs(np.median(ratios)) < 0.05

    def test_chunking_invisible(self):
        w = np.array([2.0, 1.0, 0.5])
        a = simulate_weighted_chi2(w, 25_000, rng_stream(1, 2), chunk=10_000)
        b = simulate_weighted_chi2(w, 25_000, rng_stream(1, 2), chunk=25_000)
        np.testing.assert_array_equal(a, b)


class TestBootstrap:
    def test_single_draw(self, m1_data):
        data, beta = m1_data
        draws = bootstrap_statistics(data, beta, 10, 1, seed=4)
        z = critical_value_bootstrap(data, beta, 10, 0.05, 1, seed=4, center_beta=beta)
        assert draws.size == 1 and z == draws[0]

    def test_noiseless_collapse(self, rng):
        g = Grid(30)
        k = 4
        phi = np.array([np.sqrt(2) * np.cos(j * np.pi * g.points) for j in range(1, k + 1)])
        scores = rng.standard_normal((60, k))
        beta = FunctionVec(g, phi.T @ rng.standard_normal(k))
        x = scores @ phi
        data = center(Dataset(g, x, x @ beta.values * g.weight))
        draws = bootstrap_statistics(data, beta, k, 50, seed=1)
        assert np.max(draws) < 1e-15

    def test_agrees_with_spectrum(self, m1_data, m1_setup):
        data, beta = m1_data
        z = critical_value_bootstrap(data, beta, m1_setup.m_used, 0.05, 500, seed=8)
        assert abs(z - m1_setup.critical_value) / m1_setup.critical_value < 0.25

    def test_deterministic(self, m1_data):
        data, beta = m1_data
        a = bootstrap_statistics(data, beta, 5, 20, seed=3)
        b = bootstrap_statistics(data, beta, 5, 20, seed=3)
        np.testing.assert_array_equal(a, b)


class TestRunTest:
    def test_outcome_fields(self, m1_data):
        data, beta = m1_data
        o = run_test(data, beta, seed=1, n_sims=5000)
        assert o.reject == (o.t_n > o.critical_value)
        assert 0 < o.p_value <= 1
        assert o.m_used == 70
        assert o.method is Method.SIMULATED_SPECTRUM

    def test_p_value_consistent(self, m1_setup):
        ref = m1_setup.reference
        z = m1_setup.critical_value
        assert m1_setup.p_value(z * 1.5) <= m1_setup.alpha
        assert m1_setup.p_value(0.0) == 1.0
        t = float(np.median(ref))
        expected = (np.sum(ref >= t) + 1) / (ref.size + 1)
        assert m1_setup.p_value(t) == pytest.approx(expected)

    def test_self_and_far(self, m1_setup, m1_data):
        _, beta = m1_data
        assert m1_setup.outcome(m1_setup.beta_m).t_n == 0.0
        far = m1_setup.outcome(beta + 5.0 * shift_function(beta.grid))
        assert far.reject and far.p_value < 1e-3

    def test_determinism(self, m1_data):
        data, beta = m1_data
        a = run_test(data, beta, seed=4, n_sims=3000)
        b = run_test(data, beta, seed=4, n_sims=3000)
        assert (a.t_n, a.critical_value, a.p_value) == (b.t_n, b.critical_value, b.p_value)

    def test_m_capped_by_rank(self, rng):
        data = center(Dataset(Grid(50), rng.standard_normal((12, 50)), rng.standard_normal(12)))
        o = run_test(data, data.grid.zeros(), n_sims=1000)
        assert o.m_used <= 11

    def test_premise_warning(self, m1_data):
        data, beta = m1_data
        with pytest.warns(AsymptoticPremiseWarning):
            prepare_inference(data, m=1, n_sims=2000)

    def test_bootstrap_method(self, m1_data):
        data, beta = m1_data
        o = run_test(data, beta, method="bootstrap", n_boot=50, seed=2)
        assert o.method is Method.BOOTSTRAP
        assert o.critical_value > 0

    def test_report(self, tmp_path, m1_setup, m1_data):
        o = m1_setup.outcome(m1_data[1])
        write_test_report(o, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "t_n,critical_value,p_value,alpha,m_used,method,seed,reject"
        assert len(lines) == 2


class TestConfidenceSet:
    def test_duality(self, m1_setup):
        cs = confidence_set(None, 3, (0.0, 4.5, 6), setup=m1_setup)
        h = cosine_basis(m1_setup.data.grid, 3)
        for point, acc in zip(cs.coefficient_grid, cs.accepted):
            b = FunctionVec(m1_setup.data.grid, point @ h)
            assert m1_setup.outcome(b).reject == (not acc)

    def test_quadratic_form_matches_statistic(self, m1_setup):
        cs = confidence_set(None, 5, (0.0, 4.5, 3), setup=m1_setup)
        h = cosine_basis(m1_setup.data.grid, 5)
        pts = cs.coefficient_grid[::17]
        direct = [m1_setup.statistic(FunctionVec(m1_setup.data.grid, p @ h)) for p in pts]
        np.testing.assert_allclose(cs.statistic(pts), direct, rtol=1e-9)

    def test_projection_accepted(self, rng):
        # curves and slope in the span of the first three basis functions, no noise:
        # b_m equals its own basis projection, so T_n there is 0
        g = Grid(60)
        h = cosine_basis(g, 3)
        x = rng.standard_normal((40, 3)) @ h
        coef = np.array([1.0, 0.5, 0.25])
        data = center(Dataset(g, x, x @ (coef @ h) * g.weight + 0.01 * rng.standard_normal(40)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryWarning)
            setup = prepare_inference(data, n_sims=5000)
            probe = confidence_set(None, 3, (0.0, 1.0, 2), setup=setup)
            proj = probe.minimizer()
            cs = confidence_set(None, 3, [(c - 0.1, c + 0.1, 3) for c in proj], setup=setup)
        assert setup.m_used == 3
        np.testing.assert_allclose(proj @ h, setup.beta_m.values, atol=1e-8)
        assert cs.statistic(proj)[0] < 1e-15
        assert cs.accepted.reshape(cs.shape)[1, 1, 1]

    def test_alpha_monotone(self, m1_data):
        data, _ = m1_data
        sizes = []
        for a in (0.01, 0.2, 0.9):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                cs = confidence_set(data, 2, (0.0, 4.5, 30), alpha=a, seed=1, n_sims=5000)
            sizes.append(cs.accepted.sum())
        assert sizes[0] >= sizes[1] >= sizes[2]

    def _near_lattice(self, setup, half):
        centre = confidence_set(None, 2, (0.0, 1.0, 2), setup=setup).minimizer()
        return [(c - half, c + half, 5) for c in centre]

    def test_extreme_alpha(self, m1_data):
        data, _ = m1_data
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            lo = prepare_inference(data, alpha=1e-4, seed=1, n_sims=50_000)
            hi = prepare_inference(data, alpha=0.999, seed=1, n_sims=50_000)
            tiny = confidence_set(None, 2, self._near_lattice(lo, 0.01), setup=lo)
            big = confidence_set(None, 2, (3.0, 4.5, 10), setup=hi)
        assert tiny.accepted.all()
        assert not big.accepted.any()

    def test_boundary_warning(self, m1_setup):
        with pytest.warns(BoundaryWarning):
            confidence_set(None, 2, self._near_lattice(m1_setup, 0.01), setup=m1_setup)

    def test_cell_acceptance(self, m1_setup):
        cs = confidence_set(None, 2, (0.0, 4.5, 5), setup=m1_setup)
        coef = np.array([4.0, 0.6])
        lo, hi = cs.cell_of(coef)
        assert np.all(lo <= coef) and np.all(coef <= hi)
        # an accepted vertex implies the cell intersects the set
        if cs.corner_accepted(coef):
            assert cs.cell_accepted(coef)
        if cs.contains(coef):
            assert cs.cell_accepted(coef)
        assert cs.cell_min_statistic(coef) <= cs.statistic(coef)[0] + 1e-9

    def test_bad_grid_spec(self, m1_setup):
        with pytest.raises(ValueError):
            confidence_set(None, 2, [(0, 1, 3)], setup=m1_setup)
        with pytest.raises(ValueError):
            confidence_set(None, 1, (1.0, 0.0, 3), setup=m1_setup)

    def test_writer(self, tmp_path, m1_setup):
        import json

        cs = confidence_set(None, 2, (0.0, 4.5, 12), setup=m1_setup)
        write_confidence_set(cs, tmp_path / "a.csv", tmp_path / "a.json")
        rows = (tmp_path / "a.csv").read_text().splitlines()
        assert rows[0] == "b_1,b_2"
        assert len(rows) == cs.accepted.sum() + 1
        meta = json.loads((tmp_path / "a.json").read_text())
        assert meta["n_accepted"] == int(cs.accepted.sum())
        assert meta["axes"][0] == {"lo": 0.0, "hi": 4.5, "count": 12}


def test_cosine_basis_orthonormal():
    h = cosine_basis(Grid(200), 6)
    gram = h @ h.T / 200
    # left-rule cross terms between odd-distance frequencies are O(1/T)
    assert np.max(np.abs(gram - np.eye(6))) < 0.011
