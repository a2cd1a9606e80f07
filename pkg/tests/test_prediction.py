import numpy as np
import pytest

from mfgp.covariance import ModelParams
from mfgp.data import FidelityDataset
from mfgp.kernels import KernelParams, separable_gram
from mfgp.prediction import krige_grid, predict_hf
from mfgp.simulation import simulate_at_sites


def _theta(rho=0.6, tau_l=0.3, tau_h=0.3, var_l=2.0, var_d=0.8, ls=1.5):
    return ModelParams(
        rho=rho,
        kernel_L=KernelParams.isotropic(var_l, ls),
        kernel_delta=KernelParams.isotropic(var_d, ls),
        tau_L_sq=tau_l,
        tau_H_sq=tau_h,
    )


@pytest.fixture(scope="module")
def field_sim():
    rng = np.random.default_rng(3)
    lf_sites = rng.uniform(0.0, 4.0, size=(8, 2))
    hf_sites = rng.uniform(0.5, 3.5, size=(3, 2))
    times = np.linspace(0.0, 1.0, 6)
    return simulate_at_sites(lf_sites, hf_sites, times, _theta(), seed=10)


class TestPredictHf:
    def test_far_query_reverts_to_prior(self, field_sim):
        theta = _theta()
        pred = predict_hf(field_sim.dataset, theta, np.array([[500.0, 500.0, 0.5]]))
        prior_var = theta.rho**2 * 2.0 + 0.8
        assert pred.mean[0] == pytest.approx(0.0, abs=1e-6)
        assert pred.variance[0] == pytest.approx(prior_var, rel=1e-6)

    def test_noise_free_interpolation(self):
        theta = _theta(tau_h=0.0)
        rng = np.random.default_rng(0)
        sim = simulate_at_sites(
            rng.uniform(0, 3, (5, 2)), rng.uniform(0, 3, (3, 2)), [0.0, 0.5, 1.0], theta, seed=4
        )
        ds = sim.dataset
        pred = predict_hf(ds, theta, ds.hf_points)
        assert np.allclose(pred.mean, ds.hf_values, atol=1e-4)
        assert np.all(pred.variance < 1e-4)

    def test_variance_never_exceeds_prior(self, field_sim, rng):
        theta = _theta()
        prior_var = theta.rho**2 * 2.0 + 0.8
        q = rng.uniform(-1, 5, size=(50, 3))
        pred = predict_hf(field_sim.dataset, theta, q)
        assert np.all(pred.variance <= prior_var + 1e-10)
        assert np.all(pred.variance >= 0.0)

    def test_two_point_closed_form(self):
        # one LF and one HF observation at the same point, query at that point:
        # explicit 2x2 conditioning oracle
        theta = _theta()
        pt = np.array([[1.0, 1.0, 0.5]])
        y = np.array([0.9, -0.3])
        ds = FidelityDataset(
            lf_points=pt, lf_values=[y[0]], hf_points=pt.copy(), hf_values=[y[1]]
        )
        sigma = np.array([[2.3, 1.2], [1.2, 0.36 * 2.0 + 0.8 + 0.3]])
        k_star = np.array([1.2, 0.36 * 2.0 + 0.8])  # cov(f_H(q), [y_L, y_H])
        prior = 0.36 * 2.0 + 0.8
        weights = np.linalg.solve(sigma, k_star)
        expected_mean = weights @ y
        expected_var = prior - k_star @ np.linalg.solve(sigma, k_star)
        pred = predict_hf(ds, theta, pt)
        assert pred.mean[0] == pytest.approx(expected_mean, rel=1e-8)
        assert pred.variance[0] == pytest.approx(expected_var, rel=1e-6)

    def test_linear_in_observations(self, field_sim, rng):
        theta = _theta()
        ds = field_sim.dataset
        q = rng.uniform(0, 4, size=(7, 3))
        y1_l, y1_h = rng.normal(size=ds.n_lf), rng.normal(size=ds.n_hf)
        y2_l, y2_h = rng.normal(size=ds.n_lf), rng.normal(size=ds.n_hf)
        a, b = 1.7, -0.4

        def with_values(yl, yh):
            return FidelityDataset(
                lf_points=ds.lf_points, lf_values=yl, hf_points=ds.hf_points, hf_values=yh
            )

        m1 = predict_hf(with_values(y1_l, y1_h), theta, q).mean
        m2 = predict_hf(with_values(y2_l, y2_h), theta, q).mean
        m12 = predict_hf(with_values(a * y1_l + b * y2_l, a * y1_h + b * y2_h), theta, q).mean
        assert np.allclose(m12, a * m1 + b * m2, rtol=1e-7, atol=1e-9)

    def test_variance_shrinks_with_extra_observation(self):
        theta = _theta()
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        q = np.array([[0.5, 0.0, 0.0]])
        ds1 = FidelityDataset(
            lf_points=pts[:1], lf_values=[0.4], hf_points=pts[:1], hf_values=[0.2]
        )
        ds2 = FidelityDataset(
            lf_points=pts[:1], lf_values=[0.4], hf_points=pts, hf_values=[0.2, -0.1]
        )
        v1 = predict_hf(ds1, theta, q).variance[0]
        v2 = predict_hf(ds2, theta, q).variance[0]
        assert v2 <= v1 + 1e-12

    def test_decoupled_matches_single_fidelity_gp(self, field_sim, rng):
        # rho = 0: prediction reduces to a plain GP on the HF data alone
        theta = _theta(rho=0.0)
        ds = field_sim.dataset
        q = rng.uniform(0, 4, size=(9, 3))
        pred = predict_hf(ds, theta, q)
        K = separable_gram(ds.hf_points, ds.hf_points, theta.kernel_delta)
        K[np.diag_indices_from(K)] += theta.tau_H_sq
        k_star = separable_gram(q, ds.hf_points, theta.kernel_delta)
        expected_mean = k_star @ np.linalg.solve(K, ds.hf_values)
        expected_var = 0.8 - np.einsum(
            "ij,ji->i", k_star, np.linalg.solve(K, k_star.T)
        )
        assert np.allclose(pred.mean, expected_mean, rtol=1e-7, atol=1e-9)
        assert np.allclose(pred.variance, expected_var, rtol=1e-5, atol=1e-8)


class TestKrigeGrid:
    def test_constant_field_reproduced(self):
        theta = _theta(var_l=4.0, var_d=0.1, tau_l=1e-3, tau_h=1e-3, ls=50.0)
        rng = np.random.default_rng(8)
        sites = rng.uniform(0.0, 2.0, size=(6, 2))
        c = 3.0
        pts = np.column_stack([np.repeat(sites[:, 0], 3), np.repeat(sites[:, 1], 3), np.tile([0.0, 0.5, 1.0], 6)])
        ds = FidelityDataset(
            lf_points=pts,
            lf_values=np.full(18, c / theta.rho),
            hf_points=pts.copy(),
            hf_values=np.full(18, c),
        )
        summary = krige_grid(ds, theta, bbox=(0.0, 2.0, 0.0, 2.0), resolution=(5, 4), times=[0.25, 0.75])
        assert np.allclose(summary.mean, c, atol=0.05 * c)

    def test_single_cell_matches_predict(self, field_sim):
        theta = _theta()
        ds = field_sim.dataset
        pt = ds.hf_points[0]
        summary = krige_grid(
            ds,
            theta,
            bbox=(pt[0] - 0.01, pt[0] + 0.01, pt[1] - 0.01, pt[1] + 0.01),
            resolution=(1, 1),
            times=[pt[2]],
        )
        direct = predict_hf(ds, theta, pt[None, :])
        assert summary.mean[0, 0, 0] == pytest.approx(direct.mean[0], rel=1e-10)
        assert summary.sd[0, 0, 0] == pytest.approx(np.sqrt(direct.variance[0]), rel=1e-8)

    def test_variance_higher_at_uninformed_corners(self):
        # stations concentrated at the centre of the box: corner cells less
        # informed than central cells
        theta = _theta(ls=0.05)
        bbox = (9.7, 10.15, 53.49, 53.62)
        rng = np.random.default_rng(21)
        lf_sites = np.column_stack(
            [rng.uniform(9.85, 10.0, 8), rng.uniform(53.53, 53.58, 8)]
        )
        hf_sites = np.column_stack(
            [rng.uniform(9.88, 9.97, 2), rng.uniform(53.54, 53.57, 2)]
        )
        times = np.arange(30.0)
        theta_days = ModelParams(
            rho=theta.rho,
            kernel_L=KernelParams(2.0, 0.05, 0.05, 1.5),
            kernel_delta=KernelParams(0.8, 0.08, 0.08, 1.5),
            tau_L_sq=0.3,
            tau_H_sq=0.3,
        )
        sim = simulate_at_sites(lf_sites, hf_sites, times, theta_days, seed=2)
        summary = krige_grid(sim.dataset, theta_days, bbox, resolution=(50, 30), times=[5.0, 15.0, 25.0])
        assert np.all(np.isfinite(summary.mean))
        assert np.all(np.isfinite(summary.sd))
        corner_var = np.mean(
            [summary.sd[0, 0], summary.sd[0, -1], summary.sd[-1, 0], summary.sd[-1, -1]]
        )
        center_var = np.mean(summary.sd[12:18, 20:30])
        assert corner_var > center_var

    def test_empty_times_rejected(self, field_sim):
        with pytest.raises(ValueError):
            krige_grid(field_sim.dataset, _theta(), (0, 1, 0, 1), (2, 2), [])

    def test_frame_layout(self, field_sim):
        theta = _theta()
        summary = krige_grid(field_sim.dataset, theta, (0, 4, 0, 4), (3, 2), [0.0, 1.0])
        frame = summary.to_frame()
        assert list(frame.columns) == ["lon", "lat", "t", "mean", "sd"]
        assert len(frame) == 3 * 2 * 2
        # row-major: lat blocks outermost, time fastest
        assert frame["t"].iloc[0] == 0.0 and frame["t"].iloc[1] == 1.0
        assert frame["lat"].iloc[0] == frame["lat"].iloc[5]
