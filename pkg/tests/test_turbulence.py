import numpy as np
import pytest

from plumedial.dispersion import DispersionParams, KernelField, _puff_geometry, discretize_release
from plumedial.turbulence import TurbulenceConfig, l1_divergence, perturb, regular_grid

PLUME = DispersionParams(
    source=(100.0, -60.0, 0.0), release_rate=1.25, wind=((0.0, 3.0, 0.0),),
    width_knots=(3.0, 5.5, 8.0, 9.5, 12.0), drift_knots=(2.0, 4.0, 7.0, 9.0, 10.0), scatter_scale=40.0,
)


def single_level(phi_v=0.0, jumps=0, phi_j=0.0, replicates=1, a=0.9):
    return TurbulenceConfig(1, (replicates,), (phi_v,), (jumps,), (phi_j,), a)


class TestConfig:
    def test_defaults(self):
        cfg = TurbulenceConfig()
        assert cfg.replicates == (1, 1, 3, 2, 1) and cfg.phi_v[1] == pytest.approx(8 / 9)
        assert cfg.jumps == (0, 0, 0, 2, 4) and cfg.phi_j == (0.0, 0.0, 0.0, 0.55, 0.4) and cfg.ar_coeff == 0.9

    @pytest.mark.parametrize("kw", [
        dict(levels=2),
        dict(phi_v=(0.0, 1.0, 0.5, 0.5, 0.5)),
        dict(phi_j=(0.0, 0.0, 0.0, -0.1, 0.4)),
        dict(replicates=(0, 0, 0, 0, 0)),
        dict(jumps=(0, 0, 0, -1, 0)),
        dict(ar_coeff=1.0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TurbulenceConfig(**kw)


class TestPerturb:
    def test_no_noise_is_smooth_field(self):
        smooth = discretize_release(PLUME).merged()
        f = perturb(PLUME, single_level(), rng=3).merged()
        np.testing.assert_allclose(f.centers, smooth.centers, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(f.widths, smooth.widths, rtol=1e-12)
        np.testing.assert_allclose(f.weights, smooth.weights, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_mass_preserved(self, seed):
        assert perturb(PLUME, rng=seed).mass() == pytest.approx(discretize_release(PLUME).mass(), rel=1e-12)

    def test_split_branches(self):
        f = perturb(PLUME, single_level(0.5, 3, 0.4), rng=0)
        assert len(f) > 16 and len(f) <= 16 * 2**3
        assert f.mass() == pytest.approx(discretize_release(PLUME).mass(), rel=1e-12)

    def test_seed_reproducible(self):
        a, b = perturb(PLUME, rng=11), perturb(PLUME, rng=11)
        assert np.array_equal(a.centers, b.centers) and np.array_equal(a.weights, b.weights)
        assert not np.array_equal(a.centers, perturb(PLUME, rng=12).centers)

    def test_marginal_offset_std(self):
        phi = 2 / 3
        centers, dists, _, h, _ = _puff_geometry(PLUME, 16)
        # chains are emitted in order of downwind distance
        order = np.argsort(dists, kind="stable")
        centers, h = centers[order], h[order]
        rng = np.random.default_rng(4)
        offsets = np.array([(perturb(PLUME, single_level(phi), rng).centers - centers) / h[:, None] for _ in range(3000)])
        for i in (0, 7, 15):
            assert offsets[:, i].std() == pytest.approx(np.sqrt(phi), rel=0.05)
        f = perturb(PLUME, single_level(phi), rng)
        np.testing.assert_allclose(f.widths, h * np.sqrt(1 - phi), rtol=1e-12)

    def test_ar_lag_correlation(self):
        centers, dists, _, h, _ = _puff_geometry(PLUME, 16)
        order = np.argsort(dists, kind="stable")
        centers, h = centers[order], h[order]
        rng = np.random.default_rng(5)
        off = np.array([(perturb(PLUME, single_level(0.5), rng).centers - centers) / h[:, None] for _ in range(3000)])
        r = np.corrcoef(off[:, 4, 0], off[:, 5, 0])[0, 1]
        assert r == pytest.approx(0.9, abs=0.03)

    @pytest.mark.parametrize("cfg", [single_level(8 / 9, replicates=1), single_level(0.4, 4, 0.4)])
    def test_level_mean_preserved(self, cfg):
        smooth = discretize_release(PLUME)
        pts = smooth.centers[::3] + np.array([1.0, -1.0, 0.5])
        rng = np.random.default_rng(6)
        draws = np.array([perturb(PLUME, cfg, rng)(pts) for _ in range(600)])
        se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - smooth(pts)) < 3 * se)


class TestL1:
    def grid(self):
        return regular_grid((-30, -30, -30), (30, 30, 30), (30, 30, 30))

    def test_identical(self):
        f = KernelField(0.0, [[0, 0, 0]], [3.0], [1.0])
        assert l1_divergence(f, f, self.grid()) == 0.0

    def test_disjoint(self):
        a = KernelField(0.0, [[-15, 0, 0]], [1.5], [1.0])
        b = KernelField(0.0, [[15, 0, 0]], [1.5], [1.0])
        assert l1_divergence(a, b, self.grid()) == pytest.approx(2.0, rel=1e-6)

    def test_zero_mass(self):
        with pytest.raises(ValueError):
            l1_divergence(KernelField(0.0), KernelField(0.0, [[0, 0, 0]], [1.0], [1.0]), self.grid())

    def test_grid_cells(self):
        g = regular_grid((0, 0, 0), (1, 2, 3), (1, 2, 3))
        assert g.shape == (6, 3)
        np.testing.assert_allclose(g[0], [0.5, 0.5, 0.5])
