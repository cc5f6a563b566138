import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import adaptive_simpson
from plumedial.dispersion import (
    N_PARAMS,
    DegeneratePuffError,
    DispersionParams,
    GaussianPuff,
    KernelField,
    discretize_release,
    evaluate_field,
    evaluate_puff,
    field_gradient,
    kernel_profile,
    line_integral,
)


def _grid_mass(fld: KernelField, spacing: float) -> float:
    """Midpoint-rule integral of (field - w0) over a box covering all kernels to 7 sigma."""
    lo = np.min(fld.centers - 7 * fld.widths[:, None], axis=0)
    hi = np.max(fld.centers + 7 * fld.widths[:, None], axis=0)
    axes = [np.arange(a + spacing / 2, b, spacing) for a, b in zip(lo, hi)]
    total = 0.0
    X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
    for z in axes[2]:
        pts = np.stack([X, Y, np.full_like(X, z)], axis=-1)
        total += np.sum(evaluate_field(fld, pts) - fld.constant)
    return total * spacing**3


class TestEvaluatePuff:
    def params(self, var=1 / (2 * np.pi)):
        return DispersionParams(
            source=(1.0, 2.0, 3.0),
            release_rate=1.0,
            wind=((0.5, 0.0, 0.0),),
            diffusion=((0.0, var), (10.0, var)),
        )

    def test_normalisation_at_center(self):
        p = self.params()
        center, _ = p.centerline(0.0, 2.0)
        assert evaluate_puff(p, center, 2.0) == pytest.approx(1.0, rel=1e-14)
        np.testing.assert_allclose(center, [2.0, 2.0, 3.0])

    def test_one_sigma_squared_decay(self):
        p = self.params()
        h = 1 / (2 * np.pi)
        center, _ = p.centerline(0.0, 2.0)
        x = center + np.array([0.0, np.sqrt(2 * h), 0.0])
        assert evaluate_puff(p, x, 2.0) == pytest.approx(np.exp(-1.0), rel=1e-13)

    def test_volume_integral_midpoint_oracle(self):
        var = 0.7
        p = self.params(var)
        c, _ = p.centerline(0.0, 1.0)
        sd = np.sqrt(var)
        n = 128
        edges = [np.linspace(ci - 6 * sd, ci + 6 * sd, n + 1) for ci in c]
        mids = [0.5 * (e[1:] + e[:-1]) for e in edges]
        X, Y, Z = np.meshgrid(*mids, indexing="ij")
        vals = evaluate_puff(p, np.stack([X, Y, Z], axis=-1), 1.0)
        vol = np.prod([(12 * sd) / n] * 3)
        assert vals.sum() * vol == pytest.approx(1.0, rel=1e-3)

    def test_degenerate(self):
        p = self.params()
        with pytest.raises(DegeneratePuffError):
            evaluate_puff(p, (0, 0, 0), 0.0)
        p0 = DispersionParams(diffusion=((0.0, 0.0), (1.0, 0.0)))
        with pytest.raises(DegeneratePuffError):
            evaluate_puff(p0, (0, 0, 0), 0.5)

    @settings(max_examples=30, deadline=None)
    @given(
        shift=st.tuples(*[st.floats(-50, 50)] * 3),
        offset=st.tuples(*[st.floats(-3, 3)] * 3),
        t=st.floats(0.1, 20.0),
    )
    def test_translation_equivariance(self, shift, offset, t):
        p = DispersionParams(source=(0.0, 0.0, 0.0), release_rate=2.0, wind=((1.0, -0.5, 0.2),), diffusion=((0.0, 0.5), (30.0, 4.0)))
        q = DispersionParams(source=shift, release_rate=2.0, wind=((1.0, -0.5, 0.2),), diffusion=((0.0, 0.5), (30.0, 4.0)))
        c, _ = p.centerline(0.0, t)
        x = c + np.array(offset)
        assert evaluate_puff(q, x + np.array(shift), t) == pytest.approx(evaluate_puff(p, x, t), rel=1e-9, abs=1e-300)


class TestDiscretizeRelease:
    def test_single_puff_matches_evaluate_puff(self, plume_params):
        p = DispersionParams(
            source=(0.0, 0.0, 1.0), release_rate=3.0, wind=((2.0, 1.0, 0.0),), diffusion=((0.0, 0.0), (100.0, 50.0))
        )
        fld = discretize_release(p, 1)
        T = p.duration()
        rng = np.random.default_rng(1)
        c, _ = p.centerline(0.0, T)
        x = c + rng.normal(scale=3.0, size=(20, 3))
        np.testing.assert_allclose(evaluate_field(fld, x), evaluate_puff(p, x, T), rtol=1e-12)

    def test_zero_wind_centers(self):
        p = DispersionParams(
            source=(5.0, 6.0, 0.0),
            wind=((0.0, 0.0, 0.0),),
            release_duration=30.0,
            diffusion=((0.0, 4.0), (100.0, 4.0)),
            drift_knots=(3.0, 3.0, 3.0, 3.0, 3.0),
        )
        fld = discretize_release(p, 8)
        np.testing.assert_allclose(fld.centers, np.tile([5.0, 6.0, 3.0], (8, 1)))
        np.testing.assert_allclose(fld.widths, 2.0)

    def test_zero_wind_needs_duration(self):
        with pytest.raises(ValueError):
            discretize_release(DispersionParams(wind=((0.0, 0.0, 0.0),)), 4)

    def test_mass_matches_release(self, plume_params):
        fld = discretize_release(plume_params, 16)
        T = plume_params.duration()
        assert _grid_mass(fld, 1.0) == pytest.approx(plume_params.release_rate * T, rel=1e-2)

    @settings(max_examples=6, deadline=None)
    @given(
        rate=st.floats(0.05, 5.0),
        widths=st.lists(st.floats(2.0, 12.0), min_size=5, max_size=5),
        drift=st.lists(st.floats(-5.0, 15.0), min_size=5, max_size=5),
        speed=st.floats(1.0, 6.0),
        n=st.integers(2, 24),
    )
    def test_mass_conservation_random(self, rate, widths, drift, speed, n):
        p = DispersionParams(release_rate=rate, wind=((speed, 0.0, 0.0),), width_knots=tuple(widths), drift_knots=tuple(drift))
        fld = discretize_release(p, n)
        assert _grid_mass(fld, 2.0) == pytest.approx(rate * p.duration(), rel=1e-2)

    def test_width_floor(self):
        p = DispersionParams(width_knots=(0.01, 0.01, 5.0, 5.0, 5.0))
        assert discretize_release(p, 8).widths.min() == pytest.approx(p.width_floor)

    def test_parameter_count(self, plume_params):
        theta = plume_params.to_vector()
        assert theta.shape == (N_PARAMS,) == (14,)
        assert plume_params.with_vector(theta) == plume_params


class TestKernelField:
    def test_empty(self):
        assert evaluate_field(KernelField(0.3), np.zeros((4, 3))) == pytest.approx(0.3)

    def test_at_center(self):
        f = KernelField(0.2, [[1.0, 2.0, 3.0]], [2.0], [1.5])
        assert evaluate_field(f, [1.0, 2.0, 3.0]) == pytest.approx(1.7)

    def test_linearity(self, rng):
        a = KernelField(0.0, rng.normal(size=(3, 3)), [1.0, 2.0, 0.5], [1.0, 0.3, 2.0])
        b = KernelField(0.1, rng.normal(size=(2, 3)), [1.5, 0.7], [0.4, 0.9])
        x = rng.normal(size=(50, 3))
        np.testing.assert_allclose(evaluate_field(a.concat(b), x), evaluate_field(a, x) + evaluate_field(b, x), rtol=1e-13)

    def test_merge_identical(self):
        f = KernelField(0.0, [[0, 0, 0], [0, 0, 0], [1, 0, 0]], [1.0, 1.0, 1.0], [1.0, 2.0, 0.5])
        m = f.merged()
        assert len(m) == 2
        x = np.random.default_rng(2).normal(size=(10, 3))
        np.testing.assert_allclose(evaluate_field(m, x), evaluate_field(f, x), rtol=1e-13)

    def test_good_kernel_profile(self):
        r = np.linspace(0, 10, 1001)
        phi = kernel_profile(r)
        assert np.all(phi >= 0)
        assert np.all(np.diff(phi) <= 0)

    def test_rejects_bad_width(self):
        with pytest.raises(ValueError):
            GaussianPuff((0, 0, 0), 0.0, 1.0)
        with pytest.raises(ValueError):
            KernelField(0.0, [[0, 0, 0]], [-1.0], [1.0])


class TestLineIntegral:
    def test_infinite_line_through_center(self):
        f = KernelField(0.0, [[3.0, 4.0, 5.0]], [2.5], [1.7])
        val = line_integral(f, [3.0, 4.0, -10.0], [0, 0, 1.0], -np.inf, np.inf)
        assert val == pytest.approx(1.7 * 2.5 * np.sqrt(2 * np.pi), rel=1e-14)

    def test_infinite_line_offset(self):
        f = KernelField(0.0, [[0.0, 0.0, 0.0]], [2.0], [1.0])
        d = 3.0
        val = line_integral(f, [d, 0.0, 0.0], [0, 1.0, 0], -np.inf, np.inf)
        assert val == pytest.approx(2.0 * np.sqrt(2 * np.pi) * np.exp(-(d**2) / 8.0), rel=1e-13)

    def test_finite_segment_vs_simpson(self, rng):
        f = KernelField(0.01, rng.normal(scale=5.0, size=(4, 3)), [1.0, 2.0, 3.0, 0.7], [0.5, 1.0, 0.2, 2.0])
        o = np.array([-10.0, 1.0, -2.0])
        d = np.array([1.0, 0.2, 0.1])
        d /= np.linalg.norm(d)
        for s0, s1 in [(0.0, 25.0), (3.0, 9.5), (-4.0, 40.0), (12.0, 12.5)]:
            oracle = adaptive_simpson(lambda s: float(evaluate_field(f, o + s * d)), s0, s1, tol=1e-15)
            assert line_integral(f, o, d, s0, s1) == pytest.approx(oracle, rel=1e-10)

    def test_far_tail_no_cancellation(self):
        f = KernelField(0.0, [[0.0, 0.0, 0.0]], [1.0], [1.0])
        val = line_integral(f, [0.0, 0.0, 0.0], [1.0, 0, 0], 8.0, 9.0)
        oracle = adaptive_simpson(lambda s: np.exp(-s * s / 2), 8.0, 9.0, tol=1e-30)
        assert val == pytest.approx(oracle, rel=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(s=st.lists(st.floats(-30, 30), min_size=3, max_size=3, unique=True))
    def test_additivity(self, s):
        s0, s1, s2 = sorted(s)
        f = KernelField(0.05, [[1.0, 2.0, 0.0], [-3.0, 0.5, 1.0]], [2.0, 4.0], [1.0, 0.3])
        o, d = np.array([0.0, 0.0, 0.5]), np.array([0.6, 0.8, 0.0])
        whole = line_integral(f, o, d, s0, s2)
        parts = line_integral(f, o, d, s0, s1) + line_integral(f, o, d, s1, s2)
        assert parts == pytest.approx(whole, rel=1e-12, abs=1e-300)

    def test_rejects_reversed(self):
        with pytest.raises(ValueError):
            line_integral(KernelField(1.0), [0, 0, 0], [1, 0, 0], 2.0, 1.0)


class TestFieldGradient:
    def test_release_rate_is_linear(self, plume_params):
        x = np.array([100.0, -20.0, 6.0])
        g = field_gradient(plume_params, x)
        u = evaluate_field(discretize_release(plume_params), x)
        assert g[0] == pytest.approx(u / plume_params.release_rate, rel=1e-12)

    def test_far_point_zero_knot_gradient(self, plume_params):
        g = field_gradient(plume_params, [-500.0, 900.0, 300.0])
        assert np.all(np.abs(g[3:13]) < 1e-200)

    def test_central_differences(self, plume_params):
        rng = np.random.default_rng(7)
        fld = discretize_release(plume_params)
        pts = fld.centers[rng.integers(0, len(fld), 6)] + rng.normal(scale=3.0, size=(6, 3))
        theta = plume_params.to_vector()
        for x in pts:
            g = field_gradient(plume_params, x)
            fd = np.empty(N_PARAMS)
            for k in range(N_PARAMS):
                step = 1e-5 * max(abs(theta[k]), 1.0)
                tp, tm = theta.copy(), theta.copy()
                tp[k] += step
                tm[k] -= step
                up = evaluate_field(discretize_release(plume_params.with_vector(tp)), x)
                um = evaluate_field(discretize_release(plume_params.with_vector(tm)), x)
                fd[k] = (up - um) / (2 * step)
            scale = np.max(np.abs(fd))
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6 * scale)
