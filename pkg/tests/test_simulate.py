"""Monte Carlo simulator: turbid model, leaf geometry and ray casting."""

import numpy as np
import pytest

from raycanopy.density import debias_factor
from raycanopy.simulate import (LeafScene, NormalDistributionSpec, RayDistribution,
                                SimulationError, TurbidConfig, _simulate_cell,
                                bias_curves, cast_rays, clipped_area, gen_leaf_scene,
                                make_rng, sample_turbid, trawl_vs_spin,
                                triangle_bias_experiment)


class TestSampleTurbid:
    def test_shapes_and_censoring(self):
        cfg = TurbidConfig(lam=2.0, n=8, y=1.0, trials=500, seed=3)
        m, x = sample_turbid(cfg)
        assert m.shape == (500,) and x.shape == (500, 8)
        assert np.all(x <= 1.0 + 1e-12)
        assert np.all(x > 0)
        np.testing.assert_array_equal(m, (x < 1.0).sum(axis=1))

    def test_hit_fraction_matches_theory(self):
        lam, y, n, trials = 1.3, 0.8, 20, 20_000
        m, _ = sample_turbid(TurbidConfig(lam=lam, n=n, y=y, trials=trials, seed=7))
        p = 1.0 - np.exp(-lam * y)
        frac = m.sum() / (trials * n)
        se = np.sqrt(p * (1 - p) / (trials * n))
        assert abs(frac - p) < 3 * se

    def test_intercepted_depth_mean_matches_integral(self):
        lam, y = 2.0, 1.0
        m, x = sample_turbid(TurbidConfig(lam=lam, n=50, y=y, trials=40_000, seed=11))
        hit = x < y
        # E[x | x < y] for a censored exponential
        expect = 1.0 / lam - y * np.exp(-lam * y) / (1.0 - np.exp(-lam * y))
        assert x[hit].mean() == pytest.approx(expect, rel=0.01)

    def test_invalid_config_rejected(self):
        with pytest.raises(SimulationError):
            TurbidConfig(lam=0.0, n=5)


class TestBiasCurves:
    def test_uncensored_estimator_unbiased(self):
        err, se = bias_curves([0.5, 2.0, 5.0], [50], 20_000, "uncensored",
                              y=np.inf, seed=1)
        assert np.all(np.abs(err) < 0.01)

    def test_ml_mode_underestimates_at_n2(self):
        err, _ = bias_curves([0.5, 1.0, 2.0], [2], 20_000, "ml-mode", seed=2)
        assert np.all(err < 0.0)

    def test_identical_seed_identical_output(self):
        a, _ = bias_curves([1.0], [4, 8], 2000, "debiased", seed=5)
        b, _ = bias_curves([1.0], [4, 8], 2000, "debiased", seed=5)
        np.testing.assert_array_equal(a, b)


class TestClippedArea:
    def test_fully_inside_triangle_keeps_area(self):
        tri = np.array([[[0.2, 0.2, 0.2], [0.4, 0.2, 0.2], [0.2, 0.5, 0.3]]])
        full = 0.5 * np.linalg.norm(np.cross(tri[0, 1] - tri[0, 0], tri[0, 2] - tri[0, 0]))
        assert clipped_area(tri, 1.0)[0] == pytest.approx(full, rel=1e-12)

    def test_fully_outside_is_zero(self):
        tri = np.array([[[2.0, 2.0, 2.0], [3.0, 2.0, 2.0], [2.0, 3.0, 2.0]]])
        assert clipped_area(tri, 1.0)[0] == 0.0

    def test_matches_rasterisation_oracle(self, rng):
        w = 0.1
        count = 30
        centres = rng.uniform(-0.02, w + 0.02, size=(count, 3))
        normals = NormalDistributionSpec().sample(count, make_rng(5))
        from raycanopy.simulate import _triangle_vertices
        tris = _triangle_vertices(centres, normals, rng.uniform(0, 2 * np.pi, count),
                                  side=0.06)
        areas = clipped_area(tris, w)
        full = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0],
                                             tris[:, 2] - tris[:, 0]), axis=1)
        n_samp = 200_000
        u = rng.uniform(0, 1, (n_samp, 2))
        flip = u.sum(axis=1) > 1
        u[flip] = 1 - u[flip]
        for t in range(count):
            pts = (tris[t, 0] + u[:, :1] * (tris[t, 1] - tris[t, 0])
                   + u[:, 1:] * (tris[t, 2] - tris[t, 0]))
            inside = np.all((pts >= 0) & (pts <= w), axis=1)
            mc = full[t] * inside.mean()
            assert abs(mc - areas[t]) <= 0.005 * full[t] + 3 * full[t] * np.sqrt(
                inside.mean() * (1 - inside.mean()) / n_samp)


class TestLeafScene:
    def test_generated_scene_is_consistent(self, rng):
        scene = gen_leaf_scene(0.1, 0.05, 0.01, NormalDistributionSpec(), make_rng(9))
        scene.validate()
        assert scene.true_density >= 0

    def test_zero_area_gives_empty_scene(self):
        scene = gen_leaf_scene(0.1, 0.05, 0.0, NormalDistributionSpec(), make_rng(0))
        assert len(scene.triangles) == 0 and scene.true_density == 0.0

    def test_mean_density_tracks_target(self):
        # realised mean over many scenes approaches target / volume
        w, area = 0.1, 0.02
        rng = make_rng(4)
        dens = [gen_leaf_scene(w, 0.04, area, NormalDistributionSpec(), rng).true_density
                for _ in range(400)]
        # clipping removes leaf parts outside the box, so the mean sits below
        # the unclipped target but well within a factor of ~0.5
        target = area / w ** 3
        assert 0.4 * target < np.mean(dens) < 1.05 * target

    def test_normal_spec_rejects_nonpositive(self):
        with pytest.raises(SimulationError):
            NormalDistributionSpec((1.0, 0.0, 1.0))


class TestCastRays:
    def test_empty_scene_no_hits(self):
        scene = LeafScene(np.zeros((0, 3, 3)), 0.1, 0.0)
        stats = cast_rays(scene, RayDistribution("uniform-random"), 200, make_rng(1))
        assert stats.n == 200 and stats.m == 0
        np.testing.assert_allclose(stats.x, stats.y)

    def test_midplane_wall_intercepts_trawling_rays(self):
        w = 0.1
        big = np.array([[[w / 2, -10.0, -10.0], [w / 2, 20.0, -10.0],
                         [w / 2, 0.0, 30.0]]])
        scene = LeafScene(big, w, float(clipped_area(big, w)[0] / w ** 3))
        scene.validate()
        stats = cast_rays(scene, RayDistribution("trawling"), 100, make_rng(2))
        assert stats.m == 100
        np.testing.assert_allclose(stats.x, w / 2, atol=1e-12)
        np.testing.assert_allclose(stats.y, w, atol=1e-12)

    def test_dense_scene_intercepts_almost_everything(self):
        scene = gen_leaf_scene(0.1, 0.05, 0.6, NormalDistributionSpec(), make_rng(3))
        stats = cast_rays(scene, RayDistribution("uniform-random"), 500, make_rng(4))
        assert stats.m / stats.n > 0.95

    def test_matches_per_ray_bruteforce(self, rng):
        w = 0.1
        scene = gen_leaf_scene(w, 0.05, 0.03, NormalDistributionSpec(), make_rng(6))
        n = 1000
        seed = 17
        stats = cast_rays(scene, RayDistribution("uniform-random"), n, make_rng(seed))
        starts, dirs, chord = _regen_rays(n, w, seed)
        for i in range(n):
            t_best = chord[i]
            hit = False
            for tri in scene.triangles:
                t = _ray_tri(starts[i], dirs[i], tri)
                if t is not None and 0.0 <= t <= chord[i] and t < t_best:
                    t_best = t
                    hit = True
            assert bool(hit) == bool(stats.x[i] < stats.y[i])
            assert stats.x[i] == pytest.approx(t_best, abs=1e-9)
        assert stats.m == int((stats.x < stats.y).sum())


def _regen_rays(n, w, seed):
    from raycanopy.simulate import _rays_uniform_chords
    return _rays_uniform_chords(n, w, make_rng(seed))


def _ray_tri(start, d, tri):
    v0, v1, v2 = tri
    e1, e2 = v1 - v0, v2 - v0
    h = np.cross(d, e2)
    det = e1 @ h
    if abs(det) < 1e-14:
        return None
    s = start - v0
    u = (s @ h) / det
    q = np.cross(s, e1)
    v = (d @ q) / det
    if u < 0 or v < 0 or u + v > 1:
        return None
    return float((e2 @ q) / det)


class TestExperiments:
    def test_estimator_accurate_at_large_n(self):
        est, rho = _simulate_cell(0.1, 0.05, 0.01, 50, 2000,
                                  RayDistribution("uniform-random"),
                                  NormalDistributionSpec(), make_rng(8))
        err = (est.mean() - rho.mean()) / rho.mean()
        assert abs(err) < 0.05

    def test_raw_estimator_tracks_reference_curve_smoke(self):
        res = triangle_bias_experiment(configs=((0.05, 0.01),), n_values=[6, 10],
                                       trials=800, seed=1)
        for ni in range(2):
            assert abs(res["error"][0, ni] - res["reference"][ni]) < 0.2

    def test_bit_identical_reruns(self):
        a = triangle_bias_experiment(configs=((0.05, 0.01),), n_values=[4],
                                     trials=200, seed=9)
        b = triangle_bias_experiment(configs=((0.05, 0.01),), n_values=[4],
                                     trials=200, seed=9)
        np.testing.assert_array_equal(a["error"], b["error"])

    def test_trawl_vs_spin_shape(self):
        res = trawl_vs_spin(normal_specs=((1, 1, 1),), n=20, trials=60, seed=2)
        assert res["error_percent"].shape == (1, 2)
        assert res["distributions"] == ("trawling", "spinning")

    def test_debias_factor_used_by_engine(self):
        rng_a, rng_b = make_rng(21), make_rng(21)
        raw, _ = _simulate_cell(0.1, 0.05, 0.01, 10, 50,
                                RayDistribution("uniform-random"),
                                NormalDistributionSpec(), rng_a, debias=False)
        deb, _ = _simulate_cell(0.1, 0.05, 0.01, 10, 50,
                                RayDistribution("uniform-random"),
                                NormalDistributionSpec(), rng_b, debias=True)
        np.testing.assert_allclose(deb, raw * debias_factor(10), rtol=1e-12)
