import numpy as np
import pytest

from rfsplat import renderer as rd
from rfsplat.dataset import SynthSpec, synth_scene
from rfsplat.geometry import AngularCoord, ProjectedGaussian, eigmax_2x2_vec
from rfsplat.renderer import AngularGrid, Projection
from rfsplat.scene import Kind, Scene
from tests.conftest import make_lobe, make_primitive, single_prim_scene


def random_scene(seed, **over):
    kw = dict(n_static=4, n_kinematic=1, n_transient=1, seed=seed, lobes=3,
              dist_range=(8.0, 16.0), scale_range=(0.8, 2.5), max_speed=1.0,
              amp_range=(0.02, 0.1))
    kw.update(over)
    return synth_scene(SynthSpec(**kw))


class TestGrid:
    def test_default_resolution(self):
        g = AngularGrid()
        assert (g.H, g.W) == (90, 360)
        assert g.theta_lo == 0.0 and g.theta_hi == pytest.approx(np.pi / 2)

    def test_bin_centers(self):
        g = AngularGrid(H=2, W=4)
        assert np.allclose(g.phi_centers(),
                           [-np.pi + np.pi / 2 * (i + 0.5) for i in range(4)])
        # d_theta = (pi/2)/2, first center at half a bin
        assert g.theta_centers()[0] == pytest.approx(np.pi / 8)

    def test_invalid(self):
        with pytest.raises(rd.RenderError):
            AngularGrid(H=0, W=10)


class TestProjection:
    def test_composed_closed_form(self):
        # primitive straight ahead at distance D = eta, isotropic sigma
        D, sig = 4.0, 0.5
        scene = single_prim_scene(mu0=(D, 0.0, 0.0), scale=(sig, sig, sig))
        # eta is softplus-stored; set it to exactly D
        from rfsplat.scene import softplus_inv
        scene.eta_raw = float(softplus_inv(D))
        proj = rd.project_primitives(scene, (0.0, 0.0, 0.0), 5.0)
        assert len(proj) == 1
        expect = 2.0 * (sig**2 / D**2)
        assert np.allclose(proj[0].sigma2d, expect * np.eye(2), rtol=1e-5)

    def test_inactive_excluded(self):
        lobe = make_lobe(t_c=5.0, t_w=0.5)
        scene = Scene.from_primitives(
            [make_primitive(kind=Kind.TRANSIENT, lobes=[lobe])],
            eta=1.0, r_rx=1.0, t_span=(0.0, 10.0))
        assert rd.project_primitives(scene, (0, 0, 0), 9.0) == []
        assert len(rd.project_primitives(scene, (0, 0, 0), 5.0)) == 1

    def test_rho_and_depth_culls(self):
        near = single_prim_scene(mu0=(0.05, 0.0, 0.0))
        assert rd.project_primitives(near, (0, 0, 0), 5.0) == []
        faint = single_prim_scene()
        faint.rho_logit[0] = -10.0  # rho ~ 4.5e-5 < 1/255
        assert rd.project_primitives(faint, (0, 0, 0), 5.0) == []

    def test_empty_scene(self):
        scene = Scene(0, 1, 0.5, 1.0, (0.0, 1.0))
        assert rd.project_primitives(scene, (0, 0, 0), 0.5) == []

    def test_coverage_radius_recompute(self):
        scene = random_scene(21)
        proj = rd.project_primitives(scene, (0.3, -0.2, 1.0), 5.0)
        assert proj
        for g in proj:
            lam = np.linalg.eigvalsh(g.sigma2d).max()
            assert g.coverage_radius == pytest.approx(3.0 * np.sqrt(lam))

    def test_depth_sorted_output(self):
        scene = random_scene(4, n_static=8)
        proj = rd.project_primitives(scene, (0, 0, 1.0), 5.0)
        depths = [g.depth for g in proj]
        assert depths == sorted(depths)


class TestDepthSort:
    def test_example(self):
        gs = [self._g(d, i) for i, d in enumerate([5.0, 2.0, 9.0])]
        out = rd.depth_sort(gs)
        assert [g.primitive_index for g in out] == [1, 0, 2]

    def test_stable_ties(self):
        gs = [self._g(3.0, i) for i in range(5)]
        out = rd.depth_sort(gs)
        assert [g.primitive_index for g in out] == [0, 1, 2, 3, 4]

    def test_sort_property(self, rng):
        depths = rng.uniform(0, 100, size=10_000)
        gs = [self._g(float(d), i) for i, d in enumerate(depths)]
        out = rd.depth_sort(gs)
        ds = np.array([g.depth for g in out])
        assert np.all(np.diff(ds) >= 0)
        assert sorted(g.primitive_index for g in out) == list(range(10_000))

    @staticmethod
    def _g(depth, index):
        return ProjectedGaussian(AngularCoord(0.0, 0.5), np.eye(2) * 1e-4,
                                 depth, 0.03, index)


class TestOpacity:
    def _proj(self, sigma=None, mu=(0.0, 0.5), r=None):
        sigma = np.eye(2) if sigma is None else sigma
        if r is None:
            r = 3.0 * np.sqrt(np.linalg.eigvalsh(sigma).max())
        return ProjectedGaussian(AngularCoord(*mu), sigma, 5.0, r, 0)

    def test_peak(self):
        g = self._proj()
        assert rd.opacity(g, 0.37, AngularCoord(0.0, 0.5)) == pytest.approx(0.37)

    def test_one_sigma(self):
        g = self._proj()
        a = rd.opacity(g, 0.5, AngularCoord(1.0, 0.5))
        assert a == pytest.approx(0.5 * np.exp(-0.5))

    def test_wrap_rule(self):
        g = self._proj(mu=(np.pi - 0.1, 0.5))
        a = rd.opacity(g, 0.5, AngularCoord(-np.pi + 0.1, 0.5))
        assert a == pytest.approx(0.5 * np.exp(-0.5 * 0.2**2))

    def test_truncation(self):
        g = self._proj(sigma=1e-4 * np.eye(2))
        assert rd.opacity(g, 0.9, AngularCoord(0.2, 0.5)) == 0.0

    def test_clamp(self):
        g = self._proj()
        assert rd.opacity(g, 0.99999, AngularCoord(0.0, 0.5)) == rd.ALPHA_MAX


class TestCompositeBin:
    def test_single_primitive(self):
        scene = single_prim_scene(mu0=(8.0, 0.0, 2.0))
        ordered = rd.depth_sort(rd.project_primitives(scene, (0, 0, 0), 5.0))
        q = ordered[0].mu2d
        z = rd.composite_bin(scene, ordered, q, (0, 0, 0), 5.0)
        from rfsplat.scene import directional_response
        prim = scene.primitive(0)
        p_bin = np.array([np.cos(q.theta) * np.cos(q.phi),
                          np.cos(q.theta) * np.sin(q.phi), np.sin(q.theta)])
        d = p_bin - prim.mu0
        d /= np.linalg.norm(d)
        expect = prim.rho * directional_response(prim, d, 5.0)
        assert z == pytest.approx(expect)

    def test_transmittance_blocking(self):
        # two co-located primitives; front one nearly opaque
        front = make_primitive(mu0=(8.0, 0.0, 2.0), rho=0.999)
        back = make_primitive(mu0=(8.8, 0.0, 2.2))
        scene = Scene.from_primitives([front, back], eta=1.0, r_rx=1.0,
                                      t_span=(0.0, 10.0))
        scene.rho_logit[0] = 20.0  # rho -> 1, clamps at 1 - 1e-4
        ordered = rd.depth_sort(rd.project_primitives(scene, (0, 0, 0), 5.0))
        q = ordered[0].mu2d
        z_both = rd.composite_bin(scene, ordered, q, (0, 0, 0), 5.0)
        z_front = rd.composite_bin(scene, ordered[:1], q, (0, 0, 0), 5.0)
        z_back = rd.composite_bin(scene, ordered[1:], q, (0, 0, 0), 5.0)
        assert z_both == pytest.approx(z_front + 1e-4 * z_back, rel=1e-9)

    def test_equal_alpha_telescoping(self):
        # transmittance through n equal-alpha layers is (1-a)^(k-1)
        prims = [make_primitive(mu0=(8.0 + 1e-9 * k, 0.0, 2.0), rho=0.3)
                 for k in range(4)]
        scene = Scene.from_primitives(prims, eta=1.0, r_rx=1.0,
                                      t_span=(0.0, 10.0))
        ordered = rd.depth_sort(rd.project_primitives(scene, (0, 0, 0), 5.0))
        q = ordered[0].mu2d
        z = rd.composite_bin(scene, ordered, q, (0, 0, 0), 5.0)
        singles = [rd.composite_bin(scene, [g], q, (0, 0, 0), 5.0)
                   for g in ordered]
        alphas = [rd.opacity(g, float(scene.rho()[g.primitive_index]), q)
                  for g in ordered]
        a = alphas[0]
        assert np.allclose(alphas, a, rtol=1e-6)
        expect = sum((1 - a) ** k * s for k, s in enumerate(singles))
        assert z == pytest.approx(expect, rel=1e-7)


class TestRender:
    def test_empty_scene_floor(self):
        scene = Scene(0, 1, 0.5, 1.0, (0.0, 1.0))
        out = rd.render(scene, (0, 0, 0), 0.5, AngularGrid(H=8, W=16))
        assert np.all(out.power_dbm == -100.0)
        assert out.rss_dbm == pytest.approx(-100.0 + 10 * np.log10(8 * 16))

    def test_argmax_bin_contains_center(self):
        grid = AngularGrid(H=32, W=64)
        scene = single_prim_scene(mu0=(10.0, 1.0, 4.0), scale=(1.5, 1.5, 1.5),
                                  lobes=[make_lobe(v=-np.array([10.0, 1.0, 4.0])
                                                   / np.linalg.norm([10.0, 1.0, 4.0]),
                                                   lambda_x=1.0, lambda_y=1.0,
                                                   a_bar=0.5)])
        out = rd.render(scene, (0, 0, 0), 5.0, grid, backend="numpy")
        j = int(np.argmax(out.power_dbm))
        proj = rd.project_primitives(scene, (0, 0, 0), 5.0)[0]
        row = int((proj.mu2d.theta - grid.theta_lo) / grid.d_theta)
        col = int((proj.mu2d.phi + np.pi) / grid.d_phi)
        assert j == row * grid.W + col

    def test_bit_identical_repeat(self):
        scene = random_scene(31)
        grid = AngularGrid(H=24, W=48)
        for backend in ("numpy", "numba", "reference"):
            a = rd.render(scene, (0.2, 0.1, 1.0), 4.0, grid, backend=backend)
            b = rd.render(scene, (0.2, 0.1, 1.0), 4.0, grid, backend=backend)
            assert np.array_equal(a.z, b.z)
            assert a.rss_dbm == b.rss_dbm

    @pytest.mark.parametrize("backend", ["numpy", "numba"])
    def test_matches_reference(self, backend):
        grid = AngularGrid(H=16, W=32)
        for seed in range(6):
            scene = random_scene(seed, n_static=5, n_kinematic=1, n_transient=1)
            rx = np.array([0.4 * seed - 1.0, 0.3, 1.0])
            ref = rd.render_reference(scene, rx, 5.0, grid)
            out = rd.render(scene, rx, 5.0, grid, backend=backend)
            scale = np.abs(ref.z)
            ok = scale > 1e-300
            err = np.abs(out.z - ref.z)[ok] / scale[ok]
            assert err.max() < 1e-6
            assert np.array_equal(out.z[~ok], ref.z[~ok])

    def test_thread_count_invariance(self):
        pytest.importorskip("numba")
        from rfsplat import _fast
        scene = random_scene(8, n_static=6)
        grid = AngularGrid(H=24, W=48)
        before = _fast.get_num_threads()
        try:
            _fast.set_num_threads(1)
            a = rd.render(scene, (0, 0, 1.0), 5.0, grid, backend="numba")
            _fast.set_num_threads(2)
            b = rd.render(scene, (0, 0, 1.0), 5.0, grid, backend="numba")
        finally:
            _fast.set_num_threads(before)
        assert np.array_equal(a.z, b.z)

    def test_rho_lipschitz_numeric(self):
        # |d|z|/drho_k| stays below the primitive's peak response magnitude
        rng = np.random.default_rng(12)
        scene = random_scene(12, n_static=4, rho_range=(0.2, 0.4))
        grid = AngularGrid(H=12, W=24)
        rx = np.array([0.0, 0.0, 1.0])
        t = 5.0
        base = rd.render(scene, rx, t, grid, backend="numpy")
        amps = scene.amplitudes(t)
        for k in range(scene.K):
            sup_r = float(np.sum(amps[k]))
            pert = scene.copy()
            h = 1e-6
            from rfsplat.scene import logit, sigmoid
            rho_k = float(sigmoid(scene.rho_logit[k]))
            pert.rho_logit[k] = logit(rho_k + h)
            out = rd.render(pert, rx, t, grid, backend="numpy")
            slope = np.abs(np.abs(out.z) - np.abs(base.z)) / h
            assert slope.max() <= sup_r * (1.0 + 1e-3) + 1e-9


class TestPowerAndRss:
    def test_rss_floor_example(self):
        S = np.full(8, -100.0)
        assert rd.rss_from_spectrogram(S) == pytest.approx(
            -100 + 10 * np.log10(8), abs=1e-9)
        assert rd.rss_from_spectrogram(S) == pytest.approx(-90.969, abs=1e-3)

    def test_rss_dominant_bin(self):
        S = np.full(90 * 360, -100.0)
        S[0] = -40.0
        expect = 10 * np.log10(10 ** (-4.0) + (32400 - 1) * 1e-10)
        got = rd.rss_from_spectrogram(S)
        assert got == pytest.approx(expect, abs=1e-12)
        assert got == pytest.approx(-39.861, abs=1e-3)

    def test_rss_at_least_max(self, rng):
        S = rng.uniform(-100, -40, size=(16, 32))
        assert rd.rss_from_spectrogram(S) >= S.max()

    def test_normalize_examples(self):
        spec, unit = rd.normalize_spectrogram(np.array([-100.0, -40.0, -70.0,
                                                        -120.0]))
        assert np.allclose(unit, [0.0, 1.0, 0.5, 0.0])
        assert np.all(spec.values >= -100.0) and np.all(spec.values <= -40.0)

    def test_unit_round_trip(self, rng):
        u = rng.uniform(0, 1, size=(4, 5))
        _, u2 = rd.normalize_spectrogram(rd.unit_to_dbm(u))
        assert np.allclose(u, u2, atol=1e-12)


class TestExports:
    def test_bin_round_trip(self, tmp_path):
        vals = np.linspace(-100, -40, 12).reshape(3, 4)
        p = tmp_path / "s.bin"
        rd.save_spectrogram_bin(vals, p)
        assert p.stat().st_size == 4 * 12
        back = rd.load_spectrogram_bin(p, 3, 4)
        assert np.allclose(back, vals, atol=1e-5)

    def test_csv(self, tmp_path):
        vals = np.array([[-50.0, -60.5], [-70.25, -40.0]])
        p = tmp_path / "s.csv"
        rd.save_spectrogram_csv(vals, p)
        back = np.loadtxt(p, delimiter=",")
        assert np.array_equal(back, vals)

    def test_png(self, tmp_path):
        from PIL import Image
        unit = np.tile(np.linspace(0, 1, 16), (8, 1))
        p = tmp_path / "s.png"
        rd.save_spectrogram_png(unit, p)
        img = np.asarray(Image.open(p))
        assert img.shape == (8, 16)
        assert img[0, 0] == 0 and img[0, -1] == 255
