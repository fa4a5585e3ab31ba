import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfsplat import scene as sc
from rfsplat.scene import (AsgLobe, GaussianPrimitive, Kind, Scene,
                           TemporalEnvelope)
from tests.conftest import make_lobe, make_primitive, single_prim_scene


class TestTemporalEnvelope:
    def test_amplitude_examples(self):
        lobe = make_lobe(a_bar=0.8, t_c=2.0, t_w=0.5)
        assert sc.temporal_amplitude(lobe, 2.0) == pytest.approx(0.8)
        assert sc.temporal_amplitude(lobe, 2.5) == pytest.approx(
            0.8 * np.exp(-0.5))
        assert sc.temporal_amplitude(lobe, 3.5) == pytest.approx(
            0.8 * np.exp(-4.5))
        assert 0.8 * np.exp(-4.5) == pytest.approx(0.8 * 0.011109, rel=1e-4)

    def test_active_boundaries(self):
        lobe = make_lobe(t_c=5.0, t_w=1.0)
        assert sc.is_active(lobe, 5.0)
        assert sc.is_active(lobe, 2.0)      # t_c - 3 t_w, closed
        assert sc.is_active(lobe, 8.0)
        assert not sc.is_active(lobe, 5.0 + 3.0001)

    @given(st.floats(-3.0, 3.0), st.floats(0.05, 2.0))
    @settings(max_examples=60, deadline=None)
    def test_even_and_decreasing(self, dt, tw):
        lobe = make_lobe(a_bar=1.0, t_c=0.0, t_w=tw)
        assert sc.temporal_amplitude(lobe, dt) == pytest.approx(
            sc.temporal_amplitude(lobe, -dt))
        closer = sc.temporal_amplitude(lobe, 0.5 * dt)
        assert closer >= sc.temporal_amplitude(lobe, dt) - 1e-15

    def test_width_positive(self):
        with pytest.raises(sc.SceneError):
            TemporalEnvelope(0.0, 0.0)


class TestPrimitive:
    def test_center_at(self):
        p = make_primitive(mu0=(0, 0, 0), kind=Kind.KINEMATIC,
                           velocity=(2.0, 0, 0))
        assert np.allclose(sc.center_at(p, 1.5), [3.0, 0, 0])
        assert np.allclose(sc.center_at(p, 0.0), [0, 0, 0])
        stat = make_primitive(mu0=(1, 2, 3))
        assert np.allclose(sc.center_at(stat, 42.0), [1, 2, 3])

    def test_static_velocity_rejected(self):
        with pytest.raises(sc.SceneError):
            make_primitive(kind=Kind.STATIC, velocity=(1.0, 0, 0))

    def test_directional_response_single_lobe(self):
        v = np.array([0.0, 0.0, 1.0])
        lobe = make_lobe(v=v, a_bar=0.7, psi=0.0, t_c=5.0, t_w=100.0)
        p = make_primitive(lobes=[lobe])
        r = sc.directional_response(p, v, 5.0)
        assert r == pytest.approx(0.7 + 0.0j)
        flip = make_primitive(lobes=[make_lobe(v=v, a_bar=0.7, psi=np.pi)])
        assert sc.directional_response(flip, v, 5.0) == pytest.approx(
            -0.7 + 0.0j, abs=1e-12)

    def test_directional_response_brute_force(self):
        rng = np.random.default_rng(5)
        lobes = []
        for _ in range(3):
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            lobes.append(make_lobe(v=v, lambda_x=rng.uniform(2, 50),
                                   lambda_y=rng.uniform(2, 50),
                                   a_bar=rng.uniform(0.1, 1.0),
                                   psi=rng.uniform(-np.pi, np.pi),
                                   t_c=5.0, t_w=100.0))
        prim = make_primitive(lobes=lobes)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        t = 4.2
        expect = 0.0 + 0.0j
        from rfsplat.geometry import asg_weight
        for lobe in lobes:
            a = lobe.a_bar * np.exp(-((t - 5.0) ** 2) / (2 * 100.0**2))
            expect += a * np.exp(-1j * lobe.psi) * asg_weight(
                lobe.v, lobe.lambda_x, lobe.lambda_y, d)
        got = sc.directional_response(prim, d, t)
        assert abs(got - expect) < 1e-12

    def test_response_zero_when_inactive(self):
        lobe = make_lobe(t_c=5.0, t_w=0.1)
        prim = make_primitive(kind=Kind.TRANSIENT, lobes=[lobe])
        assert sc.directional_response(prim, (0, 0, 1.0), 9.0) == 0.0 + 0.0j

    def test_covariance_of(self):
        p = make_primitive(scale=(1.0, 2.0, 3.0))
        assert np.allclose(sc.covariance_of(p), np.diag([1.0, 4.0, 9.0]))
        rng = np.random.default_rng(9)
        for _ in range(200):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            s = rng.uniform(0.2, 3.0, size=3)
            prim = GaussianPrimitive(mu0=np.zeros(3), scale=s, rotation=q,
                                     rho=0.3, velocity=np.zeros(3),
                                     kind=Kind.STATIC, lobes=[make_lobe()])
            cov = sc.covariance_of(prim)
            assert np.allclose(cov, cov.T, atol=1e-12)
            assert np.min(np.linalg.eigvalsh(cov)) > 0
            assert np.linalg.det(cov) == pytest.approx(np.prod(s**2), rel=1e-9)


class TestReparameterizations:
    @given(st.floats(-20.0, 20.0))
    @settings(max_examples=100, deadline=None)
    def test_softplus_bijective(self, x):
        assert float(sc.softplus_inv(sc.softplus(x))) == pytest.approx(
            x, abs=1e-9)

    @given(st.floats(-20.0, 20.0))
    @settings(max_examples=100, deadline=None)
    def test_logistic_bijective(self, x):
        # 1 - sigmoid(x) underflows relative precision near +-20; 1e-7 is
        # the float64-achievable round trip there
        assert float(sc.logit(sc.sigmoid(x))) == pytest.approx(x, abs=1e-7)

    def test_quat_rotation_orthonormal(self, rng):
        q = rng.normal(size=(50, 4))
        q /= np.linalg.norm(q, axis=-1, keepdims=True)
        R = sc.quat_to_rotation(q)
        eye = np.einsum("kab,kcb->kac", R, R)
        assert np.allclose(eye, np.eye(3), atol=1e-12)
        assert np.allclose(np.linalg.det(R), 1.0)


class TestScene:
    def test_partition_counts(self):
        prims = [make_primitive(kind=Kind.STATIC),
                 make_primitive(kind=Kind.KINEMATIC, velocity=(1, 0, 0)),
                 make_primitive(kind=Kind.TRANSIENT,
                                lobes=[make_lobe(t_c=5.0, t_w=0.5)])]
        scene = Scene.from_primitives(prims, eta=1.0, r_rx=1.0,
                                      t_span=(0.0, 10.0))
        counts = scene.counts_by_kind()
        assert counts[Kind.STATIC] == 1
        assert counts[Kind.KINEMATIC] == 1
        assert counts[Kind.TRANSIENT] == 1
        assert sum(counts.values()) == scene.K
        scene.validate()

    def test_static_width_invariant(self):
        with pytest.raises(sc.SceneError):
            Scene.from_primitives(
                [make_primitive(lobes=[make_lobe(t_w=1.0)])],
                eta=1.0, r_rx=1.0, t_span=(0.0, 10.0))

    def test_transient_width_invariant(self):
        with pytest.raises(sc.SceneError):
            Scene.from_primitives(
                [make_primitive(kind=Kind.TRANSIENT,
                                lobes=[make_lobe(t_c=5.0, t_w=9.0)])],
                eta=1.0, r_rx=1.0, t_span=(0.0, 10.0))

    def test_primitive_round_trip(self):
        scene = single_prim_scene(rho=0.25, scale=(0.5, 1.5, 2.5))
        prim = scene.primitive(0)
        assert prim.rho == pytest.approx(0.25)
        assert np.allclose(prim.scale, [0.5, 1.5, 2.5])
        assert prim.lobes[0].lambda_x == pytest.approx(20.0)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        scene = single_prim_scene()
        path = tmp_path / "scene.rfc"
        scene.save(path)
        loaded = Scene.load(path)
        path2 = tmp_path / "again.rfc"
        loaded.save(path2)
        assert path.read_bytes() == path2.read_bytes()
        again = Scene.load(path2)
        for name in ("mu0", "log_scale", "quat", "rho_logit", "vel", "v_raw",
                     "lam_raw", "abar_raw", "psi", "t_c", "log_tw", "kind"):
            assert np.array_equal(getattr(loaded, name), getattr(again, name))
        assert loaded.eta_raw == again.eta_raw
        assert loaded.t_span == again.t_span

    def test_float32_quantization(self, tmp_path):
        scene = single_prim_scene()
        scene.mu0[0, 0] = 10.0 + 1e-12  # below float32 resolution at 10.0
        path = tmp_path / "q.rfc"
        scene.save(path)
        loaded = Scene.load(path)
        assert loaded.mu0[0, 0] == np.float32(scene.mu0[0, 0])

    def test_truncation_detected(self, tmp_path):
        scene = single_prim_scene()
        path = tmp_path / "scene.rfc"
        scene.save(path)
        blob = path.read_bytes()
        bad = tmp_path / "bad.rfc"
        bad.write_bytes(blob[:-1])
        with pytest.raises(sc.SceneError, match="truncated"):
            Scene.load(bad)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.rfc"
        p.write_bytes(b"not a checkpoint at all")
        with pytest.raises(sc.SceneError, match="magic"):
            Scene.load(p)

    def test_empty_scene(self, tmp_path):
        scene = Scene(0, 2, 0.5, 1.0, (0.0, 1.0))
        path = tmp_path / "empty.rfc"
        scene.save(path)
        loaded = Scene.load(path)
        assert loaded.K == 0 and loaded.M == 2
