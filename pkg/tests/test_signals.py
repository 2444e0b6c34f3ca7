import numpy as np
import pytest

from consensusfusion.geometry import RigidTransform
from consensusfusion.signals import (
    InsufficientOverlap,
    SensorStream,
    TooFewSamples,
    VelocitySeries,
    differentiate_positions,
    dump_streams,
    extract_window,
    load_streams,
    standardize,
)


def position_stream(stamps, positions, sensor_id="s", rate=10.0):
    return SensorStream(sensor_id=sensor_id, modality="position", rate=rate,
                        stamps=np.asarray(stamps, dtype=float),
                        positions=np.asarray(positions, dtype=float))


class TestDifferentiate:
    def test_linear_motion(self):
        s = position_stream([0.0, 1.0], [[0, 0, 0], [1, 0, 0]])
        v = differentiate_positions(s)
        assert np.allclose(v.values, [[1, 0, 0], [1, 0, 0]])
        assert np.array_equal(v.stamps, s.stamps)

    def test_constant_position(self):
        t = np.linspace(0, 1, 11)
        s = position_stream(t, np.ones((11, 3)))
        assert np.allclose(differentiate_positions(s).values, 0.0)

    def test_quadratic_against_analytic_derivative(self):
        t = np.arange(0, 2, 0.01)
        p = np.zeros((len(t), 3))
        p[:, 0] = t ** 2
        v = differentiate_positions(position_stream(t, p, rate=100.0))
        # central differences are exact for quadratics on interior points
        assert np.allclose(v.values[1:-1, 0], 2 * t[1:-1], atol=1e-3)

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            differentiate_positions(position_stream([0.0], [[0, 0, 0]]))

    def test_integrated_constant_velocity_recovered(self):
        t = np.linspace(0, 5, 501)
        vel = np.array([0.3, -0.2, 0.1])
        p = t[:, None] * vel
        v = differentiate_positions(position_stream(t, p))
        assert np.max(np.abs(v.values - vel)) < 1e-6


class TestExtractWindow:
    def test_identical_series(self):
        t = np.linspace(0, 2, 21)
        vals = np.column_stack([np.sin(t), np.cos(t), t])
        a = VelocitySeries(t, vals)
        b = VelocitySeries(t.copy(), vals.copy())
        w = extract_window(a, b, t_end=2.0, duration=1.0)
        assert np.allclose(w.a_values, w.b_values)

    def test_output_length_follows_reference(self):
        ta = np.linspace(0, 2, 21)     # 10 Hz
        tb = np.linspace(0, 2, 41)     # 20 Hz
        a = VelocitySeries(ta, np.random.default_rng(0).normal(size=(21, 3)))
        b = VelocitySeries(tb, np.random.default_rng(1).normal(size=(41, 3)))
        w = extract_window(a, b, t_end=2.0, duration=1.0)
        n_expected = np.count_nonzero((ta >= 1.0) & (ta <= 2.0))
        assert len(w.stamps) == n_expected

    def test_resampling_exact_on_shared_stamps(self):
        t = np.linspace(0, 2, 21)
        vals = np.random.default_rng(2).normal(size=(21, 3))
        w = extract_window(VelocitySeries(t, vals),
                           VelocitySeries(t.copy(), vals.copy()), 2.0, 1.0)
        assert np.array_equal(w.b_values, vals[(t >= 1.0) & (t <= 2.0)])

    def test_absent_other_series_raises(self):
        t = np.linspace(0, 2, 21)
        a = VelocitySeries(t, np.zeros((21, 3)))
        b = VelocitySeries(np.linspace(0, 0.5, 6), np.zeros((6, 3)))
        with pytest.raises(InsufficientOverlap):
            extract_window(a, b, t_end=2.0, duration=1.0)


class TestStandardize:
    def window(self, a, b):
        a = np.asarray(a, dtype=float)
        n = len(a)
        aa = np.zeros((n, 3))
        bb = np.zeros((n, 3))
        aa[:, 0] = a
        bb[:, 0] = b
        from consensusfusion.signals import VelocityWindow
        return VelocityWindow(np.arange(n, dtype=float), aa, bb, float(n))

    def test_hand_example(self):
        w = standardize(self.window([1, 3], [1, 3]))
        assert np.allclose(w.a_values[:, 0], [-1, 1])
        assert np.allclose(w.b_values[:, 0], [-1, 1])

    def test_degenerate_range_left_unscaled(self):
        w = standardize(self.window([2, 2], [2, 2]))
        assert np.allclose(w.a_values, 0.0)
        assert np.allclose(w.b_values, 0.0)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        w = standardize(self.window(rng.normal(size=8), rng.normal(size=8)))
        w2 = standardize(w)
        assert np.allclose(w.a_values, w2.a_values, atol=1e-9)
        assert np.allclose(w.b_values, w2.b_values, atol=1e-9)

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            w = standardize(self.window(rng.normal(size=10) * 5,
                                        rng.normal(size=10) * 5))
            assert np.all(np.abs(w.a_values) <= 1.0 + 1e-12)
            assert np.all(np.abs(w.b_values) <= 1.0 + 1e-12)


class TestCsvRoundtrip:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        t = np.linspace(0, 1, 11)
        pose = SensorStream(
            sensor_id="lio", modality="pose", rate=10.0,
            extrinsic=RigidTransform(translation=np.array([0.1, 0.0, -0.05])),
            stamps=t, positions=rng.normal(size=(11, 3)),
            quats_wxyz=np.tile([1.0, 0, 0, 0], (11, 1)))
        imu = SensorStream(
            sensor_id="imu", modality="imu", rate=10.0, stamps=t,
            accel=rng.normal(size=(11, 3)), gyro=rng.normal(size=(11, 3)))
        path = tmp_path / "streams.csv"
        dump_streams([pose, imu], path)
        loaded = {s.sensor_id: s for s in load_streams(path)}
        assert np.allclose(loaded["lio"].positions, pose.positions)
        assert np.allclose(loaded["lio"].extrinsic.translation,
                           pose.extrinsic.translation)
        assert np.allclose(loaded["imu"].gyro, imu.gyro)
        assert loaded["imu"].modality == "imu"
