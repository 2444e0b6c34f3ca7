import numpy as np
import pytest

from consensusfusion.estimator import NavState, propagate
from consensusfusion.geometry import UnitQuaternion
from consensusfusion.sim import (
    CorruptionSpec,
    ImuSpec,
    Scenario,
    SensorSpec,
    default_indoor_scenario,
    drift_displacement,
    euler_consistent_truth,
    load_scenario,
    save_scenario,
    simulate,
    synthesize_sensor,
)


def mini_scenario(**kwargs):
    defaults = dict(
        name="mini", seed=3, duration=6.0,
        waypoints=np.array([[0.0, 0, 0, 0], [3.0, 1.5, 0.5, 1.0],
                            [6.0, 3.0, -0.5, 0.5]]),
        yaw_knots=np.array([[0.0, 0.0], [6.0, 0.6]]),
        imu=ImuSpec(sigma_acc=0.0, sigma_gyro=0.0))
    defaults.update(kwargs)
    return Scenario(**defaults)


class TestTruthConsistency:
    def test_noiseless_imu_propagates_to_truth(self):
        sc = mini_scenario()
        result = simulate(sc)
        truth = result.truth
        start = NavState(0.0, truth.quats_wxyz[0].copy(),
                         truth.positions[0].copy(),
                         truth.velocities[0].copy())
        end = propagate(start, result.imu.stamps, result.imu.accel,
                        result.imu.gyro, np.zeros(3), np.zeros(3))
        assert np.allclose(end.position, truth.positions[-1], atol=1e-6)
        assert np.allclose(end.velocity, truth.velocities[-1], atol=1e-6)
        q_end = UnitQuaternion.from_wxyz(truth.quats_wxyz[-1])
        assert end.orientation().angle_to(q_end) < 1e-6

    def test_truth_positions_on_designed_path(self):
        sc = mini_scenario()
        truth = euler_consistent_truth(sc)
        # waypoints are interpolated exactly
        assert np.allclose(truth.positions[0], [0, 0, 0], atol=1e-12)
        k3 = truth.index_of(3.0)
        assert np.allclose(truth.positions[k3], [1.5, 0.5, 1.0], atol=1e-9)

    def test_hover_produces_gravity_only_specific_force(self):
        sc = mini_scenario(
            waypoints=np.array([[0.0, 0, 0, 1.0], [6.0, 0, 0, 1.0]]),
            yaw_knots=np.array([[0.0, 0.0], [6.0, 0.0]]))
        result = simulate(sc)
        assert np.allclose(result.imu.accel[:-1], [0, 0, 9.81], atol=1e-9)
        assert np.allclose(result.imu.gyro, 0.0, atol=1e-12)


class TestDrift:
    def test_closed_form(self):
        assert drift_displacement(12.0, 0.05, 0.3) == pytest.approx(
            0.05 * (np.exp(0.3 * 12.0) - 1.0) / 0.3)

    def test_zero_lambda_limit_is_linear_ramp(self):
        assert drift_displacement(4.0, 0.1, 0.0) == pytest.approx(0.4)
        assert drift_displacement(4.0, 0.1, 1e-9) == pytest.approx(0.4, rel=1e-6)

    def test_offset_persists_after_event(self):
        sc = mini_scenario()
        spec = SensorSpec(sensor_id="s", modality="position", rate=10.0,
                          sigma=0.0,
                          corruptions=[CorruptionSpec(
                              "drift", 1.0, 3.0,
                              {"axis": (1.0, 0, 0), "v0": 0.1, "lam": 0.0})])
        truth = euler_consistent_truth(sc)
        clean = synthesize_sensor(
            sc, truth, SensorSpec(sensor_id="s", modality="position",
                                  rate=10.0, sigma=0.0))
        dirty = synthesize_sensor(sc, truth, spec)
        final_offset = dirty.positions[-1] - clean.positions[-1]
        assert np.allclose(final_offset, [0.2, 0, 0], atol=1e-12)


class TestCorruptions:
    def test_dropout_removes_samples(self):
        spec = SensorSpec(sensor_id="s", modality="position", rate=10.0,
                          sigma=0.0,
                          corruptions=[CorruptionSpec("dropout", 2.0, 4.0)])
        sc = mini_scenario()
        stream = synthesize_sensor(sc, euler_consistent_truth(sc), spec)
        assert not np.any((stream.stamps >= 2.0) & (stream.stamps < 4.0))
        assert np.any(stream.stamps < 2.0) and np.any(stream.stamps >= 4.0)

    def test_misalign_continuous_at_pivot(self):
        spec_c = SensorSpec(sensor_id="s", modality="position", rate=10.0,
                            sigma=0.0)
        spec_m = SensorSpec(sensor_id="s", modality="position", rate=10.0,
                            sigma=0.0,
                            corruptions=[CorruptionSpec(
                                "misalign", 0.0, 6.0,
                                {"rpy": (0.3, 0.2, 1.0)})])
        sc = mini_scenario()
        truth = euler_consistent_truth(sc)
        clean = synthesize_sensor(sc, truth, spec_c)
        dirty = synthesize_sensor(sc, truth, spec_m)
        assert np.allclose(dirty.positions[0], clean.positions[0], atol=1e-12)
        assert not np.allclose(dirty.positions[-1], clean.positions[-1])
        # distances from the pivot are preserved by the rotation
        d_clean = np.linalg.norm(clean.positions - clean.positions[0], axis=1)
        d_dirty = np.linalg.norm(dirty.positions - dirty.positions[0], axis=1)
        assert np.allclose(d_clean, d_dirty, atol=1e-9)

    def test_brown_noise_grows_like_sqrt_time(self):
        sc = mini_scenario(duration=40.0,
                           waypoints=np.array([[0.0, 0, 0, 1.0],
                                               [40.0, 0, 0, 1.0]]),
                           yaw_knots=np.array([[0.0, 0.0], [40.0, 0.0]]))
        truth = euler_consistent_truth(sc)
        sigma_b = 0.05
        ends = []
        mids = []
        for seed in range(60):
            sc.seed = seed
            spec = SensorSpec(sensor_id="s", modality="position", rate=10.0,
                              sigma=0.0,
                              corruptions=[CorruptionSpec(
                                  "noise", 0.0, 40.0, {"brown": sigma_b})])
            stream = synthesize_sensor(sc, truth, spec)
            mids.append(stream.positions[len(stream.stamps) // 4, 0])
            ends.append(stream.positions[-1, 0])
        var_mid = np.var(np.asarray(mids) - 0.0)
        var_end = np.var(np.asarray(ends) - 0.0)
        # variance should scale linearly with elapsed time (factor 4 here)
        assert var_end / var_mid == pytest.approx(4.0, rel=0.6)
        assert var_end == pytest.approx(sigma_b ** 2 * 40.0, rel=0.5)


class TestDeterminismAndFrames:
    def test_simulation_deterministic(self):
        sc = default_indoor_scenario()
        r1 = simulate(sc)
        r2 = simulate(sc)
        assert np.array_equal(r1.imu.accel, r2.imu.accel)
        for s1, s2 in zip(r1.sensors, r2.sensors):
            assert np.array_equal(s1.positions, s2.positions)

    def test_noise_isolated_per_sensor(self):
        sc1 = default_indoor_scenario()
        sc2 = default_indoor_scenario()
        sc2.sensors = [sp for sp in sc2.sensors if sp.sensor_id != "gps"]
        r1 = simulate(sc1)
        r2 = simulate(sc2)
        lio1 = next(s for s in r1.sensors if s.sensor_id == "lio")
        lio2 = next(s for s in r2.sensors if s.sensor_id == "lio")
        assert np.array_equal(lio1.positions, lio2.positions)

    def test_noiseless_sensor_matches_frame_mapping(self):
        sc = mini_scenario()
        spec = SensorSpec(sensor_id="s", modality="position", rate=10.0,
                          sigma=0.0, frame_translation=(2.0, -1.0, 0.5),
                          frame_rpy=(0.0, 0.0, 0.9))
        truth = euler_consistent_truth(sc)
        stream = synthesize_sensor(sc, truth, spec)
        frame = spec.frame()
        for row in range(0, len(stream.stamps), 7):
            k = truth.index_of(stream.stamps[row])
            want = frame.apply(truth.positions[k])
            assert np.allclose(stream.positions[row], want, atol=1e-9)

    def test_pose_sensor_orientation_chain(self):
        sc = mini_scenario()
        spec = SensorSpec(sensor_id="s", modality="pose", rate=10.0,
                          sigma=0.0, sigma_rot=0.0,
                          extrinsic_rpy=(0.0, 0.0, 0.2),
                          frame_rpy=(0.0, 0.0, -0.4))
        truth = euler_consistent_truth(sc)
        stream = synthesize_sensor(sc, truth, spec)
        k = truth.index_of(stream.stamps[-1])
        q_body = UnitQuaternion.from_wxyz(truth.quats_wxyz[k])
        want = spec.frame().rotation * q_body * spec.extrinsic().rotation
        got = UnitQuaternion.from_wxyz(stream.quats_wxyz[-1])
        assert got.angle_to(want) < 1e-9

    def test_bad_rate_rejected(self):
        sc = mini_scenario()
        with pytest.raises(ValueError):
            synthesize_sensor(sc, euler_consistent_truth(sc),
                              SensorSpec(sensor_id="s", modality="position",
                                         rate=7.0, sigma=0.0))


class TestYamlRoundTrip:
    def test_default_scenario_round_trip(self, tmp_path):
        sc = default_indoor_scenario()
        path = tmp_path / "scenario.yaml"
        save_scenario(sc, path)
        loaded = load_scenario(path)
        assert loaded.name == sc.name
        assert loaded.seed == sc.seed
        assert np.allclose(loaded.waypoints, sc.waypoints)
        assert len(loaded.sensors) == len(sc.sensors)
        r1 = simulate(sc)
        r2 = simulate(loaded)
        assert np.array_equal(r1.imu.accel, r2.imu.accel)
        for s1, s2 in zip(r1.sensors, r2.sensors):
            assert np.array_equal(s1.positions, s2.positions)
            assert s1.sensor_id == s2.sensor_id
