"""End-to-end acceptance suite.

Each test class covers one acceptance criterion with its runtime budget:

1. metric correctness (closed forms and a KL statistics oracle);
2. metric shootout phases (green phase, PCC blindness, CM early warning);
3. cross-pattern fault detection over 20 seeds;
4. two-sensor local arbitration over 20 seeds;
5. fusion strategy comparison on the default corrupted scenario;
6. transform-graph observability (yaw frozen during z-only motion);
7. numerics (analytic vs numeric Jacobians, LM monotonicity, fixed lag
   vs batch);
8. byte-identical determinism of the CLI outputs;
9. switching hygiene (rate limit, no output discontinuities).
"""

import collections
import time

import numpy as np
import pytest

from consensusfusion.cli import main as cli_main
from consensusfusion.consensus import (
    AmbiguousPattern,
    ConsensusConfig,
    Indeterminate,
    arbitrate_two_sensors,
    build_matrix,
    detect_faulty,
)
from consensusfusion.estimator import (
    GRAVITY,
    EstimatorConfig,
    ImuFactor,
    LocalGraphEstimator,
    NavState,
    PoseBetweenFactor,
    PositionBetweenFactor,
    TransformPointsFactor,
    preintegrate,
)
from consensusfusion.geometry import UnitQuaternion
from consensusfusion.metrics import (
    LocalView,
    MetricConfig,
    SensorView,
    cramer_distance,
    kl_divergence,
    mae,
)
from consensusfusion.pipeline import (
    PipelineConfig,
    metric_timelines,
    run_pipeline,
    run_transform_graph,
)
from consensusfusion.report import compute_error_report
from consensusfusion.sim import (
    CorruptionSpec,
    ImuSpec,
    Scenario,
    SensorSpec,
    default_indoor_scenario,
    save_scenario,
    simulate,
)
from consensusfusion.signals import VelocityWindow
from consensusfusion.solver import (
    Graph,
    RotationBetweenFactor,
    RotationBlock,
    RotationPriorFactor,
    VectorBlock,
    VectorPriorFactor,
    numeric_jacobian,
)

THRESHOLD = 0.1


def lateral_scenario(seed, sensors, duration=16.0, name="acc"):
    """Well-excited 3-D motion so velocity windows are never degenerate."""
    half = duration / 2.0
    return Scenario(
        name=name, seed=seed, duration=duration,
        waypoints=np.array([[0.0, 0, 0, 0],
                            [half, 3.0, 1.0, 1.0],
                            [duration, 6.0, -1.0, 1.5]]),
        yaw_knots=np.array([[0.0, 0.0], [duration, 0.5]]),
        imu=ImuSpec(), sensors=sensors,
        dither_amp=(0.35, 0.35, 0.25), dither_start=1.0, dither_ramp=2.0)


def position_spec(sensor_id, frame_translation, frame_yaw, corruptions=None,
                  sigma=2e-4):
    return SensorSpec(sensor_id=sensor_id, modality="position", rate=10.0,
                      sigma=sigma, frame_translation=frame_translation,
                      frame_rpy=(0.0, 0.0, frame_yaw),
                      corruptions=corruptions or [])


def truth_local_view(sim, stride=20):
    truth = sim.truth
    return LocalView(truth.stamps[::stride], truth.positions[::stride],
                     truth.quats_wxyz[::stride], truth.gyro[::stride])


def true_frame_views(sim):
    return {s.sensor_id: SensorView.from_stream(
        s, sim.frames[s.sensor_id].rotation) for s in sim.sensors}


@pytest.fixture(scope="module")
def default_comparison():
    """Default corrupted scenario fused under all three strategies."""
    sim = simulate(default_indoor_scenario())
    start = time.monotonic()
    results = {}
    for strategy in ("consensus", "single:lio", "naive"):
        results[strategy] = run_pipeline(sim, PipelineConfig(),
                                         strategy=strategy)
    elapsed = time.monotonic() - start
    return sim, results, elapsed


class TestCriterion1MetricCorrectness:
    def test_closed_forms_and_kl_oracle(self):
        start = time.monotonic()

        assert cramer_distance([0.0], [0.5]) == pytest.approx(1.0, abs=1e-12)

        rng = np.random.default_rng(3)
        series = rng.normal(size=(40, 3))
        window = VelocityWindow(stamps=np.arange(40.0), a_values=series,
                                b_values=series.copy(), duration=39.0)
        assert mae(window) == 0.0
        assert cramer_distance(series[:, 0], series[:, 0]) == 0.0

        rng = np.random.default_rng(1)
        p = rng.normal(0.0, 1.0, 10000)
        q = rng.normal(1.0, 1.0, 10000)
        assert kl_divergence(p, q, MetricConfig()) == pytest.approx(0.5,
                                                                    abs=0.1)
        assert time.monotonic() - start < 1.0


STEP_ONSET = 26.0


@pytest.fixture(scope="module")
def shootout():
    noise_params = {"white": 0.03, "brown": 0.02}
    sensors = [
        position_spec("a", (1.0, 2.0, 0.5), 0.3),
        position_spec("b", (-2.0, 1.0, 0.0), -0.5),
        # noisy in one phase, noisily diverging in another: PCC sees
        # only the noise and cannot tell the phases apart
        position_spec("bad", (5.0, -3.0, 1.0), 0.8, corruptions=[
            CorruptionSpec("noise", 12.0, 20.0, noise_params),
            CorruptionSpec("noise", 26.0, 40.0, noise_params),
            CorruptionSpec("drift", 26.0, 40.0,
                           {"axis": (0.0, 1.0, 0.0),
                            "v0": 0.3, "lam": 0.1}),
        ]),
        # clean step divergence for the early-warning comparison
        position_spec("step", (10.0, 10.0, 0.0), -1.2, corruptions=[
            CorruptionSpec("drift", STEP_ONSET, 40.0,
                           {"axis": (0.0, 1.0, 0.0),
                            "v0": 0.04, "lam": 0.3}),
        ]),
    ]
    sc = Scenario(
        name="shootout", seed=11, duration=40.0,
        waypoints=np.array([[0.0, 0, 0, 0], [10.0, 3, 1, 1.0],
                            [20.0, 6, -1, 1.5], [30.0, 9, 1, 1.0],
                            [40.0, 12, -1, 1.5]]),
        yaw_knots=np.array([[0.0, 0.0], [40.0, 0.8]]),
        imu=ImuSpec(), sensors=sensors,
        dither_amp=(0.35, 0.35, 0.25), dither_start=1.0, dither_ramp=2.0)
    start = time.monotonic()
    rows = metric_timelines(simulate(sc), period=0.25)
    elapsed = time.monotonic() - start
    series = collections.defaultdict(list)
    for r in rows:
        series[(r["metric"], r["pair"])].append((r["stamp"], r["value"]))
    return series, elapsed


class TestCriterion2MetricShootout:
    GREEN = (5.0, 11.0)
    NOISE = (14.0, 19.0)
    DIVERGENCE = (28.0, 39.0)

    @staticmethod
    def phase(series, metric, pair, lo, hi):
        return [v for t, v in series[(metric, pair)]
                if lo <= t <= hi and v >= 0.0]

    def test_runtime(self, shootout):
        _, elapsed = shootout
        assert elapsed < 30.0

    def test_green_phase_all_metrics_below_threshold(self, shootout):
        series, _ = shootout
        pairs = sorted({p for _, p in series})
        for metric in ("mae", "pcc", "kl", "cm"):
            for pair in pairs:
                vals = self.phase(series, metric, pair, *self.GREEN)
                assert vals, (metric, pair)
                assert max(vals) < THRESHOLD, (metric, pair, max(vals))

    def test_pcc_blind_to_noise_vs_divergence(self, shootout):
        series, _ = shootout
        noise = np.mean(self.phase(series, "pcc", "a|bad", *self.NOISE)
                        + self.phase(series, "pcc", "b|bad", *self.NOISE))
        div = np.mean(self.phase(series, "pcc", "a|bad", *self.DIVERGENCE)
                      + self.phase(series, "pcc", "b|bad", *self.DIVERGENCE))
        assert max(noise, div) <= 2.0 * min(noise, div)
        # CM, by contrast, clearly escalates in the divergence phase
        cm_noise = np.mean(self.phase(series, "cm", "a|bad", *self.NOISE))
        cm_div = np.mean(self.phase(series, "cm", "a|bad", *self.DIVERGENCE))
        assert cm_div > cm_noise

    def test_cm_crosses_before_mae(self, shootout):
        series, _ = shootout

        def crossing(metric):
            return next(t for t, v in series[(metric, "a|step")]
                        if t >= STEP_ONSET and v > THRESHOLD)

        assert crossing("cm") <= crossing("mae") - 0.5


class TestCriterion3CrossPatternDetection:
    def test_single_corrupted_sensor_isolated_over_20_seeds(self):
        start = time.monotonic()
        metric_cfg = MetricConfig()
        consensus_cfg = ConsensusConfig()
        onset = 10.0
        for seed in range(20):
            sensors = [
                position_spec("s0", (1.0, 2.0, 0.5), 0.3),
                position_spec("s1", (-2.0, 1.0, 0.0), -0.5),
                position_spec("s2", (5.0, -3.0, 1.0), 0.8),
                position_spec("s3", (10.0, 10.0, 0.0), -1.2, corruptions=[
                    CorruptionSpec("drift", onset, 16.0,
                                   {"axis": (0.0, 1.0, 0.0),
                                    "v0": 0.6, "lam": 0.0})]),
            ]
            sim = simulate(lateral_scenario(seed, sensors))
            views = true_frame_views(sim)
            local = truth_local_view(sim)
            # zero false positives before the corruption
            for t in np.arange(4.0, 9.5, 0.5):
                m = build_matrix(views, local, float(t), metric_cfg)
                assert detect_faulty(m, consensus_cfg) == set(), (seed, t)
            # flagged within two metric windows of the 0.6 m/s step
            m = build_matrix(views, local, onset + 2 * metric_cfg.window,
                             metric_cfg)
            assert detect_faulty(m, consensus_cfg) == {"s3"}, seed
        assert time.monotonic() - start < 60.0


class TestCriterion4TwoSensorArbitration:
    def test_picks_healthy_in_18_of_20_seeds(self):
        start = time.monotonic()
        metric_cfg = MetricConfig()
        consensus_cfg = ConsensusConfig()
        wins = 0
        for seed in range(20):
            sensors = [
                position_spec("good", (1.0, 2.0, 0.5), 0.3),
                position_spec("bad", (-2.0, 1.0, 0.0), -0.5, corruptions=[
                    CorruptionSpec("drift", 8.0, 16.0,
                                   {"axis": (1.0, 0.0, 0.0),
                                    "v0": 0.4, "lam": 0.0})]),
            ]
            sim = simulate(lateral_scenario(seed, sensors))
            views = true_frame_views(sim)
            local = truth_local_view(sim)
            m = build_matrix(views, local, 11.0, metric_cfg)
            if abs(m.local("bad") - m.local("good")) <= THRESHOLD:
                continue  # LOCAL gap below threshold: arbitration not due
            try:
                pick = arbitrate_two_sensors(m, None, consensus_cfg)
            except Indeterminate:
                pick = None
            wins += pick == "good"
        assert wins >= 18
        assert time.monotonic() - start < 60.0


class TestCriterion5FusionComparison:
    def test_rmse_ordering_and_naive_divergence(self, default_comparison):
        sim, results, elapsed = default_comparison
        assert elapsed < 120.0

        truth = sim.truth
        reports = {s: compute_error_report(r.output, truth)
                   for s, r in results.items()}
        single = reports["single:lio"].ate_pos_rmse
        consensus = reports["consensus"].ate_pos_rmse
        naive = reports["naive"].ate_pos_rmse
        assert single <= consensus < naive
        assert consensus <= 3.0 * single

        # the naive fusion drifts without bound through the noise phase;
        # compare position errors over the final five seconds
        def tail_error(result):
            out = result.output
            n = len(out.stamps)
            mask = out.stamps >= out.stamps[-1] - 5.0
            err = np.linalg.norm(out.positions[mask]
                                 - truth.positions[:n][mask[:n]], axis=1)
            return float(err.mean())

        assert tail_error(results["naive"]) > 5.0 * tail_error(
            results["consensus"])


class TestCriterion6TransformObservability:
    ONSET = 15.0

    def test_yaw_frozen_until_lateral_onset(self):
        start = time.monotonic()
        sc = Scenario(
            name="observability", seed=13, duration=30.0,
            # z-only until the lateral leg toward (3, 1) begins
            waypoints=np.array([[0.0, 0, 0, 0], [3.0, 0, 0, 1.0],
                                [6.0, 0, 0, 0.5], [9.0, 0, 0, 1.3],
                                [12.0, 0, 0, 0.7], [15.0, 0, 0, 1.2],
                                [20.0, 3, 1, 1.2], [25.0, 6, -1, 1.5],
                                [30.0, 9, 2, 1.0]]),
            yaw_knots=np.array([[0.0, 0.0], [15.0, 0.0], [30.0, 0.8]]),
            imu=ImuSpec(),
            sensors=[position_spec("pos", (5.0, -3.0, 1.0),
                                   np.radians(120.0))],
            dither_amp=(0.35, 0.35, 0.25), dither_start=15.0,
            dither_ramp=3.0)
        sim = simulate(sc)
        timeline = run_transform_graph(sim, "pos")
        true_rotation = sim.frames["pos"].rotation

        frozen = [tf for t, _, tf in timeline if t <= 12.0]
        assert frozen
        for tf in frozen:
            err = tf.rotation.angle_to(true_rotation)
            assert abs(err - np.radians(120.0)) < 1e-3

        settled = [tf for t, _, tf in timeline
                   if self.ONSET < t <= self.ONSET + 5.0]
        assert settled
        assert settled[-1].rotation.angle_to(true_rotation) < np.radians(2.0)
        assert time.monotonic() - start < 60.0


def euler_trajectory(t):
    """Forward-Euler reference motion exactly consistent with the IMU chain."""
    a = np.column_stack([-0.64 * np.sin(0.8 * t),
                         -0.18 * np.cos(0.6 * t), np.zeros_like(t)])
    p = np.zeros((len(t), 3))
    v = np.zeros((len(t), 3))
    p[0] = [0.0, 0.5, 0.0]
    v[0] = [0.8, 0.0, 0.1]
    for k in range(len(t) - 1):
        h = t[k + 1] - t[k]
        p[k + 1] = p[k] + v[k] * h + 0.5 * a[k] * h * h
        v[k + 1] = v[k] + a[k] * h
    return p, v, a


class TestCriterion7Numerics:
    @staticmethod
    def _random_factors(rng):
        cfg = EstimatorConfig()
        stamps = np.arange(21) * 0.005
        accel = rng.normal(0.0, 2.0, size=(21, 3))
        gyro = rng.normal(0.0, 0.5, size=(21, 3))
        pre = preintegrate(stamps, accel, gyro)

        def rot(key):
            return RotationBlock(key, UnitQuaternion.from_rpy(
                *rng.uniform(-0.6, 0.6, 3)).wxyz)

        def vec(key):
            return VectorBlock(key, rng.normal(size=3))

        blocks = {k: rot(k) for k in ("qi", "qj", "q")}
        blocks.update({k: vec(k) for k in ("vi", "pi", "vj", "pj", "p")})
        blocks["bg"] = VectorBlock("bg", np.zeros(3))
        blocks["ba"] = VectorBlock("ba", np.zeros(3))

        factors = [
            (ImuFactor(("qi", "vi", "pi", "bg", "ba", "qj", "vj", "pj"),
                       pre, cfg),
             ("qi", "vi", "pi", "qj", "vj", "pj")),
            (PoseBetweenFactor(("qi", "pi", "qj", "pj"),
                               UnitQuaternion.from_rpy(
                                   *rng.uniform(-0.2, 0.2, 3)).wxyz,
                               rng.normal(size=3), 2.0, 3.0), None),
            (PositionBetweenFactor(("qi", "pi", "qj", "pj"),
                                   rng.normal(size=3),
                                   rng.normal(size=3) * 0.1, 4.0), None),
            (TransformPointsFactor("q", "p", rng.normal(size=(6, 3)),
                                   rng.normal(size=(6, 3)), 1.5), None),
            (RotationPriorFactor("q", UnitQuaternion.from_rpy(
                *rng.uniform(-0.5, 0.5, 3)).wxyz, 1.3), None),
            (RotationBetweenFactor("qi", "qj", UnitQuaternion.from_rpy(
                *rng.uniform(-0.3, 0.3, 3)).wxyz, 0.7), None),
            (VectorPriorFactor("p", rng.normal(size=3), 2.2), None),
        ]
        return blocks, factors

    def test_jacobians_match_finite_differences_100_points(self):
        for point in range(100):
            rng = np.random.default_rng(1000 + point)
            blocks, factors = self._random_factors(rng)
            for factor, keys in factors:
                for key in keys if keys is not None else factor.keys:
                    analytic = factor.jacobian(blocks, key)
                    numeric = numeric_jacobian(factor, blocks, key, eps=1e-6)
                    scale = max(1.0, float(np.max(np.abs(numeric))))
                    rel = np.max(np.abs(analytic - numeric)) / scale
                    assert rel < 1e-5, (point, type(factor).__name__, key)

    def test_lm_cost_non_increasing_over_accepted_steps(self):
        rng = np.random.default_rng(5)
        g = Graph()
        prev = None
        for k in range(6):
            key = f"q{k}"
            g.add_block(RotationBlock(key, UnitQuaternion.from_rpy(
                *rng.uniform(-1.0, 1.0, 3)).wxyz))
            if prev is None:
                g.add_factor(RotationPriorFactor(
                    key, UnitQuaternion.identity().wxyz, 1.0))
            else:
                g.add_factor(RotationBetweenFactor(
                    prev, key, UnitQuaternion.from_rpy(0.1, 0.0, 0.2).wxyz,
                    1.0))
            prev = key
        costs = [g.cost()]
        for _ in range(15):
            result = g.optimize(max_iterations=1)
            costs.append(result.cost)
        for before, after in zip(costs, costs[1:]):
            assert after <= before + 1e-12

    def _run_estimator(self, lag, duration=10.0, dt=0.005, kf_every=20):
        t = np.arange(0.0, duration + dt / 2, dt)
        p, v, a = euler_trajectory(t)
        est = LocalGraphEstimator(
            EstimatorConfig(lag=lag),
            NavState(0.0, np.array([1.0, 0, 0, 0]), p[0].copy(), v[0].copy()))
        prev_kf = 0.0
        for k, tk in enumerate(t):
            est.add_imu(tk, a[k] - GRAVITY, np.zeros(3))
            if k > 0 and k % kf_every == 0:
                est.add_keyframe(tk)
                i = k - kf_every
                est.add_pose_between(prev_kf, tk, np.array([1.0, 0, 0, 0]),
                                     p[k] - p[i], 1e-3, 1e-3)
                est.solve()
                prev_kf = tk
        return est.current_state()

    def test_fixed_lag_matches_batch_on_noiseless_run(self):
        lag = self._run_estimator(lag=0.5)
        batch = self._run_estimator(lag=1e6)
        assert np.allclose(lag.position, batch.position, atol=1e-6)
        assert np.allclose(lag.velocity, batch.velocity, atol=1e-6)
        assert lag.orientation().angle_to(batch.orientation()) < 1e-6


class TestCriterion8Determinism:
    def test_cli_outputs_byte_identical(self, tmp_path):
        sensors = [
            SensorSpec(sensor_id="lio", modality="pose", rate=10.0,
                       sigma=1e-4, sigma_rot=1e-4,
                       frame_translation=(1.0, 2.0, 0.5),
                       frame_rpy=(0.0, 0.0, 0.3)),
            position_spec("pos", (5.0, -3.0, 1.0), 0.8),
        ]
        sc = lateral_scenario(9, sensors, duration=8.0, name="determinism")
        scenario_path = tmp_path / "scenario.yaml"
        save_scenario(sc, scenario_path)

        dirs = [tmp_path / "run1", tmp_path / "run2"]
        for outdir in dirs:
            code = cli_main(["run", "--scenario", str(scenario_path),
                             "--out", str(outdir)])
            assert code == 0
        names = sorted(p.name for p in dirs[0].glob("*.csv"))
        assert names, "run produced no CSV output"
        for name in names:
            b1 = (dirs[0] / name).read_bytes()
            b2 = (dirs[1] / name).read_bytes()
            assert b1 == b2, name


class TestCriterion9SwitchingHygiene:
    def test_switch_rate_and_output_continuity(self, default_comparison):
        sim, results, _ = default_comparison
        result = results["consensus"]
        out = result.output

        times = [t for t, _, _ in result.switches]
        if len(times) > 1:
            assert min(np.diff(times)) >= 1.0

        # a selection switch must not kink the 200 Hz output: the second
        # difference of position stays inside 3 sigma of the configured
        # sensor noise around every switch instant
        sigma = max(sp.sigma for sp in sim.scenario.sensors)
        second_diff = np.linalg.norm(
            np.diff(out.positions, n=2, axis=0), axis=1)
        for t_switch in times:
            k = int(np.searchsorted(out.stamps, t_switch))
            lo = max(k - 20, 0)
            hi = min(k + 20, len(second_diff))
            assert second_diff[lo:hi].max() < 3.0 * sigma
