"""Sequential event loop tying simulation, metrics, consensus, and fusion.

The IMU stream drives a single-threaded clock.  Per IMU sample the local
estimator propagates and emits one output state; sensor samples land on the
IMU grid and feed (a) the per-sensor transform graphs and (b), for the
currently fused sensor, new keyframes with between-factors.  The local graph
is solved at most every ``solve_period`` and only when it changed; transform
graphs update at 10 Hz; the consensus selector runs once per metric window.

Strategies:

* ``consensus``      - full selective fusion (the default);
* ``single:<id>``    - always fuse one fixed sensor;
* ``naive``          - fuse every sensor simultaneously, using the true
                       sensor-frame transforms (a deliberately generous
                       baseline that still ingests corrupted data).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .consensus import (
    ConsensusConfig,
    ConsensusTracker,
    ConsistencyMatrix,
    FusionDecision,
    build_matrix,
)
from .estimator import (
    EstimatorConfig,
    LocalGraphEstimator,
    NavState,
    TransformGraphEstimator,
    pose_delta_to_body,
)
from .geometry import RigidTransform, UnitQuaternion, quat_rotate
from .metrics import (
    DROPOUT,
    DROPOUT_OUTPUT_VALUE,
    METRICS,
    LocalView,
    MetricConfig,
    SensorView,
    consistency,
)
from .sim import SimResult
from .signals import SensorStream

STRATEGY_CONSENSUS = "consensus"
STRATEGY_NAIVE = "naive"
STRATEGY_SINGLE_PREFIX = "single:"


def parse_strategy(text: str) -> str:
    """Validate a strategy string; returns it normalized."""
    text = text.strip().lower()
    if text in (STRATEGY_CONSENSUS, STRATEGY_NAIVE):
        return text
    if text.startswith(STRATEGY_SINGLE_PREFIX) and \
            len(text) > len(STRATEGY_SINGLE_PREFIX):
        return text
    raise ValueError(
        f"unknown strategy {text!r}; expected 'consensus', 'naive', "
        "or 'single:<sensor_id>'")


@dataclass
class PipelineConfig:
    metric: MetricConfig = field(default_factory=MetricConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    consensus_period: float = 1.0
    view_history: float = 4.0     # seconds of stream kept for metric views
    local_view_stride: int = 20   # output subsampling for the LOCAL view


@dataclass
class FusedOutput:
    """200 Hz fused state series; velocity is expressed in the body frame."""

    stamps: np.ndarray
    quats_wxyz: np.ndarray
    positions: np.ndarray
    velocities_body: np.ndarray
    selected: list[str]           # fused sensor id per sample ("none"/"all")


@dataclass
class PipelineResult:
    output: FusedOutput
    decisions: list[tuple[float, FusionDecision]]
    matrices: list[ConsistencyMatrix]
    switches: list[tuple[float, str, str]]   # (stamp, old, new)


def _grid_key(t: float, rate: float) -> int:
    return int(round(t * rate))


def _mount_world(state: NavState, lever: np.ndarray) -> np.ndarray:
    if np.any(lever):
        return state.position + quat_rotate(state.quat_wxyz, lever)
    return state.position


class _StreamCursor:
    """Grid-indexed access to one sensor stream."""

    def __init__(self, stream: SensorStream, imu_rate: float):
        self.stream = stream
        self.lookup = {_grid_key(s, imu_rate): row
                       for row, s in enumerate(stream.stamps)}

    def row_at(self, key: int) -> int | None:
        return self.lookup.get(key)


def _window_view(stream: SensorStream, t: float, history: float,
                 frame_rotation: UnitQuaternion) -> SensorView:
    mask = (stream.stamps >= t - history) & (stream.stamps <= t)
    sub = stream.replace_window(mask)
    return SensorView.from_stream(sub, frame_rotation)


class _OutputRecorder:
    def __init__(self):
        self.stamps: list[float] = []
        self.quats: list[np.ndarray] = []
        self.positions: list[np.ndarray] = []
        self.velocities: list[np.ndarray] = []
        self.selected: list[str] = []
        self.gyro: list[np.ndarray] = []

    def append(self, state: NavState, fused: str, gyro: np.ndarray) -> None:
        self.stamps.append(state.stamp)
        self.quats.append(state.quat_wxyz)
        self.positions.append(state.position)
        self.velocities.append(state.body_velocity())
        self.selected.append(fused)
        self.gyro.append(gyro)

    def local_view(self, t: float, history: float, stride: int) -> LocalView:
        n = len(self.stamps)
        stamps = np.asarray(self.stamps)
        lo = int(np.searchsorted(stamps, t - history))
        idx = np.arange(lo, n, stride)
        return LocalView(stamps=stamps[idx],
                         positions=np.asarray(self.positions)[idx],
                         quats_wxyz=np.asarray(self.quats)[idx],
                         gyro=np.asarray(self.gyro)[idx])

    def finish(self) -> FusedOutput:
        return FusedOutput(np.asarray(self.stamps), np.asarray(self.quats),
                           np.asarray(self.positions),
                           np.asarray(self.velocities), self.selected)


def run_pipeline(sim: SimResult, cfg: PipelineConfig,
                 strategy: str = STRATEGY_CONSENSUS) -> PipelineResult:
    strategy = parse_strategy(strategy)
    imu = sim.imu
    imu_rate = imu.rate
    truth = sim.truth
    specs = {sp.sensor_id: sp for sp in sim.scenario.sensors}
    streams = {s.sensor_id: s for s in sim.sensors}
    cursors = {sid: _StreamCursor(s, imu_rate) for sid, s in streams.items()}

    if strategy.startswith(STRATEGY_SINGLE_PREFIX):
        fixed = strategy[len(STRATEGY_SINGLE_PREFIX):]
        if fixed not in streams:
            raise ValueError(f"strategy references unknown sensor {fixed!r}")
    else:
        fixed = None

    initial = NavState(float(truth.stamps[0]), truth.quats_wxyz[0].copy(),
                       truth.positions[0].copy(), truth.velocities[0].copy())
    est = LocalGraphEstimator(cfg.estimator, initial)
    tgs = {sid: TransformGraphEstimator(sid, cfg.estimator)
           for sid in streams}
    tracker = ConsensusTracker(cfg.consensus)
    recorder = _OutputRecorder()

    naive = strategy == STRATEGY_NAIVE
    fused: str | None = fixed if fixed is not None else None
    # pending measurement chains: sensor -> (stamp, quat or None, position)
    chains: dict[str, tuple[float, np.ndarray | None, np.ndarray]] = {}
    decisions: list[tuple[float, FusionDecision]] = []
    matrices: list[ConsistencyMatrix] = []
    switches: list[tuple[float, str, str]] = []

    last_solve = -np.inf
    last_tg = -np.inf
    next_consensus = float(truth.stamps[0]) + cfg.metric.window
    eps = 1e-9

    def fusable(sid: str) -> bool:
        if streams[sid].modality == "pose":
            return True
        return tgs[sid].converged

    def attach_measurement(sid: str, t: float, row: int) -> None:
        """Keyframe plus between-factor from this sensor's last sample."""
        stream = streams[sid]
        spec = specs[sid]
        y = stream.positions[row]
        q_meas = None
        if stream.modality == "pose":
            q_meas = stream.quats_wxyz[row]
        est.add_keyframe(t)
        prev = chains.get(sid)
        chains[sid] = (t, q_meas, y.copy())
        if prev is None or est.keyframe_at(prev[0]) is None:
            return
        t0, q0, y0 = prev
        sigma = max(spec.sigma, 1e-6) * np.sqrt(2.0)
        if stream.modality == "pose":
            dq, dp = pose_delta_to_body(
                UnitQuaternion.from_wxyz(q0), y0,
                UnitQuaternion.from_wxyz(q_meas), y,
                stream.extrinsic)
            sigma_q = max(spec.sigma_rot, 1e-6) * np.sqrt(2.0)
            est.add_pose_between(t0, t, dq, dp, sigma_q, sigma)
        else:
            if naive:
                r_al = sim.frames[sid].rotation
            else:
                r_al = tgs[sid].rotation
            delta_local = r_al.inverse().rotate(y - y0)
            est.add_position_between(t0, t, delta_local,
                                     stream.extrinsic.translation, sigma)

    def switch_to(new: str | None, t: float) -> None:
        nonlocal fused
        if new == fused:
            return
        old = fused
        if old is not None and old in tgs:
            tgs[old].unfreeze()
            chains.pop(old, None)
        if new is not None and streams[new].modality == "position":
            tgs[new].freeze()
        switches.append((t, old or "none", new or "none"))
        fused = new

    for k, t in enumerate(imu.stamps):
        state = est.add_imu(float(t), imu.accel[k], imu.gyro[k])
        label = "all" if naive else (fused or "none")
        recorder.append(state, label, imu.gyro[k])
        key = _grid_key(float(t), imu_rate)

        for sid, cursor in cursors.items():
            row = cursor.row_at(key)
            if row is None:
                continue
            if not naive:
                tgs[sid].add_point(float(t),
                                   _mount_world(state,
                                                streams[sid].extrinsic.translation),
                                   streams[sid].positions[row])
            if naive or sid == fused:
                attach_measurement(sid, float(t), row)

        if est.needs_solve and t - last_solve >= cfg.estimator.solve_period - eps:
            est.solve(max_iterations=2)
            last_solve = float(t)

        if not naive and t - last_tg >= cfg.estimator.transform_period - eps:
            for sid, tg in tgs.items():
                # co-dependence guard: the fused position sensor stays frozen
                if fused == sid and streams[sid].modality == "position":
                    assert tg.frozen
                tg.update(float(t))
            last_tg = float(t)

        if fixed is None and not naive and t >= next_consensus - eps:
            views = {sid: _window_view(streams[sid], float(t),
                                       cfg.view_history, tgs[sid].rotation)
                     for sid in streams}
            local = recorder.local_view(float(t), cfg.view_history,
                                        cfg.local_view_stride)
            m = build_matrix(views, local, float(t), cfg.metric)
            matrices.append(m)
            decision = tracker.update(m, float(t))
            decisions.append((float(t), decision))
            target = decision.selected
            if target is None:
                switch_to(None, float(t))
            elif fusable(target):
                switch_to(target, float(t))
            elif fused is not None and fused not in decision.excluded \
                    and fusable(fused):
                pass  # keep fusing the current sensor until target is usable
            else:
                usable = sorted(sid for sid in streams
                                if sid not in decision.excluded
                                and fusable(sid))
                if usable:
                    ranked = min(usable, key=lambda s: (
                        np.inf if np.isnan(m.local(s)) else m.local(s), s))
                    switch_to(ranked, float(t))
                else:
                    switch_to(None, float(t))
            next_consensus += cfg.consensus_period

        if fixed is not None and fused is None and fusable(fixed):
            switch_to(fixed, float(t))

    return PipelineResult(recorder.finish(), decisions, matrices, switches)


# ---------------------------------------------------------------------------
# Convenience wrappers
# ---------------------------------------------------------------------------

def run_local_graph(sim: SimResult, sensor_id: str,
                    cfg: PipelineConfig | None = None) -> FusedOutput:
    """Fuse one fixed sensor with the IMU; output at the IMU rate."""
    cfg = cfg or PipelineConfig()
    result = run_pipeline(sim, cfg, f"single:{sensor_id}")
    return result.output


def run_transform_graph(sim: SimResult, sensor_id: str,
                        cfg: PipelineConfig | None = None,
                        update_period: float | None = None):
    """Track one sensor's frame transform against the true local series.

    Returns a list of (stamp, converged, RigidTransform estimate or None)
    at the transform update rate.
    """
    cfg = cfg or PipelineConfig()
    stream = next(s for s in sim.sensors if s.sensor_id == sensor_id)
    truth = sim.truth
    tg = TransformGraphEstimator(sensor_id, cfg.estimator)
    lever = stream.extrinsic.translation
    period = update_period or cfg.estimator.transform_period
    out = []
    next_update = float(truth.stamps[0]) + period
    for row, t in enumerate(stream.stamps):
        k = truth.index_of(float(t))
        mount = truth.positions[k] + quat_rotate(truth.quats_wxyz[k], lever)
        tg.add_point(float(t), mount, stream.positions[row])
        while t >= next_update:
            tg.update(float(t))
            estimate = RigidTransform(rotation=tg.rotation,
                                      translation=tg.translation.copy())
            out.append((float(t), tg.converged, estimate))
            next_update += period
    return out


# ---------------------------------------------------------------------------
# Metric shootout (side-by-side metric timelines on identical windows)
# ---------------------------------------------------------------------------

def metric_timelines(sim: SimResult, window: float = 1.0,
                     period: float = 1.0) -> list[dict]:
    """Evaluate all four metrics on the same pairwise windows.

    Views use the true sensor-frame rotations and the true local series, so
    the timelines isolate metric behavior from estimator transients.
    Returns rows of {stamp, pair, metric, value} with dropout rows rendered
    as the documented sentinel.
    """
    truth = sim.truth
    stride = max(int(round(sim.imu.rate / 10.0)), 1)
    local = LocalView(stamps=truth.stamps[::stride],
                      positions=truth.positions[::stride],
                      quats_wxyz=truth.quats_wxyz[::stride],
                      gyro=truth.gyro[::stride])
    views = {}
    for stream in sim.sensors:
        views[stream.sensor_id] = SensorView.from_stream(
            stream, sim.frames[stream.sensor_id].rotation)
    ids = sorted(views)
    rows = []
    t0 = float(truth.stamps[0]) + window
    t_end = float(truth.stamps[-1])
    times = np.arange(t0, t_end + 1e-9, period)
    for metric in METRICS:
        cfg = MetricConfig(window=window, metric=metric)
        for t in times:
            for i, a in enumerate(ids):
                for b in ids[i + 1:]:
                    v = consistency(views[a], views[b], local, float(t), cfg)
                    value = DROPOUT_OUTPUT_VALUE if v is DROPOUT else float(v)
                    rows.append({"stamp": float(t), "pair": f"{a}|{b}",
                                 "metric": metric, "value": value})
    return rows
