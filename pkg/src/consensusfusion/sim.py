"""Synthetic indoor-flight scenarios with controlled sensor corruption.

A scenario is a spline trajectory plus a set of odometry/position sensors,
each with its own reference frame, mount extrinsic, noise level, and a list
of timed corruption events (frame misalignment, extra white/brown noise,
exponential drift, dropout).

Ground truth is generated on the IMU grid with the same forward-Euler
discretization the estimator uses, so noiseless IMU together with noiseless
relative measurements is exactly consistent: acceleration samples are chosen
such that Euler propagation reproduces the designed positions sample by
sample.

Randomness is deterministic per (scenario seed, sensor id, event index), so
adding or reordering sensors does not perturb the noise of the others.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy.interpolate import CubicSpline

from .geometry import RigidTransform, UnitQuaternion, quat_rotate
from .signals import SensorStream

GRAVITY = np.array([0.0, 0.0, -9.81])

CORRUPTION_KINDS = ("misalign", "noise", "drift", "dropout")


# ---------------------------------------------------------------------------
# Specification dataclasses
# ---------------------------------------------------------------------------

@dataclass
class CorruptionSpec:
    kind: str
    start: float
    end: float
    # misalign: rpy (3,); noise: white, brown; drift: axis (3,), v0, lam
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.end < self.start:
            raise ValueError("corruption end before start")


@dataclass
class SensorSpec:
    sensor_id: str
    modality: str                 # "pose" or "position"
    rate: float
    sigma: float                  # position noise std [m]
    sigma_rot: float = 1e-4       # orientation noise std [rad], pose only
    extrinsic_translation: tuple = (0.0, 0.0, 0.0)
    extrinsic_rpy: tuple = (0.0, 0.0, 0.0)
    frame_translation: tuple = (0.0, 0.0, 0.0)
    frame_rpy: tuple = (0.0, 0.0, 0.0)
    corruptions: list[CorruptionSpec] = field(default_factory=list)

    def extrinsic(self) -> RigidTransform:
        return RigidTransform(
            rotation=UnitQuaternion.from_rpy(*self.extrinsic_rpy),
            translation=np.asarray(self.extrinsic_translation, dtype=float))

    def frame(self) -> RigidTransform:
        """True transform from the local/world frame into the sensor's
        reference frame."""
        return RigidTransform(
            rotation=UnitQuaternion.from_rpy(*self.frame_rpy),
            translation=np.asarray(self.frame_translation, dtype=float))


@dataclass
class ImuSpec:
    rate: float = 200.0
    sigma_acc: float = 0.02
    sigma_gyro: float = 0.002
    bias_acc: tuple = (0.0, 0.0, 0.0)
    bias_gyro: tuple = (0.0, 0.0, 0.0)


@dataclass
class Scenario:
    name: str
    seed: int
    duration: float
    waypoints: np.ndarray         # (n, 4) rows of (t, x, y, z)
    yaw_knots: np.ndarray         # (m, 2) rows of (t, yaw)
    imu: ImuSpec = field(default_factory=ImuSpec)
    sensors: list[SensorSpec] = field(default_factory=list)
    # sinusoidal excitation keeping every axis informative once airborne
    dither_amp: tuple = (0.0, 0.0, 0.0)
    dither_freq: tuple = (0.4, 0.55, 0.7)
    dither_start: float = 0.0
    dither_ramp: float = 4.0


@dataclass
class GroundTruth:
    stamps: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    quats_wxyz: np.ndarray
    gyro: np.ndarray             # body rates (bias/noise free)

    def index_of(self, t: float) -> int:
        return int(np.argmin(np.abs(self.stamps - t)))


@dataclass
class SimResult:
    scenario: Scenario
    truth: GroundTruth
    imu: SensorStream
    sensors: list[SensorStream]
    frames: dict[str, RigidTransform]


# ---------------------------------------------------------------------------
# Trajectory and truth synthesis
# ---------------------------------------------------------------------------

def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def sample_path(scenario: Scenario, t: np.ndarray) -> np.ndarray:
    wp = np.asarray(scenario.waypoints, dtype=float)
    spline = CubicSpline(wp[:, 0], wp[:, 1:], bc_type="clamped")
    p = spline(t)
    amp = np.asarray(scenario.dither_amp, dtype=float)
    if np.any(amp):
        freq = np.asarray(scenario.dither_freq, dtype=float)
        ramp = _smoothstep((t - scenario.dither_start)
                           / max(scenario.dither_ramp, 1e-9))
        phase = 2.0 * np.pi * freq[None, :] * t[:, None] \
            + np.array([0.0, 1.3, 2.6])
        p = p + ramp[:, None] * amp[None, :] * np.sin(phase)
    return p


def euler_consistent_truth(scenario: Scenario) -> GroundTruth:
    """Ground truth on the IMU grid, exactly consistent with forward Euler.

    Accelerations are defined implicitly: a_k is whatever makes one Euler
    step land on the next designed position sample.
    """
    dt = 1.0 / scenario.imu.rate
    n = int(round(scenario.duration / dt)) + 1
    t = np.arange(n) * dt
    p = sample_path(scenario, t)
    v = np.zeros_like(p)
    v[0] = (p[1] - p[0]) / dt
    for k in range(n - 1):
        a_k = 2.0 * (p[k + 1] - p[k] - v[k] * dt) / (dt * dt)
        v[k + 1] = v[k] + a_k * dt
    yk = np.asarray(scenario.yaw_knots, dtype=float)
    yaw = CubicSpline(yk[:, 0], yk[:, 1], bc_type="clamped")(t)
    gyro = np.zeros((n, 3))
    gyro[:-1, 2] = np.diff(yaw) / dt
    gyro[-1, 2] = gyro[-2, 2]
    quats = np.zeros((n, 4))
    for k in range(n):
        quats[k] = UnitQuaternion.from_rpy(0.0, 0.0, yaw[k]).wxyz
    return GroundTruth(t, p, v, quats, gyro)


def synthesize_imu(scenario: Scenario, truth: GroundTruth,
                   rng: np.random.Generator) -> SensorStream:
    """Specific-force and body-rate samples with bias and white noise."""
    dt = 1.0 / scenario.imu.rate
    n = len(truth.stamps)
    accel = np.zeros((n, 3))
    for k in range(n - 1):
        a_world = 2.0 * (truth.positions[k + 1] - truth.positions[k]
                         - truth.velocities[k] * dt) / (dt * dt)
        q = truth.quats_wxyz[k]
        accel[k] = quat_rotate(np.array([q[0], -q[1], -q[2], -q[3]]),
                               a_world - GRAVITY)
    accel[-1] = accel[-2]
    accel = accel + np.asarray(scenario.imu.bias_acc) \
        + rng.normal(0.0, scenario.imu.sigma_acc, size=(n, 3))
    gyro = truth.gyro + np.asarray(scenario.imu.bias_gyro) \
        + rng.normal(0.0, scenario.imu.sigma_gyro, size=(n, 3))
    return SensorStream(sensor_id="imu", modality="imu",
                        rate=scenario.imu.rate, stamps=truth.stamps.copy(),
                        accel=accel, gyro=gyro)


# ---------------------------------------------------------------------------
# Sensor synthesis and corruption
# ---------------------------------------------------------------------------

def _sensor_rng(scenario: Scenario, sensor_id: str,
                event: int) -> np.random.Generator:
    tag = zlib.crc32(sensor_id.encode())
    return np.random.default_rng([scenario.seed, tag, event])


def drift_displacement(elapsed: np.ndarray, v0: float,
                       lam: float) -> np.ndarray:
    """Exponential drift magnitude v0 * (exp(lam dt) - 1) / lam.

    The lam -> 0 limit is a constant-velocity ramp v0 * dt.
    """
    elapsed = np.maximum(np.asarray(elapsed, dtype=float), 0.0)
    if abs(lam) < 1e-12:
        return v0 * elapsed
    return v0 * (np.expm1(lam * elapsed)) / lam


def apply_corruption(stamps: np.ndarray, positions: np.ndarray,
                     quats: np.ndarray | None, spec: CorruptionSpec,
                     rng: np.random.Generator) -> tuple:
    """Apply one corruption event; returns (keep_mask, positions, quats)."""
    keep = np.ones(len(stamps), dtype=bool)
    positions = positions.copy()
    quats = None if quats is None else quats.copy()
    active = (stamps >= spec.start) & (stamps < spec.end)

    if spec.kind == "dropout":
        keep[active] = False
    elif spec.kind == "misalign":
        rot = UnitQuaternion.from_rpy(*spec.params["rpy"])
        affected = stamps >= spec.start
        if np.any(affected):
            pivot = positions[np.argmax(affected)].copy()
            rel = positions[affected] - pivot
            positions[affected] = rel @ rot.rotation_matrix().T + pivot
            if quats is not None:
                for i in np.flatnonzero(affected):
                    quats[i] = (rot * UnitQuaternion.from_wxyz(quats[i])).wxyz
    elif spec.kind == "drift":
        axis = np.asarray(spec.params["axis"], dtype=float)
        axis = axis / np.linalg.norm(axis)
        after = stamps >= spec.start
        elapsed = np.minimum(stamps[after] - spec.start,
                             spec.end - spec.start)
        mag = drift_displacement(elapsed, spec.params["v0"],
                                 spec.params.get("lam", 0.0))
        positions[after] += mag[:, None] * axis[None, :]
    elif spec.kind == "noise":
        white = spec.params.get("white", 0.0)
        brown = spec.params.get("brown", 0.0)
        idx = np.flatnonzero(active)
        if white > 0 and len(idx):
            positions[idx] += rng.normal(0.0, white, size=(len(idx), 3))
        if brown > 0 and len(idx):
            dts = np.diff(stamps[idx], prepend=stamps[idx[0]])
            steps = rng.normal(0.0, brown, size=(len(idx), 3)) \
                * np.sqrt(np.maximum(dts, 0.0))[:, None]
            walk = np.cumsum(steps, axis=0)
            positions[idx] += walk
            # the accumulated offset persists after the event ends
            tail = stamps >= spec.end
            positions[tail] += walk[-1]
    return keep, positions, quats


def synthesize_sensor(scenario: Scenario, truth: GroundTruth,
                      spec: SensorSpec) -> SensorStream:
    stride = int(round(scenario.imu.rate / spec.rate))
    if stride < 1 or abs(stride * spec.rate - scenario.imu.rate) > 1e-6:
        raise ValueError(f"sensor rate {spec.rate} must divide the IMU rate")
    idx = np.arange(0, len(truth.stamps), stride)
    stamps = truth.stamps[idx]
    ext = spec.extrinsic()
    frame = spec.frame()
    r_frame = frame.rotation.rotation_matrix()

    # mount-point world positions, then mapped into the sensor frame
    mount = truth.positions[idx].copy()
    lever = ext.translation
    if np.any(lever):
        for row, k in enumerate(idx):
            mount[row] += quat_rotate(truth.quats_wxyz[k], lever)
    positions = mount @ r_frame.T + frame.translation

    quats = None
    if spec.modality == "pose":
        quats = np.zeros((len(idx), 4))
        for row, k in enumerate(idx):
            q_body = UnitQuaternion.from_wxyz(truth.quats_wxyz[k])
            quats[row] = (frame.rotation * q_body * ext.rotation).wxyz

    rng = _sensor_rng(scenario, spec.sensor_id, 0)
    positions = positions + rng.normal(0.0, spec.sigma,
                                       size=positions.shape)
    if quats is not None and spec.sigma_rot > 0:
        for row in range(len(quats)):
            pert = UnitQuaternion.exp(rng.normal(0.0, spec.sigma_rot, 3))
            quats[row] = (UnitQuaternion.from_wxyz(quats[row]) * pert).wxyz

    keep = np.ones(len(stamps), dtype=bool)
    for event, corr in enumerate(spec.corruptions, start=1):
        c_rng = _sensor_rng(scenario, spec.sensor_id, event)
        k, positions, quats = apply_corruption(stamps, positions, quats,
                                               corr, c_rng)
        keep &= k

    return SensorStream(
        sensor_id=spec.sensor_id, modality=spec.modality, rate=spec.rate,
        extrinsic=ext, stamps=stamps[keep], positions=positions[keep],
        quats_wxyz=None if quats is None else quats[keep])


def simulate(scenario: Scenario) -> SimResult:
    truth = euler_consistent_truth(scenario)
    imu = synthesize_imu(scenario, truth,
                         _sensor_rng(scenario, "imu", 0))
    sensors = [synthesize_sensor(scenario, truth, spec)
               for spec in scenario.sensors]
    frames = {spec.sensor_id: spec.frame() for spec in scenario.sensors}
    return SimResult(scenario, truth, imu, sensors, frames)


# ---------------------------------------------------------------------------
# YAML round trip
# ---------------------------------------------------------------------------

def scenario_to_dict(s: Scenario) -> dict:
    return {
        "name": s.name,
        "seed": int(s.seed),
        "duration": float(s.duration),
        "waypoints": np.asarray(s.waypoints, dtype=float).tolist(),
        "yaw_knots": np.asarray(s.yaw_knots, dtype=float).tolist(),
        "dither": {
            "amp": list(map(float, s.dither_amp)),
            "freq": list(map(float, s.dither_freq)),
            "start": float(s.dither_start),
            "ramp": float(s.dither_ramp),
        },
        "imu": {
            "rate": float(s.imu.rate),
            "sigma_acc": float(s.imu.sigma_acc),
            "sigma_gyro": float(s.imu.sigma_gyro),
            "bias_acc": list(map(float, s.imu.bias_acc)),
            "bias_gyro": list(map(float, s.imu.bias_gyro)),
        },
        "sensors": [{
            "id": sp.sensor_id,
            "modality": sp.modality,
            "rate": float(sp.rate),
            "sigma": float(sp.sigma),
            "sigma_rot": float(sp.sigma_rot),
            "extrinsic": {"translation": list(map(float, sp.extrinsic_translation)),
                          "rpy": list(map(float, sp.extrinsic_rpy))},
            "frame": {"translation": list(map(float, sp.frame_translation)),
                      "rpy": list(map(float, sp.frame_rpy))},
            "corruptions": [{
                "kind": c.kind, "start": float(c.start), "end": float(c.end),
                "params": {k: (list(map(float, v))
                               if isinstance(v, (list, tuple, np.ndarray))
                               else float(v))
                           for k, v in c.params.items()},
            } for c in sp.corruptions],
        } for sp in s.sensors],
    }


def scenario_from_dict(d: dict) -> Scenario:
    dither = d.get("dither", {})
    imu = d.get("imu", {})
    sensors = []
    for sd in d.get("sensors", []):
        sensors.append(SensorSpec(
            sensor_id=sd["id"], modality=sd["modality"],
            rate=float(sd["rate"]), sigma=float(sd["sigma"]),
            sigma_rot=float(sd.get("sigma_rot", 1e-4)),
            extrinsic_translation=tuple(sd["extrinsic"]["translation"]),
            extrinsic_rpy=tuple(sd["extrinsic"]["rpy"]),
            frame_translation=tuple(sd["frame"]["translation"]),
            frame_rpy=tuple(sd["frame"]["rpy"]),
            corruptions=[CorruptionSpec(c["kind"], float(c["start"]),
                                        float(c["end"]),
                                        dict(c.get("params", {})))
                         for c in sd.get("corruptions", [])]))
    return Scenario(
        name=d["name"], seed=int(d["seed"]), duration=float(d["duration"]),
        waypoints=np.asarray(d["waypoints"], dtype=float),
        yaw_knots=np.asarray(d["yaw_knots"], dtype=float),
        imu=ImuSpec(rate=float(imu.get("rate", 200.0)),
                    sigma_acc=float(imu.get("sigma_acc", 0.02)),
                    sigma_gyro=float(imu.get("sigma_gyro", 0.002)),
                    bias_acc=tuple(imu.get("bias_acc", (0.0, 0.0, 0.0))),
                    bias_gyro=tuple(imu.get("bias_gyro", (0.0, 0.0, 0.0)))),
        sensors=sensors,
        dither_amp=tuple(dither.get("amp", (0.0, 0.0, 0.0))),
        dither_freq=tuple(dither.get("freq", (0.4, 0.55, 0.7))),
        dither_start=float(dither.get("start", 0.0)),
        dither_ramp=float(dither.get("ramp", 4.0)))


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(scenario_to_dict(scenario), fh, sort_keys=False)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(yaml.safe_load(fh))


# ---------------------------------------------------------------------------
# The default corrupted-sensor scenario
# ---------------------------------------------------------------------------

def default_indoor_scenario(seed: int = 7) -> Scenario:
    """130 s flight: vertical takeoff phase, then a lawnmower sweep.

    Four sensors, one healthy (LIO); the others suffer staggered faults.
    Each drift onset is preceded by a short dropout so the selector can react
    before corrupted increments enter the fused estimate.
    """
    deg = np.pi / 180.0
    waypoints = np.array([
        # vertical-only phase: frame yaw stays unobservable until 35 s
        [0.0,   0.0,  0.0, 0.0],
        [8.0,   0.0,  0.0, 2.0],
        [16.0,  0.0,  0.0, 0.8],
        [24.0,  0.0,  0.0, 2.6],
        [31.0,  0.0,  0.0, 1.4],
        [35.0,  0.0,  0.0, 2.0],
        # lawnmower sweep
        [50.0,  28.0,  0.0, 2.8],
        [56.0,  28.0,  6.0, 2.0],
        [71.0,  0.0,   6.0, 3.0],
        [77.0,  0.0,  12.0, 2.2],
        [92.0,  28.0, 12.0, 3.2],
        [98.0,  28.0, 18.0, 2.4],
        [113.0, 0.0,  18.0, 3.0],
        [119.0, 0.0,  24.0, 2.2],
        [130.0, 24.0, 24.0, 3.0],
    ])
    yaw_knots = np.array([
        [0.0, 0.0], [35.0, 0.0], [50.0, 0.3], [60.0, -0.6], [75.0, 0.9],
        [90.0, -0.4], [105.0, 0.7], [120.0, -0.2], [130.0, 0.4],
    ])
    sensors = [
        SensorSpec(
            sensor_id="lio", modality="pose", rate=10.0, sigma=1e-4,
            extrinsic_translation=(0.10, 0.0, 0.05),
            extrinsic_rpy=(0.0, 0.0, 0.2),
            frame_translation=(1.0, 2.0, 0.5), frame_rpy=(0.0, 0.0, 0.3)),
        SensorSpec(
            sensor_id="vio", modality="pose", rate=20.0, sigma=2e-4,
            extrinsic_translation=(-0.05, 0.08, 0.0),
            extrinsic_rpy=(0.05, 0.0, -0.1),
            frame_translation=(-2.0, 1.0, 0.0), frame_rpy=(0.0, 0.0, -0.5),
            corruptions=[
                CorruptionSpec("dropout", 17.5, 18.0),
                CorruptionSpec("drift", 18.0, 30.0,
                               {"axis": (0.0, 1.0, 0.0),
                                "v0": 0.05, "lam": 0.3}),
            ]),
        SensorSpec(
            sensor_id="pos", modality="position", rate=10.0, sigma=2e-4,
            extrinsic_translation=(0.0, 0.0, 0.10),
            frame_translation=(5.0, -3.0, 1.0), frame_rpy=(0.0, 0.0, 0.8),
            corruptions=[
                CorruptionSpec("misalign", 0.0, 130.0,
                               {"rpy": (30 * deg, 60 * deg, 120 * deg)}),
                CorruptionSpec("dropout", 60.0, 65.0),
                CorruptionSpec("noise", 82.0, 130.0,
                               {"white": 0.03, "brown": 0.02}),
                CorruptionSpec("drift", 100.0, 130.0,
                               {"axis": (1.0, 0.0, 0.0),
                                "v0": 0.04, "lam": 0.05}),
            ]),
        SensorSpec(
            sensor_id="gps", modality="position", rate=10.0, sigma=3e-4,
            extrinsic_translation=(0.0, 0.0, 0.15),
            frame_translation=(10.0, 10.0, 0.0), frame_rpy=(0.0, 0.0, -1.2),
            corruptions=[
                CorruptionSpec("dropout", 69.5, 70.0),
                CorruptionSpec("drift", 70.0, 130.0,
                               {"axis": (0.6, 0.8, 0.0),
                                "v0": 0.02, "lam": 0.02}),
            ]),
    ]
    return Scenario(
        name="indoor_default", seed=seed, duration=130.0,
        waypoints=waypoints, yaw_knots=yaw_knots, imu=ImuSpec(),
        sensors=sensors,
        dither_amp=(0.35, 0.35, 0.25), dither_start=36.0, dither_ramp=6.0)
