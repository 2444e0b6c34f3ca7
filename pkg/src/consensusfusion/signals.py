"""Time-stamped measurement streams, sliding windows, and per-window
standardization feeding the consistency metrics.

Streams are stored columnar (numpy arrays) for speed; :class:`TimedSample`
is the per-sample view used when building streams incrementally.

Standardization note: both sources of a window receive the *identical*
affine map per axis (joint mean, joint half-range).  Per-source scaling
would erase exactly the discrepancy the metrics must detect.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, UnitQuaternion

STANDARDIZE_EPS = 1e-9


class TooFewSamples(ValueError):
    pass


class InsufficientOverlap(ValueError):
    """Window extraction failed; downstream treats this as a dropout."""


@dataclass
class TimedSample:
    stamp: float
    position: np.ndarray | None = None
    quat: UnitQuaternion | None = None
    accel: np.ndarray | None = None
    gyro: np.ndarray | None = None


@dataclass
class SensorStream:
    """Ordered samples of one sensor plus its fixed mounting extrinsic."""

    sensor_id: str
    modality: str  # 'pose' | 'position' | 'imu'
    rate: float
    extrinsic: RigidTransform = field(default_factory=RigidTransform.identity)
    stamps: np.ndarray = field(default_factory=lambda: np.empty(0))
    positions: np.ndarray | None = None       # (n, 3), pose/position
    quats_wxyz: np.ndarray | None = None      # (n, 4), pose only
    accel: np.ndarray | None = None           # (n, 3), imu only
    gyro: np.ndarray | None = None            # (n, 3), imu only

    def __post_init__(self):
        if self.modality not in ("pose", "position", "imu"):
            raise ValueError(f"unknown modality {self.modality!r}")
        self.validate()

    def validate(self):
        if len(self.stamps) > 1 and not np.all(np.diff(self.stamps) > 0):
            raise ValueError(f"stream {self.sensor_id}: stamps not strictly "
                             "increasing")
        if self.modality in ("pose", "position") and self.positions is None:
            raise ValueError(f"stream {self.sensor_id}: missing positions")
        if self.modality == "pose" and self.quats_wxyz is None:
            raise ValueError(f"stream {self.sensor_id}: missing orientations")
        if self.modality == "imu" and (self.accel is None or self.gyro is None):
            raise ValueError(f"stream {self.sensor_id}: missing imu payload")

    def __len__(self) -> int:
        return len(self.stamps)

    def sample(self, i: int) -> TimedSample:
        return TimedSample(
            stamp=float(self.stamps[i]),
            position=None if self.positions is None else self.positions[i],
            quat=(None if self.quats_wxyz is None
                  else UnitQuaternion.from_wxyz(self.quats_wxyz[i])),
            accel=None if self.accel is None else self.accel[i],
            gyro=None if self.gyro is None else self.gyro[i],
        )

    def replace_window(self, keep_mask: np.ndarray, **overrides) -> "SensorStream":
        """Copy of the stream keeping only masked samples, fields overridable."""
        def cut(a):
            return None if a is None else a[keep_mask]

        fields = dict(
            sensor_id=self.sensor_id, modality=self.modality, rate=self.rate,
            extrinsic=self.extrinsic, stamps=self.stamps[keep_mask],
            positions=cut(self.positions), quats_wxyz=cut(self.quats_wxyz),
            accel=cut(self.accel), gyro=cut(self.gyro))
        fields.update(overrides)
        return SensorStream(**fields)


@dataclass
class VelocitySeries:
    stamps: np.ndarray
    values: np.ndarray  # (n, 3) m/s


@dataclass
class VelocityWindow:
    """Two velocity sequences resampled onto common stamps."""

    stamps: np.ndarray
    a_values: np.ndarray  # (n, 3)
    b_values: np.ndarray  # (n, 3)
    duration: float

    def __post_init__(self):
        n = len(self.stamps)
        if n < 2 or len(self.a_values) != n or len(self.b_values) != n:
            raise ValueError("window needs >= 2 common samples")


def differentiate_positions(stream: SensorStream) -> VelocitySeries:
    """Numeric velocity of a pose/position stream, in the stream's own frame.

    Central differences on interior points, one-sided at the ends; output
    stamps equal input stamps.
    """
    if stream.modality not in ("pose", "position"):
        raise ValueError("can only differentiate pose/position streams")
    if len(stream) < 2:
        raise TooFewSamples(f"stream {stream.sensor_id}: need >= 2 samples")
    t = stream.stamps
    p = stream.positions
    v = np.empty_like(p)
    v[0] = (p[1] - p[0]) / (t[1] - t[0])
    v[-1] = (p[-1] - p[-2]) / (t[-1] - t[-2])
    if len(t) > 2:
        dt = (t[2:] - t[:-2])[:, None]
        v[1:-1] = (p[2:] - p[:-2]) / dt
    return VelocitySeries(stamps=t.copy(), values=v)


def extract_window(series_a: VelocitySeries, series_b: VelocitySeries,
                   t_end: float, duration: float) -> VelocityWindow:
    """Window [t_end - duration, t_end]; B linearly resampled onto A's stamps.

    Raises InsufficientOverlap when either series does not cover the window
    (within a slack of two median sample periods), signalling a dropout.
    """
    t_start = t_end - duration
    sel = (series_a.stamps >= t_start) & (series_a.stamps <= t_end)
    stamps = series_a.stamps[sel]
    if len(stamps) < 2:
        raise InsufficientOverlap("reference series sparse in window")

    tb = series_b.stamps
    if len(tb) < 2:
        raise InsufficientOverlap("other series too short")
    slack = 2.0 * float(np.median(np.diff(tb)))
    if stamps[0] < tb[0] - slack or stamps[-1] > tb[-1] + slack:
        raise InsufficientOverlap("other series does not cover window")
    inside = np.count_nonzero((tb >= t_start - slack) & (tb <= t_end + slack))
    if inside < 2:
        raise InsufficientOverlap("other series sparse in window")

    b = np.column_stack([np.interp(stamps, tb, series_b.values[:, k])
                         for k in range(3)])
    return VelocityWindow(stamps=stamps, a_values=series_a.values[sel],
                          b_values=b, duration=duration)


def standardize(window: VelocityWindow) -> VelocityWindow:
    """Center by joint per-axis mean and scale by joint per-axis half-range.

    Both sequences receive the same affine map, so standardized values lie in
    [-1, 1] per axis.  Axes with half-range < eps are centered but unscaled.
    """
    a = window.a_values.copy()
    b = window.b_values.copy()
    for k in range(3):
        joint = np.concatenate([a[:, k], b[:, k]])
        mean = joint.mean()
        a[:, k] -= mean
        b[:, k] -= mean
        half_range = max(abs(joint.max() - mean), abs(joint.min() - mean))
        if half_range >= STANDARDIZE_EPS:
            a[:, k] /= half_range
            b[:, k] /= half_range
    return VelocityWindow(stamps=window.stamps, a_values=a, b_values=b,
                          duration=window.duration)


# ---------------------------------------------------------------------------
# CSV dump/load.  One file per run; per-sensor metadata lines precede the
# header:  "# sensor,<id>,<modality>,<rate>,tx,ty,tz,qw,qx,qy,qz"
# followed by "stamp,sensor_id,modality,px,py,pz,qw,qx,qy,qz,ax,ay,az,gx,gy,gz"
# with empty cells for fields a modality does not carry.
# ---------------------------------------------------------------------------

CSV_HEADER = ("stamp,sensor_id,modality,px,py,pz,qw,qx,qy,qz,"
              "ax,ay,az,gx,gy,gz")


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def dump_streams(streams: list[SensorStream], path) -> None:
    with open(path, "w", newline="") as f:
        for s in streams:
            ext = s.extrinsic
            meta = [s.sensor_id, s.modality, _fmt(s.rate),
                    *(_fmt(v) for v in ext.translation),
                    *(_fmt(v) for v in ext.rotation.wxyz)]
            f.write("# sensor," + ",".join(meta) + "\n")
        f.write(CSV_HEADER + "\n")
        for s in streams:
            for i in range(len(s)):
                row = [_fmt(s.stamps[i]), s.sensor_id, s.modality]
                row += ([_fmt(v) for v in s.positions[i]]
                        if s.positions is not None else [""] * 3)
                row += ([_fmt(v) for v in s.quats_wxyz[i]]
                        if s.quats_wxyz is not None else [""] * 4)
                row += ([_fmt(v) for v in s.accel[i]]
                        if s.accel is not None else [""] * 3)
                row += ([_fmt(v) for v in s.gyro[i]]
                        if s.gyro is not None else [""] * 3)
                f.write(",".join(row) + "\n")


def load_streams(path) -> list[SensorStream]:
    meta: dict[str, tuple[str, float, RigidTransform]] = {}
    rows: dict[str, list[list[str]]] = {}
    order: list[str] = []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("# sensor,"):
                parts = line[len("# sensor,"):].split(",")
                sid, modality, rate = parts[0], parts[1], float(parts[2])
                t = np.array([float(v) for v in parts[3:6]])
                q = UnitQuaternion.from_wxyz(
                    np.array([float(v) for v in parts[6:10]]))
                meta[sid] = (modality, rate, RigidTransform(q, t))
                order.append(sid)
                continue
            if line.startswith("stamp,") or line.startswith("#"):
                continue
            parts = line.split(",")
            rows.setdefault(parts[1], []).append(parts)

    streams = []
    for sid in order:
        modality, rate, ext = meta[sid]
        rws = rows.get(sid, [])
        stamps = np.array([float(r[0]) for r in rws])
        def block(lo, hi):
            if not rws or rws[0][lo] == "":
                return None
            return np.array([[float(v) for v in r[lo:hi]] for r in rws])
        streams.append(SensorStream(
            sensor_id=sid, modality=modality, rate=rate, extrinsic=ext,
            stamps=stamps, positions=block(3, 6), quats_wxyz=block(6, 10),
            accel=block(10, 13), gyro=block(13, 16)))
    return streams
