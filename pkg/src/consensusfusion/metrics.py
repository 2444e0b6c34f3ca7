"""Pairwise consistency scoring of velocity streams.

The pipeline for one sensor pair is: differentiate positions, transport the
second sensor's velocity into the reference sensor's frame (lever arm plus
estimated frame-to-frame rotation), window the last second, standardize both
sequences jointly, apply the configured per-axis metric, and sum the axes.

All metrics are oriented so that 0 means "consistent" and larger means
"less consistent" (the correlation coefficient is reported as 1 - PCC per
axis for this reason).  Dropouts are returned as a distinguished marker and
rendered as -0.01 in CSV outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import UnitQuaternion
from .signals import (
    InsufficientOverlap,
    SensorStream,
    VelocitySeries,
    VelocityWindow,
    differentiate_positions,
    extract_window,
    standardize,
)

METRICS = ("mae", "pcc", "kl", "cm")

#: Value used for dropout cells in CSV/plot outputs.
DROPOUT_OUTPUT_VALUE = -0.01


class DropoutMarker:
    """Singleton marking a window that could not be evaluated."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "DROPOUT"


DROPOUT = DropoutMarker()


class DegenerateVariance(ValueError):
    """PCC is undefined for a constant sequence."""


@dataclass
class MetricConfig:
    window: float = 1.0
    metric: str = "cm"
    kde_bandwidth: float | None = None  # None: Silverman's rule per sample
    kde_grid_points: int = 256

    def __post_init__(self):
        if self.window <= 0:
            raise ValueError("window must be positive")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.kde_bandwidth is not None and self.kde_bandwidth <= 0:
            raise ValueError("kde_bandwidth must be positive")


# ---------------------------------------------------------------------------
# Velocity transport (lever arm + frame chain)
# ---------------------------------------------------------------------------

def transport_velocity(v_b: np.ndarray, omega_b: np.ndarray, r_ba: np.ndarray,
                       q_Aa: UnitQuaternion, q_AB: UnitQuaternion,
                       q_Bb: UnitQuaternion) -> np.ndarray:
    """Linear velocity at mount point a as seen by sensor b.

    ``v_b`` and ``omega_b`` are expressed in b's mount frame, ``r_ba`` is the
    offset from b to a in that frame; the rotation chain maps the result into
    a's mount frame.
    """
    chained = q_Aa.inverse() * q_AB * q_Bb
    return chained.rotate(np.asarray(v_b) + np.cross(omega_b, r_ba))


# ---------------------------------------------------------------------------
# Scalar metrics on windows / empirical samples
# ---------------------------------------------------------------------------

def mae(window: VelocityWindow) -> float:
    """Mean absolute error per axis, summed over axes."""
    return float(np.abs(window.a_values - window.b_values).mean(axis=0).sum())


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    sa = float(np.sqrt((a * a).sum()))
    sb = float(np.sqrt((b * b).sum()))
    if sa < 1e-12 or sb < 1e-12:
        raise DegenerateVariance("constant sequence in window")
    return float(np.clip((a * b).sum() / (sa * sb), -1.0, 1.0))


def pcc(window: VelocityWindow) -> np.ndarray:
    """Sample Pearson correlation per axis, in [-1, 1]."""
    return np.array([_pearson(window.a_values[:, k], window.b_values[:, k])
                     for k in range(3)])


def silverman_bandwidth(sample: np.ndarray) -> float:
    n = len(sample)
    std = float(np.std(sample, ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(sample, [75, 25])
    iqr = float(q75 - q25)
    spread = min(std, iqr / 1.34) if iqr > 0 else std
    if spread <= 0:
        return 1e-3
    return 0.9 * spread * n ** (-0.2)


def kl_divergence(p: np.ndarray, q: np.ndarray, cfg: MetricConfig) -> float:
    """Discrete KL divergence between Gaussian-KDE estimates of two samples.

    Both densities are evaluated on a shared uniform grid spanning the joint
    support padded by three bandwidths, normalized to sum to one; the second
    density is floored at 1e-12 before taking the ratio.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if len(p) < 2 or len(q) < 2:
        raise ValueError("need at least two samples each")
    hp = cfg.kde_bandwidth or silverman_bandwidth(p)
    hq = cfg.kde_bandwidth or silverman_bandwidth(q)
    pad = 3.0 * max(hp, hq)
    lo = min(p.min(), q.min()) - pad
    hi = max(p.max(), q.max()) + pad
    grid = np.linspace(lo, hi, cfg.kde_grid_points)

    def density(sample, h):
        z = (grid[:, None] - sample[None, :]) / h
        d = np.exp(-0.5 * z * z).sum(axis=1)
        return d / d.sum()

    dp = density(p, hp)
    dq = np.maximum(density(q, hq), 1e-12)
    mask = dp > 0
    return float(np.sum(dp[mask] * np.log(dp[mask] / dq[mask])))


def cramer_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Cramér distance (2 * integral of squared ECDF difference)^(1/2).

    Computed in closed form over the merged sorted support; symmetric in
    (p, q) and scale-sensitive.
    """
    p = np.sort(np.asarray(p, dtype=float))
    q = np.sort(np.asarray(q, dtype=float))
    if len(p) < 1 or len(q) < 1:
        raise ValueError("need at least one sample each")
    support = np.union1d(p, q)
    if len(support) == 1:
        return 0.0
    fp = np.searchsorted(p, support, side="right") / len(p)
    fq = np.searchsorted(q, support, side="right") / len(q)
    widths = np.diff(support)
    diff = fp[:-1] - fq[:-1]
    return float(np.sqrt(2.0 * np.sum(diff * diff * widths)))


# ---------------------------------------------------------------------------
# Sensor/local views and the end-to-end consistency pipeline
# ---------------------------------------------------------------------------

@dataclass
class SensorView:
    """A sensor stream prepared for metric evaluation.

    ``frame_rotation`` is the current estimate of q_AL mapping local-frame
    coordinates into the sensor's reference frame (from the sensor transform
    graph, or ground truth in tests).
    """

    sensor_id: str
    velocity: VelocitySeries
    frame_rotation: UnitQuaternion
    mount_offset: np.ndarray  # body-frame lever arm of the mount point
    dropout: bool = False     # stream known unusable (e.g. too few samples)

    @classmethod
    def from_stream(cls, stream: SensorStream,
                    frame_rotation: UnitQuaternion | None = None,
                    view_rate: float = 10.0) -> "SensorView":
        # Decimate faster streams to the common view rate before
        # differentiation: the central-difference gain depends on the sample
        # spacing, so mismatched rates would leave a systematic velocity
        # amplitude difference between healthy sensors.
        if view_rate > 0.0 and stream.rate > view_rate:
            stride = max(int(round(stream.rate / view_rate)), 1)
            if stride > 1:
                mask = np.zeros(len(stream), dtype=bool)
                mask[::stride] = True
                stream = stream.replace_window(mask)
        if len(stream) < 2:
            return cls(stream.sensor_id,
                       VelocitySeries(np.empty(0), np.empty((0, 3))),
                       frame_rotation or UnitQuaternion.identity(),
                       stream.extrinsic.translation, dropout=True)
        return cls(stream.sensor_id, differentiate_positions(stream),
                   frame_rotation or UnitQuaternion.identity(),
                   stream.extrinsic.translation)


@dataclass
class LocalView:
    """Local-estimate series used as angular-velocity source and as the
    distinguished LOCAL column of the consistency matrix."""

    stamps: np.ndarray
    positions: np.ndarray          # (n, 3) in L
    quats_wxyz: np.ndarray         # (n, 4) body orientation q_LI
    gyro: np.ndarray               # (n, 3) bias-corrected body rates
    _velocity: VelocitySeries | None = field(default=None, repr=False)

    def velocity(self) -> VelocitySeries:
        if self._velocity is None:
            stream = SensorStream(sensor_id="LOCAL", modality="position",
                                  rate=0.0, stamps=self.stamps,
                                  positions=self.positions)
            self._velocity = differentiate_positions(stream)
        return self._velocity

    def as_sensor_view(self) -> SensorView:
        return SensorView("LOCAL", self.velocity(),
                          UnitQuaternion.identity(), np.zeros(3))

    def _index_at(self, t: float) -> int:
        i = int(np.searchsorted(self.stamps, t))
        return min(max(i, 0), len(self.stamps) - 1)

    def gyro_at(self, t: float) -> np.ndarray:
        return self.gyro[self._index_at(t)]

    def orientation_at(self, t: float) -> UnitQuaternion:
        return UnitQuaternion.from_wxyz(self.quats_wxyz[self._index_at(t)])


def _transport_series(view_b: SensorView, view_a: SensorView,
                      local: LocalView, t_start: float,
                      t_end: float) -> VelocitySeries:
    """Transport B's windowed velocity samples into A's reference frame."""
    tb = view_b.velocity.stamps
    sel = (tb >= t_start) & (tb <= t_end)
    stamps = tb[sel]
    vals = view_b.velocity.values[sel]
    q_AB = view_a.frame_rotation * view_b.frame_rotation.inverse()
    r_ba = view_a.mount_offset - view_b.mount_offset
    lever = bool(np.any(r_ba))
    out = np.empty_like(vals)
    identity = UnitQuaternion.identity()
    for k, tau in enumerate(stamps):
        if lever:
            # mount frame of b taken as the body frame at tau
            q_Bb = view_b.frame_rotation * local.orientation_at(tau)
            v_b = q_Bb.inverse().rotate(vals[k])
            out[k] = transport_velocity(v_b, local.gyro_at(tau), r_ba,
                                        identity, q_AB, q_Bb)
        else:
            out[k] = q_AB.rotate(vals[k])
    return VelocitySeries(stamps, out)


def window_metric(window: VelocityWindow, cfg: MetricConfig) -> float:
    """Apply the configured per-axis metric to a standardized window."""
    w = standardize(window)
    if cfg.metric == "mae":
        return mae(w)
    if cfg.metric == "cm":
        return float(sum(cramer_distance(w.a_values[:, k], w.b_values[:, k])
                         for k in range(3)))
    if cfg.metric == "kl":
        return float(sum(kl_divergence(w.a_values[:, k], w.b_values[:, k], cfg)
                         for k in range(3)))
    # pcc: per-axis 1 - correlation; a single constant axis cannot support a
    # correlation and counts as maximally uninformative (contribution 1)
    total = 0.0
    for k in range(3):
        a, b = w.a_values[:, k], w.b_values[:, k]
        const_a = np.ptp(a) < 1e-12
        const_b = np.ptp(b) < 1e-12
        if const_a and const_b:
            continue
        if const_a or const_b:
            total += 1.0
            continue
        total += 1.0 - _pearson(a, b)
    return total


def consistency(view_a: SensorView, view_b: SensorView, local: LocalView,
                t: float, cfg: MetricConfig) -> float | DropoutMarker:
    """Windowed consistency value for a sensor pair, or DROPOUT."""
    if view_a.dropout or view_b.dropout:
        return DROPOUT
    t_start = t - cfg.window
    try:
        transported = _transport_series(view_b, view_a, local,
                                        t_start - 0.5 * cfg.window, t)
        if len(transported.stamps) < 2:
            raise InsufficientOverlap("no transported samples in window")
        window = extract_window(view_a.velocity, transported, t, cfg.window)
    except InsufficientOverlap:
        return DROPOUT
    return window_metric(window, cfg)
