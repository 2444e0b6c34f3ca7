"""Loosely coupled fixed-lag fusion of one selected sensor with the IMU.

Two kinds of graphs are maintained:

* a local graph over recent keyframes (orientation, world-frame velocity,
  position, IMU biases) connected by preintegrated IMU factors and by
  relative pose / position measurements from the currently fused sensor;
  keyframes older than the lag are replaced by diagonal anchor priors;
* one small transform graph per position-reporting sensor estimating the
  rigid transform from the local frame into that sensor's reference frame
  from corresponding point pairs over a sliding window.

State output runs at the IMU rate by propagating the newest solved keyframe
through the buffered IMU samples; the discretization of that propagation
matches the preintegration exactly, so IMU factors evaluate to zero on
propagated states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    RigidTransform,
    UnitQuaternion,
    quat_conj,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian_inv,
)
from .solver import (
    Factor,
    Graph,
    RotationBlock,
    RotationPriorFactor,
    SolveStatus,
    VectorBlock,
    VectorPriorFactor,
)

GRAVITY = np.array([0.0, 0.0, -9.81])


class TransformUnavailable(RuntimeError):
    """The sensor's frame transform has not converged yet."""


@dataclass
class EstimatorConfig:
    lag: float = 0.5                 # fixed-lag window of the local graph
    solve_period: float = 1.0 / 30.0
    output_period: float = 1.0 / 200.0
    imu_sigma_acc: float = 0.02      # per-sample accelerometer noise [m/s^2]
    imu_sigma_gyro: float = 0.002    # per-sample gyro noise [rad/s]
    bias_prior_sigma: float = 1e-3
    bias_walk_sigma: float = 1e-5    # per keyframe step
    anchor_sqrt_info_floor: float = 1.0
    transform_window: float = 20.0
    transform_period: float = 0.1
    transform_sigma: float = 0.01    # per-point sigma inside transform graphs
    transform_min_points: int = 8
    transform_min_span: float = 1.0  # minimum spatial spread [m]
    transform_collinear_ratio: float = 0.05
    transform_converged_rms: float = 0.05


@dataclass
class NavState:
    stamp: float
    quat_wxyz: np.ndarray   # body orientation q_LI (world/local frame)
    position: np.ndarray    # world frame
    velocity: np.ndarray    # world frame

    def body_velocity(self) -> np.ndarray:
        return quat_rotate(quat_conj(self.quat_wxyz), self.velocity)

    def orientation(self) -> UnitQuaternion:
        return UnitQuaternion.from_wxyz(self.quat_wxyz)

    def copy(self) -> "NavState":
        return NavState(self.stamp, self.quat_wxyz.copy(),
                        self.position.copy(), self.velocity.copy())


# ---------------------------------------------------------------------------
# IMU preintegration
# ---------------------------------------------------------------------------

@dataclass
class ImuPreintegration:
    """Forward-Euler preintegrated IMU increment between two keyframes.

    Raw samples are retained so the increment can be re-integrated when the
    bias estimate moves.
    """

    stamps: np.ndarray     # (n,) sample stamps, first at keyframe i, last at j
    accel: np.ndarray      # (n, 3) specific force, body frame
    gyro: np.ndarray       # (n, 3) angular rate, body frame
    bias_acc: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_q: np.ndarray = field(init=False)
    delta_v: np.ndarray = field(init=False)
    delta_p: np.ndarray = field(init=False)
    dt: float = field(init=False)

    def __post_init__(self):
        self.dt = float(self.stamps[-1] - self.stamps[0])
        self._integrate()

    def _integrate(self) -> None:
        dq = np.array([1.0, 0.0, 0.0, 0.0])
        dv = np.zeros(3)
        dp = np.zeros(3)
        for k in range(len(self.stamps) - 1):
            h = float(self.stamps[k + 1] - self.stamps[k])
            a = quat_rotate(dq, self.accel[k] - self.bias_acc)
            dp = dp + dv * h + 0.5 * a * h * h
            dv = dv + a * h
            dq = quat_normalize(
                quat_mul(dq, so3_exp((self.gyro[k] - self.bias_gyro) * h)))
        self.delta_q, self.delta_v, self.delta_p = dq, dv, dp

    def reintegrate(self, bias_acc: np.ndarray, bias_gyro: np.ndarray) -> None:
        if np.array_equal(bias_acc, self.bias_acc) and \
                np.array_equal(bias_gyro, self.bias_gyro):
            return
        self.bias_acc = bias_acc.copy()
        self.bias_gyro = bias_gyro.copy()
        self._integrate()


def preintegrate(stamps: np.ndarray, accel: np.ndarray, gyro: np.ndarray,
                 bias_acc: np.ndarray | None = None,
                 bias_gyro: np.ndarray | None = None) -> ImuPreintegration:
    return ImuPreintegration(
        np.asarray(stamps, dtype=float),
        np.asarray(accel, dtype=float), np.asarray(gyro, dtype=float),
        np.zeros(3) if bias_acc is None else np.asarray(bias_acc, dtype=float),
        np.zeros(3) if bias_gyro is None else np.asarray(bias_gyro, dtype=float))


def propagate(state: NavState, stamps: np.ndarray, accel: np.ndarray,
              gyro: np.ndarray, bias_acc: np.ndarray, bias_gyro: np.ndarray,
              gravity: np.ndarray = GRAVITY) -> NavState:
    """Forward-Euler strapdown propagation, consistent with preintegration."""
    q, v, p = state.quat_wxyz.copy(), state.velocity.copy(), state.position.copy()
    for k in range(len(stamps) - 1):
        h = float(stamps[k + 1] - stamps[k])
        a = quat_rotate(q, accel[k] - bias_acc) + gravity
        p = p + v * h + 0.5 * a * h * h
        v = v + a * h
        q = quat_normalize(quat_mul(q, so3_exp((gyro[k] - bias_gyro) * h)))
    return NavState(float(stamps[-1]), q, p, v)


# ---------------------------------------------------------------------------
# Factors
# ---------------------------------------------------------------------------

class ImuFactor(Factor):
    """Preintegrated IMU constraint between keyframes i and j.

    Keys: (q_i, v_i, p_i, bg_i, ba_i, q_j, v_j, p_j).  The residual is
    re-integrated at the connected bias block's current value; the solver
    sees zero Jacobians for the bias keys, whose estimates are governed by
    their priors and random-walk factors.
    """

    def __init__(self, keys: tuple[str, ...], preint: ImuPreintegration,
                 cfg: EstimatorConfig, gravity: np.ndarray = GRAVITY):
        assert len(keys) == 8
        self.keys = tuple(keys)
        self.preint = preint
        self.gravity = gravity
        n = max(len(preint.stamps) - 1, 1)
        h = preint.dt / n
        sq = max(cfg.imu_sigma_gyro * np.sqrt(h * preint.dt), 1e-9)
        sv = max(cfg.imu_sigma_acc * np.sqrt(h * preint.dt), 1e-9)
        sp = max(sv * preint.dt, 1e-9)
        self.sqrt_w = np.concatenate([np.full(3, 1.0 / sq),
                                      np.full(3, 1.0 / sv),
                                      np.full(3, 1.0 / sp)])

    def _unpack(self, blocks):
        qi, vi, pi, bg, ba, qj, vj, pj = (blocks[k].value for k in self.keys)
        return qi, vi, pi, bg, ba, qj, vj, pj

    def residual(self, blocks):
        qi, vi, pi, bg, ba, qj, vj, pj = self._unpack(blocks)
        self.preint.reintegrate(ba, bg)
        dt = self.preint.dt
        ri = quat_to_matrix(qi)
        r_q = so3_log(quat_mul(quat_conj(self.preint.delta_q),
                               quat_mul(quat_conj(qi), qj)))
        r_v = ri.T @ (vj - vi - self.gravity * dt) - self.preint.delta_v
        r_p = ri.T @ (pj - pi - vi * dt - 0.5 * self.gravity * dt * dt) \
            - self.preint.delta_p
        return self.sqrt_w * np.concatenate([r_q, r_v, r_p])

    def jacobian(self, blocks, key):
        qi, vi, pi, bg, ba, qj, vj, pj = self._unpack(blocks)
        self.preint.reintegrate(ba, bg)
        dt = self.preint.dt
        ri = quat_to_matrix(qi)
        jac = np.zeros((9, 3))
        if key in (self.keys[3], self.keys[4]):
            return jac  # bias sensitivity handled by re-integration
        r_q = so3_log(quat_mul(quat_conj(self.preint.delta_q),
                               quat_mul(quat_conj(qi), qj)))
        jr_inv = so3_right_jacobian_inv(r_q)
        w_v = ri.T @ (vj - vi - self.gravity * dt)
        w_p = ri.T @ (pj - pi - vi * dt - 0.5 * self.gravity * dt * dt)
        if key == self.keys[0]:      # q_i
            rij = quat_to_matrix(quat_mul(quat_conj(qi), qj))
            jac[0:3] = -jr_inv @ rij.T
            jac[3:6] = skew(w_v)
            jac[6:9] = skew(w_p)
        elif key == self.keys[1]:    # v_i
            jac[3:6] = -ri.T
            jac[6:9] = -ri.T * dt
        elif key == self.keys[2]:    # p_i
            jac[6:9] = -ri.T
        elif key == self.keys[5]:    # q_j
            jac[0:3] = jr_inv
        elif key == self.keys[6]:    # v_j
            jac[3:6] = ri.T
        elif key == self.keys[7]:    # p_j
            jac[6:9] = ri.T
        return self.sqrt_w[:, None] * jac


class BiasWalkFactor(Factor):
    """Random-walk constraint r = sqrt_w * (b_j - b_i)."""

    def __init__(self, key_i: str, key_j: str, sqrt_weight: float):
        self.keys = (key_i, key_j)
        self.sqrt_w = float(sqrt_weight)

    def residual(self, blocks):
        return self.sqrt_w * (blocks[self.keys[1]].value
                              - blocks[self.keys[0]].value)

    def jacobian(self, blocks, key):
        s = 1.0 if key == self.keys[1] else -1.0
        return s * self.sqrt_w * np.eye(3)


class PoseBetweenFactor(Factor):
    """Relative body pose measurement between keyframes i and j.

    Keys: (q_i, p_i, q_j, p_j).  ``delta_p`` is the displacement of body j
    expressed in body frame i; ``delta_q`` the relative body rotation.
    """

    def __init__(self, keys: tuple[str, str, str, str], delta_q: np.ndarray,
                 delta_p: np.ndarray, sqrt_w_q: float, sqrt_w_p: float):
        self.keys = tuple(keys)
        self.delta_q = quat_normalize(np.asarray(delta_q, dtype=float))
        self.delta_p = np.asarray(delta_p, dtype=float).copy()
        self.sqrt_w_q = float(sqrt_w_q)
        self.sqrt_w_p = float(sqrt_w_p)

    def _rotation_error(self, blocks):
        qi = blocks[self.keys[0]].value
        qj = blocks[self.keys[2]].value
        pred = quat_mul(qi, self.delta_q)
        return so3_log(quat_mul(quat_conj(pred), qj))

    def residual(self, blocks):
        qi = blocks[self.keys[0]].value
        pi = blocks[self.keys[1]].value
        pj = blocks[self.keys[3]].value
        r_q = self.sqrt_w_q * self._rotation_error(blocks)
        r_p = self.sqrt_w_p * (pj - pi - quat_rotate(qi, self.delta_p))
        return np.concatenate([r_q, r_p])

    def jacobian(self, blocks, key):
        qi = blocks[self.keys[0]].value
        qj = blocks[self.keys[2]].value
        jac = np.zeros((6, 3))
        if key == self.keys[0]:
            e = self._rotation_error(blocks)
            jr_inv = so3_right_jacobian_inv(e)
            rij = quat_to_matrix(quat_mul(quat_conj(qi), qj))
            jac[0:3] = self.sqrt_w_q * (-jr_inv @ rij.T)
            jac[3:6] = self.sqrt_w_p * quat_to_matrix(qi) @ skew(self.delta_p)
        elif key == self.keys[1]:
            jac[3:6] = -self.sqrt_w_p * np.eye(3)
        elif key == self.keys[2]:
            e = self._rotation_error(blocks)
            jac[0:3] = self.sqrt_w_q * so3_right_jacobian_inv(e)
        elif key == self.keys[3]:
            jac[3:6] = self.sqrt_w_p * np.eye(3)
        return jac


class PositionBetweenFactor(Factor):
    """Relative displacement of a mounted point, measured in the local frame.

    Keys: (q_i, p_i, q_j, p_j).  ``lever`` is the sensor mount offset in the
    body frame; ``delta`` the measured displacement already mapped into the
    local frame through the inverse sensor-frame transform.
    """

    def __init__(self, keys: tuple[str, str, str, str], delta: np.ndarray,
                 lever: np.ndarray, sqrt_w: float):
        self.keys = tuple(keys)
        self.delta = np.asarray(delta, dtype=float).copy()
        self.lever = np.asarray(lever, dtype=float).copy()
        self.sqrt_w = float(sqrt_w)

    def residual(self, blocks):
        qi = blocks[self.keys[0]].value
        pi = blocks[self.keys[1]].value
        qj = blocks[self.keys[2]].value
        pj = blocks[self.keys[3]].value
        mount_j = pj + quat_rotate(qj, self.lever)
        mount_i = pi + quat_rotate(qi, self.lever)
        return self.sqrt_w * (mount_j - mount_i - self.delta)

    def jacobian(self, blocks, key):
        if key == self.keys[0]:
            qi = blocks[self.keys[0]].value
            return self.sqrt_w * quat_to_matrix(qi) @ skew(self.lever)
        if key == self.keys[1]:
            return -self.sqrt_w * np.eye(3)
        if key == self.keys[2]:
            qj = blocks[self.keys[2]].value
            return -self.sqrt_w * quat_to_matrix(qj) @ skew(self.lever)
        return self.sqrt_w * np.eye(3)


class TransformPointsFactor(Factor):
    """Point correspondences tying a frame transform (q, p) to data.

    Residual rows are sqrt_w * (y_k - p - R(q) x_k) for local points x_k and
    sensor-frame points y_k, stacked over the window.
    """

    def __init__(self, rot_key: str, pos_key: str, x_local: np.ndarray,
                 y_sensor: np.ndarray, sqrt_w: float):
        self.keys = (rot_key, pos_key)
        self.x = np.asarray(x_local, dtype=float)
        self.y = np.asarray(y_sensor, dtype=float)
        assert self.x.shape == self.y.shape
        self.sqrt_w = float(sqrt_w)

    def residual(self, blocks):
        q = blocks[self.keys[0]].value
        p = blocks[self.keys[1]].value
        pred = self.x @ quat_to_matrix(q).T + p
        return self.sqrt_w * (self.y - pred).ravel()

    def jacobian(self, blocks, key):
        n = len(self.x)
        if key == self.keys[1]:
            return self.sqrt_w * np.tile(-np.eye(3), (n, 1))
        q = blocks[self.keys[0]].value
        r = quat_to_matrix(q)
        jac = np.empty((3 * n, 3))
        for k in range(n):
            jac[3 * k:3 * k + 3] = r @ skew(self.x[k])
        return self.sqrt_w * jac


# ---------------------------------------------------------------------------
# Measurement conversion helpers
# ---------------------------------------------------------------------------

def pose_delta_to_body(q_i: UnitQuaternion, p_i: np.ndarray,
                       q_j: UnitQuaternion, p_j: np.ndarray,
                       extrinsic: RigidTransform) -> tuple[np.ndarray, np.ndarray]:
    """Convert a relative sensor pose into the body frame.

    The extrinsic maps sensor coordinates into the body frame.  Returns
    (delta_q_wxyz, delta_p) of body j relative to body i, expressed in i.
    """
    q_e = extrinsic.rotation
    lever = extrinsic.translation
    dq_s = q_i.inverse() * q_j
    dp_s = q_i.inverse().rotate(p_j - p_i)
    dq_b = q_e * dq_s * q_e.inverse()
    dp_b = q_e.rotate(dp_s) + lever - dq_b.rotate(lever)
    return dq_b.wxyz, dp_b


def kabsch(x: np.ndarray, y: np.ndarray) -> tuple[UnitQuaternion, np.ndarray]:
    """Least-squares rigid transform with y_k ~= R x_k + p."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xm, ym = x.mean(axis=0), y.mean(axis=0)
    h = (x - xm).T @ (y - ym)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    q = UnitQuaternion.from_matrix(r)
    return q, ym - r @ xm


# ---------------------------------------------------------------------------
# Local fixed-lag estimator
# ---------------------------------------------------------------------------

@dataclass
class Keyframe:
    stamp: float
    index: int

    def keys(self) -> tuple[str, ...]:
        i = self.index
        return (f"q{i}", f"v{i}", f"p{i}", f"bg{i}", f"ba{i}")


class LocalGraphEstimator:
    """Fixed-lag smoother over IMU-connected keyframes.

    The caller feeds IMU samples, requests keyframes at measurement stamps,
    attaches measurement factors between keyframe stamps, and calls
    ``solve``.  ``current_state`` propagates the newest keyframe estimate
    through the buffered IMU tail.
    """

    def __init__(self, cfg: EstimatorConfig, initial: NavState,
                 gravity: np.ndarray = GRAVITY):
        self.cfg = cfg
        self.gravity = np.asarray(gravity, dtype=float)
        self.graph = Graph()
        self.keyframes: list[Keyframe] = []
        self._next_index = 0
        self._imu_stamps: list[float] = []
        self._imu_accel: list[np.ndarray] = []
        self._imu_gyro: list[np.ndarray] = []
        self._anchor_factors: list[Factor] = []
        self._dirty = False
        self._create_keyframe(initial, prior=True)
        self._prop = initial.copy()

    # -- keyframe bookkeeping ------------------------------------------------

    def _create_keyframe(self, state: NavState, prior: bool = False,
                         preint: ImuPreintegration | None = None) -> Keyframe:
        kf = Keyframe(state.stamp, self._next_index)
        self._next_index += 1
        kq, kv, kp, kbg, kba = kf.keys()
        self.graph.add_block(RotationBlock(kq, state.quat_wxyz))
        self.graph.add_block(VectorBlock(kv, state.velocity))
        self.graph.add_block(VectorBlock(kp, state.position))
        bg0 = self._bias_gyro() if self.keyframes else np.zeros(3)
        ba0 = self._bias_acc() if self.keyframes else np.zeros(3)
        self.graph.add_block(VectorBlock(kbg, bg0))
        self.graph.add_block(VectorBlock(kba, ba0))
        if prior:
            w = 1.0 / max(self.cfg.bias_prior_sigma, 1e-9)
            self._anchor_factors = [
                RotationPriorFactor(kq, state.quat_wxyz, 1e4),
                VectorPriorFactor(kv, state.velocity, 1e4),
                VectorPriorFactor(kp, state.position, 1e4),
                VectorPriorFactor(kbg, bg0, w),
                VectorPriorFactor(kba, ba0, w),
            ]
            for f in self._anchor_factors:
                self.graph.add_factor(f)
        if self.keyframes and preint is not None:
            prev = self.keyframes[-1]
            pq, pv, pp, pbg, pba = prev.keys()
            self.graph.add_factor(ImuFactor(
                (pq, pv, pp, pbg, pba, kq, kv, kp), preint, self.cfg,
                self.gravity))
            walk_w = 1.0 / max(self.cfg.bias_walk_sigma, 1e-12)
            self.graph.add_factor(BiasWalkFactor(pbg, kbg, walk_w))
            self.graph.add_factor(BiasWalkFactor(pba, kba, walk_w))
        self.keyframes.append(kf)
        return kf

    def _bias_gyro(self) -> np.ndarray:
        return self.graph.blocks[self.keyframes[-1].keys()[3]].value.copy()

    def _bias_acc(self) -> np.ndarray:
        return self.graph.blocks[self.keyframes[-1].keys()[4]].value.copy()

    def keyframe_at(self, stamp: float, tol: float = 1e-6) -> Keyframe | None:
        for kf in self.keyframes:
            if abs(kf.stamp - stamp) <= tol:
                return kf
        return None

    def keyframe_state(self, kf: Keyframe) -> NavState:
        kq, kv, kp, _, _ = kf.keys()
        return NavState(kf.stamp, self.graph.blocks[kq].value.copy(),
                        self.graph.blocks[kp].value.copy(),
                        self.graph.blocks[kv].value.copy())

    # -- data input ----------------------------------------------------------

    def add_imu(self, stamp: float, accel: np.ndarray,
                gyro: np.ndarray) -> NavState:
        """Buffer one IMU sample and return the propagated output state."""
        if self._imu_stamps and stamp <= self._imu_stamps[-1]:
            raise ValueError("IMU stamps must be strictly increasing")
        if self._imu_stamps:
            seg = np.array([self._imu_stamps[-1], stamp])
            self._prop = propagate(
                self._prop, seg,
                np.array([self._imu_accel[-1], accel]),
                np.array([self._imu_gyro[-1], gyro]),
                self._bias_acc(), self._bias_gyro(), self.gravity)
        self._imu_stamps.append(float(stamp))
        self._imu_accel.append(np.asarray(accel, dtype=float))
        self._imu_gyro.append(np.asarray(gyro, dtype=float))
        return self._prop.copy()

    def add_keyframe(self, stamp: float) -> Keyframe:
        """Create a keyframe at a buffered IMU stamp (normally the latest)."""
        existing = self.keyframe_at(stamp)
        if existing is not None:
            return existing
        stamps = np.asarray(self._imu_stamps)
        j = int(np.argmin(np.abs(stamps - stamp)))
        if abs(stamps[j] - stamp) > 1e-6:
            raise ValueError(f"no IMU sample at requested stamp {stamp}")
        preint = ImuPreintegration(
            stamps[:j + 1].copy(),
            np.asarray(self._imu_accel[:j + 1]),
            np.asarray(self._imu_gyro[:j + 1]),
            self._bias_acc(), self._bias_gyro())
        state = propagate(self.keyframe_state(self.keyframes[-1]),
                          preint.stamps, preint.accel, preint.gyro,
                          preint.bias_acc, preint.bias_gyro, self.gravity)
        kf = self._create_keyframe(state, preint=preint)
        # keep the tail from the keyframe sample onward
        self._imu_stamps = self._imu_stamps[j:]
        self._imu_accel = self._imu_accel[j:]
        self._imu_gyro = self._imu_gyro[j:]
        self._dirty = True
        return kf

    def add_pose_between(self, stamp_i: float, stamp_j: float,
                         delta_q: np.ndarray, delta_p: np.ndarray,
                         sigma_q: float, sigma_p: float) -> None:
        ki = self.keyframe_at(stamp_i)
        kj = self.keyframe_at(stamp_j)
        if ki is None or kj is None:
            raise KeyError("no keyframe at measurement stamp")
        self.graph.add_factor(PoseBetweenFactor(
            (ki.keys()[0], ki.keys()[2], kj.keys()[0], kj.keys()[2]),
            delta_q, delta_p, 1.0 / max(sigma_q, 1e-9),
            1.0 / max(sigma_p, 1e-9)))
        self._dirty = True

    def add_position_between(self, stamp_i: float, stamp_j: float,
                             delta_local: np.ndarray, lever: np.ndarray,
                             sigma: float) -> None:
        ki = self.keyframe_at(stamp_i)
        kj = self.keyframe_at(stamp_j)
        if ki is None or kj is None:
            raise KeyError("no keyframe at measurement stamp")
        self.graph.add_factor(PositionBetweenFactor(
            (ki.keys()[0], ki.keys()[2], kj.keys()[0], kj.keys()[2]),
            delta_local, lever, 1.0 / max(sigma, 1e-9)))
        self._dirty = True

    # -- solving and sliding -------------------------------------------------

    def solve(self, max_iterations: int = 15):
        result = self.graph.optimize(max_iterations=max_iterations)
        self._slide_window()
        self._reset_propagation()
        self._dirty = False
        return result

    @property
    def needs_solve(self) -> bool:
        return self._dirty

    def _slide_window(self) -> None:
        latest = self.keyframes[-1].stamp
        cutoff = latest - self.cfg.lag
        keep_from = 0
        while keep_from < len(self.keyframes) - 1 and \
                self.keyframes[keep_from].stamp < cutoff - 1e-9:
            keep_from += 1
        if keep_from == 0:
            return
        info = self.graph.information_diagonal()
        removed_keys = set()
        for kf in self.keyframes[:keep_from]:
            for key in kf.keys():
                removed_keys.add(key)
                self.graph.remove_block(key)
        self.graph.factors = [
            f for f in self.graph.factors
            if not any(k in removed_keys for k in f.keys)]
        self._anchor_factors = [f for f in self._anchor_factors
                                if f.keys[0] not in removed_keys]
        self.keyframes = self.keyframes[keep_from:]
        self._install_anchor(info)

    def _install_anchor(self, info: dict[str, np.ndarray]) -> None:
        """Diagonal prior on the new oldest keyframe, replacing removed
        history."""
        for f in self._anchor_factors:
            self.graph.factors.remove(f)
        anchor = self.keyframes[0]
        kq, kv, kp, kbg, kba = anchor.keys()
        floor = self.cfg.anchor_sqrt_info_floor

        def sw(key):
            return np.maximum(np.sqrt(np.maximum(info.get(key, 0.0), 0.0)),
                              floor)

        self._anchor_factors = [
            RotationPriorFactor(kq, self.graph.blocks[kq].value, sw(kq)),
            VectorPriorFactor(kv, self.graph.blocks[kv].value, sw(kv)),
            VectorPriorFactor(kp, self.graph.blocks[kp].value, sw(kp)),
            VectorPriorFactor(kbg, self.graph.blocks[kbg].value, sw(kbg)),
            VectorPriorFactor(kba, self.graph.blocks[kba].value, sw(kba)),
        ]
        for f in self._anchor_factors:
            self.graph.add_factor(f)

    def _reset_propagation(self) -> None:
        base = self.keyframe_state(self.keyframes[-1])
        if len(self._imu_stamps) >= 2:
            self._prop = propagate(
                base, np.asarray(self._imu_stamps),
                np.asarray(self._imu_accel), np.asarray(self._imu_gyro),
                self._bias_acc(), self._bias_gyro(), self.gravity)
        else:
            self._prop = base

    def current_state(self) -> NavState:
        return self._prop.copy()


# ---------------------------------------------------------------------------
# Per-sensor transform graph
# ---------------------------------------------------------------------------

class TransformGraphEstimator:
    """Sliding-window estimate of one sensor's frame transform (q_AL, p_AL).

    Point pairs (local position of the mount point, sensor-frame position)
    accumulate over ``transform_window`` seconds.  When the local points are
    nearly collinear the rotation about the line direction is unobservable
    and updates are projected onto the observable subspace.  The transform
    freezes while its sensor is being fused.
    """

    def __init__(self, sensor_id: str, cfg: EstimatorConfig):
        self.sensor_id = sensor_id
        self.cfg = cfg
        self.stamps: list[float] = []
        self.x_local: list[np.ndarray] = []
        self.y_sensor: list[np.ndarray] = []
        self.rotation = UnitQuaternion.identity()
        self.translation = np.zeros(3)
        self.converged = False
        self.frozen = False
        self._initialized = False

    def add_point(self, stamp: float, x_local: np.ndarray,
                  y_sensor: np.ndarray) -> None:
        self.stamps.append(float(stamp))
        self.x_local.append(np.asarray(x_local, dtype=float))
        self.y_sensor.append(np.asarray(y_sensor, dtype=float))

    def _trim(self, now: float) -> None:
        cutoff = now - self.cfg.transform_window
        start = 0
        while start < len(self.stamps) and self.stamps[start] < cutoff:
            start += 1
        if start:
            self.stamps = self.stamps[start:]
            self.x_local = self.x_local[start:]
            self.y_sensor = self.y_sensor[start:]

    def _geometry(self, x: np.ndarray):
        """Singular values and principal direction of the centered cloud."""
        centered = x - x.mean(axis=0)
        u, s, vt = np.linalg.svd(centered, full_matrices=False)
        return s, vt[0]

    def freeze(self) -> None:
        self.frozen = True

    def unfreeze(self) -> None:
        self.frozen = False

    def update(self, now: float) -> bool:
        """Re-estimate the transform; returns the converged flag."""
        self._trim(now)
        if self.frozen:
            return self.converged
        n = len(self.stamps)
        if n < self.cfg.transform_min_points:
            return self.converged
        x = np.asarray(self.x_local)
        y = np.asarray(self.y_sensor)
        if n > 120:
            # cap the per-update cost; the window keeps all points
            stride = int(np.ceil(n / 120))
            x, y = x[::stride], y[::stride]
        s, direction = self._geometry(x)
        if s[0] < self.cfg.transform_min_span:
            return self.converged  # cloud too small to pin anything down
        collinear = s[1] < self.cfg.transform_collinear_ratio * s[0]

        if not self._initialized:
            if collinear:
                # align translation only; rotation about the line stays free
                self.translation = y.mean(axis=0) - self.rotation.rotate(
                    x.mean(axis=0))
            else:
                self.rotation, self.translation = kabsch(x, y)
                self._initialized = True

        projection = None
        if collinear:
            projection = np.eye(3) - np.outer(direction, direction)

        g = Graph()
        g.add_block(RotationBlock("q", self.rotation.wxyz,
                                  projection=projection))
        g.add_block(VectorBlock("p", self.translation))
        g.add_factor(TransformPointsFactor(
            "q", "p", x, y, 1.0 / max(self.cfg.transform_sigma, 1e-9)))
        result = g.optimize(max_iterations=20)
        if result.status is SolveStatus.DIVERGED:
            return self.converged
        self.rotation = UnitQuaternion.from_wxyz(g.blocks["q"].value)
        self.translation = g.blocks["p"].value.copy()
        resid = y - x @ self.rotation.rotation_matrix().T - self.translation
        rms = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
        self.converged = (self._initialized
                          and rms < self.cfg.transform_converged_rms)
        return self.converged

    def transform(self) -> RigidTransform:
        if not self.converged:
            raise TransformUnavailable(self.sensor_id)
        return RigidTransform(rotation=self.rotation,
                              translation=self.translation.copy())
