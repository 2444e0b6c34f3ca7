"""Small dense factor-graph solver.

Variables live on manifolds (unit quaternions with a right tangent
perturbation, plain vectors) and factors provide weighted residuals with
analytic Jacobians with respect to each connected block's tangent space.
Optimization is Levenberg-Marquardt on the stacked dense system; the graphs
in this package stay small (tens of blocks) so sparsity is not worth the
bookkeeping.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    UnitQuaternion,
    quat_conj,
    quat_mul,
    quat_normalize,
    so3_exp,
    so3_log,
    so3_right_jacobian_inv,
)


class SolveStatus(enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    DIVERGED = "diverged"


# ---------------------------------------------------------------------------
# Variable blocks
# ---------------------------------------------------------------------------

class VariableBlock:
    """A named optimization variable with a tangent-space dimension.

    ``projection`` optionally restricts updates to a subspace: the raw
    Gauss-Newton step delta is replaced by ``projection @ delta`` before
    retraction.  A ``fixed`` block receives no update at all.
    """

    def __init__(self, key: str, dim: int, fixed: bool = False,
                 projection: np.ndarray | None = None):
        self.key = key
        self.dim = dim
        self.fixed = fixed
        self.projection = projection

    def retract(self, delta: np.ndarray) -> None:
        raise NotImplementedError

    def copy_value(self):
        raise NotImplementedError

    def set_value(self, value) -> None:
        raise NotImplementedError

    def apply(self, delta: np.ndarray) -> None:
        if self.fixed:
            return
        if self.projection is not None:
            delta = self.projection @ delta
        self.retract(delta)


class VectorBlock(VariableBlock):
    def __init__(self, key: str, value: np.ndarray, **kwargs):
        value = np.asarray(value, dtype=float).copy()
        super().__init__(key, value.size, **kwargs)
        self.value = value

    def retract(self, delta: np.ndarray) -> None:
        self.value = self.value + delta

    def copy_value(self):
        return self.value.copy()

    def set_value(self, value) -> None:
        self.value = np.asarray(value, dtype=float).copy()


class RotationBlock(VariableBlock):
    """Unit quaternion (w, x, y, z) with q <- q * exp(delta) retraction."""

    def __init__(self, key: str, value: np.ndarray, **kwargs):
        super().__init__(key, 3, **kwargs)
        self.value = quat_normalize(np.asarray(value, dtype=float))

    def retract(self, delta: np.ndarray) -> None:
        self.value = quat_normalize(quat_mul(self.value, so3_exp(delta)))

    def copy_value(self):
        return self.value.copy()

    def set_value(self, value) -> None:
        self.value = quat_normalize(np.asarray(value, dtype=float))

    def quaternion(self) -> UnitQuaternion:
        return UnitQuaternion.from_wxyz(self.value)


# ---------------------------------------------------------------------------
# Factors
# ---------------------------------------------------------------------------

class Factor:
    """Weighted residual over one or more blocks.

    Subclasses implement ``residual`` and ``jacobian``; residuals must
    already include the square-root information weighting so the solver can
    minimize the plain sum of squares.
    """

    keys: tuple[str, ...]

    def residual(self, blocks: dict[str, VariableBlock]) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, blocks: dict[str, VariableBlock],
                 key: str) -> np.ndarray:
        raise NotImplementedError


class VectorPriorFactor(Factor):
    """r = sqrt_w * (x - x0), with per-component sqrt weights."""

    def __init__(self, key: str, target: np.ndarray, sqrt_weight):
        self.keys = (key,)
        self.target = np.asarray(target, dtype=float).copy()
        self.sqrt_weight = np.broadcast_to(
            np.asarray(sqrt_weight, dtype=float), self.target.shape).copy()

    def residual(self, blocks):
        return self.sqrt_weight * (blocks[self.keys[0]].value - self.target)

    def jacobian(self, blocks, key):
        return np.diag(self.sqrt_weight)


class RotationPriorFactor(Factor):
    """r = sqrt_w * Log(q0^-1 * q), anchoring a rotation block."""

    def __init__(self, key: str, target_wxyz: np.ndarray, sqrt_weight):
        self.keys = (key,)
        self.target = quat_normalize(np.asarray(target_wxyz, dtype=float))
        self.sqrt_weight = np.broadcast_to(
            np.asarray(sqrt_weight, dtype=float), (3,)).copy()

    def _error(self, blocks):
        return so3_log(quat_mul(quat_conj(self.target),
                                blocks[self.keys[0]].value))

    def residual(self, blocks):
        return self.sqrt_weight * self._error(blocks)

    def jacobian(self, blocks, key):
        e = self._error(blocks)
        return self.sqrt_weight[:, None] * so3_right_jacobian_inv(e)


class RotationBetweenFactor(Factor):
    """r = sqrt_w * Log((q_i * delta)^-1 * q_j) for a measured relative
    rotation delta between two blocks."""

    def __init__(self, key_i: str, key_j: str, delta_wxyz: np.ndarray,
                 sqrt_weight):
        self.keys = (key_i, key_j)
        self.delta = quat_normalize(np.asarray(delta_wxyz, dtype=float))
        self.sqrt_weight = np.broadcast_to(
            np.asarray(sqrt_weight, dtype=float), (3,)).copy()

    def _error(self, blocks):
        qi = blocks[self.keys[0]].value
        qj = blocks[self.keys[1]].value
        pred = quat_mul(qi, self.delta)
        return so3_log(quat_mul(quat_conj(pred), qj))

    def residual(self, blocks):
        return self.sqrt_weight * self._error(blocks)

    def jacobian(self, blocks, key):
        e = self._error(blocks)
        jr_inv = so3_right_jacobian_inv(e)
        if key == self.keys[1]:
            return self.sqrt_weight[:, None] * jr_inv
        # right perturbation of q_i maps through -(Jr^-1) R(e)^T R(delta)^T
        r_e = UnitQuaternion.from_wxyz(so3_exp(e)).rotation_matrix()
        r_d = UnitQuaternion.from_wxyz(self.delta).rotation_matrix()
        return self.sqrt_weight[:, None] * (-jr_inv @ r_e.T @ r_d.T)


def numeric_jacobian(factor: Factor, blocks: dict[str, VariableBlock],
                     key: str, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian via the block's own retraction."""
    block = blocks[key]
    base = block.copy_value()
    r0 = factor.residual(blocks)
    jac = np.zeros((r0.size, block.dim))
    for k in range(block.dim):
        delta = np.zeros(block.dim)
        delta[k] = eps
        block.set_value(base)
        block.retract(delta)
        r_plus = factor.residual(blocks)
        block.set_value(base)
        block.retract(-delta)
        r_minus = factor.residual(blocks)
        jac[:, k] = (r_plus - r_minus) / (2.0 * eps)
    block.set_value(base)
    return jac


# ---------------------------------------------------------------------------
# Graph and optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizeResult:
    status: SolveStatus
    cost: float
    initial_cost: float
    iterations: int


@dataclass
class Graph:
    blocks: dict[str, VariableBlock] = field(default_factory=dict)
    factors: list[Factor] = field(default_factory=list)
    # (offsets, diag) from the last optimize linearization; invalidated by
    # any structural change so information_diagonal can skip a full restack
    _info_cache: tuple | None = field(default=None, repr=False)

    def add_block(self, block: VariableBlock) -> VariableBlock:
        if block.key in self.blocks:
            raise KeyError(f"duplicate block key {block.key!r}")
        self.blocks[block.key] = block
        self._info_cache = None
        return block

    def add_factor(self, factor: Factor) -> Factor:
        for key in factor.keys:
            if key not in self.blocks:
                raise KeyError(f"factor references unknown block {key!r}")
        self.factors.append(factor)
        self._info_cache = None
        return factor

    def remove_block(self, key: str) -> None:
        del self.blocks[key]
        self._info_cache = None

    def _layout(self):
        """Column offsets of free blocks in the stacked system."""
        offsets = {}
        col = 0
        for key, block in self.blocks.items():
            if not block.fixed:
                offsets[key] = col
                col += block.dim
        return offsets, col

    def _stack(self, offsets, n_cols):
        residuals = [f.residual(self.blocks) for f in self.factors]
        rows = sum(r.size for r in residuals)
        jac = np.zeros((rows, n_cols))
        res = np.zeros(rows)
        row = 0
        for f, r in zip(self.factors, residuals):
            m = r.size
            res[row:row + m] = r
            for key in f.keys:
                if key in offsets:
                    j = f.jacobian(self.blocks, key)
                    block = self.blocks[key]
                    if block.projection is not None:
                        j = j @ block.projection
                    jac[row:row + m, offsets[key]:offsets[key] + block.dim] += j
            row += m
        return jac, res

    def cost(self) -> float:
        return 0.5 * sum(float(np.dot(r, r)) for r in
                         (f.residual(self.blocks) for f in self.factors))

    def information_diagonal(self) -> dict[str, np.ndarray]:
        """Per-block diagonal of J^T J at the current estimate.

        Reuses the last optimize linearization when the graph structure has
        not changed since; the diagonal is only consumed as a prior weight,
        so one retraction step of staleness is acceptable.
        """
        if self._info_cache is not None:
            offsets, diag = self._info_cache
        else:
            offsets, n_cols = self._layout()
            jac, _ = self._stack(offsets, n_cols)
            diag = np.einsum("ij,ij->j", jac, jac)
        return {key: diag[off:off + self.blocks[key].dim].copy()
                for key, off in offsets.items()}

    def optimize(self, max_iterations: int = 25, tol: float = 1e-10,
                 lambda_init: float = 1e-4,
                 lambda_max: float = 1e8) -> OptimizeResult:
        offsets, n_cols = self._layout()
        if n_cols == 0 or not self.factors:
            c = self.cost()
            return OptimizeResult(SolveStatus.CONVERGED, c, c, 0)

        lam = lambda_init
        cost = self.cost()
        initial_cost = cost
        for it in range(1, max_iterations + 1):
            jac, res = self._stack(offsets, n_cols)
            grad = jac.T @ res
            if np.linalg.norm(grad, ord=np.inf) < tol:
                return OptimizeResult(SolveStatus.CONVERGED, cost,
                                      initial_cost, it)
            hess = jac.T @ jac
            hess_diag = np.diag(hess).copy()
            self._info_cache = (offsets, hess_diag.copy())
            # floor the damping diagonal so gauge-free directions stay tame
            hess_diag = np.maximum(hess_diag, 1e-9)

            saved = {key: self.blocks[key].copy_value() for key in offsets}
            while True:
                damped = hess + lam * np.diag(hess_diag)
                try:
                    delta = np.linalg.solve(damped, -grad)
                except np.linalg.LinAlgError:
                    delta = None
                if delta is not None and np.all(np.isfinite(delta)):
                    for key, off in offsets.items():
                        block = self.blocks[key]
                        block.apply(delta[off:off + block.dim])
                    new_cost = self.cost()
                    if np.isfinite(new_cost) and new_cost <= cost:
                        break
                    for key in offsets:
                        self.blocks[key].set_value(saved[key])
                lam *= 10.0
                if lam > lambda_max:
                    return OptimizeResult(SolveStatus.DIVERGED, cost,
                                          initial_cost, it)
            improvement = cost - new_cost
            cost = new_cost
            lam = max(lam * 0.3, 1e-9)
            if improvement < tol * max(1.0, cost) and \
                    np.linalg.norm(delta) < 1e-8:
                return OptimizeResult(SolveStatus.CONVERGED, cost,
                                      initial_cost, it)
        return OptimizeResult(SolveStatus.MAX_ITERATIONS, cost,
                              initial_cost, max_iterations)
