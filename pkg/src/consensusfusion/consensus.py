"""Consistency matrix maintenance, cross-pattern fault detection, and the
fuse/don't-fuse decision.

A corrupted sensor shows up as a cross pattern in the pairwise matrix: every
entry in its row/column is high while the entries among the remaining
sensors stay low.  With only two candidate sensors the matrix cannot say
which one is at fault, so the decision falls back to comparing each sensor
against the local estimate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .metrics import DROPOUT, LocalView, MetricConfig, SensorView, consistency


class AmbiguousPattern(ValueError):
    """Threshold exceedances do not isolate a cross pattern."""


class Indeterminate(ValueError):
    """Both sensors disagree with the local estimate; the currently fused
    sensor has likely corrupted it."""


class Reason(enum.Enum):
    ALL_CONSISTENT = "AllConsistent"
    CROSS_PATTERN_EXCLUSION = "CrossPatternExclusion"
    TWO_SENSOR_LOCAL_ARBITRATION = "TwoSensorLocalArbitration"
    AMBIGUOUS_LOCAL_FALLBACK = "AmbiguousLocalFallback"
    ALL_FAULTY = "AllFaulty"


@dataclass
class ConsensusConfig:
    threshold: float = 0.1
    hold_time: float = 1.0  # minimum dwell between preference switches
    # fallback stickiness: keep the current sensor during local arbitration
    # unless a competitor's local value beats it by this factor
    sticky_factor: float = 1.5

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")


@dataclass(frozen=True)
class FusionDecision:
    selected: str | None
    excluded: frozenset[str]
    reason: Reason

    def __post_init__(self):
        if self.selected is not None and self.selected in self.excluded:
            raise ValueError("selected sensor cannot be excluded")


@dataclass
class ConsistencyMatrix:
    """Pairwise windowed consistency values plus a LOCAL comparison column.

    ``values[i, j]`` is the metric for sensors i, j (symmetric, 0 diagonal);
    NaN marks a dropout, mirrored in the ``dropout`` mask.
    """

    ids: list[str]
    values: np.ndarray          # (k, k) floats, NaN on dropout
    dropout: np.ndarray         # (k, k) bool
    local_values: np.ndarray    # (k,) floats, NaN on dropout
    local_dropout: np.ndarray   # (k,) bool
    stamp: float = 0.0

    def __post_init__(self):
        k = len(self.ids)
        assert self.values.shape == (k, k)
        finite = ~self.dropout
        assert np.allclose(self.values[finite], self.values.T[finite])
        assert np.all(np.diag(self.values) == 0.0)

    def index(self, sensor_id: str) -> int:
        return self.ids.index(sensor_id)

    def pair(self, a: str, b: str) -> float:
        return float(self.values[self.index(a), self.index(b)])

    def local(self, a: str) -> float:
        return float(self.local_values[self.index(a)])


def build_matrix(views: dict[str, SensorView], local: LocalView, t: float,
                 metric_cfg: MetricConfig) -> ConsistencyMatrix:
    """Evaluate all unordered sensor pairs plus each sensor against LOCAL."""
    ids = sorted(views)
    k = len(ids)
    if k < 2:
        raise ValueError("need at least two sensor streams")
    values = np.zeros((k, k))
    dropout = np.zeros((k, k), dtype=bool)
    local_view = local.as_sensor_view()
    for i in range(k):
        for j in range(i + 1, k):
            v = consistency(views[ids[i]], views[ids[j]], local, t, metric_cfg)
            if v is DROPOUT:
                values[i, j] = values[j, i] = np.nan
                dropout[i, j] = dropout[j, i] = True
            else:
                values[i, j] = values[j, i] = v
    local_values = np.zeros(k)
    local_dropout = np.zeros(k, dtype=bool)
    for i in range(k):
        v = consistency(local_view, views[ids[i]], local, t, metric_cfg)
        if v is DROPOUT:
            local_values[i] = np.nan
            local_dropout[i] = True
        else:
            local_values[i] = v
    return ConsistencyMatrix(ids=ids, values=values, dropout=dropout,
                             local_values=local_values,
                             local_dropout=local_dropout, stamp=t)


def detect_faulty(m: ConsistencyMatrix, cfg: ConsensusConfig) -> set[str]:
    """Sensors isolated by the cross pattern, plus dropped-out sensors.

    A sensor is flagged when every finite off-diagonal entry in its row
    exceeds the threshold while all entries among the remaining sensors stay
    below it.  Raises AmbiguousPattern when exceedances remain outside the
    flagged set or fewer than two sensors would survive.
    """
    k = len(m.ids)
    off = ~np.eye(k, dtype=bool)
    dropped = {m.ids[i] for i in range(k)
               if np.all(m.dropout[i][off[i]]) or m.local_dropout[i]}

    flagged = set(dropped)
    for i in range(k):
        if m.ids[i] in flagged:
            continue
        row = m.values[i][off[i]]
        finite = ~np.isnan(row)
        if np.any(finite) and np.all(row[finite] > cfg.threshold):
            flagged.add(m.ids[i])

    healthy = [i for i in range(k) if m.ids[i] not in flagged]
    core = m.values[np.ix_(healthy, healthy)]
    core_off = core[~np.eye(len(healthy), dtype=bool)]
    core_off = core_off[~np.isnan(core_off)]
    if np.any(core_off > cfg.threshold) or len(healthy) < 2:
        raise AmbiguousPattern(
            f"exceedances at t={m.stamp:.2f} do not isolate a cross pattern")
    return flagged


def arbitrate_two_sensors(m: ConsistencyMatrix, currently_fused: str | None,
                          cfg: ConsensusConfig) -> str:
    """Degenerate two-sensor case: trust the one closer to the local estimate.

    Raises Indeterminate when both local comparisons exceed the threshold
    (the fused sensor has corrupted the local estimate; the caller keeps the
    current selection and flags the state).
    """
    assert len(m.ids) == 2
    la, lb = m.local_values
    if np.isnan(la) and np.isnan(lb):
        raise Indeterminate("both sensors dropped out against local")
    if np.isnan(la):
        return m.ids[1]
    if np.isnan(lb):
        return m.ids[0]
    if la > cfg.threshold and lb > cfg.threshold:
        raise Indeterminate("both sensors inconsistent with local estimate")
    return m.ids[0] if la <= lb else m.ids[1]


def _local_rank(m: ConsistencyMatrix, sensor_id: str) -> tuple:
    v = m.local(sensor_id)
    return (np.inf if np.isnan(v) else v, sensor_id)


def _best_pair_member(m: ConsistencyMatrix, candidates: list[str],
                      prev_selected: str | None,
                      sticky_factor: float = 1.0) -> str:
    """Member of the most consistent pair: stickiness, then smaller LOCAL
    value, ties by lexicographic id.

    The previous selection is kept while its own best pair stays within
    ``sticky_factor`` of the global minimum, so noise-level reshuffling of
    near-equal pair values does not cause flapping.
    """
    best = None
    best_val = np.inf
    prev_val = np.inf
    for i, a in enumerate(candidates):
        for b in candidates[i + 1:]:
            v = m.pair(a, b)
            if np.isnan(v):
                continue
            if v < best_val:
                best_val = v
                best = (a, b)
            if prev_selected in (a, b) and v < prev_val:
                prev_val = v
    if best is None:
        # all candidate pairs dropped out against each other; fall back to
        # the sensor closest to the local estimate
        return min(candidates, key=lambda s: _local_rank(m, s))
    if prev_selected in best:
        return prev_selected
    if (prev_selected in candidates and np.isfinite(prev_val)
            and prev_val <= sticky_factor * best_val):
        return prev_selected
    return min(best, key=lambda s: _local_rank(m, s))


def select(m: ConsistencyMatrix, prev: FusionDecision | None,
           cfg: ConsensusConfig) -> FusionDecision:
    """Next fusion decision from the current matrix.

    Faulty sensors are excluded; among the rest the most consistent pair is
    found and one member fused.  Ambiguous exceedance patterns fall back to
    arbitration against the local estimate.
    """
    prev_selected = prev.selected if prev else None
    ids = m.ids

    if len(ids) == 2:
        a, b = ids
        mutual = m.pair(a, b)
        dropped = [s for i, s in enumerate(ids)
                   if m.dropout[i][1 - i] and m.local_dropout[i]]
        alive = [s for s in ids if s not in dropped]
        if len(alive) == 0:
            return FusionDecision(None, frozenset(ids), Reason.ALL_FAULTY)
        if len(alive) == 1:
            return FusionDecision(alive[0], frozenset(dropped),
                                  Reason.CROSS_PATTERN_EXCLUSION)
        if not np.isnan(mutual) and mutual <= cfg.threshold:
            sel = prev_selected if prev_selected in ids else min(
                ids, key=lambda s: _local_rank(m, s))
            return FusionDecision(sel, frozenset(), Reason.ALL_CONSISTENT)
        try:
            sel = arbitrate_two_sensors(m, prev_selected, cfg)
        except Indeterminate:
            sel = prev_selected if prev_selected in ids else min(
                ids, key=lambda s: _local_rank(m, s))
        other = b if sel == a else a
        return FusionDecision(sel, frozenset({other}),
                              Reason.TWO_SENSOR_LOCAL_ARBITRATION)

    try:
        excluded = detect_faulty(m, cfg)
    except AmbiguousPattern:
        # exceedances everywhere (e.g. degenerate motion) or conflicting
        # patterns: fall back to arbitration against the local estimate,
        # with stickiness so noisy local values do not cause flapping
        dropped = {ids[i] for i in range(len(ids))
                   if m.local_dropout[i] and np.all(
                       m.dropout[i][~np.eye(len(ids), dtype=bool)[i]])}
        alive = [s for s in ids if s not in dropped]
        if not alive:
            return FusionDecision(None, frozenset(ids), Reason.ALL_FAULTY)
        best = min(alive, key=lambda s: _local_rank(m, s))
        sel = best
        if prev_selected in alive:
            prev_val = m.local(prev_selected)
            best_val = m.local(best)
            if not np.isnan(prev_val) and (
                    np.isnan(best_val)
                    or prev_val <= cfg.sticky_factor * best_val):
                sel = prev_selected
        return FusionDecision(sel, frozenset(dropped),
                              Reason.AMBIGUOUS_LOCAL_FALLBACK)

    remaining = [s for s in ids if s not in excluded]
    if len(remaining) == 0:
        return FusionDecision(None, frozenset(ids), Reason.ALL_FAULTY)
    reason = (Reason.ALL_CONSISTENT if not excluded
              else Reason.CROSS_PATTERN_EXCLUSION)
    if len(remaining) == 1:
        return FusionDecision(remaining[0], frozenset(excluded), reason)
    sel = _best_pair_member(m, remaining, prev_selected, cfg.sticky_factor)
    return FusionDecision(sel, frozenset(excluded), reason)


@dataclass
class ConsensusTracker:
    """Decision state machine applying hold-time hysteresis across windows."""

    cfg: ConsensusConfig
    decision: FusionDecision | None = None
    last_switch: float = -np.inf
    history: list[tuple[float, FusionDecision]] = field(default_factory=list)

    def update(self, m: ConsistencyMatrix, t: float) -> FusionDecision:
        proposed = select(m, self.decision, self.cfg)
        if self.decision is not None and proposed.selected != self.decision.selected:
            current = self.decision.selected
            forced = (current is None or current in proposed.excluded)
            if not forced and t - self.last_switch < self.cfg.hold_time:
                # hold the current choice; keep the new exclusion set
                proposed = FusionDecision(current, proposed.excluded,
                                          proposed.reason)
            else:
                self.last_switch = t
        elif self.decision is None:
            self.last_switch = t
        self.decision = proposed
        self.history.append((t, proposed))
        return proposed

    def switch_times(self) -> list[float]:
        times = []
        prev = None
        for t, d in self.history:
            if prev is not None and d.selected != prev:
                times.append(t)
            prev = d.selected
        return times
