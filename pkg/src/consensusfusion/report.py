"""Error reporting against ground truth and all output artifacts.

CSV schemas:

* fused state:  ``stamp,qw,qx,qy,qz,px,py,pz,vx,vy,vz,selected_sensor``
  (velocity in the body frame);
* metric timeline:  ``stamp,pair,metric_value`` with ``-0.01`` dropout rows;
  pairs are ``a|b`` over sensors plus ``LOCAL|a`` rows;
* decision timeline:  ``stamp,selected,excluded,reason`` with excluded ids
  joined by ``;``;
* shootout:  ``stamp,pair,metric,value``;
* comparison: ``strategy,ate_pos_rmse,ate_rot_rmse,switch_count``.

Floats are rendered with a fixed 12-significant-digit format so identical
runs produce byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .consensus import ConsistencyMatrix, FusionDecision
from .geometry import UnitQuaternion
from .pipeline import FusedOutput
from .sim import GroundTruth


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


@dataclass
class ErrorReport:
    strategy: str
    ate_pos_rmse: float
    ate_rot_rmse: float
    stamps: np.ndarray
    pos_errors: np.ndarray    # per-stamp Euclidean position error [m]
    rot_errors: np.ndarray    # per-stamp rotation angle error [rad]
    switch_count: int


def compute_error_report(output: FusedOutput, truth: GroundTruth,
                         switch_count: int = 0,
                         strategy: str = "") -> ErrorReport:
    """Align the fused series to ground truth (shared IMU grid) and score."""
    n = min(len(output.stamps), len(truth.stamps))
    if n == 0:
        raise ValueError("empty output series")
    assert np.allclose(output.stamps[:n], truth.stamps[:n], atol=1e-9)
    pos_err = np.linalg.norm(output.positions[:n] - truth.positions[:n],
                             axis=1)
    rot_err = np.empty(n)
    for k in range(n):
        qa = UnitQuaternion.from_wxyz(output.quats_wxyz[k])
        qb = UnitQuaternion.from_wxyz(truth.quats_wxyz[k])
        rot_err[k] = qa.angle_to(qb)
    return ErrorReport(
        strategy=strategy,
        ate_pos_rmse=float(np.sqrt(np.mean(pos_err ** 2))),
        ate_rot_rmse=float(np.sqrt(np.mean(rot_err ** 2))),
        stamps=output.stamps[:n].copy(),
        pos_errors=pos_err, rot_errors=rot_err,
        switch_count=switch_count)


# ---------------------------------------------------------------------------
# CSV writers
# ---------------------------------------------------------------------------

def write_fused_csv(output: FusedOutput, path) -> None:
    with open(path, "w", newline="") as f:
        f.write("stamp,qw,qx,qy,qz,px,py,pz,vx,vy,vz,selected_sensor\n")
        for k in range(len(output.stamps)):
            row = [_fmt(output.stamps[k])]
            row += [_fmt(v) for v in output.quats_wxyz[k]]
            row += [_fmt(v) for v in output.positions[k]]
            row += [_fmt(v) for v in output.velocities_body[k]]
            row.append(output.selected[k])
            f.write(",".join(row) + "\n")


def write_metric_csv(matrices: list[ConsistencyMatrix], path) -> None:
    with open(path, "w", newline="") as f:
        f.write("stamp,pair,metric_value\n")
        for m in matrices:
            ids = m.ids
            for i, a in enumerate(ids):
                for b in ids[i + 1:]:
                    v = m.values[m.index(a), m.index(b)]
                    out = -0.01 if np.isnan(v) else v
                    f.write(f"{_fmt(m.stamp)},{a}|{b},{_fmt(out)}\n")
            for a in ids:
                v = m.local(a)
                out = -0.01 if np.isnan(v) else v
                f.write(f"{_fmt(m.stamp)},LOCAL|{a},{_fmt(out)}\n")


def write_decision_csv(decisions: list[tuple[float, FusionDecision]],
                       path) -> None:
    with open(path, "w", newline="") as f:
        f.write("stamp,selected,excluded,reason\n")
        for t, d in decisions:
            selected = d.selected if d.selected is not None else "none"
            excluded = ";".join(sorted(d.excluded))
            f.write(f"{_fmt(t)},{selected},{excluded},{d.reason.value}\n")


def write_shootout_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        f.write("stamp,pair,metric,value\n")
        for r in rows:
            f.write(f"{_fmt(r['stamp'])},{r['pair']},{r['metric']},"
                    f"{_fmt(r['value'])}\n")


def write_error_csv(report: ErrorReport, path) -> None:
    with open(path, "w", newline="") as f:
        f.write("stamp,pos_error,rot_error\n")
        for k in range(len(report.stamps)):
            f.write(f"{_fmt(report.stamps[k])},{_fmt(report.pos_errors[k])},"
                    f"{_fmt(report.rot_errors[k])}\n")


def write_comparison_csv(reports: list[ErrorReport], path) -> None:
    with open(path, "w", newline="") as f:
        f.write("strategy,ate_pos_rmse,ate_rot_rmse,switch_count\n")
        for r in reports:
            f.write(f"{r.strategy},{_fmt(r.ate_pos_rmse)},"
                    f"{_fmt(r.ate_rot_rmse)},{r.switch_count}\n")


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def render_run_figures(outdir, output: FusedOutput, truth: GroundTruth,
                       report: ErrorReport,
                       matrices: list[ConsistencyMatrix] | None = None,
                       threshold: float | None = None) -> list[str]:
    """Render trajectory, error, and consistency figures; returns paths."""
    written = []

    fig, axes = plt.subplots(1, 2, figsize=(11, 4.5))
    axes[0].plot(truth.positions[:, 0], truth.positions[:, 1],
                 label="truth", lw=1.0)
    axes[0].plot(output.positions[:, 0], output.positions[:, 1],
                 label="fused", lw=0.8, ls="--")
    axes[0].set_xlabel("x [m]")
    axes[0].set_ylabel("y [m]")
    axes[0].set_title("trajectory (top view)")
    axes[0].legend()
    axes[0].axis("equal")
    axes[1].plot(truth.stamps, truth.positions[:, 2], label="truth", lw=1.0)
    n = len(output.stamps)
    axes[1].plot(output.stamps, output.positions[:, 2], label="fused",
                 lw=0.8, ls="--")
    axes[1].set_xlabel("t [s]")
    axes[1].set_ylabel("z [m]")
    axes[1].set_title("altitude")
    axes[1].legend()
    fig.tight_layout()
    path = str(outdir / "trajectory.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)

    fig, axes = plt.subplots(2, 1, figsize=(10, 5), sharex=True)
    axes[0].plot(report.stamps, report.pos_errors, lw=0.8)
    axes[0].set_ylabel("position error [m]")
    axes[0].set_title(f"ATE pos RMSE {report.ate_pos_rmse:.3f} m, "
                      f"rot RMSE {np.degrees(report.ate_rot_rmse):.2f} deg")
    axes[1].plot(report.stamps, np.degrees(report.rot_errors), lw=0.8)
    axes[1].set_ylabel("rotation error [deg]")
    axes[1].set_xlabel("t [s]")
    fig.tight_layout()
    path = str(outdir / "errors.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)

    if matrices:
        fig, ax = plt.subplots(figsize=(10, 4.5))
        ids = matrices[0].ids
        pairs = [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]]
        for a, b in pairs:
            t = [m.stamp for m in matrices]
            v = [m.values[m.index(a), m.index(b)] for m in matrices]
            ax.plot(t, v, lw=0.9, label=f"{a}|{b}")
        if threshold is not None:
            ax.axhline(threshold, color="k", ls=":", lw=1.0,
                       label="threshold")
        ax.set_xlabel("t [s]")
        ax.set_ylabel("consistency value")
        ax.set_title("pairwise consistency timeline")
        ax.legend(ncol=3, fontsize=8)
        fig.tight_layout()
        path = str(outdir / "consistency.png")
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written


def render_shootout_figure(outdir, rows: list[dict], pair: str,
                           threshold: float | None = None) -> str:
    fig, ax = plt.subplots(figsize=(10, 4.5))
    metrics = sorted({r["metric"] for r in rows})
    for metric in metrics:
        pts = [(r["stamp"], r["value"]) for r in rows
               if r["metric"] == metric and r["pair"] == pair
               and r["value"] >= 0.0]
        if pts:
            t, v = zip(*pts)
            ax.plot(t, v, lw=0.9, label=metric)
    if threshold is not None:
        ax.axhline(threshold, color="k", ls=":", lw=1.0, label="threshold")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("standardized metric value")
    ax.set_title(f"metric shootout, pair {pair}")
    ax.legend()
    fig.tight_layout()
    path = str(outdir / "shootout.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
