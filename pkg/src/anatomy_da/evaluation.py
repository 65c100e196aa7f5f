"""MPJPE, the mean-pose baseline, plausibility reports and loss/error correlation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from . import anatomy
from .skeleton import AnatomicalBounds, SkeletonSpec, check_pose

__all__ = [
    "EvalReport",
    "mpjpe",
    "mean_pose_baseline",
    "pearson",
    "plausibility_report",
    "correlation_study",
    "evaluate_poses",
    "format_report",
    "format_table",
]

LOSS_NAMES = ("sym", "length", "angle", "anat")


@dataclass
class EvalReport:
    per_joint: np.ndarray  # meters, (K,)
    group_means: dict[str, float]
    mean: float
    n_samples: int
    violation_rates: dict[str, float] = field(default_factory=dict)
    mean_losses: dict[str, float] = field(default_factory=dict)
    subset: tuple[int, ...] | None = None
    subset_mean: float | None = None


def mpjpe(pred, gt, joints: Sequence[int] | None = None):
    """Per-joint mean Euclidean error over samples and the mean over ``joints`` (all by default)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None] if gt.ndim == 2 else gt
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    per_joint = np.linalg.norm(pred - gt, axis=-1).mean(axis=0)
    if joints is None:
        return per_joint, float(per_joint.mean())
    joints = list(joints)
    if not joints:
        raise ValueError("joint subset must not be empty")
    return per_joint, float(per_joint[joints].mean())


def per_sample_error(pred, gt) -> np.ndarray:
    return np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=-1).mean(axis=-1)


def evaluate_poses(pred, gt, spec: SkeletonSpec, bounds: AnatomicalBounds | None = None,
                   joints: Sequence[int] | None = None) -> EvalReport:
    pred = check_pose(pred, spec)
    gt = check_pose(gt, spec)
    per_joint, mean = mpjpe(pred, gt)
    groups = {name: float(per_joint[list(idx)].mean()) for name, idx in spec.joint_groups.items()}
    report = EvalReport(per_joint, groups, mean, len(pred))
    if joints is not None:
        report.subset = tuple(int(j) for j in joints)
        report.subset_mean = mpjpe(pred, gt, report.subset)[1]
    if bounds is not None:
        rates, means = plausibility_report(pred, spec, bounds)
        report.violation_rates, report.mean_losses = rates, means
    return report


def mean_pose_baseline(train_poses, test_poses, root: int, spec: SkeletonSpec | None = None) -> EvalReport:
    """Score the mean root-centred training pose against root-centred test poses.

    Uses the ground-truth root location of every test pose, as the baseline
    is defined.
    """
    train = np.asarray(train_poses, dtype=np.float64)
    test = np.asarray(test_poses, dtype=np.float64)
    if not len(train) or not len(test):
        raise ValueError("mean-pose baseline needs nonempty train and test poses")
    mean_pose = (train - train[:, root:root + 1]).mean(axis=0)
    centred = test - test[:, root:root + 1]
    pred = np.broadcast_to(mean_pose, centred.shape)
    per_joint, mean = mpjpe(pred, centred)
    groups = {}
    if spec is not None:
        groups = {n: float(per_joint[list(i)].mean()) for n, i in spec.joint_groups.items()}
    return EvalReport(per_joint, groups, mean, len(test))


def pearson(x, y) -> tuple[float, float]:
    """Sample Pearson R and two-sided p-value from the t distribution with n-2 dof."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n = len(x)
    if n != len(y):
        raise ValueError("x and y differ in length")
    if n < 3:
        raise ValueError("pearson needs at least 3 samples")
    xm = x - x.mean()
    ym = y - y.mean()
    sxx, syy = float(xm @ xm), float(ym @ ym)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson is undefined for zero-variance input")
    r = float(xm @ ym) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if abs(r) == 1.0:
        return r, 0.0
    t2 = r * r * df / (1.0 - r * r)
    # P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2)
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t2)))
    return r, p


def plausibility_report(poses, spec: SkeletonSpec, bounds: AnatomicalBounds, kind: str = "l1"):
    """Fraction of poses violating each constraint, and mean loss values."""
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 3 or not len(poses):
        raise ValueError("plausibility report needs a nonempty batch of poses")
    tri = anatomy.plausibility_triple(poses, spec, bounds, kind)
    vals = {"sym": np.asarray(tri.sym), "length": np.asarray(tri.length), "angle": np.asarray(tri.angle)}
    rates = {k: float((v > 0).mean()) for k, v in vals.items()}
    means = {k: float(v.mean()) for k, v in vals.items()}
    means["anat"] = means["sym"] + means["length"] + means["angle"]
    return rates, means


def correlation_study(pred, gt, spec: SkeletonSpec, bounds: AnatomicalBounds) -> list[tuple[str, float, float]]:
    """Pearson R and p between per-sample MPJPE and each anatomical loss (4 rows)."""
    pred = check_pose(pred, spec)
    gt = check_pose(gt, spec)
    err = per_sample_error(pred, gt)
    tri = anatomy.plausibility_triple(pred, spec, bounds)
    losses = {
        "sym": np.asarray(tri.sym),
        "length": np.asarray(tri.length),
        "angle": np.asarray(tri.angle),
    }
    losses["anat"] = losses["sym"] + losses["length"] + losses["angle"]
    return [(name, *pearson(losses[name], err)) for name in LOSS_NAMES]


def format_report(report: EvalReport, spec: SkeletonSpec, extra: dict | None = None) -> str:
    """Machine-readable ``key: value`` block, errors in millimeters."""
    lines = [f"samples: {report.n_samples}", f"mpjpe_mm: {report.mean * 1000:.3f}"]
    if report.subset is not None:
        lines.append(f"mpjpe_subset_mm: {report.subset_mean * 1000:.3f}")
        lines.append("subset_joints: " + ",".join(spec.joint_names[j] for j in report.subset))
    for name, v in report.group_means.items():
        lines.append(f"group.{name}_mm: {v * 1000:.3f}")
    for name, v in zip(spec.joint_names, report.per_joint):
        lines.append(f"joint.{name}_mm: {v * 1000:.3f}")
    for k, v in report.violation_rates.items():
        lines.append(f"violation_rate.{k}: {v:.6f}")
    for k, v in report.mean_losses.items():
        lines.append(f"mean_loss.{k}: {v:.6g}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {v}")
    return "\n".join(lines) + "\n"


def format_table(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    """Aligned plain-text table."""
    cells = [list(map(str, header))] + [[f"{c:.4g}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells) + "\n"
