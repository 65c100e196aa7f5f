"""Anatomical penalty losses and the pseudo-label plausibility filter.

Every loss accepts a single pose ``(K, 3)`` or a batch ``(B, K, 3)`` and returns
per-pose values (scalar or ``(B,)``) together with the gradient with respect to
the joint coordinates, same shape as the input.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .skeleton import (
    ZERO_NORM_EPS,
    AnatomicalBounds,
    SkeletonSpec,
    bone_lengths,
    bone_vectors,
    check_pose,
    pair_cosines,
)

__all__ = [
    "DegenerateBoneError",
    "LossValueWithGrad",
    "PlausibilityTriple",
    "FILTER_MODES",
    "penalty",
    "penalty_grad",
    "sym_loss",
    "length_loss",
    "angle_loss",
    "anat_loss",
    "plausibility_triple",
    "filter_pseudo_label",
    "filter_variant",
]

FILTER_MODES = ("none", "sym", "length", "angle", "anat_sum", "two_of_three", "consistency")
PENALTY_KINDS = ("l1", "l2")


class DegenerateBoneError(ValueError):
    """A bone is too short for its loss gradient to be defined."""


class LossValueWithGrad(NamedTuple):
    value: float | np.ndarray
    grad: np.ndarray | None


class PlausibilityTriple(NamedTuple):
    sym: float
    length: float
    angle: float


def penalty(x, lo, hi, kind: str = "l1"):
    """Distance of ``x`` outside ``[lo, hi]``; zero inside and on the boundary.

    ``kind="l2"`` squares the distance.
    """
    x = np.asarray(x, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("penalty requires lo <= hi")
    d = np.where(x < lo, lo - x, np.where(x > hi, x - hi, 0.0))
    if kind == "l2":
        d = d * d
    elif kind != "l1":
        raise ValueError(f"unknown penalty kind {kind!r}")
    return d if d.ndim else float(d)


def penalty_grad(x, lo, hi, kind: str = "l1"):
    """Derivative of :func:`penalty`; the subgradient 0 is used at ``lo`` and ``hi``."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "l1":
        return np.where(x < lo, -1.0, np.where(x > hi, 1.0, 0.0))
    if kind == "l2":
        return np.where(x < lo, 2.0 * (x - lo), np.where(x > hi, 2.0 * (x - hi), 0.0))
    raise ValueError(f"unknown penalty kind {kind!r}")


def _scatter_bone_grad(g_bones: np.ndarray, spec: SkeletonSpec, n_batch_shape) -> np.ndarray:
    grad = np.zeros(n_batch_shape + (spec.n_joints, 3))
    # np.add.at on the joint axis handles joints shared by several bones
    np.add.at(grad, (..., spec.children, slice(None)), g_bones)
    np.subtract.at(grad, (..., spec.parents, slice(None)), g_bones)
    return grad


def _check_norms(norms: np.ndarray, bone_idx: np.ndarray, what: str) -> None:
    bad = norms <= ZERO_NORM_EPS
    if np.any(bad):
        b = bone_idx[np.argwhere(bad)[0][-1]]
        raise DegenerateBoneError(f"{what}: bone {b} has (near) zero length; gradient undefined")


def _finish(value: np.ndarray, grad, single: bool) -> LossValueWithGrad:
    if single:
        value = float(value[0])
        grad = None if grad is None else grad[0]
    return LossValueWithGrad(value, grad)


def _prepare(pose, spec, bounds):
    arr = check_pose(pose, spec)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    bounds.check_spec(spec)
    return arr, single


def sym_loss(pose, spec: SkeletonSpec, bounds: AnatomicalBounds, *, grad: bool = True,
             kind: str = "l1") -> LossValueWithGrad:
    """Mean penalty on left/right bone length differences beyond ``sym_tol``."""
    arr, single = _prepare(pose, spec, bounds)
    pairs = np.array(spec.symmetric_pairs, dtype=np.intp).reshape(-1, 2)
    if not len(pairs):
        return _finish(np.zeros(len(arr)), np.zeros_like(arr) if grad else None, single)
    bones = bone_vectors(arr, spec)
    bl, br = bones[:, pairs[:, 0]], bones[:, pairs[:, 1]]
    nl, nr = bone_lengths(bl), bone_lengths(br)
    diff = nl - nr
    tol = bounds.sym_tol
    value = penalty(diff, -tol, tol, kind).mean(axis=-1)
    if not grad:
        return _finish(value, None, single)
    _check_norms(nl, pairs[:, 0], "sym_loss")
    _check_norms(nr, pairs[:, 1], "sym_loss")
    dp = penalty_grad(diff, -tol, tol, kind) / len(pairs)
    g_bones = np.zeros_like(bones)
    np.add.at(g_bones, (slice(None), pairs[:, 0]), (dp / nl)[..., None] * bl)
    np.add.at(g_bones, (slice(None), pairs[:, 1]), -(dp / nr)[..., None] * br)
    return _finish(value, _scatter_bone_grad(g_bones, spec, (len(arr),)), single)


def length_loss(pose, spec: SkeletonSpec, bounds: AnatomicalBounds, *, grad: bool = True,
                kind: str = "l1") -> LossValueWithGrad:
    """Mean penalty on bone lengths outside ``[length_lo, length_hi]``."""
    arr, single = _prepare(pose, spec, bounds)
    bones = bone_vectors(arr, spec)
    norms = bone_lengths(bones)
    value = penalty(norms, bounds.length_lo, bounds.length_hi, kind).mean(axis=-1)
    if not grad:
        return _finish(value, None, single)
    _check_norms(norms, np.arange(spec.n_bones), "length_loss")
    dp = penalty_grad(norms, bounds.length_lo, bounds.length_hi, kind) / spec.n_bones
    g_bones = (dp / norms)[..., None] * bones
    return _finish(value, _scatter_bone_grad(g_bones, spec, (len(arr),)), single)


def angle_loss(pose, spec: SkeletonSpec, bounds: AnatomicalBounds, *, grad: bool = True,
               kind: str = "l1") -> LossValueWithGrad:
    """Mean penalty on connected-pair cosines outside ``[angle_lo, angle_hi]``.

    In value-only mode a pair containing a zero-length bone is scored as cosine 0.
    """
    arr, single = _prepare(pose, spec, bounds)
    pairs = np.array(spec.connected_pairs, dtype=np.intp).reshape(-1, 2)
    if not len(pairs):
        return _finish(np.zeros(len(arr)), np.zeros_like(arr) if grad else None, single)
    bones = bone_vectors(arr, spec)
    bi, bj = bones[:, pairs[:, 0]], bones[:, pairs[:, 1]]
    ni, nj = bone_lengths(bi), bone_lengths(bj)
    degenerate = (ni <= ZERO_NORM_EPS) | (nj <= ZERO_NORM_EPS)
    if grad:
        _check_norms(ni, pairs[:, 0], "angle_loss")
        _check_norms(nj, pairs[:, 1], "angle_loss")
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = pair_cosines(bones, pairs)
    cos = np.where(degenerate, 0.0, cos)
    value = penalty(cos, bounds.angle_lo, bounds.angle_hi, kind).mean(axis=-1)
    if not grad:
        return _finish(value, None, single)
    dp = (penalty_grad(cos, bounds.angle_lo, bounds.angle_hi, kind) / len(pairs))[..., None]
    inv = 1.0 / (ni * nj)
    c = cos[..., None]
    gi = dp * (bj * inv[..., None] - c * bi / (ni * ni)[..., None])
    gj = dp * (bi * inv[..., None] - c * bj / (nj * nj)[..., None])
    g_bones = np.zeros_like(bones)
    np.add.at(g_bones, (slice(None), pairs[:, 0]), gi)
    np.add.at(g_bones, (slice(None), pairs[:, 1]), gj)
    return _finish(value, _scatter_bone_grad(g_bones, spec, (len(arr),)), single)


def anat_loss(pose, spec: SkeletonSpec, bounds: AnatomicalBounds, *, grad: bool = True,
              kind: str = "l1") -> LossValueWithGrad:
    """Unweighted sum of the symmetry, length and angle losses."""
    parts = [f(pose, spec, bounds, grad=grad, kind=kind) for f in (sym_loss, length_loss, angle_loss)]
    value = parts[0].value + parts[1].value + parts[2].value
    g = None if not grad else parts[0].grad + parts[1].grad + parts[2].grad
    return LossValueWithGrad(value, g)


def plausibility_triple(pose, spec: SkeletonSpec, bounds: AnatomicalBounds, kind: str = "l1"):
    """Value-only (sym, length, angle) losses; batched input gives arrays per field."""
    return PlausibilityTriple(
        sym_loss(pose, spec, bounds, grad=False, kind=kind).value,
        length_loss(pose, spec, bounds, grad=False, kind=kind).value,
        angle_loss(pose, spec, bounds, grad=False, kind=kind).value,
    )


def _wins(teacher: PlausibilityTriple, student: PlausibilityTriple) -> np.ndarray:
    return np.stack([np.asarray(t) < np.asarray(s) for t, s in zip(teacher, student)])


def filter_variant(teacher_pose, student_pose, spec: SkeletonSpec, bounds: AnatomicalBounds,
                   mode: str = "two_of_three", kind: str = "l1"):
    """Decide whether the teacher pseudo label is used, under a given ablation rule.

    Works per pose or on batches (returns a boolean array).  ``"consistency"``
    needs augmented forward passes and lives in the trainer.
    """
    if mode not in FILTER_MODES:
        raise ValueError(f"unknown filter mode {mode!r}; expected one of {FILTER_MODES}")
    if mode == "consistency":
        raise ValueError("consistency filtering needs augmented forward passes; use the trainer")
    t_arr = check_pose(teacher_pose, spec)
    s_arr = check_pose(student_pose, spec)
    if t_arr.shape != s_arr.shape:
        raise ValueError("teacher and student poses differ in shape")
    if mode == "none":
        out = np.ones(t_arr.shape[:-2], dtype=bool)
        return bool(out) if out.ndim == 0 else out
    t = plausibility_triple(t_arr, spec, bounds, kind)
    s = plausibility_triple(s_arr, spec, bounds, kind)
    if mode == "two_of_three":
        out = _wins(t, s).sum(axis=0) >= 2
    elif mode == "anat_sum":
        out = np.asarray(t.sym + t.length + t.angle) < np.asarray(s.sym + s.length + s.angle)
    else:
        out = np.asarray(getattr(t, mode)) < np.asarray(getattr(s, mode))
    return bool(out) if np.ndim(out) == 0 else out


def filter_pseudo_label(teacher_pose, student_pose, spec: SkeletonSpec,
                        bounds: AnatomicalBounds, kind: str = "l1"):
    """True iff the teacher is strictly more plausible in at least two of three losses."""
    return filter_variant(teacher_pose, student_pose, spec, bounds, "two_of_three", kind)
