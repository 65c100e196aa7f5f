"""Skeleton graph, bone vectors and anatomical bounds.

Poses are plain ``(K, 3)`` float arrays in meters; batches are ``(B, K, 3)``.
Bones are directed parent -> child along the kinematic tree, and a connected
pair ``(i, j)`` means bone ``j`` starts at the joint where bone ``i`` ends.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

__all__ = [
    "SkeletonSpec",
    "AnatomicalBounds",
    "bone_vectors",
    "derive_bounds",
    "validate_spec",
    "check_pose",
    "load_skeleton",
    "save_skeleton",
    "load_bounds",
    "save_bounds",
    "default_skeleton",
]

ZERO_NORM_EPS = 1e-8


@dataclass(frozen=True)
class SkeletonSpec:
    joint_names: tuple[str, ...]
    bones: tuple[tuple[int, int], ...]
    symmetric_pairs: tuple[tuple[int, int], ...]
    connected_pairs: tuple[tuple[int, int], ...]
    root: int = 0
    joint_groups: dict[str, tuple[int, ...]] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        # normalise nested lists coming from yaml into hashable tuples
        object.__setattr__(self, "joint_names", tuple(str(n) for n in self.joint_names))
        for name in ("bones", "symmetric_pairs", "connected_pairs"):
            pairs = tuple((int(a), int(b)) for a, b in getattr(self, name))
            object.__setattr__(self, name, pairs)
        object.__setattr__(self, "root", int(self.root))
        groups = {str(k): tuple(int(i) for i in v) for k, v in dict(self.joint_groups).items()}
        object.__setattr__(self, "joint_groups", groups)

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def n_bones(self) -> int:
        return len(self.bones)

    @property
    def parents(self) -> np.ndarray:
        return np.array([b[0] for b in self.bones], dtype=np.intp)

    @property
    def children(self) -> np.ndarray:
        return np.array([b[1] for b in self.bones], dtype=np.intp)

    def to_dict(self) -> dict:
        out = {
            "joint_names": list(self.joint_names),
            "root": self.root,
            "bones": [list(b) for b in self.bones],
            "symmetric_pairs": [list(p) for p in self.symmetric_pairs],
            "connected_pairs": [list(p) for p in self.connected_pairs],
        }
        if self.joint_groups:
            out["joint_groups"] = {k: list(v) for k, v in self.joint_groups.items()}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSpec":
        missing = [k for k in ("joint_names", "bones") if k not in d]
        if missing:
            raise ValueError(f"skeleton file is missing field(s): {', '.join(missing)}")
        return cls(
            joint_names=d["joint_names"],
            bones=d["bones"],
            symmetric_pairs=d.get("symmetric_pairs", []),
            connected_pairs=d.get("connected_pairs", []),
            root=d.get("root", 0),
            joint_groups=d.get("joint_groups") or {},
        )


@dataclass(frozen=True)
class AnatomicalBounds:
    """Per-constraint limits: symmetry tolerances, bone lengths, joint-angle cosines."""

    sym_tol: np.ndarray
    length_lo: np.ndarray
    length_hi: np.ndarray
    angle_lo: np.ndarray
    angle_hi: np.ndarray

    def __post_init__(self):
        for name in ("sym_tol", "length_lo", "length_hi", "angle_lo", "angle_hi"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.length_lo.shape != self.length_hi.shape:
            raise ValueError("length_lo and length_hi differ in size")
        if self.angle_lo.shape != self.angle_hi.shape:
            raise ValueError("angle_lo and angle_hi differ in size")
        if np.any(self.sym_tol < 0):
            raise ValueError("sym_tol must be nonnegative")
        if np.any(self.length_lo < 0) or np.any(self.length_lo > self.length_hi):
            raise ValueError("length bounds must satisfy 0 <= lo <= hi")
        if np.any(self.angle_lo < -1) or np.any(self.angle_hi > 1) or np.any(self.angle_lo > self.angle_hi):
            raise ValueError("angle bounds must satisfy -1 <= lo <= hi <= 1")

    def check_spec(self, spec: SkeletonSpec) -> None:
        if (
            self.sym_tol.size != len(spec.symmetric_pairs)
            or self.length_lo.size != spec.n_bones
            or self.angle_lo.size != len(spec.connected_pairs)
        ):
            raise ValueError(
                "bounds do not match skeleton: expected "
                f"{len(spec.symmetric_pairs)}/{spec.n_bones}/{len(spec.connected_pairs)} "
                f"(sym/length/angle), got {self.sym_tol.size}/{self.length_lo.size}/{self.angle_lo.size}"
            )

    def with_margin(self, margin: float) -> "AnatomicalBounds":
        """Widen length intervals to ``[lo*(1-m), hi*(1+m)]``; angles are left alone."""
        if margin < 0:
            raise ValueError("margin must be nonnegative")
        return AnatomicalBounds(
            sym_tol=self.sym_tol,
            length_lo=self.length_lo * max(0.0, 1.0 - margin),
            length_hi=self.length_hi * (1.0 + margin),
            angle_lo=self.angle_lo,
            angle_hi=self.angle_hi,
        )

    def to_dict(self) -> dict:
        return {
            "sym_tol": [float(v) for v in self.sym_tol],
            "length_lo": [float(v) for v in self.length_lo],
            "length_hi": [float(v) for v in self.length_hi],
            "angle_lo": [float(v) for v in self.angle_lo],
            "angle_hi": [float(v) for v in self.angle_hi],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnatomicalBounds":
        fields = ("sym_tol", "length_lo", "length_hi", "angle_lo", "angle_hi")
        missing = [k for k in fields if k not in d]
        if missing:
            raise ValueError(f"bounds file is missing field(s): {', '.join(missing)}")
        return cls(**{k: d[k] for k in fields})

    def __eq__(self, other):
        if not isinstance(other, AnatomicalBounds):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("sym_tol", "length_lo", "length_hi", "angle_lo", "angle_hi")
        )

    __hash__ = None


def check_pose(pose, spec: SkeletonSpec) -> np.ndarray:
    """Return ``pose`` as a float array of shape ``(K, 3)`` or ``(B, K, 3)``."""
    arr = np.asarray(pose, dtype=np.float64)
    if arr.ndim not in (2, 3) or arr.shape[-1] != 3 or arr.shape[-2] != spec.n_joints:
        raise ValueError(
            f"pose shape {arr.shape} does not match skeleton with {spec.n_joints} joints"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError("pose contains non-finite coordinates")
    return arr


def bone_vectors(pose, spec: SkeletonSpec) -> np.ndarray:
    """Bone vectors ``joints[child] - joints[parent]``, shape ``(..., N_bones, 3)``."""
    arr = check_pose(pose, spec)
    return arr[..., spec.children, :] - arr[..., spec.parents, :]


def bone_lengths(bones: np.ndarray) -> np.ndarray:
    # explicit reduction so batched and single-pose calls round identically
    return np.sqrt((bones * bones).sum(axis=-1))


def pair_cosines(bones: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Clipped normalized dot products of connected bone pairs (undefined for zero bones)."""
    bi = bones[..., pairs[:, 0], :]
    bj = bones[..., pairs[:, 1], :]
    dot = (bi * bj).sum(axis=-1)
    return np.clip(dot / (bone_lengths(bi) * bone_lengths(bj)), -1.0, 1.0)


def derive_bounds(poses, spec: SkeletonSpec, sym_tol_default: float = 0.0,
                  sym_from_data: bool = True) -> AnatomicalBounds:
    """Empirical min/max of bone lengths and connected-pair cosines over ``poses``.

    Symmetry tolerances start at ``sym_tol_default``.  With ``sym_from_data``
    each is raised to the largest left/right length difference seen in
    ``poses`` (rounding noise for mirror-symmetric data), so no pose of the
    set violates any constraint.
    """
    if len(poses) == 0:
        raise ValueError("cannot derive bounds from an empty pose list")
    if sym_tol_default < 0:
        raise ValueError("sym_tol_default must be nonnegative")
    arr = check_pose(np.stack([np.asarray(p, dtype=np.float64) for p in poses]), spec)
    bones = bone_vectors(arr, spec)
    lengths = bone_lengths(bones)
    pairs = np.array(spec.connected_pairs, dtype=np.intp).reshape(-1, 2)
    if pairs.size:
        used = np.unique(pairs)
        bad = np.argwhere(lengths[:, used] <= ZERO_NORM_EPS)
        if bad.size:
            s, b = bad[0]
            raise ValueError(f"pose {s} has a zero-length bone {used[b]} in a connected pair")
        cos = pair_cosines(bones, pairs)
        angle_lo, angle_hi = cos.min(axis=0), cos.max(axis=0)
    else:
        angle_lo = angle_hi = np.zeros(0)
    sym_tol = np.full(len(spec.symmetric_pairs), float(sym_tol_default))
    if sym_from_data and spec.symmetric_pairs:
        sp = np.array(spec.symmetric_pairs, dtype=np.intp)
        asym = np.abs(lengths[:, sp[:, 0]] - lengths[:, sp[:, 1]]).max(axis=0)
        sym_tol = np.maximum(sym_tol, asym)
    return AnatomicalBounds(
        sym_tol=sym_tol,
        length_lo=lengths.min(axis=0),
        length_hi=lengths.max(axis=0),
        angle_lo=angle_lo,
        angle_hi=angle_hi,
    )


def validate_spec(spec: SkeletonSpec) -> list[str]:
    """List every violated skeleton invariant; empty when the spec is well formed."""
    problems: list[str] = []
    k = spec.n_joints
    if not 0 <= spec.root < k:
        problems.append(f"root joint index {spec.root} out of range [0, {k})")
    seen: set[frozenset] = set()
    for i, (p, c) in enumerate(spec.bones):
        if not (0 <= p < k and 0 <= c < k):
            problems.append(f"bone {i} references joint out of range: ({p}, {c})")
        elif p == c:
            problems.append(f"bone {i} is a self loop on joint {p}")
        key = frozenset((p, c))
        if key in seen:
            problems.append(f"bone {i} duplicates an earlier edge ({p}, {c})")
        seen.add(key)
    if spec.n_bones != k - 1:
        problems.append(f"tree skeleton needs {k - 1} bones, found {spec.n_bones}")
    # connectivity + orientation from the root
    parent_of: dict[int, int] = {}
    for i, (p, c) in enumerate(spec.bones):
        if c in parent_of:
            problems.append(f"joint {c} has more than one parent bone (bone {i})")
        parent_of[c] = i
    if spec.root in parent_of:
        problems.append(f"root joint {spec.root} is the child of bone {parent_of[spec.root]}")
    reached = {spec.root}
    frontier = [spec.root]
    while frontier:
        j = frontier.pop()
        for p, c in spec.bones:
            if p == j and c not in reached:
                reached.add(c)
                frontier.append(c)
    unreached = sorted(set(range(k)) - reached)
    if unreached:
        problems.append(f"joints not reachable from root along parent->child bones: {unreached}")

    nb = spec.n_bones
    lefts: dict[int, int] = {}
    rights: dict[int, int] = {}
    for n, (a, b) in enumerate(spec.symmetric_pairs):
        if not (0 <= a < nb and 0 <= b < nb):
            problems.append(f"symmetric pair {n} references bone out of range: ({a}, {b})")
            continue
        if a == b:
            problems.append(f"symmetric pair {n} references identical bone {a}")
            continue
        if a in lefts or a in rights or b in lefts or b in rights:
            problems.append(f"symmetric pair {n} reuses a bone already paired: ({a}, {b})")
        lefts[a] = b
        rights[b] = a
    for n, (i, j) in enumerate(spec.connected_pairs):
        if not (0 <= i < nb and 0 <= j < nb):
            problems.append(f"connected pair {n} references bone out of range: ({i}, {j})")
            continue
        if spec.bones[j][0] != spec.bones[i][1]:
            problems.append(
                f"connected pair {n} ({i}, {j}): bone {j} does not start where bone {i} ends"
            )
    for name, idx in spec.joint_groups.items():
        if any(not 0 <= i < k for i in idx):
            problems.append(f"joint group '{name}' references joint out of range")
    return problems


def _read_yaml(path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return data


def _write_yaml(path, data: dict) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=False, default_flow_style=None)


def load_skeleton(path) -> SkeletonSpec:
    return SkeletonSpec.from_dict(_read_yaml(path))


def save_skeleton(spec: SkeletonSpec, path) -> None:
    _write_yaml(path, spec.to_dict())


def load_bounds(path) -> AnatomicalBounds:
    return AnatomicalBounds.from_dict(_read_yaml(path))


def save_bounds(bounds: AnatomicalBounds, path) -> None:
    _write_yaml(path, bounds.to_dict())


def default_skeleton() -> SkeletonSpec:
    ref = resources.files("anatomy_da") / "data" / "default_skeleton.yaml"
    with resources.as_file(ref) as p:
        return load_skeleton(Path(p))


def skeleton_from_edges(
    joint_names: Sequence[str],
    bones: Sequence[tuple[int, int]],
    symmetric_pairs: Sequence[tuple[int, int]] = (),
    root: int = 0,
) -> SkeletonSpec:
    """Build a spec whose connected pairs are every parent/child bone chain."""
    connected = [
        (i, j)
        for i, (_, ci) in enumerate(bones)
        for j, (pj, _) in enumerate(bones)
        if ci == pj
    ]
    return SkeletonSpec(joint_names, bones, symmetric_pairs, connected, root)
