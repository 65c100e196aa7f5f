"""Synthetic in-bed poses and point clouds, domain shifts, preprocessing and dataset I/O.

Bed frame: the mattress is the plane ``z = 0``, the bed's long axis is ``y``
(head towards +y) and the subject's left side points towards +x.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .skeleton import (
    AnatomicalBounds,
    SkeletonSpec,
    default_skeleton,
    derive_bounds,
    load_bounds,
    load_skeleton,
    save_bounds,
    save_skeleton,
)

__all__ = [
    "BodyTemplate",
    "ShiftConfig",
    "Split",
    "default_template",
    "sample_pose",
    "render_cloud",
    "apply_domain_shift",
    "crop_box",
    "voxel_downsample",
    "dedup_frames",
    "generate_dataset",
    "load_split",
    "load_dataset",
    "read_ply",
    "write_ply",
    "read_pose",
    "write_pose",
    "SPLITS",
    "default_shift",
    "dir_checksum",
]

SPLITS = ("source_train", "target_train", "target_val", "target_test")


@dataclass
class BodyTemplate:
    """Canonical body: skeleton, bone lengths, sampling ranges and capsule radii.

    ``rest_dirs`` are unit bone directions of a neutral supine pose,
    ``yaw_range``/``pitch_range`` bound the random deviation per bone (degrees,
    yaw about the bed normal, pitch out of the mattress plane) and
    ``angle_ranges`` bound the cosine between each connected bone pair.
    """

    spec: SkeletonSpec
    lengths: np.ndarray
    rest_dirs: np.ndarray
    yaw_range: np.ndarray
    pitch_range: np.ndarray
    angle_ranges: np.ndarray
    radii: np.ndarray
    root_height: float = 0.11
    jitter: float = 0.03
    body_yaw_deg: float = 10.0
    root_xy_range: float = 0.08

    def __post_init__(self):
        nb = self.spec.n_bones
        self.lengths = np.asarray(self.lengths, dtype=np.float64).reshape(nb)
        dirs = np.asarray(self.rest_dirs, dtype=np.float64).reshape(nb, 3)
        self.rest_dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        self.yaw_range = np.asarray(self.yaw_range, dtype=np.float64).reshape(nb, 2)
        self.pitch_range = np.asarray(self.pitch_range, dtype=np.float64).reshape(nb, 2)
        self.angle_ranges = np.asarray(self.angle_ranges, dtype=np.float64).reshape(-1, 2)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(nb)
        if np.any(self.lengths <= 0):
            raise ValueError("template bone lengths must be positive")
        if np.any(self.radii <= 0):
            raise ValueError("capsule radii must be positive")
        if len(self.angle_ranges) != len(self.spec.connected_pairs):
            raise ValueError("need one angle range per connected pair")
        if np.any(self.angle_ranges < -1) or np.any(self.angle_ranges > 1):
            raise ValueError("angle ranges must lie within [-1, 1]")

    def to_dict(self) -> dict:
        return {
            "lengths": self.lengths.tolist(),
            "rest_dirs": self.rest_dirs.tolist(),
            "yaw_range": self.yaw_range.tolist(),
            "pitch_range": self.pitch_range.tolist(),
            "angle_ranges": self.angle_ranges.tolist(),
            "radii": self.radii.tolist(),
            "root_height": self.root_height,
            "jitter": self.jitter,
            "body_yaw_deg": self.body_yaw_deg,
            "root_xy_range": self.root_xy_range,
        }

    @classmethod
    def from_dict(cls, d: dict, spec: SkeletonSpec) -> "BodyTemplate":
        return cls(spec=spec, **d)


def default_template() -> BodyTemplate:
    spec = default_skeleton()
    up, down, left, right = (0, 1, 0), (0, -1, 0), (1, 0, 0), (-1, 0, 0)
    # per bone: length, rest direction, yaw range, pitch range, radius
    table = [
        (0.26, up, (-8, 8), (-3, 8), 0.13),  # pelvis -> spine
        (0.24, up, (-8, 8), (-3, 8), 0.12),  # spine -> neck
        (0.20, up, (-25, 25), (0, 30), 0.09),  # neck -> head
        (0.10, left, (-5, 5), (-3, 3), 0.09),  # pelvis -> l_hip
        (0.42, down, (-25, 30), (0, 35), 0.07),  # l_hip -> l_knee
        (0.40, down, (-20, 25), (-30, 10), 0.05),  # l_knee -> l_ankle
        (0.10, right, (-5, 5), (-3, 3), 0.09),
        (0.42, down, (-30, 25), (0, 35), 0.07),
        (0.40, down, (-25, 20), (-30, 10), 0.05),
        (0.17, left, (-10, 10), (-5, 10), 0.06),  # neck -> l_shoulder
        (0.28, down, (-20, 110), (-10, 40), 0.045),  # l_shoulder -> l_elbow
        (0.26, down, (-60, 150), (-10, 60), 0.04),  # l_elbow -> l_hand
        (0.17, right, (-10, 10), (-5, 10), 0.06),
        (0.28, down, (-110, 20), (-10, 40), 0.045),
        (0.26, down, (-150, 60), (-10, 60), 0.04),
    ]
    angle_ranges = [
        (0.9, 1.0),  # spine, neck
        (0.7, 1.0),  # neck, head
        (-0.5, 0.5),  # neck, l_shoulder
        (-0.5, 0.5),  # neck, r_shoulder
        (-0.7, 0.5),  # l_hip, l_thigh
        (0.3, 1.0),  # l_knee
        (-0.7, 0.5),
        (0.3, 1.0),
        (-0.95, 0.95),  # l_shoulder, l_upper arm
        (-0.1, 1.0),  # l_elbow
        (-0.95, 0.95),
        (-0.1, 1.0),
    ]
    return BodyTemplate(
        spec=spec,
        lengths=[r[0] for r in table],
        rest_dirs=[r[1] for r in table],
        yaw_range=[r[2] for r in table],
        pitch_range=[r[3] for r in table],
        angle_ranges=angle_ranges,
        radii=[r[4] for r in table],
    )


def _tree_order(spec: SkeletonSpec) -> list[int]:
    order, reached = [], {spec.root}
    frontier = [spec.root]
    while frontier:
        j = frontier.pop(0)
        for b, (p, c) in enumerate(spec.bones):
            if p == j and c not in reached:
                order.append(b)
                reached.add(c)
                frontier.append(c)
    return order


def _direction(rest: np.ndarray, yaw: float, pitch: float) -> np.ndarray:
    # rotate rest direction by yaw about z, then tilt out of the xy plane by pitch
    c, s = math.cos(yaw), math.sin(yaw)
    d = np.array([c * rest[0] - s * rest[1], s * rest[0] + c * rest[1], rest[2]])
    h = math.hypot(d[0], d[1])
    if h < 1e-12:
        return d / np.linalg.norm(d)
    cp, sp = math.cos(pitch), math.sin(pitch)
    return np.array([d[0] / h * cp, d[1] / h * cp, sp])


def sample_pose(template: BodyTemplate, scale: float, rng: np.random.Generator,
                jitter: float | None = None, max_tries: int = 200) -> np.ndarray:
    """Forward-kinematics pose whose connected-pair cosines lie in the template ranges.

    Left/right bones share their length jitter, so paired bones are equally long.
    """
    spec = template.spec
    jitter = template.jitter if jitter is None else jitter
    if np.any(template.angle_ranges[:, 0] > template.angle_ranges[:, 1]):
        raise ValueError("infeasible angle range: lower bound above upper bound")
    nb = spec.n_bones
    factors = 1.0 + rng.uniform(-jitter, jitter, size=nb) if jitter else np.ones(nb)
    for left, right in spec.symmetric_pairs:
        factors[right] = factors[left]
    lengths = template.lengths * scale * factors

    body_yaw = math.radians(rng.uniform(-1, 1) * template.body_yaw_deg)
    joints = np.zeros((spec.n_joints, 3))
    joints[spec.root] = [
        rng.uniform(-1, 1) * template.root_xy_range,
        rng.uniform(-1, 1) * template.root_xy_range,
        template.root_height * scale,
    ]
    dirs = np.zeros((nb, 3))
    incoming = {c: b for b, (_, c) in enumerate(spec.bones)}
    pair_range = {(i, j): template.angle_ranges[n] for n, (i, j) in enumerate(spec.connected_pairs)}
    for b in _tree_order(spec):
        parent_joint, child_joint = spec.bones[b]
        parent_bone = incoming.get(parent_joint)
        checks = [] if parent_bone is None else [(parent_bone, pair_range.get((parent_bone, b)))]
        ylo, yhi = np.radians(template.yaw_range[b])
        plo, phi = np.radians(template.pitch_range[b])
        for _ in range(max_tries):
            d = _direction(template.rest_dirs[b], body_yaw + rng.uniform(ylo, yhi), rng.uniform(plo, phi))
            if all(r is None or r[0] <= float(np.dot(dirs[pb], d)) <= r[1] for pb, r in checks):
                break
        else:
            raise ValueError(f"could not sample bone {b} inside its angle range after {max_tries} tries")
        dirs[b] = d
        joints[child_joint] = joints[parent_joint] + lengths[b] * d
    return joints


def _unit_perp(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def render_cloud(pose, template: BodyTemplate, points_per_bone: int, noise: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Sample points on capsules around the bones, add noise, keep ``z >= 0``.

    A zero-length bone degenerates to a sphere around its joint.
    """
    if points_per_bone < 1:
        raise ValueError("points_per_bone must be >= 1")
    pose = np.asarray(pose, dtype=np.float64)
    chunks = []
    for b, (p, c) in enumerate(template.spec.bones):
        a, e = pose[p], pose[c]
        r = template.radii[b]
        seg = e - a
        length = float(np.linalg.norm(seg))
        n = points_per_bone
        sph = rng.normal(size=(n, 3))
        sph /= np.linalg.norm(sph, axis=1, keepdims=True)
        if length < 1e-9:
            chunks.append(a + r * sph)
            continue
        axis = seg / length
        u, v = _unit_perp(axis)
        # cylinder vs caps proportional to surface area
        on_cyl = rng.uniform(size=n) < length / (length + 2 * r)
        t = rng.uniform(size=(n, 1))
        phi = rng.uniform(0, 2 * np.pi, size=(n, 1))
        cyl = a + t * seg + r * (np.cos(phi) * u + np.sin(phi) * v)
        along = sph @ axis
        end = np.where(along[:, None] >= 0, e, a)
        caps = end + r * sph
        chunks.append(np.where(on_cyl[:, None], cyl, caps))
    pts = np.concatenate(chunks)
    if noise > 0:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    return pts[pts[:, 2] >= 0.0]


@dataclass
class ShiftConfig:
    """Parametric target-domain shift acting on clouds only.

    ``cover``: points are lifted onto a grid-max envelope (cell size
    ``smoothing``) plus ``offset`` and Gaussian ``drape_noise``.
    ``sensor``: Gaussian ``noise`` and a half-space crop keeping
    ``dot(crop_normal, p) >= crop_offset``.
    ``environment``: ``clutter_count`` uniform points in ``clutter_box`` and a
    vertical headboard slab of ``headboard_points`` at ``y = headboard_y``.
    """

    mode: str = "cover"
    offset: float = 0.0
    smoothing: float = 0.0
    drape_noise: float = 0.0
    noise: float = 0.0
    crop_normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    crop_offset: float = -np.inf
    clutter_count: int = 0
    clutter_box: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.5, -1.0, 0.0), (0.9, 1.0, 0.6))
    headboard_points: int = 0
    headboard_y: float = 1.0
    headboard_height: float = 0.4
    headboard_width: float = 0.9

    def __post_init__(self):
        if self.mode not in ("cover", "sensor", "environment"):
            raise ValueError(f"unknown shift mode {self.mode!r}")
        for name in ("offset", "smoothing", "drape_noise", "noise", "clutter_count", "headboard_points"):
            if getattr(self, name) < 0:
                raise ValueError(f"shift parameter {name} must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_normal"] = list(self.crop_normal)
        d["crop_offset"] = float(self.crop_offset) if np.isfinite(self.crop_offset) else None
        d["clutter_box"] = [list(c) for c in self.clutter_box]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftConfig":
        d = dict(d)
        if d.get("crop_offset") is None:
            d["crop_offset"] = -np.inf
        return cls(**d)


def _cover(cloud: np.ndarray, shift: ShiftConfig, rng) -> np.ndarray:
    out = cloud.copy()
    if shift.smoothing > 0 and len(cloud):
        cells = np.floor(cloud[:, :2] / shift.smoothing).astype(np.int64)
        keys, inverse = np.unique(cells, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        cell_max = np.full(len(keys), -np.inf)
        np.maximum.at(cell_max, inverse, cloud[:, 2])
        lookup = {tuple(k): m for k, m in zip(keys.tolist(), cell_max)}
        env = cell_max.copy()
        for n, (cx, cy) in enumerate(keys.tolist()):
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    m = lookup.get((cx + dx, cy + dy))
                    if m is not None and m > env[n]:
                        env[n] = m
        out[:, 2] = env[inverse]
    out[:, 2] += shift.offset
    if shift.drape_noise > 0:
        out[:, 2] += rng.normal(scale=shift.drape_noise, size=len(out))
    return out


def apply_domain_shift(cloud, shift: ShiftConfig | Sequence[ShiftConfig], rng: np.random.Generator) -> np.ndarray:
    """Apply one shift, or several in order, to a cloud."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if not isinstance(shift, ShiftConfig):
        for s in shift:
            cloud = apply_domain_shift(cloud, s, rng)
        return cloud
    if shift.mode == "cover":
        return _cover(cloud, shift, rng)
    if shift.mode == "sensor":
        out = cloud
        if shift.noise > 0:
            out = out + rng.normal(scale=shift.noise, size=out.shape)
        keep = out @ np.asarray(shift.crop_normal, dtype=np.float64) >= shift.crop_offset
        return out[keep]
    lo, hi = (np.asarray(c, dtype=np.float64) for c in shift.clutter_box)
    extra = [cloud, lo + rng.uniform(size=(shift.clutter_count, 3)) * (hi - lo)]
    if shift.headboard_points:
        n = shift.headboard_points
        slab = np.column_stack([
            rng.uniform(-0.5, 0.5, n) * shift.headboard_width,
            np.full(n, shift.headboard_y) + rng.uniform(0.0, 0.03, n),
            rng.uniform(0.0, shift.headboard_height, n),
        ])
        extra.append(slab)
    return np.concatenate(extra)


def crop_box(cloud, lo, hi) -> np.ndarray:
    """Keep points inside the closed axis-aligned box ``[lo, hi]``."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("crop box has min corner above max corner")
    keep = np.all((cloud >= lo) & (cloud <= hi), axis=1)
    return cloud[keep]


def voxel_downsample(cloud, edge: float) -> np.ndarray:
    """Replace the points of every occupied voxel (grid anchored at the origin) by their centroid.

    Output rows are sorted by voxel index.
    """
    if edge <= 0:
        raise ValueError("voxel edge must be positive")
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if not len(cloud):
        return cloud.copy()
    keys = np.floor(cloud / edge).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud)
    return sums / counts[:, None]


def dedup_frames(poses, threshold: float) -> list[int]:
    """Indices of frames where some joint moved more than ``threshold`` since the last kept frame."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    if len(poses) == 0:
        raise ValueError("no frames to deduplicate")
    poses = np.asarray(poses, dtype=np.float64)
    kept = [0]
    for t in range(1, len(poses)):
        disp = np.linalg.norm(poses[t] - poses[kept[-1]], axis=-1).max()
        if disp > threshold:
            kept.append(t)
    return kept


# ---------------------------------------------------------------- file formats


def write_ply(path, cloud) -> None:
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in cloud.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    for i, line in enumerate(text):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line.strip() == "end_header":
            body = text[i + 1:i + 1 + (n or 0)]
            break
    else:
        raise ValueError(f"{path}: missing end_header")
    if n is None or len(body) != n:
        raise ValueError(f"{path}: vertex count does not match header")
    if n == 0:
        return np.zeros((0, 3))
    return np.array([[float(v) for v in line.split()[:3]] for line in body], dtype=np.float64)


def write_pose(path, pose, spec: SkeletonSpec) -> None:
    pose = np.asarray(pose, dtype=np.float64)
    lines = [f"{name} {x!r} {y!r} {z!r}" for name, (x, y, z) in zip(spec.joint_names, pose.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pose(path, spec: SkeletonSpec | None = None) -> np.ndarray:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    if spec is not None:
        names = [r[0] for r in rows]
        if names != list(spec.joint_names):
            raise ValueError(f"{path}: joint names do not match the skeleton")
    return np.array([[float(v) for v in r[1:4]] for r in rows], dtype=np.float64)


@dataclass
class Split:
    name: str
    clouds: list
    poses: np.ndarray | None
    subjects: np.ndarray | None = None

    def __len__(self):
        return len(self.clouds)


def _split_dir(root: Path, name: str) -> Path:
    return root / name


def generate_dataset(out_dir, template: BodyTemplate | None = None,
                     counts: dict | Sequence[int] = (400, 400, 50, 100),
                     target_shift: ShiftConfig | Sequence[ShiftConfig] | None = None,
                     seed: int = 0, points_per_bone: int = 40, noise: float = 0.005,
                     subjects_per_split: int = 10, scale_range: tuple[float, float] = (0.9, 1.1),
                     sym_tol: float = 0.0) -> Path:
    """Write the four splits, skeleton, source-derived bounds and a manifest to ``out_dir``.

    Every split gets its own subjects (body scale factors); target splits carry
    ``target_shift``.  Returns the manifest path.
    """
    template = default_template() if template is None else template
    if target_shift is None:
        target_shift = default_shift()
    shifts = [target_shift] if isinstance(target_shift, ShiftConfig) else list(target_shift)
    if not isinstance(counts, dict):
        counts = dict(zip(SPLITS, counts))
    if set(counts) != set(SPLITS) or any(int(c) < 1 for c in counts.values()):
        raise ValueError(f"counts must give a positive size for each of {SPLITS}")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    spec = template.spec
    ss = np.random.SeedSequence(seed)
    split_seeds = ss.spawn(len(SPLITS))
    source_poses = None
    for name, sseed in zip(SPLITS, split_seeds):
        rng = np.random.default_rng(sseed)
        scales = rng.uniform(*scale_range, size=subjects_per_split)
        d = _split_dir(root, name)
        d.mkdir(exist_ok=True)
        poses = []
        subj_lines = []
        for i in range(int(counts[name])):
            subj = int(rng.integers(subjects_per_split))
            pose = sample_pose(template, float(scales[subj]), rng)
            cloud = render_cloud(pose, template, points_per_bone, noise, rng)
            if name != "source_train":
                cloud = apply_domain_shift(cloud, shifts, rng)
            write_ply(d / f"{i:06d}.ply", cloud)
            write_pose(d / f"{i:06d}.pose.txt", pose, spec)
            poses.append(pose)
            subj_lines.append(f"{i:06d} {subj} {float(scales[subj])!r}")
        (d / "subjects.txt").write_text("\n".join(subj_lines) + "\n")
        if name == "source_train":
            source_poses = np.stack(poses)
    save_skeleton(spec, root / "skeleton.yaml")
    save_bounds(derive_bounds(source_poses, spec, sym_tol), root / "bounds.yaml")
    manifest = {
        "skeleton": "skeleton.yaml",
        "bounds": "bounds.yaml",
        "bounds_from": "source_train",
        "seed": int(seed),
        "counts": {k: int(counts[k]) for k in SPLITS},
        "points_per_bone": int(points_per_bone),
        "noise": float(noise),
        "subjects_per_split": int(subjects_per_split),
        "scale_range": [float(v) for v in scale_range],
        "target_shift": [s.to_dict() for s in shifts],
        "template": template.to_dict(),
        "splits": {k: k for k in SPLITS},
    }
    path = root / "manifest.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)
    return path


def default_shift() -> list[ShiftConfig]:
    """Target shift used by the benchmark: a draped cover plus bedside clutter and a headboard."""
    return [
        ShiftConfig(mode="cover", offset=0.03, smoothing=0.08, drape_noise=0.01),
        ShiftConfig(mode="environment", clutter_count=60, clutter_box=((0.55, -1.0, 0.0), (1.0, 1.0, 0.35)),
                    headboard_points=80, headboard_y=1.0, headboard_height=0.5, headboard_width=0.9),
    ]


def load_split(split_dir, spec: SkeletonSpec | None = None, labels: bool = True) -> Split:
    d = Path(split_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"split directory not found: {d}")
    clouds_paths = sorted(d.glob("*.ply"))
    clouds = [read_ply(p) for p in clouds_paths]
    poses = None
    if labels:
        pose_paths = [p.with_name(p.name[:-4] + ".pose.txt") for p in clouds_paths]
        if pose_paths and all(p.exists() for p in pose_paths):
            poses = np.stack([read_pose(p, spec) for p in pose_paths])
    subjects = None
    if (d / "subjects.txt").exists():
        subjects = np.array([int(l.split()[1]) for l in (d / "subjects.txt").read_text().splitlines() if l])
    return Split(d.name, clouds, poses, subjects)


def load_dataset(manifest_path) -> tuple[dict, SkeletonSpec, AnatomicalBounds, dict[str, Split]]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    with open(manifest_path) as fh:
        manifest = yaml.safe_load(fh)
    spec = load_skeleton(root / manifest["skeleton"])
    bounds = load_bounds(root / manifest["bounds"])
    splits = {k: load_split(root / v, spec) for k, v in manifest["splits"].items()}
    return manifest, spec, bounds, splits


def dir_checksum(path) -> str:
    """SHA-256 over relative file names and contents of a directory tree."""
    h = hashlib.sha256()
    root = Path(path)
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()
