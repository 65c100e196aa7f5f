"""Source training and anatomy-guided Mean Teacher adaptation (UDA and SFDA)."""
from __future__ import annotations

import json
import logging
import math
import tempfile
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import anatomy
from .model import (
    AdamState,
    ModelConfig,
    ModelState,
    PoseNet,
    adam_step,
    backward,
    forward,
    select_mask,
)
from .skeleton import AnatomicalBounds, SkeletonSpec

__all__ = [
    "TrainConfig",
    "AugmentationRecord",
    "TrainingDiverged",
    "task_loss",
    "consistency_loss",
    "ema_update",
    "ramp_weight",
    "augment",
    "reverse_pose",
    "apply_record",
    "rotation_z",
    "consistency_filter_baseline",
    "init_state",
    "train_source",
    "adapt_uda",
    "adapt_sfda",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 1.0
    ramp_epochs: int = 40
    ramp_formula: str = "printed"  # or "mean_teacher": exp(-5 (1 - x)^2)
    ema_momentum: float | None = None  # None -> 0.99 (UDA/source) or 0.9996 (SFDA)
    epochs: int | None = None  # None -> 100 (UDA/source) or 80 (SFDA)
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_source: int = 8
    batch_target: int = 8
    subsample_points: int = 2048
    filter_mode: str = "two_of_three"
    mask_mode: str = "feature_extractor_only"  # parameters receiving L_anat in UDA
    sfda_mask_mode: str = "freeze_heads"
    penalty: str = "l1"
    rotation_deg: float = 15.0
    translation: float = 0.05
    seed: int = 0
    enc_dims: tuple[int, ...] = (64, 128)
    dec_hidden: int = 128

    def __post_init__(self):
        self.enc_dims = tuple(int(d) for d in self.enc_dims)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.ema_momentum is not None and not 0 <= self.ema_momentum < 1:
            raise ValueError("ema_momentum must lie in [0, 1)")
        if self.ramp_epochs < 1:
            raise ValueError("ramp_epochs must be >= 1")
        for name in ("batch_source", "batch_target", "subsample_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay nonnegative")
        if self.filter_mode not in anatomy.FILTER_MODES:
            raise ValueError(f"unknown filter_mode {self.filter_mode!r}")
        if self.penalty not in anatomy.PENALTY_KINDS:
            raise ValueError(f"unknown penalty {self.penalty!r}")
        if self.ramp_formula not in ("printed", "mean_teacher"):
            raise ValueError(f"unknown ramp_formula {self.ramp_formula!r}")

    def resolved(self, stage: str) -> "TrainConfig":
        """Fill stage-dependent defaults (momentum, epochs)."""
        sfda = stage == "sfda"
        return replace(
            self,
            ema_momentum=self.ema_momentum if self.ema_momentum is not None else (0.9996 if sfda else 0.99),
            epochs=self.epochs if self.epochs is not None else (80 if sfda else 100),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_dims"] = list(self.enc_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown training config field(s): {', '.join(unknown)}")
        return cls(**d)

    def model_config(self, n_joints: int) -> ModelConfig:
        return ModelConfig(n_joints=n_joints, enc_dims=self.enc_dims, dec_hidden=self.dec_hidden)


class TrainingDiverged(FloatingPointError):
    """A loss became non-finite; ``batch_path`` holds the offending batch."""

    def __init__(self, msg: str, batch_path: str | None = None):
        super().__init__(msg if batch_path is None else f"{msg} (batch saved to {batch_path})")
        self.batch_path = batch_path


class AugmentationRecord(NamedTuple):
    angle: float
    translation: np.ndarray
    indices: np.ndarray


# ---------------------------------------------------------------- losses


def task_loss(pred, gt):
    """Per-sample L1 error ``|Y - Y_hat|_1 / K`` and its gradient w.r.t. ``pred``.

    Batched input ``(B, K, 3)`` gives per-sample values ``(B,)``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    k = pred.shape[-2]
    diff = pred - gt
    value = np.abs(diff).sum(axis=(-1, -2)) / k
    grad = np.sign(diff) / k
    return (float(value) if value.ndim == 0 else value), grad


def consistency_loss(student_pose, teacher_pose, accepted):
    """Filtered L1 consistency; the teacher side is treated as a constant."""
    student_pose = np.asarray(student_pose, dtype=np.float64)
    teacher_pose = np.asarray(teacher_pose, dtype=np.float64)
    value, grad = task_loss(student_pose, teacher_pose)
    acc = np.asarray(accepted, dtype=np.float64)
    value = value * acc
    grad = grad * acc.reshape(acc.shape + (1, 1))
    return (float(value) if np.ndim(value) == 0 else value), grad


def ema_update(teacher: PoseNet, student: PoseNet, momentum: float, buffers: bool = True) -> PoseNet:
    """``teacher <- mu * teacher + (1 - mu) * student`` in place (running stats too)."""
    teacher.check_compatible(student)
    if not 0 <= momentum <= 1:
        raise ValueError("momentum must lie in [0, 1]")
    a = 1.0 - momentum
    # increment form keeps teacher == student an exact fixed point
    for k, p in student.params.items():
        teacher.params[k] = teacher.params[k] + a * (p - teacher.params[k])
    if buffers:
        for k, b in student.buffers.items():
            teacher.buffers[k] = teacher.buffers[k] + a * (b - teacher.buffers[k])
    return teacher


def ramp_weight(epoch: float, ramp_epochs: int, formula: str = "printed") -> float:
    """Ramp-up factor for the unsupervised losses, ``exp(-5 (1 - min(t/T, 1)^2))``.

    ``formula="mean_teacher"`` uses ``exp(-5 (1 - x)^2)`` instead; both run
    from ``e^-5`` to 1.
    """
    if ramp_epochs < 1:
        raise ValueError("ramp_epochs must be >= 1")
    x = min(max(float(epoch), 0.0) / ramp_epochs, 1.0)
    if formula == "printed":
        return math.exp(-5.0 * (1.0 - x * x))
    if formula == "mean_teacher":
        return math.exp(-5.0 * (1.0 - x) ** 2)
    raise ValueError(f"unknown ramp formula {formula!r}")


# ---------------------------------------------------------------- augmentation


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment(cloud, config: TrainConfig, rng: np.random.Generator, n_points: int | None = None):
    """Random z-rotation, translation and point subsampling of one cloud.

    Clouds with fewer points than requested are subsampled with replacement.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    n = len(cloud)
    if n < 1:
        raise ValueError("cannot augment an empty cloud")
    target = config.subsample_points if n_points is None else n_points
    idx = rng.choice(n, size=target, replace=n < target)
    angle = rng.uniform(-1.0, 1.0) * math.radians(config.rotation_deg)
    t = rng.uniform(-1.0, 1.0, size=3) * config.translation
    record = AugmentationRecord(angle, t, idx)
    return apply_record(cloud, record), record


def apply_record(points, record: AugmentationRecord) -> np.ndarray:
    """Select ``record.indices`` (if any) and apply the rigid transform ``R p + t``."""
    pts = np.asarray(points, dtype=np.float64)
    if record.indices is not None:
        pts = pts[record.indices]
    return pts @ rotation_z(record.angle).T + record.translation


def reverse_pose(pose, record: AugmentationRecord) -> np.ndarray:
    """Map a prediction made on an augmented cloud back to the original frame."""
    pose = np.asarray(pose, dtype=np.float64)
    return (pose - record.translation) @ rotation_z(record.angle)


def _forward_pose(pose, record: AugmentationRecord) -> np.ndarray:
    return apply_record(pose, record._replace(indices=None))


def _reverse_grad(grad, record: AugmentationRecord) -> np.ndarray:
    # d reverse / d pose = R^T, so the pullback is grad @ R^T
    return np.asarray(grad) @ rotation_z(record.angle).T


def consistency_filter_baseline(student_views, teacher_views) -> bool:
    """Accept the teacher if its two reversed predictions agree more than the student's."""
    s = np.abs(np.asarray(student_views[0]) - np.asarray(student_views[1])).sum()
    t = np.abs(np.asarray(teacher_views[0]) - np.asarray(teacher_views[1])).sum()
    return bool(t < s)


# ---------------------------------------------------------------- loop helpers


class _IndexStream:
    """Endless epoch-wise permutations of ``range(n)``."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.buf = np.empty(0, dtype=np.intp)

    def take(self, k: int) -> np.ndarray:
        while len(self.buf) < k:
            self.buf = np.concatenate([self.buf, self.rng.permutation(self.n)])
        out, self.buf = self.buf[:k], self.buf[k:]
        return out


def _augment_batch(clouds, idx, config, rng):
    views, records = [], []
    for i in idx:
        v, r = augment(clouds[i], config, rng)
        views.append(v)
        records.append(r)
    return np.stack(views), records


def _reverse_batch(poses, records):
    return np.stack([reverse_pose(p, r) for p, r in zip(poses, records)])


def _pullback_batch(grads, records):
    return np.stack([_reverse_grad(g, r) for g, r in zip(grads, records)])


def _add(acc: dict, other: dict) -> dict:
    for k, v in other.items():
        acc[k] = acc[k] + v
    return acc


class TargetTerms(NamedTuple):
    anat: np.ndarray  # per-sample L_anat
    con: np.ndarray  # per-sample filtered L_con
    accepted: np.ndarray
    grad_anat: np.ndarray  # d(mean L_anat)/d(student poses in augmented frame)
    grad_con: np.ndarray


def target_terms(student_aug_poses, student_records, teacher_rev, spec, bounds, config,
                 accepted=None) -> TargetTerms:
    """Anatomical and consistency terms on a target batch, with pose gradients.

    ``student_aug_poses`` are predictions on the student's augmented views;
    ``teacher_rev`` are teacher pseudo labels already reversed to the original
    frame.  Gradients are of the batch means and expressed in the augmented
    frame so they can be fed straight into :func:`model.backward`.
    """
    b = len(student_aug_poses)
    s_rev = _reverse_batch(student_aug_poses, student_records)
    la = anatomy.anat_loss(s_rev, spec, bounds, kind=config.penalty)
    if accepted is None:
        accepted = np.asarray(
            anatomy.filter_variant(teacher_rev, s_rev, spec, bounds, config.filter_mode, config.penalty)
        ).reshape(b)
    lc, gc = consistency_loss(s_rev, teacher_rev, accepted)
    return TargetTerms(
        np.asarray(la.value).reshape(b),
        np.asarray(lc).reshape(b),
        np.asarray(accepted, dtype=bool).reshape(b),
        _pullback_batch(la.grad / b, student_records),
        _pullback_batch(gc / b, student_records),
    )


def _check_finite(values: dict, batch: dict, fail_dir) -> None:
    bad = [k for k, v in values.items() if not np.isfinite(v)]
    if not bad:
        return
    fail_dir = Path(fail_dir) if fail_dir is not None else Path(tempfile.mkdtemp(prefix="anatomy_da_"))
    fail_dir.mkdir(parents=True, exist_ok=True)
    path = fail_dir / "diverged_batch.npz"
    np.savez(path, **batch)
    raise TrainingDiverged(f"non-finite loss term(s): {', '.join(bad)}", str(path))


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(seed_seq, state: dict | None) -> np.random.Generator:
    rng = np.random.default_rng(seed_seq)
    if state is not None:
        rng.bit_generator.state = state
    return rng


def init_state(config: TrainConfig, n_joints: int, stage: str = "source") -> ModelState:
    """Fresh student and a differently-seeded teacher."""
    mcfg = config.model_config(n_joints)
    student = PoseNet.init(mcfg, seed=config.seed)
    teacher = PoseNet.init(mcfg, seed=config.seed + 1_000_003)
    return ModelState(student, teacher, AdamState.zeros_like(student), 0, config.seed,
                      {"stage": stage, "config": config.to_dict()})


def _log_epoch(record: dict, log_path, callback):
    line = json.dumps(record, sort_keys=True)
    log.info(line)
    if log_path is not None:
        with open(log_path, "a") as fh:
            fh.write(line + "\n")
    if callback is not None:
        callback(record)


def _check_dataset(clouds, poses=None, name="dataset"):
    if len(clouds) == 0:
        raise ValueError(f"{name} is empty")
    if poses is not None and len(poses) != len(clouds):
        raise ValueError(f"{name}: {len(clouds)} clouds but {len(poses)} poses")


# ---------------------------------------------------------------- training loops


def train_source(clouds: Sequence[np.ndarray], poses, config: TrainConfig, *,
                 state: ModelState | None = None, log_path=None, fail_dir=None,
                 callback: Callable[[dict], None] | None = None) -> ModelState:
    """Supervised training on labeled clouds; the teacher tracks the student by EMA."""
    _check_dataset(clouds, poses, "source dataset")
    poses = np.asarray(poses, dtype=np.float64)
    cfg = config.resolved("source")
    if state is None:
        state = init_state(cfg, poses.shape[1], "source")
    else:
        state = state.copy()
    rng_src = _restore_rng([cfg.seed, 1], state.meta.get("rng_source"))
    src_stream = _IndexStream(len(clouds), rng_src)
    if "src_buffer" in state.meta:
        src_stream.buf = np.asarray(state.meta["src_buffer"], dtype=np.intp)
    iters = math.ceil(len(clouds) / cfg.batch_source)
    all_mask = select_mask(state.student, "all")
    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        tot = 0.0
        for _ in range(iters):
            idx = src_stream.take(cfg.batch_source)
            xs, recs = _augment_batch(clouds, idx, cfg, rng_src)
            ys = np.stack([_forward_pose(poses[i], r) for i, r in zip(idx, recs)])
            _, pred, cache = forward(state.student, xs, training=True)
            lt, gt = task_loss(pred, ys)
            lt_mean = float(lt.mean())
            _check_finite({"task": lt_mean}, {"clouds": xs, "poses": ys}, fail_dir)
            grads = backward(state.student, cache, gt / len(idx), all_mask)
            adam_step(state.student, grads, state.optimizer, cfg.lr, cfg.weight_decay)
            ema_update(state.teacher, state.student, cfg.ema_momentum)
            tot += lt_mean
        state.epoch = epoch + 1
        _log_epoch({"stage": "source", "epoch": state.epoch, "task": tot / iters,
                    "wall": round(time.perf_counter() - t0, 3)}, log_path, callback)
    state.meta.update({"stage": "source", "config": cfg.to_dict(), "rng_source": _rng_state(rng_src),
                       "src_buffer": src_stream.buf.tolist()})
    return state


def adapt_uda(src_clouds, src_poses, tgt_clouds, spec: SkeletonSpec, bounds: AnatomicalBounds,
              config: TrainConfig, *, state: ModelState | None = None, log_path=None,
              fail_dir=None, callback: Callable[[dict], None] | None = None) -> ModelState:
    """Joint source/target training with ramped anatomical and filtered consistency losses.

    ``L_anat`` gradients reach only the parameters selected by
    ``config.mask_mode``; the task and consistency losses update everything.
    Passing a ``state`` from an interrupted UDA run resumes it.
    """
    _check_dataset(src_clouds, src_poses, "source dataset")
    _check_dataset(tgt_clouds, None, "target dataset")
    bounds.check_spec(spec)
    src_poses = np.asarray(src_poses, dtype=np.float64)
    cfg = config.resolved("uda")
    if state is None or state.meta.get("stage") != "uda":
        state = init_state(cfg, spec.n_joints, "uda") if state is None else state.copy()
        state.meta = {"stage": "uda", "config": cfg.to_dict()}
        state.epoch = 0
    else:
        state = state.copy()
    meta = state.meta
    rng_src = _restore_rng([cfg.seed, 1], meta.get("rng_source"))
    rng_tgt = _restore_rng([cfg.seed, 2], meta.get("rng_target"))
    src_stream = _IndexStream(len(src_clouds), rng_src)
    tgt_stream = _IndexStream(len(tgt_clouds), rng_tgt)
    if "src_buffer" in meta:
        src_stream.buf = np.asarray(meta["src_buffer"], dtype=np.intp)
        tgt_stream.buf = np.asarray(meta["tgt_buffer"], dtype=np.intp)
    iters = max(math.ceil(len(src_clouds) / cfg.batch_source), math.ceil(len(tgt_clouds) / cfg.batch_target))
    all_mask = select_mask(state.student, "all")
    anat_mask = select_mask(state.student, cfg.mask_mode)

    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        ramp = ramp_weight(epoch, cfg.ramp_epochs, cfg.ramp_formula)
        sums = {"task": 0.0, "anat": 0.0, "con": 0.0}
        n_acc = n_tgt = 0
        for _ in range(iters):
            s_idx = src_stream.take(cfg.batch_source)
            xs, s_recs = _augment_batch(src_clouds, s_idx, cfg, rng_src)
            ys = np.stack([_forward_pose(src_poses[i], r) for i, r in zip(s_idx, s_recs)])
            _, pred_s, cache_s = forward(state.student, xs, training=True)
            lt, gt = task_loss(pred_s, ys)
            grads = backward(state.student, cache_s, gt / len(s_idx), all_mask)

            t_idx = tgt_stream.take(cfg.batch_target)
            xt, t_recs = _augment_batch(tgt_clouds, t_idx, cfg, rng_tgt)
            xt_teacher, tt_recs = _augment_batch(tgt_clouds, t_idx, cfg, rng_tgt)
            _, pred_t, cache_t = forward(state.student, xt, training=True)
            _, pred_teacher, _ = forward(state.teacher, xt_teacher, training=False)
            teacher_rev = _reverse_batch(pred_teacher, tt_recs)
            accepted = None
            if cfg.filter_mode == "consistency":
                accepted = _consistency_accept(state, tgt_clouds, t_idx, pred_t, t_recs,
                                               teacher_rev, cfg, rng_tgt)
            terms = target_terms(pred_t, t_recs, teacher_rev, spec, bounds, cfg, accepted)
            values = {"task": float(lt.mean()), "anat": float(terms.anat.mean()), "con": float(terms.con.mean())}
            _check_finite(values, {"source_clouds": xs, "source_poses": ys, "target_clouds": xt,
                                   "teacher_clouds": xt_teacher}, fail_dir)
            w_con = ramp * cfg.lambda2
            w_anat = ramp * cfg.lambda1
            if w_con:
                _add(grads, backward(state.student, cache_t, w_con * terms.grad_con, all_mask))
            if w_anat:
                _add(grads, backward(state.student, cache_t, w_anat * terms.grad_anat, anat_mask))
            adam_step(state.student, grads, state.optimizer, cfg.lr, cfg.weight_decay)
            ema_update(state.teacher, state.student, cfg.ema_momentum)
            for k in sums:
                sums[k] += values[k]
            n_acc += int(terms.accepted.sum())
            n_tgt += len(t_idx)
        state.epoch = epoch + 1
        _log_epoch({"stage": "uda", "epoch": state.epoch, "ramp": ramp,
                    **{k: v / iters for k, v in sums.items()},
                    "accept_rate": n_acc / n_tgt, "wall": round(time.perf_counter() - t0, 3)},
                   log_path, callback)
    meta.update({"config": cfg.to_dict(), "rng_source": _rng_state(rng_src), "rng_target": _rng_state(rng_tgt),
                 "src_buffer": src_stream.buf.tolist(), "tgt_buffer": tgt_stream.buf.tolist()})
    return state


def _consistency_accept(state, clouds, idx, pred_student, s_recs, teacher_rev, cfg, rng):
    """Second augmented view through both networks (inference mode) for the consistency filter."""
    xs2, s2 = _augment_batch(clouds, idx, cfg, rng)
    xt2, t2 = _augment_batch(clouds, idx, cfg, rng)
    ps2 = _reverse_batch(forward(state.student, xs2, training=False)[1], s2)
    pt2 = _reverse_batch(forward(state.teacher, xt2, training=False)[1], t2)
    ps1 = _reverse_batch(pred_student, s_recs)
    return np.array([
        consistency_filter_baseline((ps1[b], ps2[b]), (teacher_rev[b], pt2[b])) for b in range(len(idx))
    ])


def adapt_sfda(pretrained: ModelState, tgt_clouds, spec: SkeletonSpec, bounds: AnatomicalBounds,
               config: TrainConfig, *, log_path=None, fail_dir=None,
               callback: Callable[[dict], None] | None = None) -> ModelState:
    """Source-free adaptation of a pretrained model on unlabeled target clouds.

    Student and teacher both start from the pretrained student; only the
    parameters allowed by ``config.sfda_mask_mode`` change.  Passing a state
    from an interrupted SFDA run resumes it.
    """
    _check_dataset(tgt_clouds, None, "target dataset")
    bounds.check_spec(spec)
    if pretrained.student.config.n_joints != spec.n_joints:
        raise ValueError(
            f"checkpoint predicts {pretrained.student.config.n_joints} joints, skeleton has {spec.n_joints}"
        )
    cfg = config.resolved("sfda")
    resuming = pretrained.meta.get("stage") == "sfda"
    if not resuming and cfg.epochs == 0:
        return pretrained.copy()
    if resuming:
        state = pretrained.copy()
    else:
        student = pretrained.student.copy()
        state = ModelState(student, student.copy(), AdamState.zeros_like(student), 0, cfg.seed,
                           {"stage": "sfda", "config": cfg.to_dict()})
    meta = state.meta
    rng = _restore_rng([cfg.seed, 3], meta.get("rng_target"))
    stream = _IndexStream(len(tgt_clouds), rng)
    if "tgt_buffer" in meta:
        stream.buf = np.asarray(meta["tgt_buffer"], dtype=np.intp)
    iters = math.ceil(len(tgt_clouds) / cfg.batch_target)
    mask = select_mask(state.student, cfg.sfda_mask_mode)
    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        sums = {"anat": 0.0, "con": 0.0}
        n_acc = n_tgt = 0
        for _ in range(iters):
            t_idx = stream.take(cfg.batch_target)
            xt, t_recs = _augment_batch(tgt_clouds, t_idx, cfg, rng)
            xt_teacher, tt_recs = _augment_batch(tgt_clouds, t_idx, cfg, rng)
            _, pred_t, cache_t = forward(state.student, xt, training=True)
            _, pred_teacher, _ = forward(state.teacher, xt_teacher, training=False)
            teacher_rev = _reverse_batch(pred_teacher, tt_recs)
            accepted = None
            if cfg.filter_mode == "consistency":
                accepted = _consistency_accept(state, tgt_clouds, t_idx, pred_t, t_recs,
                                               teacher_rev, cfg, rng)
            terms = target_terms(pred_t, t_recs, teacher_rev, spec, bounds, cfg, accepted)
            values = {"anat": float(terms.anat.mean()), "con": float(terms.con.mean())}
            _check_finite(values, {"target_clouds": xt, "teacher_clouds": xt_teacher}, fail_dir)
            upstream = cfg.lambda1 * terms.grad_anat + cfg.lambda2 * terms.grad_con
            grads = backward(state.student, cache_t, upstream, mask)
            adam_step(state.student, grads, state.optimizer, cfg.lr, cfg.weight_decay, trainable=mask)
            ema_update(state.teacher, state.student, cfg.ema_momentum)
            for k in sums:
                sums[k] += values[k]
            n_acc += int(terms.accepted.sum())
            n_tgt += len(t_idx)
        state.epoch = epoch + 1
        _log_epoch({"stage": "sfda", "epoch": state.epoch, **{k: v / iters for k, v in sums.items()},
                    "accept_rate": n_acc / n_tgt, "wall": round(time.perf_counter() - t0, 3)},
                   log_path, callback)
    meta.update({"config": cfg.to_dict(), "rng_target": _rng_state(rng), "tgt_buffer": stream.buf.tolist()})
    return state
