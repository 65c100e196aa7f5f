"""scikit-learn style wrapper around source training, adaptation and inference.

Inputs are lists of point clouds (each ``(N_i, 3)``, sizes may differ) and
pose arrays ``(S, K, 3)``.  ``fit`` trains on labeled source data, ``adapt``
runs UDA or SFDA on unlabeled target clouds, ``predict`` returns poses.
"""
from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import trainer
from .evaluation import mpjpe
from .model import ModelState, load_checkpoint, predict, save_checkpoint
from .skeleton import AnatomicalBounds, SkeletonSpec, default_skeleton, derive_bounds

__all__ = ["AnatomyPoseEstimator", "check_clouds", "check_poses"]

_CONFIG_FIELDS = tuple(f.name for f in fields(trainer.TrainConfig))


def check_clouds(X, name: str = "X") -> list[np.ndarray]:
    """Validate a collection of point clouds and return float64 ``(N_i, 3)`` arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    try:
        clouds = [np.asarray(c, dtype=np.float64) for c in X]
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{name} must be a sequence of (N, 3) point arrays") from exc
    if not clouds:
        raise ValueError(f"{name} is empty")
    for i, c in enumerate(clouds):
        if c.ndim != 2 or c.shape[1] != 3:
            raise ValueError(f"{name}[{i}] has shape {c.shape}, expected (N, 3)")
        if len(c) == 0:
            raise ValueError(f"{name}[{i}] contains no points")
        if not np.all(np.isfinite(c)):
            raise ValueError(f"{name}[{i}] contains non-finite coordinates")
    return clouds


def check_poses(y, n_samples: int, n_joints: int, name: str = "y") -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n_samples, n_joints, 3):
        raise ValueError(f"{name} has shape {y.shape}, expected ({n_samples}, {n_joints}, 3)")
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return y


class AnatomyPoseEstimator(BaseEstimator):
    """Point-cloud pose estimator with anatomy-guided domain adaptation.

    Hyperparameters mirror :class:`trainer.TrainConfig`.  ``skeleton`` defaults
    to the bundled 16-joint skeleton; ``bounds`` default to bounds derived from
    the poses passed to :meth:`fit`.
    """

    def __init__(self, skeleton: SkeletonSpec | None = None, bounds: AnatomicalBounds | None = None,
                 lambda1=0.1, lambda2=1.0, ramp_epochs=40, ramp_formula="printed", ema_momentum=None,
                 epochs=None, lr=1e-3, weight_decay=1e-5, batch_source=8, batch_target=8,
                 subsample_points=2048, filter_mode="two_of_three", mask_mode="feature_extractor_only",
                 sfda_mask_mode="freeze_heads", penalty="l1", rotation_deg=15.0, translation=0.05,
                 seed=0, enc_dims=(64, 128), dec_hidden=128, use_teacher=False):
        self.skeleton = skeleton
        self.bounds = bounds
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.ramp_epochs = ramp_epochs
        self.ramp_formula = ramp_formula
        self.ema_momentum = ema_momentum
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_source = batch_source
        self.batch_target = batch_target
        self.subsample_points = subsample_points
        self.filter_mode = filter_mode
        self.mask_mode = mask_mode
        self.sfda_mask_mode = sfda_mask_mode
        self.penalty = penalty
        self.rotation_deg = rotation_deg
        self.translation = translation
        self.seed = seed
        self.enc_dims = enc_dims
        self.dec_hidden = dec_hidden
        self.use_teacher = use_teacher

    def train_config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig(**{k: getattr(self, k) for k in _CONFIG_FIELDS})

    def _spec(self) -> SkeletonSpec:
        return default_skeleton() if self.skeleton is None else self.skeleton

    def fit(self, X, y):
        """Supervised training on labeled (source) clouds."""
        spec = self._spec()
        clouds = check_clouds(X)
        poses = check_poses(y, len(clouds), spec.n_joints)
        cfg = self.train_config()
        self.skeleton_ = spec
        self.bounds_ = derive_bounds(poses, spec) if self.bounds is None else self.bounds
        self.bounds_.check_spec(spec)
        self.state_ = trainer.train_source(clouds, poses, cfg)
        self.history_ = [("source", self.state_.epoch)]
        return self

    def adapt(self, X_target, mode: str = "uda", X_source=None, y_source=None):
        """Adapt the fitted model to unlabeled target clouds.

        ``mode="uda"`` trains jointly on labeled source data (required) and the
        target clouds, starting from scratch as the method prescribes;
        ``mode="sfda"`` starts from the fitted model and uses target clouds only.
        """
        check_is_fitted(self, "state_")
        target = check_clouds(X_target, "X_target")
        cfg = self.train_config()
        spec, bounds = self.skeleton_, self.bounds_
        if mode == "uda":
            if X_source is None or y_source is None:
                raise ValueError("UDA needs labeled source data (X_source, y_source)")
            src = check_clouds(X_source, "X_source")
            ys = check_poses(y_source, len(src), spec.n_joints, "y_source")
            self.state_ = trainer.adapt_uda(src, ys, target, spec, bounds, cfg)
        elif mode == "sfda":
            self.state_ = trainer.adapt_sfda(self.state_, target, spec, bounds, cfg)
        else:
            raise ValueError(f"unknown adaptation mode {mode!r}; expected 'uda' or 'sfda'")
        self.history_.append((mode, self.state_.epoch))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        net = self.state_.teacher if self.use_teacher else self.state_.student
        return predict(net, check_clouds(X))

    def transform(self, X) -> np.ndarray:
        """Predicted poses flattened to ``(S, 3K)`` feature rows."""
        out = self.predict(X)
        return out.reshape(len(out), -1)

    def score(self, X, y) -> float:
        """Negative MPJPE in meters (greater is better)."""
        pred = self.predict(X)
        return -mpjpe(pred, check_poses(y, len(pred), self.skeleton_.n_joints))[1]

    def save(self, path) -> None:
        check_is_fitted(self, "state_")
        save_checkpoint(self.state_, path)

    @classmethod
    def from_checkpoint(cls, path, skeleton: SkeletonSpec | None = None,
                        bounds: AnatomicalBounds | None = None) -> "AnatomyPoseEstimator":
        state: ModelState = load_checkpoint(path)
        params = {k: v for k, v in state.meta.get("config", {}).items() if k in _CONFIG_FIELDS}
        est = cls(skeleton=skeleton, bounds=bounds, **params)
        est.skeleton_ = est._spec()
        if est.skeleton_.n_joints != state.student.config.n_joints:
            raise ValueError("checkpoint joint count does not match the skeleton")
        est.bounds_ = bounds
        est.state_ = state
        est.history_ = [(state.meta.get("stage", "unknown"), state.epoch)]
        return est
