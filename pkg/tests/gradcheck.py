"""Finite-difference oracles shared by the unit tests and the acceptance suite.

The numerical side is evaluated in long double with central differences.
Truncation (~h^2) and rounding (~eps_ld / h) both sit far below 1e-6 for
the pose losses and the network.  The composed target objective is strongly
curved, so it uses a fourth-order Richardson estimate.  The losses on the
numerical side are independent re-implementations.

Errors are measured per coordinate, relative to ``max(|analytic|, floor)``.
The floor is ``max(1e-8, 1e-6 * largest |analytic| entry of the gradient)``.
Coordinates a million times smaller than the gradient's scale are therefore
held to an absolute accuracy of about 1e-12 of that scale, because relative
accuracy there is below what any finite-difference oracle resolves.
Configurations whose stencil crosses a kink (penalty boundary, leaky-ReLU
zero, max-pool switch, sign change of an L1 residual) are not differentiable
there and are redrawn.
"""
import numpy as np

from anatomy_da import anatomy
from anatomy_da.model import ModelConfig, PoseNet, backward, forward, select_mask
from anatomy_da.skeleton import AnatomicalBounds, SkeletonSpec
from anatomy_da.trainer import AugmentationRecord, TrainConfig, apply_record, reverse_pose, target_terms, task_loss

ABS_FLOOR = 1e-8
REL_FLOOR = 1e-6
H = 1e-6
H_RICHARDSON = 3e-5
LD = np.longdouble


class NonSmooth(Exception):
    """The stencil crossed a kink, so finite differences are not an oracle here."""


def coord_error(analytic, numeric, scale=None) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if not a.size:
        return 0.0
    if scale is None:
        scale = float(np.abs(a).max())
    floor = max(ABS_FLOOR, REL_FLOOR * scale)
    return float((np.abs(a - n) / np.maximum(np.abs(a), floor)).max())


def grads_error(analytic: dict, numeric: dict) -> float:
    """Worst coordinate error over a dict of gradient arrays sharing one scale."""
    scale = max(float(np.abs(np.asarray(g, dtype=np.float64)).max(initial=0.0)) for g in analytic.values())
    return max(coord_error(analytic[k], numeric[k], scale) for k in analytic)


def fd_coords(f, x, h=H, richardson=False):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place, restored).

    ``richardson=True`` combines steps h and h/2 into a fourth-order estimate,
    for objectives whose third derivative is large enough to make the h^2
    truncation error of the plain stencil visible at 1e-6.
    """
    def central(idx, step):
        orig = x[idx]
        x[idx] = orig + step
        up = f()
        x[idx] = orig - step
        down = f()
        x[idx] = orig
        return (LD(up) - LD(down)) / (2 * LD(step))

    g = np.zeros(x.shape, dtype=LD)
    for idx in np.ndindex(x.shape):
        g[idx] = central(idx, h)
        if richardson:
            g[idx] = (4 * central(idx, h / 2) - g[idx]) / 3
    return g


def stencil(x, h=H):
    """All central-difference evaluation points of ``x`` stacked on a new leading axis."""
    x = np.asarray(x, dtype=LD)
    eye = np.eye(x.size, dtype=LD).reshape((x.size,) + x.shape) * LD(h)
    return np.concatenate([x + eye, x - eye])


def fd_from_stencil(values, shape, h=H):
    values = np.asarray(values, dtype=LD)
    n = len(values) // 2
    return ((values[:n] - values[n:]) / (2 * LD(h))).reshape(shape)


# ---------------------------------------------------------------- independent loss oracles


def _pen(x, lo, hi, kind):
    d = np.maximum(lo - x, 0) + np.maximum(x - hi, 0)
    return d * d if kind == "l2" else d


def _quantities(poses, spec):
    par = np.array([p for p, _ in spec.bones])
    chi = np.array([c for _, c in spec.bones])
    bones = poses[..., chi, :] - poses[..., par, :]
    n = np.sqrt((bones * bones).sum(-1))
    out = {"length": n}
    if spec.symmetric_pairs:
        p = np.array(spec.symmetric_pairs)
        out["sym"] = n[..., p[:, 0]] - n[..., p[:, 1]]
    if spec.connected_pairs:
        c = np.array(spec.connected_pairs)
        out["angle"] = (bones[..., c[:, 0], :] * bones[..., c[:, 1], :]).sum(-1) / (n[..., c[:, 0]] * n[..., c[:, 1]])
    return out


def _limits(bounds, name):
    if name == "length":
        return bounds.length_lo, bounds.length_hi
    if name == "sym":
        return -bounds.sym_tol, bounds.sym_tol
    return bounds.angle_lo, bounds.angle_hi


def oracle_losses(poses, spec, bounds, kind="l1", q=None):
    """Per-pose sym, length and angle losses (zero when a loss has no terms)."""
    q = _quantities(poses, spec) if q is None else q
    zero = np.zeros(poses.shape[:-2], dtype=poses.dtype)
    out = {}
    for name in ("sym", "length", "angle"):
        if name in q:
            lo, hi = _limits(bounds, name)
            out[name] = _pen(q[name], lo, hi, kind).mean(-1)
        else:
            out[name] = zero
    return out


def loss_pattern(poses, spec, bounds, q=None):
    """Which side of each penalty boundary every constrained quantity lies on, per pose."""
    if q is None:
        q = _quantities(np.asarray(poses, dtype=np.float64), spec)
    parts = []
    for name, v in q.items():
        lo, hi = _limits(bounds, name)
        parts += [np.sign(v - lo), np.sign(v - hi)]
    return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------- random configurations


def small_skeleton() -> SkeletonSpec:
    """Five joints: a root with a two-bone chain, a single bone mirrored against it, and a spine bone."""
    return SkeletonSpec(["root", "l1", "l2", "r1", "up"], [(0, 1), (1, 2), (0, 3), (0, 4)],
                        [(0, 2)], [(0, 1), (2, 3)], 0)


def random_pose(spec, rng):
    pose = np.zeros((spec.n_joints, 3))
    for p, c in spec.bones:
        d = rng.normal(size=3)
        pose[c] = pose[p] + rng.uniform(0.2, 0.5) * d / np.linalg.norm(d)
    return pose + rng.normal(size=3)


def random_bounds(spec, rng, poses):
    """Bounds drawn so that some constraints are active and some are not."""
    n = _quantities(np.asarray(poses, dtype=np.float64), spec)["length"]
    mid = np.median(n.reshape(-1, spec.n_bones), axis=0)
    lo = mid * rng.uniform(0.6, 1.0, size=spec.n_bones)
    hi = lo + mid * rng.uniform(0.0, 0.5, size=spec.n_bones)
    alo = rng.uniform(-1, 0.5, size=len(spec.connected_pairs))
    ahi = np.minimum(alo + rng.uniform(0, 1.0, size=alo.size), 1.0)
    tol = rng.uniform(0, 0.05, size=len(spec.symmetric_pairs))
    return AnatomicalBounds(tol, lo, hi, alo, ahi)


def tiny_net(rng, n_joints=4, enc_dims=(3, 4), dec_hidden=4):
    cfg = ModelConfig(n_joints=n_joints, enc_dims=enc_dims, dec_hidden=dec_hidden, final_scale=1.0)
    net = PoseNet.init(cfg, int(rng.integers(2**31)))
    for k in net.params:
        if not k.endswith(".weight"):
            net.params[k] = net.params[k] + 0.3 * rng.normal(size=net.params[k].shape)
    return net


# ---------------------------------------------------------------- pose-level checks

LOSSES = {"sym": anatomy.sym_loss, "length": anatomy.length_loss, "angle": anatomy.angle_loss}


def check_pose_loss(name, rng, spec, kind="l1"):
    """One nondegenerate configuration for an anatomical loss; returns the worst coordinate error."""
    while True:
        pose = random_pose(spec, rng)
        bounds = random_bounds(spec, rng, pose[None])
        pts = stencil(pose)
        if np.all(loss_pattern(pts, spec, bounds) == loss_pattern(pose, spec, bounds)):
            break
    g = LOSSES[name](pose, spec, bounds, kind=kind).grad
    fd = fd_from_stencil(oracle_losses(pts, spec, bounds, kind)[name], pose.shape)
    return coord_error(g, fd)


def check_task(rng, k=4):
    while True:
        pred = rng.normal(size=(k, 3))
        gt = rng.normal(size=(k, 3))
        if np.abs(pred - gt).min() > 10 * H:
            break
    g = task_loss(pred, gt)[1]
    pts = stencil(pred)
    fd = fd_from_stencil(np.abs(pts - gt).sum(axis=(-1, -2)) / k, pred.shape)
    return coord_error(g, fd)


# ---------------------------------------------------------------- network-level checks


def _activation_pattern(cache):
    """Signs of every pre-activation plus the max-pool argmax."""
    parts = [np.sign(lc.z).ravel() for lc in cache.layers.values()]
    return np.concatenate(parts + [cache.pool_idx.ravel().astype(float)])


def _param_fd(net, clouds, objective, richardson=False, h=H):
    """FD of ``objective(poses)`` w.r.t. every parameter, evaluating the network in long double."""
    work = net.copy()
    work.params = {k: v.astype(LD) for k, v in work.params.items()}
    base = _activation_pattern(forward(work, clouds, training=True)[2])

    def evaluate():
        _, poses, cache = forward(work, clouds, training=True)
        if not np.array_equal(_activation_pattern(cache), base):
            raise NonSmooth
        return objective(poses)

    return {name: fd_coords(evaluate, arr, h=h, richardson=richardson) for name, arr in work.params.items()}


def check_model(rng, n_points=10, n_joints=4, batch=1):
    """Backward of ``sum(G * poses)`` against FD on every parameter of a small network."""
    while True:
        net = tiny_net(rng, n_joints)
        clouds = rng.normal(size=(batch, n_points, 3))
        G = rng.normal(size=(batch, n_joints, 3))
        try:
            fd = _param_fd(net, clouds, lambda p: (p * G).sum(), richardson=True, h=H_RICHARDSON)
        except NonSmooth:
            continue
        break
    _, _, cache = forward(net, clouds, training=True)
    grads = backward(net, cache, G)
    return grads_error(grads, fd)


def _rotation_ld(angle):
    c, s = np.cos(LD(angle)), np.sin(LD(angle))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=LD)


def check_target_objective(rng, kind="l1", batch=2, n_points=10):
    """Composed target objective ``l1 * mean L_anat + l2 * mean L_con`` through augmentation reversal.

    The acceptance mask and the teacher pseudo labels are held fixed, as in training.
    """
    spec = small_skeleton()
    cfg = TrainConfig(lambda1=float(rng.uniform(0.05, 1)), lambda2=float(rng.uniform(0.5, 2)), penalty=kind)
    while True:
        net = tiny_net(rng, spec.n_joints)
        raw = rng.normal(size=(batch, n_points, 3))
        recs = [AugmentationRecord(float(rng.uniform(-0.3, 0.3)), rng.normal(size=3) * 0.05, None)
                for _ in range(batch)]
        clouds = np.stack([apply_record(c, r) for c, r in zip(raw, recs)])
        pred = forward(net, clouds, training=True)[1]
        rev = np.stack([reverse_pose(p, r) for p, r in zip(pred, recs)])
        bounds = random_bounds(spec, rng, rev)
        teacher = rev + 0.05 * rng.normal(size=rev.shape)
        accepted = rng.random(batch) < 0.7
        base = np.concatenate([loss_pattern(rev, spec, bounds).ravel(), np.sign(rev - teacher).ravel()])
        rots = [_rotation_ld(r.angle) for r in recs]

        def objective(p):
            # reversal (p - t) R and both losses evaluated independently of the package
            r = np.stack([(q - rc.translation) @ R for q, rc, R in zip(p, recs, rots)])
            q = _quantities(r, spec)
            pattern = np.concatenate([loss_pattern(r, spec, bounds, q).ravel(), np.sign(r - teacher).ravel()])
            if not np.array_equal(pattern, base):
                raise NonSmooth
            la = sum(oracle_losses(r, spec, bounds, kind, q).values()).mean()
            lc = (np.abs(r - teacher).sum(axis=(1, 2)) / spec.n_joints * accepted).mean()
            return cfg.lambda1 * la + cfg.lambda2 * lc

        try:
            fd = _param_fd(net, clouds, objective, richardson=True, h=H_RICHARDSON)
        except NonSmooth:
            continue
        break
    _, p, cache = forward(net, clouds, training=True)
    terms = target_terms(p, recs, teacher, spec, bounds, cfg, accepted)
    upstream = cfg.lambda1 * terms.grad_anat + cfg.lambda2 * terms.grad_con
    grads = backward(net, cache, upstream, select_mask(net, "all"))
    return grads_error(grads, fd)
