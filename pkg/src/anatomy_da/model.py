"""Point-feature pose network with a weighted-sum joint head.

A shared per-point MLP (the feature extractor) lifts every point, a max-pool
gives a global context vector, and a per-point decoder (the head) turns the
concatenation into one logit per joint.  A softmax over points turns each
logit column into a weight map and every joint is predicted as the weighted
mean of the input points, so predictions always lie in the cloud's convex hull.

Everything is plain numpy with hand-written reverse-mode gradients.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = [
    "ModelConfig",
    "PoseNet",
    "ForwardCache",
    "AdamState",
    "ModelState",
    "MASK_MODES",
    "NonFiniteError",
    "forward",
    "backward",
    "predict",
    "adam_step",
    "select_mask",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
]

MASK_MODES = ("all", "feature_extractor_only", "norm_layers_only", "freeze_heads")


class NonFiniteError(FloatingPointError):
    """Raised when an activation overflows; carries the offending layer name."""

    def __init__(self, layer: str):
        super().__init__(f"non-finite activations in layer {layer!r}")
        self.layer = layer


@dataclass(frozen=True)
class ModelConfig:
    n_joints: int
    enc_dims: tuple[int, ...] = (64, 128)
    dec_hidden: int = 128
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    final_scale: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "enc_dims", tuple(int(d) for d in self.enc_dims))

    @property
    def enc_layers(self) -> list[str]:
        return [f"enc{i}" for i in range(len(self.enc_dims))]

    @property
    def norm_layers(self) -> list[str]:
        return self.enc_layers + ["dec0"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_dims"] = list(self.enc_dims)
        return d


@dataclass
class PoseNet:
    """Parameters and normalisation buffers of one network (student or teacher)."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "PoseNet":
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        buffers: dict[str, np.ndarray] = {}
        fan_in = 3

        def uniform(n_in, n_out):
            bound = 1.0 / np.sqrt(n_in)
            return rng.uniform(-bound, bound, size=(n_in, n_out))

        for name, width in zip(config.enc_layers, config.enc_dims):
            params[f"{name}.weight"] = uniform(fan_in, width)
            params[f"{name}.gamma"] = np.ones(width)
            params[f"{name}.beta"] = np.zeros(width)
            fan_in = width
        params["dec0.weight"] = uniform(2 * fan_in, config.dec_hidden)
        params["dec0.gamma"] = np.ones(config.dec_hidden)
        params["dec0.beta"] = np.zeros(config.dec_hidden)
        params["head.weight"] = uniform(config.dec_hidden, config.n_joints) * config.final_scale
        params["head.bias"] = np.zeros(config.n_joints)
        for name in config.norm_layers:
            width = params[f"{name}.gamma"].size
            buffers[f"{name}.running_mean"] = np.zeros(width)
            buffers[f"{name}.running_var"] = np.ones(width)
        return cls(config, params, buffers)

    def copy(self) -> "PoseNet":
        return PoseNet(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def check_compatible(self, other: "PoseNet") -> None:
        if self.config != other.config or any(
            self.params[k].shape != other.params[k].shape for k in self.params
        ):
            raise ValueError("network architectures differ")


class _LayerCache(NamedTuple):
    inputs: np.ndarray  # (M, C_in) or None for the split decoder input
    xhat: np.ndarray
    inv_std: np.ndarray
    z: np.ndarray


class ForwardCache(NamedTuple):
    clouds: np.ndarray  # (B, N, 3)
    layers: dict
    enc_out: np.ndarray  # (B, N, C)
    pool_idx: np.ndarray  # (B, C) argmax point index per feature
    pooled: np.ndarray  # (B, C)
    dec_out: np.ndarray  # (B, N, H)
    weights: np.ndarray  # (B, N, K)
    training: bool
    param_ids: tuple


def _leaky(z, slope):
    return np.where(z > 0, z, slope * z)


def _as_batch(clouds) -> tuple[np.ndarray, bool]:
    arr = np.asarray(clouds, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected clouds of shape (N, 3) or (B, N, 3), got {arr.shape}")
    if arr.shape[1] < 1:
        raise ValueError("point cloud must contain at least one point")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point cloud contains non-finite coordinates")
    return arr, single


def _norm_forward(net: PoseNet, name: str, h: np.ndarray, training: bool):
    cfg = net.config
    if training:
        mu = h.mean(axis=0)
        var = h.var(axis=0)
        m = h.shape[0]
        mom = cfg.bn_momentum
        unbiased = var * m / (m - 1) if m > 1 else var
        rm, rv = net.buffers[f"{name}.running_mean"], net.buffers[f"{name}.running_var"]
        net.buffers[f"{name}.running_mean"] = (1 - mom) * rm + mom * mu
        net.buffers[f"{name}.running_var"] = (1 - mom) * rv + mom * unbiased
    else:
        mu = net.buffers[f"{name}.running_mean"]
        var = net.buffers[f"{name}.running_var"]
    inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
    xhat = (h - mu) * inv_std
    z = net.params[f"{name}.gamma"] * xhat + net.params[f"{name}.beta"]
    if not np.all(np.isfinite(z)):
        raise NonFiniteError(name)
    return xhat, inv_std, z


def forward(net: PoseNet, clouds, training: bool = False):
    """Predict weight maps and poses.

    Returns ``(weights, poses, cache)`` with shapes ``(B, N, K)`` and
    ``(B, K, 3)``, or without the batch axis for a single ``(N, 3)`` cloud.
    Training mode normalises with batch statistics and updates the running
    buffers in place.
    """
    X, single = _as_batch(clouds)
    cfg = net.config
    B, N, _ = X.shape
    M = B * N
    slope = cfg.leaky_slope
    layers = {}
    a = X.reshape(M, 3)
    for name in cfg.enc_layers:
        h = a @ net.params[f"{name}.weight"]
        xhat, inv_std, z = _norm_forward(net, name, h, training)
        layers[name] = _LayerCache(a, xhat, inv_std, z)
        a = _leaky(z, slope)
    C = a.shape[1]
    enc_out = a.reshape(B, N, C)
    pool_idx = enc_out.argmax(axis=1)  # first index wins ties
    pooled = np.take_along_axis(enc_out, pool_idx[:, None, :], axis=1)[:, 0, :]

    w_dec = net.params["dec0.weight"]
    h = (enc_out @ w_dec[:C] + (pooled @ w_dec[C:])[:, None, :]).reshape(M, -1)
    xhat, inv_std, z = _norm_forward(net, "dec0", h, training)
    layers["dec0"] = _LayerCache(None, xhat, inv_std, z)
    dec_out = _leaky(z, slope)

    logits = (dec_out @ net.params["head.weight"] + net.params["head.bias"]).reshape(B, N, -1)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("head")
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    weights = e / e.sum(axis=1, keepdims=True)
    poses = np.einsum("bnk,bnc->bkc", weights, X)

    cache = ForwardCache(
        X, layers, enc_out, pool_idx, pooled, dec_out.reshape(B, N, -1), weights, training,
        tuple(sorted(net.params)),
    )
    if single:
        return weights[0], poses[0], cache
    return weights, poses, cache


def predict(net: PoseNet, clouds) -> np.ndarray:
    """Inference-mode poses for a list of clouds of varying size, shape ``(S, K, 3)``."""
    return np.stack([forward(net, c, training=False)[1] for c in clouds])


def _norm_backward(net: PoseNet, name: str, lc: _LayerCache, dz: np.ndarray, grads: dict, mask: dict):
    if mask[f"{name}.gamma"]:
        grads[f"{name}.gamma"] = (dz * lc.xhat).sum(axis=0)
    if mask[f"{name}.beta"]:
        grads[f"{name}.beta"] = dz.sum(axis=0)
    dxhat = dz * net.params[f"{name}.gamma"]
    m = dz.shape[0]
    return (lc.inv_std / m) * (
        m * dxhat - dxhat.sum(axis=0) - lc.xhat * (dxhat * lc.xhat).sum(axis=0)
    )


def backward(net: PoseNet, cache: ForwardCache, grad_poses, mask: dict | None = None) -> dict:
    """Parameter gradients of ``sum(grad_poses * poses)``.

    Parameters excluded by ``mask`` get exact zeros.  Requires a cache from a
    training-mode forward of the same network.
    """
    if not cache.training:
        raise ValueError("backward needs a cache from a training-mode forward")
    if cache.param_ids != tuple(sorted(net.params)):
        raise ValueError("cache does not belong to this network")
    mask = select_mask(net, "all") if mask is None else mask
    cfg = net.config
    X = cache.clouds
    B, N, _ = X.shape
    M = B * N
    dY = np.asarray(grad_poses, dtype=np.float64).reshape(B, cfg.n_joints, 3)
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    if not np.any(dY):
        return grads
    slope = cfg.leaky_slope

    W = cache.weights
    dW = np.einsum("bnc,bkc->bnk", X, dY)
    dlogits = W * (dW - (W * dW).sum(axis=1, keepdims=True))
    dl = dlogits.reshape(M, -1)
    dec = cache.dec_out.reshape(M, -1)
    if mask["head.weight"]:
        grads["head.weight"] = dec.T @ dl
    if mask["head.bias"]:
        grads["head.bias"] = dl.sum(axis=0)

    lc = cache.layers["dec0"]
    dz = (dl @ net.params["head.weight"].T) * np.where(lc.z > 0, 1.0, slope)
    dh = _norm_backward(net, "dec0", lc, dz, grads, mask)
    C = cache.enc_out.shape[-1]
    w_dec = net.params["dec0.weight"]
    dh3 = dh.reshape(B, N, -1)
    dh_sum = dh3.sum(axis=1)
    if mask["dec0.weight"]:
        grads["dec0.weight"] = np.concatenate(
            [cache.enc_out.reshape(M, C).T @ dh, cache.pooled.T @ dh_sum], axis=0
        )
    if not any(mask[k] for k in mask if k.startswith("enc")):
        return grads

    da = dh3 @ w_dec[:C].T
    dpool = dh_sum @ w_dec[C:].T
    np.add.at(da, (np.arange(B)[:, None], cache.pool_idx, np.arange(C)[None, :]), dpool)
    da = da.reshape(M, C)
    for name in reversed(cfg.enc_layers):
        lc = cache.layers[name]
        dz = da * np.where(lc.z > 0, 1.0, slope)
        dh = _norm_backward(net, name, lc, dz, grads, mask)
        if mask[f"{name}.weight"]:
            grads[f"{name}.weight"] = lc.inputs.T @ dh
        if name != cfg.enc_layers[0]:
            da = dh @ net.params[f"{name}.weight"].T
    return grads


def select_mask(net: PoseNet | ModelConfig, mode: str = "all") -> dict[str, bool]:
    """Trainable flag per parameter array for a parameter-subset mode."""
    if mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mode!r}; expected one of {MASK_MODES}")
    cfg = net.config if isinstance(net, PoseNet) else net
    names = PoseNet.init(cfg).params.keys() if isinstance(net, ModelConfig) else net.params.keys()
    enc = tuple(f"{n}." for n in cfg.enc_layers)
    out = {}
    for name in names:
        if mode == "all":
            out[name] = True
        elif mode in ("feature_extractor_only", "freeze_heads"):
            out[name] = name.startswith(enc)
        else:
            out[name] = name.startswith(enc) and name.endswith((".gamma", ".beta"))
    return out


def decay_mask(net: PoseNet) -> dict[str, bool]:
    """Weight decay applies to weight matrices only, not to norm scale/shift or biases."""
    return {k: k.endswith(".weight") for k in net.params}


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, net: PoseNet, **kw) -> "AdamState":
        return cls(
            0,
            {k: np.zeros_like(v) for k, v in net.params.items()},
            {k: np.zeros_like(v) for k, v in net.params.items()},
            **kw,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            self.step,
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            self.beta1, self.beta2, self.eps,
        )


def adam_step(net: PoseNet, grads: dict, state: AdamState, lr: float = 1e-3,
              weight_decay: float = 0.0, trainable: dict | None = None,
              decay: dict | None = None) -> None:
    """One bias-corrected Adam update in place, with L2 decay added to the gradient.

    Parameters flagged untrainable are left bit-for-bit unchanged, moments included.
    """
    decay = decay_mask(net) if decay is None else decay
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in net.params.items():
        if trainable is not None and not trainable[name]:
            continue
        g = grads[name]
        if weight_decay and decay[name]:
            g = g + weight_decay * p
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        net.params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class ModelState:
    """Everything a training run needs to resume: both networks, optimizer, progress."""

    student: PoseNet
    teacher: PoseNet
    optimizer: AdamState
    epoch: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def copy(self) -> "ModelState":
        return ModelState(
            self.student.copy(), self.teacher.copy(), self.optimizer.copy(),
            self.epoch, self.seed, json.loads(json.dumps(self.meta)),
        )


_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def checkpoint_bytes(state: ModelState) -> bytes:
    """Serialise to a zip of ``.npy`` arrays plus a JSON header, byte-deterministic."""
    header = {
        "format": "anatomy_da.checkpoint/1",
        "model_config": state.student.config.to_dict(),
        "epoch": int(state.epoch),
        "seed": int(state.seed),
        "adam": {
            "step": int(state.optimizer.step),
            "beta1": state.optimizer.beta1,
            "beta2": state.optimizer.beta2,
            "eps": state.optimizer.eps,
        },
        "meta": state.meta,
    }
    entries = [("header.json", json.dumps(header, sort_keys=True, indent=1).encode())]
    for prefix, net in (("student", state.student), ("teacher", state.teacher)):
        for k in sorted(net.params):
            entries.append((f"{prefix}/params/{k}.npy", _npy_bytes(net.params[k])))
        for k in sorted(net.buffers):
            entries.append((f"{prefix}/buffers/{k}.npy", _npy_bytes(net.buffers[k])))
    for k in sorted(state.optimizer.m):
        entries.append((f"adam/m/{k}.npy", _npy_bytes(state.optimizer.m[k])))
        entries.append((f"adam/v/{k}.npy", _npy_bytes(state.optimizer.v[k])))
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, data in entries:
            info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    return buf.getvalue()


def save_checkpoint(state: ModelState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(state))


def load_checkpoint(path) -> ModelState:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != "anatomy_da.checkpoint/1":
            raise ValueError(f"{path}: not a checkpoint file")
        cfg = ModelConfig(**header["model_config"])

        def read(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

        names = zf.namelist()
        nets = {}
        for prefix in ("student", "teacher"):
            params, buffers = {}, {}
            for n in names:
                if n.startswith(f"{prefix}/params/"):
                    params[n[len(prefix) + 8:-4]] = read(n)
                elif n.startswith(f"{prefix}/buffers/"):
                    buffers[n[len(prefix) + 9:-4]] = read(n)
            nets[prefix] = PoseNet(cfg, params, buffers)
        m = {n[7:-4]: read(n) for n in names if n.startswith("adam/m/")}
        v = {n[7:-4]: read(n) for n in names if n.startswith("adam/v/")}
    ad = header["adam"]
    opt = AdamState(ad["step"], m, v, ad["beta1"], ad["beta2"], ad["eps"])
    expected = PoseNet.init(cfg)
    for prefix, net in nets.items():
        if set(net.params) != set(expected.params) or any(
            net.params[k].shape != expected.params[k].shape for k in expected.params
        ):
            raise ValueError(f"{path}: {prefix} parameters do not match the stored architecture")
    return ModelState(nets["student"], nets["teacher"], opt, header["epoch"], header["seed"], header["meta"])
