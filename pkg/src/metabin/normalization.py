"""Batch, instance and batch-instance normalization.

A BIN layer mixes a BN branch and an IN branch per channel:

    y = rho * (gamma_b * xhat_b + beta_b) + (1 - rho) * (gamma_i * xhat_i + beta_i)

``rho`` is a learnable per-channel weight kept inside [0, 1] by clamping
after every update (see :func:`project_rho`).
"""

import csv
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, functional as F
from .errors import DegenerateStatisticsError, EmptyBatchError, ShapeError

EPS = 1e-5
MOMENTUM = 0.1

TRAIN = "train"
EVAL = "eval"


def _check_mode(mode):
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _channel_shape(x):
    # (1, C, 1, 1) for images, (1, C) for feature vectors
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


@dataclass
class BinLayerParams:
    """Parameters and running statistics of one batch-instance normalization layer."""

    gamma_b: Tensor
    beta_b: Tensor
    gamma_i: Tensor
    beta_i: Tensor
    rho: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = MOMENTUM
    eps: float = EPS

    @classmethod
    def create(cls, channels, rho_init=1.0, momentum=MOMENTUM, eps=EPS):
        def param(value):
            return Tensor(np.full(channels, value, dtype=np.float64), requires_grad=True)

        return cls(
            gamma_b=param(1.0),
            beta_b=param(0.0),
            gamma_i=param(1.0),
            beta_i=param(0.0),
            rho=param(rho_init),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self):
        return self.rho.data.shape[0]


@dataclass
class BatchNormParams:
    """A plain batch normalization layer (used for the embedding neck)."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = MOMENTUM
    eps: float = EPS

    @classmethod
    def create(cls, channels, momentum=MOMENTUM, eps=EPS):
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )


def _check_channels(x, channels):
    if x.ndim < 2 or x.shape[1] != channels:
        raise ShapeError(f"input {x.shape} does not have {channels} channels")


def _bn_normalize(x, running_mean, running_var, momentum, eps, mode):
    """Normalized BN response; mutates the running statistics in train mode."""
    _check_mode(mode)
    if x.shape[0] == 0:
        raise EmptyBatchError("batch normalization received an empty batch")
    axes = (0,) + tuple(range(2, x.ndim))
    cshape = _channel_shape(x)
    if mode == EVAL:
        mu = running_mean.reshape(cshape)
        sd = np.sqrt(running_var.reshape(cshape) + eps)
        return (x - mu) / sd
    count = int(np.prod([x.shape[a] for a in axes]))
    if count < 2:
        raise DegenerateStatisticsError(
            "batch normalization in train mode needs more than one value per channel"
        )
    xhat, mu, variance = F.standardize(x, axes, eps, return_stats=True)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(-1)
    running_var *= 1.0 - momentum
    running_var += momentum * variance.reshape(-1)
    return xhat


def _in_normalize(x, eps):
    if x.ndim != 4:
        raise ShapeError(f"instance normalization expects (N, C, H, W), got {x.shape}")
    if x.shape[0] == 0:
        raise EmptyBatchError("instance normalization received an empty batch")
    if x.shape[2] * x.shape[3] < 2:
        raise DegenerateStatisticsError("instance normalization needs H*W >= 2")
    return F.standardize(x, (2, 3), eps)


def batch_norm(x, p, mode=TRAIN):
    """BN branch of ``p`` (``gamma_b``, ``beta_b``, running statistics)."""
    _check_channels(x, p.channels)
    xhat = _bn_normalize(x, p.running_mean, p.running_var, p.momentum, p.eps, mode)
    return F.channel_affine(xhat, p.gamma_b, p.beta_b)


def instance_norm(x, p):
    """IN branch of ``p``; identical in train and eval mode."""
    _check_channels(x, p.channels)
    xhat = _in_normalize(x, p.eps)
    return F.channel_affine(xhat, p.gamma_i, p.beta_i)


def bin_forward(x, p, mode=TRAIN):
    return F.channel_mix(batch_norm(x, p, mode), instance_norm(x, p), p.rho)


def neck_norm(x, p, mode=TRAIN):
    """Plain BN over a (N, D) embedding."""
    _check_channels(x, p.gamma.shape[0])
    xhat = _bn_normalize(x, p.running_mean, p.running_var, p.momentum, p.eps, mode)
    return F.channel_affine(xhat, p.gamma, p.beta)


def project_rho(p):
    np.clip(p.rho.data, 0.0, 1.0, out=p.rho.data)


def write_rho_csv(layers, path):
    """Write ``layer_index,channel_index,rho`` rows for every BIN layer."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer_index", "channel_index", "rho"])
        for li, layer in enumerate(layers):
            for ci, value in enumerate(layer.rho.data):
                writer.writerow([li, ci, repr(float(value))])


def read_rho_csv(path):
    """Inverse of :func:`write_rho_csv`; returns a list of per-layer arrays."""
    layers = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            layers.setdefault(int(row["layer_index"]), {})[int(row["channel_index"])] = float(row["rho"])
    return [np.array([chans[c] for c in sorted(chans)]) for _, chans in sorted(layers.items())]
