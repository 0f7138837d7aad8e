"""Small convolutional feature extractor with BIN layers and a BNNeck classifier."""

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, functional as F, no_grad
from .errors import ConfigError, FormatError
from .normalization import BatchNormParams, BinLayerParams, EVAL, TRAIN, bin_forward, neck_norm

CHECKPOINT_MAGIC = b"METABIN\x00"
CHECKPOINT_VERSION = 1


@dataclass
class ParameterPartition:
    """Disjoint named parameter groups: feature extractor, balancing weights, classifier."""

    theta_f: "OrderedDict[str, Tensor]"
    theta_rho: "OrderedDict[str, Tensor]"
    phi: "OrderedDict[str, Tensor]"

    def all(self):
        out = OrderedDict()
        for group in (self.theta_f, self.theta_rho, self.phi):
            out.update(group)
        return out

    def base(self):
        """Parameters touched by the base update."""
        out = OrderedDict(self.theta_f)
        out.update(self.phi)
        return out


class MetaBINNet:
    """conv3x3 -> BIN -> relu stages, global pooling, linear embedding, BN neck, classifier.

    ``embed`` returns the pre-neck embedding used by every metric loss;
    ``classify`` applies the neck and the bias-free classifier.
    """

    def __init__(self, num_classes, in_channels=3, channels=(8, 16, 32), strides=(1, 2, 2),
                 emb_dim=32, rho_init=1.0, rng=None):
        if len(channels) != len(strides):
            raise ConfigError("channels and strides must have the same length")
        if num_classes < 2:
            raise ConfigError("classifier needs at least two identities")
        rng = np.random.default_rng(0) if rng is None else rng
        self.num_classes = int(num_classes)
        self.in_channels = int(in_channels)
        self.channels = tuple(int(c) for c in channels)
        self.strides = tuple(int(s) for s in strides)
        self.emb_dim = int(emb_dim)

        self.conv_weights = []
        self.bins = []
        prev = self.in_channels
        for c in self.channels:
            fan_in = prev * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c, prev, 3, 3))
            self.conv_weights.append(Tensor(w, requires_grad=True))
            self.bins.append(BinLayerParams.create(c, rho_init=rho_init))
            prev = c
        bound = 1.0 / np.sqrt(prev)
        self.emb_weight = Tensor(rng.uniform(-bound, bound, size=(self.emb_dim, prev)), requires_grad=True)
        self.emb_bias = Tensor(np.zeros(self.emb_dim), requires_grad=True)
        self.neck = BatchNormParams.create(self.emb_dim)
        self.classifier = Tensor(rng.normal(0.0, 0.01, size=(self.num_classes, self.emb_dim)),
                                 requires_grad=True)

    # -- forward --------------------------------------------------------------

    def embed(self, x, mode=TRAIN):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ConfigError(f"expected input (N, {self.in_channels}, H, W), got {x.shape}")
        if x.shape[2] < 8 or x.shape[3] < 8:
            raise ConfigError(f"input spatial size must be at least 8x8, got {x.shape[2:]}")
        h = x
        for w, p, s in zip(self.conv_weights, self.bins, self.strides):
            h = F.relu(bin_forward(F.conv2d(h, w, stride=s, padding=1), p, mode))
        return F.linear(F.global_avg_pool(h), self.emb_weight, self.emb_bias)

    def classify(self, embeddings, mode=TRAIN):
        if embeddings.ndim != 2 or embeddings.shape[1] != self.emb_dim:
            raise ConfigError(f"embedding shape {embeddings.shape} does not match dim {self.emb_dim}")
        return F.linear(neck_norm(embeddings, self.neck, mode), self.classifier)

    def forward(self, x, mode=TRAIN):
        emb = self.embed(x, mode)
        return emb, self.classify(emb, mode)

    def extract(self, images, batch_size=256):
        """Eval-mode embeddings as a numpy array, without building a graph."""
        images = np.asarray(images, dtype=np.float64)
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                out.append(self.embed(Tensor(images[start:start + batch_size]), EVAL).data)
        if not out:
            return np.zeros((0, self.emb_dim))
        return np.concatenate(out, axis=0)

    # -- parameters -----------------------------------------------------------

    def partition(self):
        theta_f = OrderedDict()
        theta_rho = OrderedDict()
        for i, (w, p) in enumerate(zip(self.conv_weights, self.bins)):
            theta_f[f"conv{i}.weight"] = w
            theta_f[f"bin{i}.gamma_b"] = p.gamma_b
            theta_f[f"bin{i}.beta_b"] = p.beta_b
            theta_f[f"bin{i}.gamma_i"] = p.gamma_i
            theta_f[f"bin{i}.beta_i"] = p.beta_i
            theta_rho[f"bin{i}.rho"] = p.rho
        theta_f["embedding.weight"] = self.emb_weight
        theta_f["embedding.bias"] = self.emb_bias
        theta_f["neck.gamma"] = self.neck.gamma
        theta_f["neck.beta"] = self.neck.beta
        phi = OrderedDict([("classifier.weight", self.classifier)])
        return ParameterPartition(theta_f, theta_rho, phi)

    def parameters(self):
        return list(self.partition().all().values())

    def rho_layers(self):
        return list(self.bins)

    def buffers(self):
        out = OrderedDict()
        for i, p in enumerate(self.bins):
            out[f"bin{i}.running_mean"] = p.running_mean
            out[f"bin{i}.running_var"] = p.running_var
        out["neck.running_mean"] = self.neck.running_mean
        out["neck.running_var"] = self.neck.running_var
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = OrderedDict((k, v.data.copy()) for k, v in self.partition().all().items())
        state.update((k, v.copy()) for k, v in self.buffers().items())
        return state

    def load_state_dict(self, state):
        targets = OrderedDict((k, v.data) for k, v in self.partition().all().items())
        targets.update(self.buffers())
        if set(state) != set(targets):
            raise FormatError("state keys do not match the model")
        for k, arr in targets.items():
            src = np.asarray(state[k], dtype=np.float64)
            if src.shape != arr.shape:
                raise FormatError(f"{k}: shape {src.shape} does not match {arr.shape}")
            arr[...] = src

    def plan(self):
        return {
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "strides": list(self.strides),
            "emb_dim": self.emb_dim,
        }


def save_checkpoint(model, path):
    """Write magic, version, a JSON shape plan, then little-endian float64 values.

    Values follow partition order (theta_f, theta_rho, phi) and then the
    running statistics.
    """
    state = model.state_dict()
    header = dict(model.plan())
    header["entries"] = [[k, list(v.shape)] for k, v in state.items()]
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in state.values())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 or not blob.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<II", blob, offset)
    offset += 8
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < offset + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    offset += header_len
    entries = header.pop("entries")
    expected = sum(int(np.prod(shape)) for _, shape in entries) * 8
    if len(blob) - offset != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, found {len(blob) - offset}")
    model = MetaBINNet(**header)
    state = OrderedDict()
    for name, shape in entries:
        count = int(np.prod(shape))
        state[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += count * 8
    model.load_state_dict(state)
    return model
