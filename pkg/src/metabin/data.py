"""Synthetic multi-domain person-retrieval data.

Identity content is spatial: every identity owns a smooth random template and
a colour offset. Domain style is channel-wise or global: per-channel gain and
bias, blur strength, a contrast exponent and additive noise. On top of that
each camera view gets its own random brightness and colour cast, drawn per
image with a domain-specific spread. Instance normalization can strip all of
this while batch statistics cannot, which is the property the domain
generalization experiment relies on.
"""

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, FormatError, SamplingError

DATASET_MAGIC = b"MBDS"
DATASET_VERSION = 1


@dataclass
class StyleSpec:
    gain: list
    bias: list
    blur: float
    contrast: float
    noise: float
    illumination_gain: float = 0.0
    illumination_bias: float = 0.0

    @classmethod
    def identity(cls, channels, noise=0.0):
        return cls([1.0] * channels, [0.0] * channels, 0.0, 1.0, noise)

    def apply(self, images, rng):
        """Style ``images`` of shape (n, C, H, W); returns float64."""
        out = images
        if self.blur > 0:
            out = gaussian_filter(out, sigma=(0, 0, self.blur, self.blur), mode="wrap")
        if self.contrast != 1.0:
            out = np.sign(out) * np.abs(out) ** self.contrast
        gain = np.asarray(self.gain)[None, :, None, None]
        bias = np.asarray(self.bias)[None, :, None, None]
        out = gain * out + bias
        n, c = out.shape[:2]
        if self.illumination_gain > 0:
            out = out * np.exp(rng.normal(0.0, self.illumination_gain, size=(n, 1, 1, 1)))
        if self.illumination_bias > 0:
            out = out + rng.normal(0.0, self.illumination_bias, size=(n, c, 1, 1))
        if self.noise > 0:
            out = out + rng.normal(0.0, self.noise, size=out.shape)
        return out


@dataclass
class GeneratorConfig:
    """Every knob of :func:`generate`; stored verbatim in dataset metadata."""

    num_domains: int = 5
    identities_per_domain: int = 20
    images_per_identity: int = 8
    num_target_domains: int = 2
    target_identities: int = 20
    target_images_per_identity: int = 8
    channels: int = 3
    image_size: int = 16
    seed: int = 0
    template_smoothing: float = 1.5
    template_shared: float = 0.5
    color_scale: float = 0.6
    jitter_shift: int = 1
    content_noise: float = 0.3
    gain_spread: float = 0.8
    global_gain_spread: float = 0.6
    bias_scale: float = 3.0
    max_blur: float = 0.8
    contrast_spread: float = 0.3
    noise_range: tuple = (0.05, 0.15)
    illumination_gain_range: tuple = (0.1, 0.4)
    illumination_bias_range: tuple = (0.2, 0.8)
    styles: bool = True

    def validate(self):
        if self.num_domains < 2:
            raise ConfigError("need at least two source domains")
        if self.identities_per_domain < 4 or self.target_identities < 4:
            raise ConfigError("each domain needs at least four identities")
        if self.images_per_identity < 2 or self.target_images_per_identity < 2:
            raise ConfigError("each identity needs at least two images")
        if self.num_target_domains < 0 or self.channels < 1 or self.image_size < 8:
            raise ConfigError("invalid target count, channel count or image size")


@dataclass
class Domain:
    domain_id: int
    images: np.ndarray  # (N_k, C, H, W) float32
    labels: np.ndarray  # global identity ids, int64
    style: StyleSpec

    @property
    def identities(self):
        return np.unique(self.labels)

    def __len__(self):
        return len(self.labels)


@dataclass
class DomainDataset:
    sources: list
    targets: list
    config: GeneratorConfig = field(default_factory=GeneratorConfig)

    @property
    def num_identities(self):
        return int(sum(len(d.identities) for d in self.sources))

    @property
    def num_domains(self):
        return len(self.sources)


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    def __len__(self):
        return len(self.labels)


def _draw_style(cfg, rng):
    c = cfg.channels
    if not cfg.styles:
        return StyleSpec.identity(c, noise=float(np.mean(cfg.noise_range)))
    global_gain = np.exp(rng.normal(0.0, cfg.global_gain_spread))
    gain = global_gain * np.exp(rng.normal(0.0, cfg.gain_spread, size=c))
    return StyleSpec(
        gain=[float(g) for g in gain],
        bias=[float(b) for b in rng.normal(0.0, cfg.bias_scale, size=c)],
        blur=float(rng.uniform(0.0, cfg.max_blur)),
        contrast=float(np.exp(rng.uniform(-cfg.contrast_spread, cfg.contrast_spread))),
        noise=float(rng.uniform(*cfg.noise_range)),
        illumination_gain=float(rng.uniform(*cfg.illumination_gain_range)),
        illumination_bias=float(rng.uniform(*cfg.illumination_bias_range)),
    )


def _templates(cfg, count, rng):
    shape = (cfg.channels, cfg.image_size, cfg.image_size)

    def field_():
        f = gaussian_filter(rng.normal(size=shape), sigma=(0, cfg.template_smoothing,
                                                           cfg.template_smoothing), mode="wrap")
        f -= f.mean(axis=(1, 2), keepdims=True)
        return f / f.std(axis=(1, 2), keepdims=True)

    shared = field_()
    a = np.sqrt(cfg.template_shared)
    b = np.sqrt(1.0 - cfg.template_shared)
    templates = np.stack([a * shared + b * field_() for _ in range(count)])
    colors = rng.normal(0.0, cfg.color_scale, size=(count, cfg.channels))
    return templates + colors[:, :, None, None]


def _render_domain(cfg, domain_id, first_label, n_ids, per_id, seed_seq):
    content_rng, style_rng, noise_rng = (np.random.default_rng(s) for s in seed_seq.spawn(3))
    style = _draw_style(cfg, style_rng)
    templates = _templates(cfg, n_ids, content_rng)
    images = np.repeat(templates, per_id, axis=0)
    s = cfg.jitter_shift
    if s > 0:
        shifts = content_rng.integers(-s, s + 1, size=(len(images), 2))
        for i, (dy, dx) in enumerate(shifts):
            images[i] = np.roll(images[i], (int(dy), int(dx)), axis=(1, 2))
    images = images + content_rng.normal(0.0, cfg.content_noise, size=images.shape)
    images = style.apply(images, noise_rng).astype(np.float32)
    labels = np.repeat(np.arange(first_label, first_label + n_ids), per_id).astype(np.int64)
    return Domain(domain_id, images, labels, style)


def generate(config=None, **overrides):
    """Build K source domains and the held-out target domains.

    Each domain derives its own seed from ``config.seed`` so the result does
    not depend on generation order. Identity ids are global: sources occupy
    ``0..M-1`` and targets continue after them, so no two domains share one.
    """
    cfg = GeneratorConfig(**overrides) if config is None else config
    if config is not None and overrides:
        cfg = GeneratorConfig(**{**asdict(config), **overrides})
    cfg.validate()
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.num_domains + cfg.num_target_domains)
    sources, targets = [], []
    next_label = 0
    for k in range(cfg.num_domains):
        sources.append(_render_domain(cfg, k, next_label, cfg.identities_per_domain,
                                      cfg.images_per_identity, seqs[k]))
        next_label += cfg.identities_per_domain
    for t in range(cfg.num_target_domains):
        k = cfg.num_domains + t
        targets.append(_render_domain(cfg, k, next_label, cfg.target_identities,
                                      cfg.target_images_per_identity, seqs[k]))
        next_label += cfg.target_identities
    return DomainDataset(sources, targets, cfg)


def sample_batch(domains, samples_per_domain=16, instances=4, rng=None, domain_ids=None):
    """PK sampling: per domain, ``samples_per_domain / instances`` identities x ``instances`` images.

    ``domains`` is a list of :class:`Domain`; ``domain_ids`` selects a subset
    by position. Images are drawn without replacement when an identity has
    enough of them.
    """
    rng = np.random.default_rng() if rng is None else rng
    if instances < 2 or samples_per_domain % instances:
        raise SamplingError(
            f"samples_per_domain={samples_per_domain} is not a multiple of instances={instances} >= 2"
        )
    selected = domains if domain_ids is None else [domains[i] for i in domain_ids]
    if not selected:
        raise SamplingError("no domains requested")
    p = samples_per_domain // instances
    images, labels, doms = [], [], []
    for dom in selected:
        ids = dom.identities
        if len(ids) < p:
            raise SamplingError(f"domain {dom.domain_id} has {len(ids)} identities, needs {p}")
        for ident in rng.choice(ids, size=p, replace=False):
            pool = np.flatnonzero(dom.labels == ident)
            if len(pool) < 2:
                raise SamplingError(f"identity {ident} in domain {dom.domain_id} has fewer than 2 images")
            pick = rng.choice(pool, size=instances, replace=len(pool) < instances)
            images.append(dom.images[pick])
            labels.append(np.full(instances, ident, dtype=np.int64))
            doms.append(np.full(instances, dom.domain_id, dtype=np.int64))
    return Batch(np.concatenate(images).astype(np.float64), np.concatenate(labels),
                 np.concatenate(doms))


# -- persistence --------------------------------------------------------------

def _sidecar(path):
    return os.fspath(path) + ".json"


def save_dataset(dataset, path):
    """Binary pixel file at ``path`` plus a JSON metadata sidecar at ``path.json``.

    Binary layout: magic, uint32 version, uint32 count, uint32 C, H, W, then
    little-endian float32 pixels, int64 labels and int32 domain ids.
    """
    domains = dataset.sources + dataset.targets
    images = np.concatenate([d.images for d in domains]).astype("<f4")
    labels = np.concatenate([d.labels for d in domains]).astype("<i8")
    dom_ids = np.concatenate([np.full(len(d), d.domain_id) for d in domains]).astype("<i4")
    n, c, h, w = images.shape
    blob = (DATASET_MAGIC + struct.pack("<IIIII", DATASET_VERSION, n, c, h, w)
            + images.tobytes() + labels.tobytes() + dom_ids.tobytes())
    meta = {
        "version": DATASET_VERSION,
        "generator": asdict(dataset.config),
        "sources": [{"domain_id": d.domain_id, "count": len(d), "style": asdict(d.style)}
                    for d in dataset.sources],
        "targets": [{"domain_id": d.domain_id, "count": len(d), "style": asdict(d.style)}
                    for d in dataset.targets],
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    for target, data, mode in ((path, blob, "wb"), (_sidecar(path), json.dumps(meta, indent=2), "w")):
        tmp = f"{target}.tmp"
        with open(tmp, mode) as fh:
            fh.write(data)
        os.replace(tmp, target)


def load_dataset(path):
    try:
        with open(_sidecar(path)) as fh:
            meta = json.load(fh)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: missing or corrupt metadata") from exc
    with open(path, "rb") as fh:
        blob = fh.read()
    header = len(DATASET_MAGIC) + 20
    if len(blob) < header or not blob.startswith(DATASET_MAGIC):
        raise FormatError(f"{path}: not a dataset file")
    version, n, c, h, w = struct.unpack_from("<IIIII", blob, len(DATASET_MAGIC))
    if version != DATASET_VERSION or meta.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    expected = header + n * c * h * w * 4 + n * 8 + n * 4
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    if hashlib.sha256(blob).hexdigest() != meta.get("sha256"):
        raise FormatError(f"{path}: checksum mismatch")
    off = header
    images = np.frombuffer(blob, "<f4", n * c * h * w, off).reshape(n, c, h, w).astype(np.float32)
    off += images.nbytes
    labels = np.frombuffer(blob, "<i8", n, off).astype(np.int64)
    off += n * 8
    dom_ids = np.frombuffer(blob, "<i4", n, off).astype(np.int64)

    gen = dict(meta["generator"])
    for key in ("noise_range", "illumination_gain_range", "illumination_bias_range"):
        gen[key] = tuple(gen[key])
    cfg = GeneratorConfig(**gen)

    def build(entries):
        out = []
        for e in entries:
            mask = dom_ids == e["domain_id"]
            if mask.sum() != e["count"]:
                raise FormatError(f"{path}: domain {e['domain_id']} count mismatch")
            out.append(Domain(e["domain_id"], images[mask], labels[mask], StyleSpec(**e["style"])))
        return out

    return DomainDataset(build(meta["sources"]), build(meta["targets"]), cfg)


def regenerate(dataset):
    """Rebuild a dataset from the generator settings stored with it."""
    return generate(dataset.config)
