"""Alternating base updates and balancing-parameter meta-learning episodes.

Each iteration:

1. base update - SGD with momentum on the feature extractor (minus rho) and
   the classifier using cross-entropy + triplet on a batch from every domain;
2. random split of the source domains into meta-train / meta-test;
3. inner update - a temporary rho' one gradient step away from rho on the
   meta-train loss, with a triangular step-size schedule;
4. meta-test update - the triplet-loss gradient at rho' (first-order, rho'
   treated as a constant) is applied to rho.

Only rho moves during steps 3-4 and only the remaining parameters move during
step 1.
"""

import csv
import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autograd import Tensor
from .data import sample_batch
from .errors import ConfigError, ContractError, MetaBINError, NumericError, TrainingError
from .losses import base_loss, batch_hard_triplet, inter_domain_shuffle, intra_domain_scatter, meta_train_loss
from .model import MetaBINNet, save_checkpoint
from .normalization import TRAIN, project_rho

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "epoch", "L_ce", "L_tr_base", "L_scat", "L_shuf", "L_tr_mtr",
               "L_tr_mte", "beta", "gamma", "mean_rho", "min_rho", "max_rho")


@dataclass
class TrainConfig:
    alpha: float = 0.01
    warmup_epochs: int = 10
    warmup_factor: float = 0.1
    decay_epochs: tuple = (40, 70)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta_min: float = 0.001
    beta_max: float = 0.1
    beta_fixed: float = 0.05
    cyclic_beta: bool = True
    cycle_length: int = 0  # iterations per half-cycle; 0 means one epoch
    gamma: float = 0.1
    margin: float = 0.3
    epsilon: float = 0.1
    epochs: int = 40
    iters_per_epoch: int = 0  # 0 means source images // batch size
    samples_per_domain: int = 16
    instances: int = 4
    n_mtr: int = 3
    n_mte: int = 2
    enable_meta: bool = True
    enable_scat: bool = True
    enable_shuf: bool = True
    rho_init: float = 1.0
    emb_dim: int = 32
    channels: tuple = (8, 16, 32)
    strides: tuple = (1, 2, 2)
    seed: int = 0

    def validate(self, num_domains=None):
        if self.n_mtr < 1 or self.n_mte < 1:
            raise ConfigError("meta-train and meta-test need at least one domain each")
        if num_domains is not None and self.n_mtr + self.n_mte != num_domains:
            raise ConfigError(
                f"n_mtr + n_mte = {self.n_mtr + self.n_mte} does not match {num_domains} domains"
            )
        if not 0 < self.beta_min < self.beta_max:
            raise ConfigError("beta range must satisfy 0 < beta_min < beta_max")
        if self.epochs < 1 or self.alpha <= 0 or self.gamma < 0:
            raise ConfigError("epochs and alpha must be positive, gamma non-negative")
        if self.samples_per_domain % self.instances:
            raise ConfigError("samples_per_domain must be a multiple of instances")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# -- schedules and sampling ---------------------------------------------------

def cyclic_beta(iteration, cycle_length, beta_min=0.001, beta_max=0.1):
    """Triangular wave: ``beta_min`` at 0, ``beta_max`` at ``cycle_length``, period ``2 * cycle_length``."""
    if cycle_length < 1:
        raise ConfigError("cycle_length must be at least 1")
    t = iteration % (2 * cycle_length)
    frac = t / cycle_length if t <= cycle_length else (2 * cycle_length - t) / cycle_length
    return (1.0 - frac) * beta_min + frac * beta_max


def learning_rate(iteration, iters_per_epoch, cfg):
    """Linear warm-up from ``warmup_factor * alpha``, then step decay at ``decay_epochs``."""
    warmup = cfg.warmup_epochs * iters_per_epoch
    if iteration < warmup:
        frac = iteration / warmup
        return cfg.alpha * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * frac)
    epoch = iteration // iters_per_epoch
    drops = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.alpha * cfg.decay_factor ** drops


@dataclass
class MetaSplit:
    mtr_domains: tuple
    mte_domains: tuple


def domain_split(num_domains, n_mtr, n_mte, rng):
    if n_mtr < 1 or n_mte < 1 or n_mtr + n_mte != num_domains:
        raise ConfigError(f"cannot split {num_domains} domains into {n_mtr} + {n_mte}")
    perm = rng.permutation(num_domains)
    return MetaSplit(tuple(sorted(int(i) for i in perm[:n_mtr])),
                     tuple(sorted(int(i) for i in perm[n_mtr:])))


def seed_streams(seed):
    """Independent generators for model init, base batches and meta episodes."""
    init, base, meta = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(base), np.random.default_rng(meta)


# -- optimisation -------------------------------------------------------------

class SGD:
    """SGD with momentum and L2 weight decay: ``v = mu*v + g + wd*p``, ``p -= lr*v``."""

    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p, v in zip(self.params, self.velocity):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v


def param_digest(params):
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _rho_grad(p):
    return np.zeros_like(p.data) if p.grad is None else p.grad


def _to_tensor(images):
    return Tensor(np.asarray(images, dtype=np.float64))


# -- trainer ------------------------------------------------------------------

@dataclass
class IterationLog:
    rows: list = field(default_factory=list)

    def append(self, row):
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for r in self.rows:
                writer.writerow([r[c] if isinstance(r[c], int) else repr(float(r[c]))
                                 for c in LOG_COLUMNS])


class MetaBINTrainer:
    """Owns a model, its base optimizer and the random streams for one run."""

    def __init__(self, dataset, config=None, model=None, audit=False):
        self.cfg = TrainConfig() if config is None else config
        self.dataset = dataset
        self.cfg.validate(dataset.num_domains if self.cfg.enable_meta else None)
        rng_init, self.rng_base, self.rng_meta = seed_streams(self.cfg.seed)
        if model is None:
            model = MetaBINNet(
                num_classes=dataset.num_identities,
                in_channels=dataset.sources[0].images.shape[1],
                channels=self.cfg.channels,
                strides=self.cfg.strides,
                emb_dim=self.cfg.emb_dim,
                rho_init=self.cfg.rho_init,
                rng=rng_init,
            )
        self.model = model
        part = model.partition()
        self.base_params = list(part.base().values())
        self.rho_params = list(part.theta_rho.values())
        self.optimizer = SGD(self.base_params, self.cfg.alpha, self.cfg.momentum, self.cfg.weight_decay)
        n_images = sum(len(d) for d in dataset.sources)
        batch = self.cfg.samples_per_domain * dataset.num_domains
        self.iters_per_epoch = self.cfg.iters_per_epoch or max(1, n_images // batch)
        self.cycle_length = self.cfg.cycle_length or self.iters_per_epoch
        self.iteration = 0
        self.audit = audit
        self.violations = []
        self.meta_copied_elements = []

    @property
    def total_iterations(self):
        return self.cfg.epochs * self.iters_per_epoch

    def beta(self, iteration):
        if not self.cfg.cyclic_beta:
            return self.cfg.beta_fixed
        return cyclic_beta(iteration, self.cycle_length, self.cfg.beta_min, self.cfg.beta_max)

    # -- stages ---------------------------------------------------------------

    def base_update(self, batch, lr):
        """One SGD step on theta_f and phi; rho receives a gradient but is not stepped."""
        model = self.model
        model.zero_grad()
        emb, logits = model.forward(_to_tensor(batch.images), TRAIN)
        loss, parts = base_loss(logits, emb, batch.labels, self.cfg.epsilon, self.cfg.margin)
        loss.backward()
        self.optimizer.step(lr)
        model.zero_grad()
        return parts

    def inner_update(self, batch, beta):
        """Return (rho', parts) with rho' a projected copy; the live rho is untouched."""
        if len(batch) == 0:
            raise ContractError("empty meta-train batch")
        model = self.model
        model.zero_grad()
        emb = model.embed(_to_tensor(batch.images), TRAIN)
        loss, parts = meta_train_loss(emb, batch.labels, batch.domains, self.cfg.margin,
                                      use_scatter=self.cfg.enable_scat,
                                      use_shuffle=self.cfg.enable_shuf)
        loss.backward()
        rho_prime = [np.clip(p.data - beta * _rho_grad(p), 0.0, 1.0) for p in self.rho_params]
        model.zero_grad()
        self.meta_copied_elements.append(sum(r.size for r in rho_prime))
        return rho_prime, parts

    def meta_test_update(self, batch, rho_prime, gamma):
        """First-order meta step: gradient of the triplet loss at rho', applied to rho."""
        if len(batch) == 0:
            raise ContractError("empty meta-test batch")
        model = self.model
        live = [p.data for p in self.rho_params]
        for p, r in zip(self.rho_params, rho_prime):
            p.data = r
        try:
            model.zero_grad()
            emb = model.embed(_to_tensor(batch.images), TRAIN)
            loss = batch_hard_triplet(emb, batch.labels, self.cfg.margin)
            loss.backward()
            grads = [_rho_grad(p) for p in self.rho_params]
        finally:
            for p, arr in zip(self.rho_params, live):
                p.data = arr
            model.zero_grad()
        for p, g in zip(self.rho_params, grads):
            p.data -= gamma * g
        for layer in model.rho_layers():
            project_rho(layer)
        return loss.item()

    # -- loop -----------------------------------------------------------------

    def _snapshot(self):
        return (param_digest(self.base_params), param_digest(self.rho_params))

    def _check(self, stage, before, after):
        base_changed = before[0] != after[0]
        rho_changed = before[1] != after[1]
        if stage == "base" and rho_changed:
            self.violations.append((self.iteration, stage, "theta_rho"))
        if stage in ("inner", "meta_test") and base_changed:
            self.violations.append((self.iteration, stage, "theta_f/phi"))
        if stage == "inner" and rho_changed:
            self.violations.append((self.iteration, stage, "theta_rho"))

    def step(self):
        """Run one full iteration and return its log row."""
        cfg = self.cfg
        it = self.iteration
        lr = learning_rate(it, self.iters_per_epoch, cfg)
        sources = self.dataset.sources
        nan = float("nan")
        row = {"iteration": it, "epoch": it // self.iters_per_epoch}

        before = self._snapshot() if self.audit else None
        batch = sample_batch(sources, cfg.samples_per_domain, cfg.instances, self.rng_base)
        parts = self.base_update(batch, lr)
        if self.audit:
            after = self._snapshot()
            self._check("base", before, after)
            before = after
        row.update(L_ce=parts["ce"], L_tr_base=parts["triplet"])

        beta = self.beta(it)
        if cfg.enable_meta:
            split = domain_split(len(sources), cfg.n_mtr, cfg.n_mte, self.rng_meta)
            x_s = sample_batch(sources, cfg.samples_per_domain, cfg.instances, self.rng_meta,
                               domain_ids=split.mtr_domains)
            rho_prime, mparts = self.inner_update(x_s, beta)
            if self.audit:
                after = self._snapshot()
                self._check("inner", before, after)
                before = after
            x_t = sample_batch(sources, cfg.samples_per_domain, cfg.instances, self.rng_meta,
                               domain_ids=split.mte_domains)
            l_mte = self.meta_test_update(x_t, rho_prime, cfg.gamma)
            if self.audit:
                self._check("meta_test", before, self._snapshot())
            row.update(L_scat=mparts["scatter"], L_shuf=mparts["shuffle"],
                       L_tr_mtr=mparts["triplet"], L_tr_mte=l_mte)
        else:
            row.update(L_scat=nan, L_shuf=nan, L_tr_mtr=nan, L_tr_mte=nan)

        rho = np.concatenate([p.data for p in self.rho_params])
        row.update(beta=beta if cfg.enable_meta else nan, gamma=cfg.gamma if cfg.enable_meta else nan,
                   mean_rho=float(rho.mean()), min_rho=float(rho.min()), max_rho=float(rho.max()))
        self.iteration += 1
        return row

    def train(self, out_dir=None, iterations=None):
        """Run the configured schedule (or ``iterations`` steps) and return the log."""
        history = IterationLog()
        total = self.total_iterations if iterations is None else iterations
        ckpt_dir = None
        if out_dir is not None:
            ckpt_dir = os.path.join(out_dir, "checkpoints")
            os.makedirs(ckpt_dir, exist_ok=True)
        for _ in range(total):
            good = self.model.state_dict()
            try:
                row = self.step()
                bad = [k for k, v in row.items() if k.startswith("L_") and np.isinf(v)]
                if bad:
                    raise NumericError(f"non-finite loss {bad}")
            except (NumericError, MetaBINError) as exc:
                self.model.load_state_dict(good)
                path = None
                if out_dir is not None:
                    path = os.path.join(out_dir, "last_good.ckpt")
                    save_checkpoint(self.model, path)
                raise TrainingError(f"iteration {self.iteration}: {exc}", checkpoint=path) from exc
            history.append(row)
            if row["iteration"] % 50 == 0:
                log.info("iter %d ce=%.4f tr=%.4f mean_rho=%.4f", row["iteration"], row["L_ce"],
                         row["L_tr_base"], row["mean_rho"])
            if ckpt_dir is not None and self.iteration % self.iters_per_epoch == 0:
                epoch = self.iteration // self.iters_per_epoch
                save_checkpoint(self.model, os.path.join(ckpt_dir, f"epoch_{epoch:03d}.ckpt"))
        if out_dir is not None:
            history.write_csv(os.path.join(out_dir, "train_log.csv"))
            save_checkpoint(self.model, os.path.join(out_dir, "model.ckpt"))
        return history


def train(config, dataset, out_dir=None, audit=False):
    trainer = MetaBINTrainer(dataset, config, audit=audit)
    history = trainer.train(out_dir)
    return trainer.model, history


def baseline_config(config):
    """The BN baseline of the same run: rho frozen at 1 and no meta episodes."""
    values = asdict(config)
    values.update(enable_meta=False, rho_init=1.0)
    return TrainConfig(**values)


# -- diagnostics --------------------------------------------------------------

def rho_gradient_probe(model, batch, margin=0.3):
    """Mean d(loss)/d(rho) over all balancing parameters, per meta-train loss.

    Runs a train-mode forward; running statistics are restored afterwards so
    the probe leaves the model unchanged.
    """
    saved = {k: v.copy() for k, v in model.buffers().items()}
    rho_params = list(model.partition().theta_rho.values())
    out = {}
    try:
        model.zero_grad()
        emb = model.embed(_to_tensor(batch.images), TRAIN)
        losses = {
            "scatter": intra_domain_scatter(emb, batch.domains),
            "shuffle": inter_domain_shuffle(emb, batch.labels, batch.domains),
            "triplet": batch_hard_triplet(emb, batch.labels, margin),
        }
        names = list(losses)
        for i, name in enumerate(names):
            model.zero_grad()
            losses[name].backward(retain_graph=i < len(names) - 1)
            out[name] = np.concatenate([_rho_grad(p).copy() for p in rho_params])
    finally:
        model.zero_grad()
        for k, arr in model.buffers().items():
            arr[...] = saved[k]
    return {name: float(g.mean()) for name, g in out.items()}, out


def probe_over_batches(model, sources, n_batches=50, n_mtr=3, samples_per_domain=16, instances=4,
                       margin=0.3, seed=0):
    """Average :func:`rho_gradient_probe` over random meta-train batches.

    Each batch draws ``n_mtr`` of the source domains, the same way a training
    episode would.
    """
    rng = np.random.default_rng(seed)
    totals = {"scatter": 0.0, "shuffle": 0.0, "triplet": 0.0}
    for _ in range(n_batches):
        ids = np.sort(rng.permutation(len(sources))[:n_mtr])
        batch = sample_batch(sources, samples_per_domain, instances, rng, domain_ids=ids)
        means, _ = rho_gradient_probe(model, batch, margin)
        for k in totals:
            totals[k] += means[k]
    out = {k: v / n_batches for k, v in totals.items()}
    out["scatter_plus_shuffle"] = out["scatter"] + out["shuffle"]
    out["batches"] = n_batches
    return out
