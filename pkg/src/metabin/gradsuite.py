"""Finite-difference verification of every differentiable piece of the package.

Each case draws a random, non-degenerate instance and yields one or more
``(name, f, x)`` checks; ``f`` reads ``x`` through a closure and returns a
scalar. Outputs of non-scalar ops are contracted with a fixed random weight
so every output element contributes to the gradient.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import losses, normalization as N
from .autograd import Tensor, finite_diff_check, functional as F
from .model import MetaBINNet

TOLERANCE = 1e-4


@dataclass
class SuiteRow:
    name: str
    instances: int
    checked: int
    excluded: int
    max_error: float
    seconds: float
    tol: float = TOLERANCE

    @property
    def passed(self):
        return self.instances > 0 and self.checked > 0 and self.max_error < self.tol


def _leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def _contract(out, rng):
    """Scalar ``sum(out * w)`` for a random ``w`` fixed per instance."""
    w = rng.normal(size=out.shape)
    return lambda t: F.sum(t * w)


def _away_from_zero(rng, shape, low=0.2):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.5, size=shape)


def _unary(op, sample):
    def case(rng):
        x = _leaf(sample(rng))
        reduce = _contract(op(x), rng)
        yield "x", (lambda _: reduce(op(x))), x
    return case


def _binary(op, shape_a=(3, 4), shape_b=(3, 4), positive_b=False):
    def case(rng):
        a = _leaf(rng.normal(size=shape_a))
        b = _leaf(rng.uniform(0.5, 2.0, size=shape_b) * rng.choice([-1, 1], size=shape_b)
                  if positive_b else rng.normal(size=shape_b))
        reduce = _contract(op(a, b), rng)
        yield "a", (lambda _: reduce(op(a, b))), a
        yield "b", (lambda _: reduce(op(a, b))), b
    return case


def _select_case(select):
    def case(rng):
        x = _leaf(rng.normal(size=(4, 5)))
        mask = rng.random((4, 5)) < 0.6
        mask[np.arange(4), rng.integers(0, 5, size=4)] = True
        reduce = _contract(select(x, 1, mask)[0], rng)
        yield "x", (lambda _: reduce(select(x, 1, mask)[0])), x
    return case


def _conv_case(stride):
    def case(rng):
        x = _leaf(rng.normal(size=(2, 2, 5, 5)))
        w = _leaf(rng.normal(size=(3, 2, 3, 3)))
        op = lambda: F.conv2d(x, w, stride=stride, padding=1)
        reduce = _contract(op(), rng)
        yield "x", (lambda _: reduce(op())), x
        yield "weight", (lambda _: reduce(op())), w
    return case


def _conv_relu_case(rng):
    # relu kinks are likely here; the checker excludes coordinates sitting on one
    x = _leaf(rng.normal(size=(2, 2, 6, 6)))
    w = _leaf(rng.normal(size=(2, 2, 3, 3)))
    op = lambda: F.global_avg_pool(F.relu(F.conv2d(x, w, stride=2)))
    reduce = _contract(op(), rng)
    yield "x", (lambda _: reduce(op())), x


def _bin_params(rng, channels, rho=None):
    p = N.BinLayerParams.create(channels)
    p.gamma_b.data[:] = rng.uniform(0.5, 1.5, channels)
    p.beta_b.data[:] = rng.normal(0.0, 0.5, channels)
    p.gamma_i.data[:] = rng.uniform(0.5, 1.5, channels)
    p.beta_i.data[:] = rng.normal(0.0, 0.5, channels)
    p.rho.data[:] = rng.uniform(0.1, 0.9, channels) if rho is None else rho
    return p


def _norm_case(forward, params):
    def case(rng):
        x = _leaf(rng.normal(1.0, 2.0, size=(3, 2, 3, 3)))
        p = _bin_params(rng, 2)
        op = lambda: forward(x, p)
        reduce = _contract(op(), rng)
        yield "x", (lambda _: reduce(op())), x
        for name in params:
            t = getattr(p, name)
            yield name, (lambda _: reduce(op())), t
    return case


def _neck_case(rng):
    x = _leaf(rng.normal(size=(6, 4)))
    p = N.BatchNormParams.create(4)
    p.gamma.data[:] = rng.uniform(0.5, 1.5, 4)
    op = lambda: N.neck_norm(x, p, N.TRAIN)
    reduce = _contract(op(), rng)
    yield "x", (lambda _: reduce(op())), x
    yield "gamma", (lambda _: reduce(op())), p.gamma


def _grouped(rng, ids=3, per_id=3, domains=None, dim=4):
    labels = np.repeat(np.arange(ids), per_id)
    emb = rng.normal(size=(ids * per_id, dim)) * 2.0
    if domains is None:
        return emb, labels
    return emb, labels, np.repeat(np.arange(ids) % domains, per_id)


def _ce_case(rng):
    logits = _leaf(rng.normal(size=(5, 4)) * 2.0)
    labels = rng.integers(0, 4, size=5)
    eps = rng.uniform(0.0, 0.3)
    yield "logits", (lambda _: losses.cross_entropy_smoothed(logits, labels, eps)), logits


def _triplet_case(rng):
    emb, labels = _grouped(rng)
    x = _leaf(emb)
    margin = rng.uniform(0.5, 3.0)
    yield "embeddings", (lambda _: losses.batch_hard_triplet(x, labels, margin)), x


def _scatter_case(rng):
    emb, labels, doms = _grouped(rng, ids=4, per_id=2, domains=2)
    x = _leaf(emb)
    yield "embeddings", (lambda _: losses.intra_domain_scatter(x, doms)), x


def _shuffle_case(rng):
    emb, labels, doms = _grouped(rng, ids=4, per_id=2, domains=2)
    x = _leaf(emb)
    yield "embeddings", (lambda _: losses.inter_domain_shuffle(x, labels, doms)), x


def _base_loss_case(rng):
    emb, labels = _grouped(rng)
    x = _leaf(emb)
    logits = _leaf(rng.normal(size=(len(labels), 3)))
    f = lambda _: losses.base_loss(logits, x, labels, 0.1, 1.0)[0]
    yield "embeddings", f, x
    yield "logits", f, logits


def _meta_train_case(rng):
    emb, labels, doms = _grouped(rng, ids=4, per_id=2, domains=2)
    x = _leaf(emb)
    yield "embeddings", (lambda _: losses.meta_train_loss(x, labels, doms, 1.0)[0]), x


def _tiny_model(rng):
    model = MetaBINNet(num_classes=4, channels=(2, 3), strides=(1, 2), emb_dim=4, rng=rng)
    for p in model.bins:
        p.rho.data[:] = rng.uniform(0.2, 0.8, p.channels)
    images = rng.normal(size=(8, 3, 8, 8))
    labels = np.repeat(np.arange(4), 2)
    domains = np.repeat([0, 1, 0, 1], 2)
    return model, images, labels, domains


def _model_rho_case(loss_name):
    def case(rng):
        model, images, labels, domains = _tiny_model(rng)

        def f(_):
            emb = model.embed(images, N.TRAIN)
            if loss_name == "scatter":
                return losses.intra_domain_scatter(emb, domains)
            if loss_name == "shuffle":
                return losses.inter_domain_shuffle(emb, labels, domains)
            if loss_name == "triplet":
                return losses.batch_hard_triplet(emb, labels, 1.0)
            if loss_name == "meta_train":
                return losses.meta_train_loss(emb, labels, domains, 1.0)[0]
            _, logits = model.forward(images, N.TRAIN)
            return losses.cross_entropy_smoothed(logits, labels, 0.1)

        for i, p in enumerate(model.bins):
            yield f"bin{i}.rho", f, p.rho
    return case


CASES = {
    "add": _binary(F.add, (3, 4), (4,)),
    "sub": _binary(F.sub, (3, 4), (3, 1)),
    "mul": _binary(F.mul, (3, 4), (1, 4)),
    "div": _binary(F.div, (3, 4), (3, 4), positive_b=True),
    "neg": _unary(F.neg, lambda r: r.normal(size=(3, 4))),
    "scalar_ops": _unary(lambda x: 2.5 * x - 1.0 + x / 3.0, lambda r: r.normal(size=(3, 4))),
    "power": _unary(lambda x: F.power(x, 1.7), lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "exp": _unary(F.exp, lambda r: r.normal(size=(3, 4))),
    "log": _unary(F.log, lambda r: r.uniform(0.5, 3.0, size=(3, 4))),
    "sqrt": _unary(F.sqrt, lambda r: r.uniform(0.5, 3.0, size=(3, 4))),
    "relu": _unary(F.relu, lambda r: _away_from_zero(r, (3, 4))),
    "softplus": _unary(F.softplus, lambda r: 3.0 * r.normal(size=(3, 4))),
    "reshape": _unary(lambda x: F.reshape(x, (4, 3)), lambda r: r.normal(size=(3, 4))),
    "transpose": _unary(lambda x: F.transpose(x, (1, 0)), lambda r: r.normal(size=(3, 4))),
    "getitem": _unary(lambda x: x[[0, 2, 0], 1:], lambda r: r.normal(size=(3, 4))),
    "take_rows": _unary(lambda x: F.take_rows(x, [2, 0, 2]), lambda r: r.normal(size=(3, 4))),
    "concat": _binary(lambda a, b: F.concat([a, b], axis=0), (2, 4), (3, 4)),
    "sum": _unary(lambda x: F.sum(x, axis=(0, 2)), lambda r: r.normal(size=(2, 3, 4))),
    "mean": _unary(lambda x: F.mean(x, axis=(1,), keepdims=True), lambda r: r.normal(size=(2, 3, 4))),
    "var": _unary(lambda x: F.var(x, axis=(0, 2)), lambda r: r.normal(size=(2, 3, 4))),
    "global_avg_pool": _unary(F.global_avg_pool, lambda r: r.normal(size=(2, 3, 4, 4))),
    "max_select": _select_case(F.max_select),
    "min_select": _select_case(F.min_select),
    "matmul": _binary(F.matmul, (3, 4), (4, 2)),
    "linear": _binary(lambda x, w: F.linear(x, w, F.sum(w, axis=1)), (3, 4), (2, 4)),
    "dot": _binary(F.dot, (3, 4), (3, 4)),
    "l2_norm": _unary(F.l2_norm, lambda r: r.normal(size=(3, 4))),
    "cosine_similarity": _binary(F.cosine_similarity, (3, 4), (3, 4)),
    "pairwise_distance": _unary(F.pairwise_distance, lambda r: r.normal(size=(5, 3))),
    "log_softmax": _unary(lambda x: F.log_softmax(x, axis=1), lambda r: 2.0 * r.normal(size=(3, 5))),
    "conv2d_stride1": _conv_case(1),
    "conv2d_stride2": _conv_case(2),
    "conv_relu_pool": _conv_relu_case,
    "standardize": _unary(lambda x: F.standardize(x, (0, 2, 3)), lambda r: r.normal(size=(3, 2, 2, 2))),
    "channel_affine": _binary(lambda x, g: F.channel_affine(x, g, F.neg(g)), (2, 3, 2, 2), (3,)),
    "channel_mix": _binary(lambda a, w: F.channel_mix(a, F.exp(a), w), (2, 3, 2, 2), (3,)),
    "batch_norm": _norm_case(lambda x, p: N.batch_norm(x, p, N.TRAIN), ("gamma_b", "beta_b")),
    "instance_norm": _norm_case(N.instance_norm, ("gamma_i", "beta_i")),
    "bin_forward": _norm_case(lambda x, p: N.bin_forward(x, p, N.TRAIN),
                              ("gamma_b", "beta_b", "gamma_i", "beta_i", "rho")),
    "bin_forward_eval": _norm_case(lambda x, p: N.bin_forward(x, p, N.EVAL), ("rho",)),
    "neck_norm": _neck_case,
    "cross_entropy_smoothed": _ce_case,
    "batch_hard_triplet": _triplet_case,
    "intra_domain_scatter": _scatter_case,
    "inter_domain_shuffle": _shuffle_case,
    "base_loss": _base_loss_case,
    "meta_train_loss": _meta_train_case,
    "model_rho/scatter": _model_rho_case("scatter"),
    "model_rho/shuffle": _model_rho_case("shuffle"),
    "model_rho/triplet": _model_rho_case("triplet"),
    "model_rho/meta_train": _model_rho_case("meta_train"),
    "model_rho/cross_entropy": _model_rho_case("ce"),
}


def run_case(name, instances=20, seed=0, tol=TOLERANCE):
    """Check ``instances`` random draws of one case; returns a :class:`SuiteRow`."""
    case = CASES[name]
    rng = np.random.default_rng([seed, sorted(CASES).index(name)])
    start = time.perf_counter()
    worst, checked, excluded = 0.0, 0, 0
    for _ in range(instances):
        for _label, f, x in case(rng):
            res = finite_diff_check(f, x)
            worst = max(worst, res.max_error)
            checked += res.n_checked
            excluded += len(res.excluded)
    return SuiteRow(name, instances, checked, excluded, worst, time.perf_counter() - start, tol)


def run_suite(instances=20, seed=0, tol=TOLERANCE, names=None):
    return [run_case(n, instances, seed, tol) for n in (names or CASES)]


def format_table(rows):
    lines = [f"{'check':<26} {'inst':>5} {'coords':>7} {'excl':>5} {'max_err':>10}  status"]
    for r in rows:
        lines.append(f"{r.name:<26} {r.instances:>5} {r.checked:>7} {r.excluded:>5} "
                     f"{r.max_error:>10.2e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
