"""Verification suites behind ``sraa verify``.

Three suites share one registry:

* ``grad``: analytic gradients against central finite differences (h = 1e-5)
  for every differentiable op, every loss and every encoder parameter, over
  20 seeds; passes when the relative error stays below 1e-4.
* ``oracle``: vectorized implementations against plain-Python loop oracles on
  randomized small instances; passes within 1e-10.
* ``determinism``: seed twins must agree bit for bit.
"""

from __future__ import annotations

import dataclasses
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig, override
from .data import SplitPlan, generate_base, generate_test, sample_fewshot
from .encoders import VisualEncoder, build_semantic_table, encode_visual
from .engine import StepState, TrainConfig, poly_lr, predict, train_base, train_increment
from .evaluation import aliasing_matrix, iou
from .losses import (
    ClassMask,
    PrototypeSet,
    affinity_ce,
    affinity_map,
    concat_affinities,
    downsample_labels,
    kd_loss,
    pool_class_means,
    prototype_segment,
    relation_alignment_loss,
    segmentation_ce,
)
from .runner import generate_data, run_fold
from .tensor import Tensor

SUITES = ("grad", "oracle", "determinism")
GRAD_SEEDS = 20
ORACLE_INSTANCES = 50
FD_STEP = 1e-5
GRAD_TOL = 1e-4
ORACLE_TOL = 1e-10


@dataclass
class Check:
    suite: str
    name: str
    fn: Callable[[], tuple[bool, str]]


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float


REGISTRY: list[Check] = []


def register(suite: str, name: str):
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}")

    def deco(fn):
        REGISTRY.append(Check(suite, name, fn))
        return fn
    return deco


def registered(suite: str | None = None) -> list[Check]:
    return [c for c in REGISTRY if suite in (None, c.suite)]


def run_suite(suite: str) -> list[CheckResult]:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}")
    out = []
    for check in registered(suite):
        t0 = time.perf_counter()
        try:
            ok, detail = check.fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(suite, check.name, bool(ok), detail, time.perf_counter() - t0))
    return out


# --------------------------------------------------------------------------
# finite differences


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def fd_check(build: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray],
             rng: np.random.Generator, max_coords: int = 24) -> float:
    """Worst relative error between backward() and central differences.

    Small inputs are checked on every coordinate; larger ones on a random
    subset plus one random direction.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.backward(build(leaves))
    worst = 0.0
    for i, a in enumerate(arrays):
        analytic = leaves[i].grad

        def f(x, i=i):
            args = [Tensor(x) if j == i else Tensor(arrays[j]) for j in range(len(arrays))]
            return build(args).item()

        coords = (np.arange(a.size) if a.size <= max_coords
                  else rng.choice(a.size, size=max_coords, replace=False))
        num = np.empty(len(coords))
        for n, c in enumerate(coords):
            e = np.zeros(a.size)
            e[c] = FD_STEP
            e = e.reshape(a.shape)
            num[n] = (f(a + e) - f(a - e)) / (2 * FD_STEP)
        worst = max(worst, _rel_err(analytic.ravel()[coords], num))
        if a.size > max_coords:
            v = rng.standard_normal(a.shape)
            v /= np.linalg.norm(v)
            d_num = (f(a + FD_STEP * v) - f(a - FD_STEP * v)) / (2 * FD_STEP)
            d_an = float((analytic * v).sum())
            worst = max(worst, abs(d_an - d_num) / max(abs(d_an), abs(d_num), 1e-8))
    return worst


def _grad_check(make: Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]):
    def run():
        worst = 0.0
        for seed in range(GRAD_SEEDS):
            rng = np.random.default_rng([seed, 99])
            build, arrays = make(rng)
            worst = max(worst, fd_check(build, arrays, rng))
        return worst < GRAD_TOL, f"max relative error {worst:.2e} over {GRAD_SEEDS} seeds"
    return run


def _positive(rng, shape):
    return np.abs(rng.standard_normal(shape)) + 0.5


def _weights(rng, shape):
    # random weighting turns any tensor output into a scalar with a generic gradient
    w = rng.standard_normal(shape)
    return lambda y: T.sum(T.mul(y, Tensor(w)))


def _grad_ops():
    def unary(op, positive=False):
        def make(rng):
            x = _positive(rng, (3, 4)) if positive else rng.standard_normal((3, 4))
            w = _weights(rng, (3, 4))
            return (lambda a: w(op(a[0]))), [x]
        return make

    def binary(kind):
        def make(rng):
            a = rng.standard_normal((3, 4))
            b = _positive(rng, (3, 4)) if kind == "div" else rng.standard_normal((3, 4))
            w = _weights(rng, (3, 4))
            return (lambda t: w(T.elementwise(kind, t[0], t[1]))), [a, b]
        return make

    for kind in ("add", "sub", "mul", "div"):
        register("grad", f"op.elementwise.{kind}")(_grad_check(binary(kind)))

    def scalar_div(rng):
        w = _weights(rng, (3, 4))
        return (lambda t: w(T.div(t[0], 1.7))), [rng.standard_normal((3, 4))]

    register("grad", "op.elementwise.scalar")(_grad_check(scalar_div))
    register("grad", "op.log")(_grad_check(unary(T.log, positive=True)))
    register("grad", "op.relu")(_grad_check(unary(T.relu)))
    register("grad", "op.softmax")(_grad_check(unary(lambda a: T.softmax(a, axis=-1))))
    register("grad", "op.log_softmax")(_grad_check(unary(lambda a: T.log_softmax(a, axis=0))))
    register("grad", "op.normalize")(_grad_check(unary(lambda a: T.normalize(a, axis=1))))
    register("grad", "op.transpose")(
        _grad_check(lambda rng: ((lambda t, w=_weights(rng, (4, 3)): w(T.transpose(t[0]))),
                                 [rng.standard_normal((3, 4))])))
    register("grad", "op.reshape")(
        _grad_check(lambda rng: ((lambda t, w=_weights(rng, (2, 6)): w(T.reshape(t[0], (2, 6)))),
                                 [rng.standard_normal((3, 4))])))

    def reduce(kind, axes):
        def make(rng):
            x = rng.standard_normal((3, 4, 2))
            shape = np.sum(np.zeros((3, 4, 2)), axis=axes).shape
            w = _weights(rng, shape)
            return (lambda t: w(T.reduce(kind, t[0], axes))), [x]
        return make

    for kind in ("sum", "mean", "max"):
        register("grad", f"op.reduce.{kind}")(_grad_check(reduce(kind, 1)))
    register("grad", "op.reduce.sum_all")(_grad_check(
        lambda rng: ((lambda t: T.mul(T.sum(t[0]), T.sum(t[0]))), [rng.standard_normal((2, 3))])))

    def matmul(rng):
        w = _weights(rng, (3, 2))
        return (lambda t: w(T.matmul(t[0], t[1]))), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]

    register("grad", "op.matmul")(_grad_check(matmul))

    def concat(rng):
        w = _weights(rng, (2, 5))
        return (lambda t: w(T.concat([t[0], t[1]], axis=1))), [rng.standard_normal((2, 2)),
                                                               rng.standard_normal((2, 3))]

    register("grad", "op.concat")(_grad_check(concat))

    def narrow(rng):
        w = _weights(rng, (3, 2))
        return (lambda t: w(T.narrow(t[0], 1, 1, 3))), [rng.standard_normal((3, 4))]

    register("grad", "op.narrow")(_grad_check(narrow))

    def lookup(rng):
        idx = rng.integers(0, 4, size=(2, 3))
        w = _weights(rng, (2, 3))
        return (lambda t: w(T.lookup(t[0], idx))), [rng.standard_normal((2, 3, 4))]

    register("grad", "op.lookup")(_grad_check(lookup))

    def cosine(rng):
        return (lambda t: T.cosine_sim(t[0], t[1])), [rng.standard_normal(5), rng.standard_normal(5)]

    register("grad", "op.cosine_sim")(_grad_check(cosine))

    def conv(stride, padding):
        def make(rng):
            x = rng.standard_normal((2, 6, 6, 2))
            k = rng.standard_normal((3, 3, 2, 3))
            b = rng.standard_normal(3)
            out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, padding)
            w = _weights(rng, out.shape)
            return (lambda t: w(T.conv2d(t[0], t[1], t[2], stride, padding))), [x, k, b]
        return make

    register("grad", "op.conv2d.stride1")(_grad_check(conv(1, 1)))
    register("grad", "op.conv2d.stride2")(_grad_check(conv(2, 1)))


def _feature_problem(rng, n=2, h=3, w=3, d=4, k=3):
    feats = rng.standard_normal((n, h, w, d))
    protos = rng.standard_normal((k, d))
    labels = rng.integers(0, k, size=(n, h, w))
    return feats, protos, labels


def _grad_losses():
    def pooling(rng):
        feats = rng.standard_normal((2, 3, 3, 4))
        labels = rng.integers(0, 3, size=(2, 3, 3))
        labels.flat[:3] = [0, 1, 2]
        mask = ClassMask.from_labels(labels, [0, 1, 2])
        wgt = _weights(rng, (3, 4))
        return (lambda t: wgt(pool_class_means(t[0], mask))), [feats]

    register("grad", "loss.pool_class_means")(_grad_check(pooling))

    def alignment(rng):
        s = rng.standard_normal((4, 5))
        return (lambda t: relation_alignment_loss(t[0], s)), [rng.standard_normal((4, 5))]

    register("grad", "loss.relation_alignment")(_grad_check(alignment))

    def seg_ce(rng):
        feats, protos, labels = _feature_problem(rng)
        return (lambda t: segmentation_ce(prototype_segment(t[0], t[1], 10.0), labels)), [feats, protos]

    register("grad", "loss.segmentation_ce")(_grad_check(seg_ce))

    def aff_ce(rng):
        feats, protos, labels = _feature_problem(rng, k=4)
        old, new = protos[:2], protos[2:]

        def build(t):
            a = concat_affinities(affinity_map(t[0], t[1]), affinity_map(t[0], t[2]))
            return affinity_ce(a, labels, 10.0)
        return build, [feats, old, new]

    register("grad", "loss.affinity_ce")(_grad_check(aff_ce))

    def kd(rng):
        feats, protos, _ = _feature_problem(rng, k=4)
        teacher = rng.uniform(-1, 1, size=(2, 3, 3, 3))
        return (lambda t: kd_loss(affinity_map(t[0], t[1]), teacher, 10.0)), [feats, protos]

    register("grad", "loss.kd")(_grad_check(kd))

    def kd_logits(rng):
        teacher = rng.uniform(-1, 1, size=(2, 2, 2, 3))
        return (lambda t: kd_loss(t[0], teacher, 2.0)), [rng.uniform(-1, 1, size=(2, 2, 2, 4))]

    register("grad", "loss.kd_raw_student")(_grad_check(kd_logits))


def _grad_encoder():
    def check():
        worst = 0.0
        for seed in range(GRAD_SEEDS):
            rng = np.random.default_rng([seed, 7])
            enc = VisualEncoder.create(feature_dim=6, seed=seed, widths=(4, 5))
            images = rng.uniform(0, 1, size=(2, 8, 8, 3))
            out_shape = encode_visual(enc, images).shape
            w = rng.standard_normal(out_shape)
            specs = enc.specs
            arrays = [p.data for p in enc.params]

            def build(t):
                e = VisualEncoder(specs, t)
                return T.sum(T.mul(encode_visual(e, images), Tensor(w)))

            worst = max(worst, fd_check(build, arrays, rng, max_coords=16))
        return worst < GRAD_TOL, f"max relative error {worst:.2e} over every parameter, {GRAD_SEEDS} seeds"

    register("grad", "encoder.parameters")(check)


_grad_ops()
_grad_losses()
_grad_encoder()


# --------------------------------------------------------------------------
# loop oracles


def oracle_pool(feats, labels, classes):
    n, h, w, d = feats.shape
    out = []
    for c in classes:
        acc, count = [0.0] * d, 0
        for a in range(n):
            for i in range(h):
                for j in range(w):
                    if labels[a, i, j] == c:
                        count += 1
                        for k in range(d):
                            acc[k] += feats[a, i, j, k]
        out.append([v / count for v in acc])
    return np.array(out)


def _dot(u, v):
    return sum(float(x) * float(y) for x, y in zip(u, v))


def _cos(u, v):
    return _dot(u, v) / (math.sqrt(_dot(u, u)) * math.sqrt(_dot(v, v)))


def oracle_alignment(g, s):
    c = len(g)
    gn = [[x / math.sqrt(_dot(r, r)) for x in r] for r in g]
    sn = [[x / math.sqrt(_dot(r, r)) for x in r] for r in s]
    paired = sum(_dot(gn[i], sn[i]) for i in range(c)) / c
    unpaired = sum(_dot(gn[i], sn[j]) for i in range(c) for j in range(c) if i != j) / (c * (c - 1))
    return unpaired - paired


def oracle_affinity(feats, protos):
    n, h, w, _ = feats.shape
    out = np.empty((n, h, w, len(protos)))
    for a in range(n):
        for i in range(h):
            for j in range(w):
                for c, p in enumerate(protos):
                    out[a, i, j, c] = _cos(feats[a, i, j], p)
    return out


def _softmax_list(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    z = sum(e)
    return [v / z for v in e]


def oracle_segment(feats, protos, tau):
    aff = oracle_affinity(feats, protos)
    out = np.empty_like(aff)
    for idx in np.ndindex(aff.shape[:-1]):
        out[idx] = _softmax_list([tau * v for v in aff[idx]])
    return out


def oracle_affinity_ce(aff, labels, tau):
    total, count = 0.0, 0
    for idx in np.ndindex(aff.shape[:-1]):
        p = _softmax_list([tau * v for v in aff[idx]])
        total -= math.log(p[labels[idx]])
        count += 1
    return total / count


def oracle_kd(student, teacher, tau):
    k = teacher.shape[-1]
    total, count = 0.0, 0
    for idx in np.ndindex(teacher.shape[:-1]):
        q = _softmax_list([tau * v for v in teacher[idx]])
        p = _softmax_list([tau * v for v in student[idx][:k]])
        total -= sum(qi * math.log(pi) for qi, pi in zip(q, p))
        count += 1
    return total / count


def oracle_iou(pred, gt, c):
    inter = union = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        inter += p == c and g == c
        union += p == c or g == c
    return None if union == 0 else inter / union


def oracle_tally(pred, gt, classes, base, novel):
    tally: dict[tuple[int, int], int] = {}
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        tally[(g, p)] = tally.get((g, p), 0) + 1
    conf = np.array([[tally.get((a, b), 0) for b in classes] for a in classes])
    base_mass = sum(v for (g, _), v in tally.items() if g in base)
    novel_mass = sum(v for (g, _), v in tally.items() if g in novel)
    b2n = sum(v for (g, p), v in tally.items() if g in base and p in novel)
    n2b = sum(v for (g, p), v in tally.items() if g in novel and p in base)
    return conf, (b2n / base_mass if base_mass else 0.0), (n2b / novel_mass if novel_mass else 0.0)


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def _oracle_check(trial: Callable[[np.random.Generator], float]):
    def run():
        worst = max(trial(np.random.default_rng([i, 31])) for i in range(ORACLE_INSTANCES))
        return worst <= ORACLE_TOL, f"max deviation {worst:.2e} over {ORACLE_INSTANCES} instances"
    return run


def _shape(rng):
    return int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 5))


@register("oracle", "pool_class_means")
def _o_pool():
    def trial(rng):
        n, h, w, d = _shape(rng)
        feats = rng.standard_normal((n, h, w, d))
        labels = rng.integers(0, 3, size=(n, h, w))
        classes = sorted(set(labels.ravel().tolist()))
        got = pool_class_means(Tensor(feats), ClassMask.from_labels(labels, classes)).data
        return _max_abs(got, oracle_pool(feats, labels, classes))
    return _oracle_check(trial)()


@register("oracle", "relation_alignment_loss")
def _o_align():
    def trial(rng):
        c, d = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        g, s = rng.standard_normal((c, d)), rng.standard_normal((c, d))
        return abs(relation_alignment_loss(Tensor(g), s).item() - oracle_alignment(g, s))
    return _oracle_check(trial)()


@register("oracle", "prototype_segment")
def _o_segment():
    def trial(rng):
        n, h, w, d = _shape(rng)
        feats, protos = rng.standard_normal((n, h, w, d)), rng.standard_normal((int(rng.integers(1, 5)), d))
        tau = float(rng.uniform(0.5, 20))
        return _max_abs(prototype_segment(Tensor(feats), protos, tau).data, oracle_segment(feats, protos, tau))
    return _oracle_check(trial)()


@register("oracle", "affinity_map")
def _o_affinity():
    def trial(rng):
        n, h, w, d = _shape(rng)
        feats, protos = rng.standard_normal((n, h, w, d)), rng.standard_normal((int(rng.integers(1, 5)), d))
        return _max_abs(affinity_map(Tensor(feats), protos).data, oracle_affinity(feats, protos))
    return _oracle_check(trial)()


@register("oracle", "affinity_ce")
def _o_affinity_ce():
    def trial(rng):
        n, h, w, _ = _shape(rng)
        k = int(rng.integers(1, 5))
        aff = rng.uniform(-1, 1, size=(n, h, w, k))
        labels = rng.integers(0, k, size=(n, h, w))
        tau = float(rng.uniform(0.5, 20))
        return abs(affinity_ce(Tensor(aff), labels, tau).item() - oracle_affinity_ce(aff, labels, tau))
    return _oracle_check(trial)()


@register("oracle", "kd_loss")
def _o_kd():
    def trial(rng):
        n, h, w, _ = _shape(rng)
        k = int(rng.integers(1, 4))
        extra = int(rng.integers(0, 3))
        student = rng.uniform(-1, 1, size=(n, h, w, k + extra))
        teacher = rng.uniform(-1, 1, size=(n, h, w, k))
        tau = float(rng.uniform(0.5, 20))
        return abs(kd_loss(Tensor(student), teacher, tau).item() - oracle_kd(student, teacher, tau))
    return _oracle_check(trial)()


@register("oracle", "iou")
def _o_iou():
    def trial(rng):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=2))
        pred, gt = rng.integers(0, 4, size=shape), rng.integers(0, 4, size=shape)
        worst = 0.0
        for c in range(5):
            a, b = iou(pred, gt, c), oracle_iou(pred, gt, c)
            if (a is None) != (b is None):
                return math.inf
            if a is not None:
                worst = max(worst, abs(a - b))
        return worst
    return _oracle_check(trial)()


@register("oracle", "aliasing_matrix")
def _o_alias():
    def trial(rng):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=2))
        classes = [0, 1, 2, 3, 4]
        pred, gt = rng.integers(0, 5, size=shape), rng.integers(0, 5, size=shape)
        base, novel = [1, 2], [3, 4]
        got = aliasing_matrix(pred, gt, classes, base, novel)
        conf, b2n, n2b = oracle_tally(pred, gt, classes, base, novel)
        return max(_max_abs(got.confusion, conf), abs(got.base_to_novel - b2n),
                   abs(got.novel_to_base - n2b))
    return _oracle_check(trial)()


@register("oracle", "matmul")
def _o_matmul():
    def trial(rng):
        m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        ref = np.array([[sum(a[i, x] * b[x, j] for x in range(k)) for j in range(n)] for i in range(m)])
        return _max_abs(T.matmul(Tensor(a), Tensor(b)).data, ref)
    return _oracle_check(trial)()


@register("oracle", "conv2d")
def _o_conv():
    def trial(rng):
        n, cin, cout = 1, int(rng.integers(1, 3)), int(rng.integers(1, 3))
        size, stride, pad = int(rng.integers(3, 6)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x, k, b = rng.standard_normal((n, size, size, cin)), rng.standard_normal((3, 3, cin, cout)), rng.standard_normal(cout)
        got = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).data
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        oh = (size + 2 * pad - 3) // stride + 1
        ref = np.empty((n, oh, oh, cout))
        for i in range(oh):
            for j in range(oh):
                for o in range(cout):
                    ref[0, i, j, o] = b[o] + sum(xp[0, i * stride + u, j * stride + v, c] * k[u, v, c, o]
                                                 for u in range(3) for v in range(3) for c in range(cin))
        return _max_abs(got, ref)
    return _oracle_check(trial)()


@register("oracle", "softmax")
def _o_softmax():
    def trial(rng):
        x = rng.standard_normal((3, int(rng.integers(1, 6)))) * 5
        ref = np.array([_softmax_list(list(r)) for r in x])
        return _max_abs(T.softmax(Tensor(x), axis=-1).data, ref)
    return _oracle_check(trial)()


@register("oracle", "segmentation_ce")
def _o_seg_ce():
    def trial(rng):
        probs = rng.uniform(0.05, 1, size=(2, 2, 3, 4))
        probs /= probs.sum(axis=-1, keepdims=True)
        labels = rng.integers(0, 4, size=(2, 2, 3))
        ref = -sum(math.log(probs[idx][labels[idx]]) for idx in np.ndindex(labels.shape)) / labels.size
        return abs(segmentation_ce(Tensor(probs), labels).item() - ref)
    return _oracle_check(trial)()


@register("oracle", "downsample_labels")
def _o_downsample():
    def trial(rng):
        labels = rng.integers(0, 4, size=(1, 8, 8))
        got = downsample_labels(labels, 4)
        ref = np.empty((1, 2, 2), dtype=np.int64)
        for i in range(2):
            for j in range(2):
                cell = labels[0, 4 * i:4 * i + 4, 4 * j:4 * j + 4].ravel().tolist()
                best = max(cell.count(c) for c in set(cell))
                ref[0, i, j] = min(c for c in set(cell) if cell.count(c) == best)
        return float(np.any(got != ref))
    return _oracle_check(trial)()


@register("oracle", "predict_argmax")
def _o_predict():
    def trial(rng):
        enc = VisualEncoder.create(feature_dim=4, seed=int(rng.integers(1 << 30)), widths=(3, 3))
        ids = [int(c) for c in rng.permutation(6)[:3]]
        state = StepState(0, enc, PrototypeSet(ids, rng.standard_normal((3, 4))))
        images = rng.uniform(0, 1, size=(1, 8, 8, 3))
        got = predict(state, images, upsample=False)
        feats = encode_visual(enc, images).data
        ref = np.empty(got.shape, dtype=np.int64)
        for idx in np.ndindex(got.shape):
            scores = [_cos(feats[idx], p) for p in state.prototypes.vectors]
            best = max(scores)
            ref[idx] = min(c for c, s in zip(ids, scores) if s == best)
        return float(np.any(got != ref))
    return _oracle_check(trial)()


@register("oracle", "poly_lr")
def _o_poly():
    def trial(rng):
        total = int(rng.integers(1, 500))
        it = int(rng.integers(0, total + 1))
        lr0, power = float(rng.uniform(1e-3, 1)), float(rng.uniform(0.1, 2))
        return abs(poly_lr(it, total, lr0, power) - lr0 * math.pow(1 - it / total, power))
    return _oracle_check(trial)()


# --------------------------------------------------------------------------
# seed twins


def _same(a, b) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def _tiny_train(seed: int) -> TrainConfig:
    return TrainConfig(epochs_base=2, epochs_inc=3, batch_size=4, seed=seed, feature_dim=8)


@register("determinism", "backward_replay")
def _d_backward():
    rng = np.random.default_rng(5)
    feats, protos, labels = _feature_problem(rng)
    grads = []
    for _ in range(2):
        f, p = Tensor(feats, requires_grad=True), Tensor(protos, requires_grad=True)
        T.backward(segmentation_ce(prototype_segment(f, p), labels))
        grads.append((f.grad, p.grad))
    ok = all(_same(a, b) for a, b in zip(*grads))
    return ok, "two backward passes over identical graphs"


@register("determinism", "semantic_table")
def _d_table():
    a = build_semantic_table("random", range(10), 16, seed=3)
    b = build_semantic_table("random", range(10), 16, seed=3)
    return all(_same(a.vector(c), b.vector(c)) for c in range(10)), "same seed, same classes"


@register("determinism", "synthetic_data")
def _d_data():
    plan = SplitPlan(seed=11, image_size=16)
    pairs = [(generate_base(plan, 2), generate_base(plan, 2)),
             (sample_fewshot(plan, 1, 2), sample_fewshot(plan, 1, 2)),
             (generate_test(plan, [1, 6], 2), generate_test(plan, [1, 6], 2))]
    ok = all(_same(a.images, b.images) and _same(a.labels, b.labels) for a, b in pairs)
    return ok, "base, few-shot and test draws"


@register("determinism", "training")
def _d_training():
    plan = SplitPlan(seed=2, image_size=16)
    table = build_semantic_table("random", range(10), 8, seed=2)
    base, shots = generate_base(plan, 2), sample_fewshot(plan, 0, 1)
    cfg = _tiny_train(4)
    runs = []
    for _ in range(2):
        s0 = train_base(cfg, base, table, plan.base_classes)
        s1 = train_increment(s0, cfg, shots, table, plan.novel_class_groups[0])
        runs.append([p.data for p in s1.encoder.params] + [s1.prototypes.vectors])
    return all(_same(a, b) for a, b in zip(*runs)), "base step plus one increment, twice"


@register("determinism", "full_run")
def _d_full_run():
    with tempfile.TemporaryDirectory() as tmp:
        outputs = []
        for twin in ("a", "b"):
            cfg = RunConfig(protocol="multi", shots=1, seed=1, baselines=["ft"],
                            data_dir=str(Path(tmp) / "data"), out_dir=str(Path(tmp) / twin))
            cfg = override(cfg, train=dataclasses.asdict(_tiny_train(1)),
                           data={**dataclasses.asdict(cfg.data), "images_per_class": 3,
                                 "test_images_per_class": 2, "image_size": 16})
            generate_data(cfg)
            res = run_fold(cfg)
            outputs.append([(res.run_dir / n).read_bytes()
                            for n in ("reports.jsonl", "base_report.jsonl", "summary.csv", "summary_ft.csv")])
        return outputs[0] == outputs[1], "two runs of one manifest, report bytes compared"
