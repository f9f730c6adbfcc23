"""Class pooling, prototype classifier, affinity maps, and the training losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import (
    ConfigError,
    DuplicateClassError,
    EmptyClassError,
    LabelError,
    NumericError,
    ShapeError,
)
from .tensor import Tensor

LEARNED = "learned-base"
IMPRINTED = "imprinted-semantic"
RANDOM_INIT = "random-init"


@dataclass
class PrototypeSet:
    """Ordered class prototypes; row ``i`` of ``vectors`` belongs to ``class_ids[i]``."""

    class_ids: list[int]
    vectors: np.ndarray
    origins: list[str] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.class_ids = [int(c) for c in self.class_ids]
        self.vectors = np.array(self.vectors, dtype=np.float64).reshape(len(self.class_ids), -1)
        if not self.origins:
            self.origins = [LEARNED] * len(self.class_ids)
        if not self.steps:
            self.steps = [0] * len(self.class_ids)
        if len(set(self.class_ids)) != len(self.class_ids):
            raise DuplicateClassError(f"duplicate class ids {self.class_ids}")
        if not (len(self.origins) == len(self.steps) == len(self.class_ids)):
            raise ShapeError("prototype metadata lengths differ")
        if len(self.class_ids) and np.any(np.linalg.norm(self.vectors, axis=1) == 0.0):
            raise NumericError("prototype vectors must be non-zero")

    def __len__(self):
        return len(self.class_ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def tensor(self, requires_grad: bool = False) -> Tensor:
        return Tensor(self.vectors, requires_grad=requires_grad)

    def with_vectors(self, vectors) -> "PrototypeSet":
        return PrototypeSet(list(self.class_ids), np.array(vectors), list(self.origins), list(self.steps))

    def __add__(self, other: "PrototypeSet") -> "PrototypeSet":
        if set(self.class_ids) & set(other.class_ids):
            raise DuplicateClassError(f"classes {set(self.class_ids) & set(other.class_ids)} already present")
        return PrototypeSet(self.class_ids + other.class_ids,
                            np.concatenate([self.vectors, other.vectors]),
                            self.origins + other.origins, self.steps + other.steps)

    def index(self, class_id: int) -> int:
        return self.class_ids.index(int(class_id))


def _proto_tensor(protos) -> Tensor:
    if isinstance(protos, PrototypeSet):
        return protos.tensor()
    return T.as_tensor(protos)


# --------------------------------------------------------------------------
# label plumbing


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Majority vote over ``factor x factor`` cells; ties go to the lowest class id."""
    labels = np.asarray(labels)
    n, h, w = labels.shape
    if h % factor or w % factor:
        raise ShapeError(f"label map {labels.shape} not divisible by {factor}")
    if factor == 1:
        return labels.astype(np.int64)
    cells = labels.reshape(n, h // factor, factor, w // factor, factor).transpose(0, 1, 3, 2, 4)
    cells = cells.reshape(n, h // factor, w // factor, factor * factor).astype(np.int64)
    k = int(cells.max()) + 1
    counts = (cells[..., None] == np.arange(k)).sum(axis=-2)
    return counts.argmax(axis=-1)


def labels_to_index(labels: np.ndarray, class_order: Sequence[int]) -> np.ndarray:
    """Translate class ids into channel positions within ``class_order``."""
    labels = np.asarray(labels)
    lut = np.full(int(max(labels.max(initial=0), *class_order)) + 1, -1, dtype=np.int64)
    lut[list(class_order)] = np.arange(len(class_order))
    if labels.size and labels.min() < 0:
        raise LabelError("negative class id in labels")
    idx = lut[labels]
    if np.any(idx < 0):
        missing = sorted(set(np.unique(labels[idx < 0]).tolist()))
        raise LabelError(f"classes {missing} have no channel")
    return idx


class ClassMask:
    """Binary ``N x H x W x |C|`` masks, mutually exclusive per pixel."""

    def __init__(self, masks: np.ndarray, classes: Sequence[int]):
        masks = np.asarray(masks)
        if masks.ndim != 4 or masks.shape[-1] != len(classes):
            raise ShapeError(f"mask shape {masks.shape} does not match {len(classes)} classes")
        if not np.isin(masks, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        if np.any(masks.sum(axis=-1) > 1):
            raise ValueError("class masks overlap")
        self.masks = masks.astype(np.float64)
        self.classes = [int(c) for c in classes]

    @classmethod
    def from_labels(cls, labels: np.ndarray, classes: Sequence[int]) -> "ClassMask":
        labels = np.asarray(labels)
        return cls((labels[..., None] == np.asarray(classes)).astype(np.float64), classes)

    def counts(self) -> np.ndarray:
        return self.masks.sum(axis=(0, 1, 2))

    def present(self) -> list[int]:
        return [c for c, k in zip(self.classes, self.counts()) if k > 0]


# --------------------------------------------------------------------------
# pooling and alignment


def pool_class_means(features: Tensor, masks: ClassMask, classes: Iterable[int] | None = None) -> Tensor:
    """Batch-wide masked mean feature per class, one row per requested class."""
    classes = masks.classes if classes is None else [int(c) for c in classes]
    n, h, w, d = features.shape
    if masks.masks.shape[:3] != (n, h, w):
        raise ShapeError(f"masks {masks.masks.shape[:3]} vs features {features.shape[:3]}")
    cols = [masks.classes.index(c) for c in classes]
    m = masks.masks[..., cols].reshape(n * h * w, len(cols))
    counts = m.sum(axis=0)
    for c, k in zip(classes, counts):
        if k == 0:
            raise EmptyClassError(c)
    flat = T.reshape(features, (n * h * w, d))
    sums = T.matmul(Tensor(m.T.copy()), flat)
    return T.div(sums, Tensor(np.repeat(counts[:, None], d, axis=1)))


def relation_alignment_loss(g: Tensor, s) -> Tensor:
    """Mean unpaired visual-semantic dot product minus mean paired one.

    Rows of both inputs are L2-normalized first, so the value lies in [-2, 2].
    ``s`` is treated as a constant.
    """
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    if g.ndim != 2 or s.shape != g.shape:
        raise ShapeError(f"alignment needs matching C x D inputs, got {g.shape} and {s.shape}")
    c = g.shape[0]
    if c < 2:
        raise ConfigError("relation alignment needs at least two classes")
    s_norm = np.linalg.norm(s, axis=1, keepdims=True)
    if np.any(s_norm == 0.0):
        raise NumericError("zero-norm semantic vector")
    sims = T.matmul(T.normalize(g, axis=1), Tensor((s / s_norm).T.copy()))
    eye = np.eye(c)
    paired = T.sum(T.mul(sims, Tensor(eye))) / float(c)
    unpaired = T.sum(T.mul(sims, Tensor(1.0 - eye))) / float(c * (c - 1))
    return unpaired - paired


# --------------------------------------------------------------------------
# affinities and classifiers


def affinity_map(features: Tensor, protos) -> Tensor:
    """Per-pixel cosine similarity to every prototype: ``N x H x W x |P|``."""
    p = _proto_tensor(protos)
    n, h, w, d = features.shape
    if p.ndim != 2 or p.shape[1] != d:
        raise ShapeError(f"prototypes {p.shape} do not match feature dim {d}")
    flat = T.normalize(T.reshape(features, (n * h * w, d)), axis=1)
    sims = T.matmul(flat, T.transpose(T.normalize(p, axis=1)))
    return T.reshape(sims, (n, h, w, p.shape[0]))


def prototype_segment(features: Tensor, protos, temperature: float = 10.0) -> Tensor:
    """Per-pixel softmax over temperature-scaled cosine scores."""
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    if _proto_tensor(protos).shape[0] < 1:
        raise ConfigError("need at least one prototype")
    return T.softmax(T.mul(affinity_map(features, protos), float(temperature)), axis=-1)


def segmentation_ce(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over pixels of ``-log p[true channel]``; ``labels`` are channel indices."""
    labels = np.asarray(labels)
    if labels.shape != probs.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} vs probabilities {probs.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[-1]):
        raise LabelError(f"label outside [0, {probs.shape[-1]})")
    picked = T.lookup(probs, labels.astype(np.int64))
    return T.mul(T.mean(T.log(picked)), -1.0)


def concat_affinities(old: Tensor, new: Tensor) -> Tensor:
    """Old-class channels first, then the new ones."""
    if new.shape[-1] == 0:
        raise ConfigError("an incremental step needs at least one new class")
    if old.shape[:-1] != new.shape[:-1]:
        raise ShapeError(f"spatial mismatch {old.shape} vs {new.shape}")
    return T.concat([old, new], axis=-1)


def affinity_ce(affinities: Tensor, labels: np.ndarray, temperature: float = 10.0) -> Tensor:
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    return segmentation_ce(T.softmax(T.mul(affinities, float(temperature)), axis=-1), labels)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kd_loss(student: Tensor, teacher, temperature: float = 10.0) -> Tensor:
    """Soft cross-entropy of the student against the (detached) teacher.

    Only the student's first ``K`` channels take part, ``K`` being the teacher's
    channel count.
    """
    t = np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher, dtype=np.float64)
    k = t.shape[-1]
    if student.shape[:-1] != t.shape[:-1]:
        raise ShapeError(f"student {student.shape} vs teacher {t.shape}")
    if student.shape[-1] < k:
        raise ShapeError(f"student has {student.shape[-1]} channels, teacher {k}")
    s = T.narrow(student, -1, 0, k) if student.shape[-1] > k else student
    logp = T.log_softmax(T.mul(s, float(temperature)), axis=-1)
    target = _softmax_np(temperature * t)
    pixels = int(np.prod(t.shape[:-1]))
    return T.mul(T.sum(T.mul(logp, Tensor(target))), -1.0 / pixels)


def entropy(logits: np.ndarray, temperature: float = 10.0) -> float:
    """Mean per-pixel entropy of ``softmax(temperature * logits)``."""
    p = _softmax_np(temperature * np.asarray(logits, dtype=np.float64))
    return float(-(p * np.log(p)).sum(axis=-1).mean())
