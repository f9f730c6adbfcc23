"""Step-indexed training: base step, incremental steps, optimizer, checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import BACKGROUND, Episode
from .encoders import ConvSpec, SemanticTable, VisualEncoder, encode_semantic, encode_visual
from .errors import (
    ConfigError,
    DuplicateClassError,
    FormatError,
    IoError,
    NumericError,
    ShapeError,
    TrainingError,
)
from .losses import (
    IMPRINTED,
    LEARNED,
    RANDOM_INIT,
    ClassMask,
    PrototypeSet,
    affinity_ce,
    affinity_map,
    concat_affinities,
    downsample_labels,
    kd_loss,
    labels_to_index,
    pool_class_means,
    prototype_segment,
    relation_alignment_loss,
    segmentation_ce,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

METHODS = ("sraa", "ft")


@dataclass
class TrainConfig:
    epochs_base: int = 60
    epochs_inc: int = 100
    lr_base: float = 0.1
    lr_inc: float = 0.005
    poly_power: float = 0.9
    lambda_align: float = 1.0
    lambda_kd: float = 10.0
    temperature: float = 10.0
    batch_size: int = 10
    seed: int = 0
    feature_dim: int = 16
    align_background: bool = False

    def __post_init__(self):
        if self.lr_base <= 0 or self.lr_inc <= 0:
            raise ConfigError("learning rates must be positive")
        if self.poly_power <= 0:
            raise ConfigError("poly_power must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs_base < 0 or self.epochs_inc < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.lambda_align < 0 or self.lambda_kd < 0:
            raise ConfigError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


@dataclass
class Teacher:
    """Frozen encoder and prototypes from the end of the previous step."""

    encoder: VisualEncoder
    prototypes: PrototypeSet

    def affinities(self, images) -> np.ndarray:
        return affinity_map(encode_visual(self.encoder, images), self.prototypes).data

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.encoder.params:
            h.update(p.data.tobytes())
        h.update(self.prototypes.vectors.tobytes())
        return h.hexdigest()


@dataclass
class StepState:
    step: int
    encoder: VisualEncoder
    prototypes: PrototypeSet
    teacher: Teacher | None = None
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.step >= 1 and self.teacher is None:
            raise ConfigError("incremental states carry a teacher snapshot")

    @property
    def classes(self) -> list[int]:
        return list(self.prototypes.class_ids)


# --------------------------------------------------------------------------
# optimizer


def poly_lr(iteration: int, total_iters: int, lr0: float, power: float) -> float:
    if total_iters <= 0:
        return lr0
    if not 0 <= iteration <= total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    return lr0 * (1.0 - iteration / total_iters) ** power


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> list[np.ndarray]:
    """Plain SGD, ``p - lr * g``; returns new arrays."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    out = []
    for p, g in zip(params, grads):
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
        out.append(p - lr * g)
    return out


def _apply(leaves: Sequence[Tensor], lr: float) -> None:
    new = sgd_step([p.data for p in leaves], [p.grad for p in leaves], lr)
    for p, v in zip(leaves, new):
        if not np.all(np.isfinite(v)):
            raise TrainingError("parameters became non-finite")
        p.data = v


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# base step


def train_base(cfg: TrainConfig, data: Episode, table: SemanticTable,
               classes: Sequence[int] | None = None,
               encoder: VisualEncoder | None = None) -> StepState:
    """Fit encoder and base prototypes with the classifier loss plus weighted alignment."""
    classes = list(data.classes() if classes is None else classes)
    if BACKGROUND not in classes:
        classes = [BACKGROUND] + classes
    missing = set(classes) - set(data.classes())
    if missing:
        raise ConfigError(f"base data lacks classes {sorted(missing)}")
    if table.dim != cfg.feature_dim:
        raise ConfigError(f"semantic dim {table.dim} != feature dim {cfg.feature_dim}")
    encoder = encoder or VisualEncoder.create(cfg.feature_dim, seed=cfg.seed)
    protos = Tensor(_unit_rows(np.random.default_rng([cfg.seed, 1]), len(classes), cfg.feature_dim),
                    requires_grad=True)
    f = encoder.downsample_factor
    labels_small = downsample_labels(data.labels, f)
    targets = labels_to_index(labels_small, classes)
    align_pool = [c for c in classes if cfg.align_background or c != BACKGROUND]

    n = len(data)
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs_base * per_epoch
    shuffle = np.random.default_rng([cfg.seed, 2])
    leaves = [*encoder.params, protos]
    history = []
    it = 0
    for epoch in range(cfg.epochs_base):
        order = shuffle.permutation(n)
        ce_sum = al_sum = 0.0
        al_count = 0
        for lo in range(0, n, cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            try:
                feats = encode_visual(encoder, data.images[sel])
                loss = segmentation_ce(prototype_segment(feats, protos, cfg.temperature), targets[sel])
                ce_sum += loss.item()
                if cfg.lambda_align > 0:
                    mask = ClassMask.from_labels(labels_small[sel], align_pool)
                    # classes absent from this batch are dropped
                    present = mask.present()
                    if len(present) >= 2:
                        g = pool_class_means(feats, mask, present)
                        al = relation_alignment_loss(g, encode_semantic(table, present))
                        al_sum += al.item()
                        al_count += 1
                        loss = loss + al * cfg.lambda_align
                T.backward(loss)
            except NumericError as exc:
                raise TrainingError(f"base step diverged at iteration {it}: {exc}") from exc
            _apply(leaves, poly_lr(it, total, cfg.lr_base, cfg.poly_power))
            it += 1
        rec = {"epoch": epoch, "ce": ce_sum / per_epoch}
        if cfg.lambda_align > 0:
            rec["align"] = al_sum / al_count if al_count else None
        rec["loss"] = rec["ce"] + cfg.lambda_align * (rec.get("align") or 0.0)
        history.append(rec)
        log.debug("base epoch %d: %s", epoch, rec)

    for p in leaves:
        p.grad = None
    pset = PrototypeSet(classes, protos.data.copy(), [LEARNED] * len(classes), [0] * len(classes))
    return StepState(0, encoder, pset, None, history)


# --------------------------------------------------------------------------
# incremental steps


def imprint_prototypes(table: SemanticTable, new_classes: Sequence[int],
                       learned: Sequence[int] = (), step: int = 1) -> PrototypeSet:
    """Prototypes for ``new_classes`` copied from their semantic vectors."""
    dup = sorted(set(new_classes) & set(learned))
    if dup:
        raise DuplicateClassError(f"classes {dup} were already learned")
    vecs = encode_semantic(table, new_classes).data
    return PrototypeSet(list(new_classes), vecs, [IMPRINTED] * len(new_classes), [step] * len(new_classes))


def snapshot(state: StepState) -> Teacher:
    return Teacher(state.encoder.copy(frozen=True),
                   state.prototypes.with_vectors(state.prototypes.vectors.copy()))


def train_increment(state: StepState, cfg: TrainConfig, episodes: Episode, table: SemanticTable,
                    new_classes: Sequence[int] | None = None, method: str = "sraa") -> StepState:
    """Learn one incremental step from the few-shot ``episodes`` alone.

    ``method="sraa"`` imprints semantic prototypes and minimizes affinity CE plus
    distillation against the previous step; ``method="ft"`` starts the new
    prototypes at random and minimizes CE only.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    if episodes is None or len(episodes) == 0:
        raise ConfigError("incremental step needs at least one episode")
    old = state.prototypes
    if new_classes is None:
        new_classes = [c for c in episodes.classes() if c not in old.class_ids]
    new_classes = [int(c) for c in new_classes]
    if not new_classes:
        raise ConfigError("incremental step introduces no new class")
    t = state.step + 1

    # snapshot before imprinting or any update
    teacher = snapshot(state)
    if method == "sraa":
        fresh = imprint_prototypes(table, new_classes, old.class_ids, step=t)
    else:
        dup = sorted(set(new_classes) & set(old.class_ids))
        if dup:
            raise DuplicateClassError(f"classes {dup} were already learned")
        rng = np.random.default_rng([cfg.seed, 3, t])
        fresh = PrototypeSet(new_classes, _unit_rows(rng, len(new_classes), old.dim),
                             [RANDOM_INIT] * len(new_classes), [t] * len(new_classes))

    encoder = state.encoder.copy()
    if cfg.epochs_inc == 0:
        return StepState(t, encoder, old.with_vectors(old.vectors.copy()) + fresh, teacher, [])

    classes = old.class_ids + new_classes
    f = encoder.downsample_factor
    targets = labels_to_index(downsample_labels(episodes.labels, f), classes)
    teacher_aff = teacher.affinities(episodes.images) if method == "sraa" and cfg.lambda_kd > 0 else None

    p_old = old.tensor(requires_grad=True)
    p_new = fresh.tensor(requires_grad=True)
    leaves = [*encoder.params, p_old, p_new]
    n = len(episodes)
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs_inc * per_epoch
    shuffle = np.random.default_rng([cfg.seed, 4, t])
    history = []
    it = 0
    for epoch in range(cfg.epochs_inc):
        order = shuffle.permutation(n)
        aff_sum = kd_sum = 0.0
        for lo in range(0, n, cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            try:
                feats = encode_visual(encoder, episodes.images[sel])
                aff = concat_affinities(affinity_map(feats, p_old), affinity_map(feats, p_new))
                loss = affinity_ce(aff, targets[sel], cfg.temperature)
                aff_sum += loss.item()
                if teacher_aff is not None:
                    kd = kd_loss(aff, teacher_aff[sel], cfg.temperature)
                    kd_sum += kd.item()
                    loss = loss + kd * cfg.lambda_kd
                T.backward(loss)
            except NumericError as exc:
                raise TrainingError(f"step {t} diverged at iteration {it}: {exc}") from exc
            _apply(leaves, poly_lr(it, total, cfg.lr_inc, cfg.poly_power))
            it += 1
        history.append({"epoch": epoch, "aff": aff_sum / per_epoch,
                        "kd": kd_sum / per_epoch if teacher_aff is not None else None})

    for p in leaves:
        p.grad = None
    protos = old.with_vectors(p_old.data.copy()) + fresh.with_vectors(p_new.data.copy())
    return StepState(t, encoder, protos, teacher, history)


# --------------------------------------------------------------------------
# inference


def predict(state: StepState, images, temperature: float = 10.0, batch_size: int = 64,
            upsample: bool = True) -> np.ndarray:
    """Per-pixel argmax over all prototypes, upsampled to image resolution.

    Ties resolve to the lowest class id. The temperature is accepted for
    symmetry with training; it never changes the argmax. ``upsample=False``
    returns the feature-grid labels.
    """
    images = np.asarray(images, dtype=np.float64)
    ids = np.asarray(state.prototypes.class_ids)
    order = np.argsort(ids, kind="stable")
    f = state.encoder.downsample_factor
    out = []
    for lo in range(0, len(images), batch_size):
        feats = encode_visual(state.encoder, images[lo:lo + batch_size])
        scores = affinity_map(feats, state.prototypes).data * temperature
        small = ids[order][scores[..., order].argmax(axis=-1)]
        out.append(np.repeat(np.repeat(small, f, axis=1), f, axis=2) if upsample else small)
    if not out:
        n, h, w = images.shape[:3]
        return np.zeros((n, h, w) if upsample else (n, h // f, w // f), dtype=np.uint16)
    return np.concatenate(out).astype(np.uint16)


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"SRAA1"
_ORIGIN_CODES = {LEARNED: 0, IMPRINTED: 1, RANDOM_INIT: 2}
_ORIGIN_NAMES = {v: k for k, v in _ORIGIN_CODES.items()}


def _put_array(buf: bytearray, arr: np.ndarray) -> None:
    buf += struct.pack("<I", arr.ndim)
    buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
    buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, fmt: str):
        s = struct.Struct(fmt)
        if self.pos + s.size > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint")
        vals = s.unpack_from(self.raw, self.pos)
        self.pos += s.size
        return vals

    def array(self) -> np.ndarray:
        (ndim,) = self.take("<I")
        shape = self.take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        if self.pos + 8 * count > len(self.raw):
            raise FormatError(f"{self.path}: truncated array payload")
        arr = np.frombuffer(self.raw, dtype="<f8", count=count, offset=self.pos).reshape(shape)
        self.pos += 8 * count
        return arr.astype(np.float64)


def save_checkpoint(state: StepState, cfg: TrainConfig, path) -> None:
    """Magic, config digest, step, class metadata, prototypes, encoder; all little-endian."""
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += cfg.digest()
    buf += struct.pack("<I", state.step)
    protos = state.prototypes
    buf += struct.pack("<I", len(protos))
    for cid, origin, step in zip(protos.class_ids, protos.origins, protos.steps):
        buf += struct.pack("<IBI", cid, _ORIGIN_CODES[origin], step)
    _put_array(buf, protos.vectors)
    specs = state.encoder.specs
    buf += struct.pack("<I", len(specs))
    for spec in specs:
        buf += struct.pack("<I", spec.stride)
    for p in state.encoder.params:
        _put_array(buf, p.data)
    try:
        Path(path).write_bytes(bytes(buf))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_checkpoint(path) -> tuple[StepState, bytes]:
    """Return the stored state (without teacher) and the config digest it was saved with."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    r = _Reader(raw, path)
    r.pos = len(CHECKPOINT_MAGIC)
    (digest,) = r.take("<32s")
    (step,) = r.take("<I")
    (count,) = r.take("<I")
    ids, origins, steps = [], [], []
    for _ in range(count):
        cid, code, created = r.take("<IBI")
        if code not in _ORIGIN_NAMES:
            raise FormatError(f"{path}: unknown prototype origin {code}")
        ids.append(cid)
        origins.append(_ORIGIN_NAMES[code])
        steps.append(created)
    vectors = r.array()
    (n_layers,) = r.take("<I")
    strides = [r.take("<I")[0] for _ in range(n_layers)]
    params, specs = [], []
    for stride in strides:
        k, b = r.array(), r.array()
        if k.ndim != 4:
            raise FormatError(f"{path}: kernel must be 4-d")
        specs.append(ConvSpec(k.shape[0], stride, k.shape[2], k.shape[3]))
        params += [Tensor(k), Tensor(b)]
    if r.pos != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    try:
        encoder = VisualEncoder(specs, params)
    except (ShapeError, ConfigError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    state = StepState.__new__(StepState)
    state.step, state.encoder, state.teacher, state.history = step, encoder, None, []
    state.prototypes = PrototypeSet(ids, vectors.reshape(count, -1), origins, steps)
    return state, digest
