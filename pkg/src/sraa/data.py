"""Seeded synthetic segmentation benchmark: textured shapes on a noisy background.

Each foreground class has a unique (shape, hue, stripe frequency) appearance.
Hues are grouped into bands; a couple of novel classes sit in the same band as
a base class (with a different shape) so the two can be confused by a weak
encoder while a per-pixel hue lookup still tells them apart.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, FormatError, IoError

BACKGROUND = 0
SHAPES = ("square", "disk", "triangle", "cross")
N_BANDS = 7
NOVEL_HUE_OFFSET = 0.05
SATURATION = 0.8


class Appearance(NamedTuple):
    shape: str
    band: int
    frequency: int
    hue: float


def _look(shape, band, freq, shifted=False):
    return Appearance(shape, band, freq, band / N_BANDS + (NOVEL_HUE_OFFSET if shifted else 0.0))


# class id -> appearance. 6 shares band 0 with 1, 8 shares band 2 with 3.
CATALOGUE: dict[int, Appearance] = {
    1: _look("square", 0, 1),
    2: _look("disk", 1, 2),
    3: _look("triangle", 2, 1),
    4: _look("cross", 3, 2),
    5: _look("square", 4, 3),
    6: _look("disk", 0, 2, shifted=True),
    7: _look("triangle", 5, 3),
    8: _look("cross", 2, 3, shifted=True),
    9: _look("disk", 6, 1),
    10: _look("triangle", 4, 2, shifted=True),
    11: _look("cross", 5, 1, shifted=True),
    12: _look("square", 6, 2, shifted=True),
}

ALIASING_PAIRS = ((1, 6), (3, 8))

# Independent random streams per purpose, mixed into every generator key.
_STREAM_BASE, _STREAM_FEWSHOT, _STREAM_TEST = 11, 23, 37

# every few-shot image also shows at least one other (unlabeled or labeled) object
FEWSHOT_MIN_EXTRA = 1


@dataclass
class SplitPlan:
    base_classes: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    novel_class_groups: list[list[int]] = field(default_factory=lambda: [[6, 7], [8, 9]])
    shots: int = 1
    seed: int = 0
    image_size: int = 32

    def __post_init__(self):
        self.base_classes = [int(c) for c in self.base_classes]
        self.novel_class_groups = [[int(c) for c in g] for g in self.novel_class_groups]
        novel = [c for g in self.novel_class_groups for c in g]
        if self.shots < 1:
            raise ConfigError("shots must be >= 1")
        if len(set(novel)) != len(novel):
            raise ConfigError("novel groups overlap")
        if set(novel) & set(self.base_classes):
            raise ConfigError("base and novel classes overlap")
        if BACKGROUND in self.base_classes or BACKGROUND in novel:
            raise ConfigError("class 0 is reserved for background")
        if any(not g for g in self.novel_class_groups):
            raise ConfigError("empty novel group")
        unknown = sorted(c for c in [*self.base_classes, *novel] if c not in CATALOGUE)
        if unknown:
            raise ConfigError(
                f"classes {unknown} have no distinct appearance (catalogue holds ids 1..{len(CATALOGUE)})")
        if self.image_size < 16 or self.image_size % 4:
            raise ConfigError("image_size must be a multiple of 4 and at least 16")

    @property
    def novel_classes(self) -> list[int]:
        return [c for g in self.novel_class_groups for c in g]

    def to_dict(self) -> dict:
        return {"base_classes": list(self.base_classes),
                "novel_class_groups": [list(g) for g in self.novel_class_groups],
                "shots": self.shots, "seed": self.seed, "image_size": self.image_size}


@dataclass
class Episode:
    images: np.ndarray  # N x H x W x 3 in [0, 1]
    labels: np.ndarray  # N x H x W, uint16 class ids
    step_tag: int = 0

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be N x H x W x 3, got {self.images.shape}")
        if self.labels.shape != self.images.shape[:3]:
            raise ValueError(f"labels {self.labels.shape} vs images {self.images.shape}")

    def __len__(self):
        return self.images.shape[0]

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator["Episode"]:
        idx = np.arange(len(self)) if order is None else np.asarray(order)
        for lo in range(0, len(idx), batch_size):
            sel = idx[lo:lo + batch_size]
            yield Episode(self.images[sel], self.labels[sel], self.step_tag)

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))


def concat_episodes(episodes: Sequence[Episode], step_tag: int | None = None) -> Episode:
    tag = episodes[0].step_tag if step_tag is None else step_tag
    return Episode(np.concatenate([e.images for e in episodes]),
                   np.concatenate([e.labels for e in episodes]), tag)


# --------------------------------------------------------------------------
# rendering


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disk":
        r = size / 2
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r
    if shape == "triangle":
        # apex at top centre, base along the bottom row
        return np.abs(xx - size / 2) <= yy / 2
    if shape == "cross":
        lo, hi = size / 3, 2 * size / 3
        return ((xx >= lo) & (xx <= hi)) | ((yy >= lo) & (yy <= hi))
    raise ConfigError(f"unknown shape {shape!r}")


def _paint(look: Appearance, size: int) -> np.ndarray:
    xx = np.arange(size) + 0.5
    value = 0.6 + 0.3 * np.cos(2 * np.pi * look.frequency * xx / size)
    r, g, b = colorsys.hsv_to_rgb(look.hue % 1.0, SATURATION, 1.0)
    rgb = np.array([r, g, b])
    return np.broadcast_to(value[None, :, None] * rgb, (size, size, 3))


def render_image(rng: np.random.Generator, primary: int, extras: Sequence[int],
                 size: int = 32, max_fg_ratio: float = 0.55,
                 hidden: Sequence[int] = (), min_extra: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Draw one image holding ``primary`` plus up to two of ``extras``, non-overlapping.

    Objects of a class in ``hidden`` are painted but labeled background.
    """
    img = 0.5 + 0.04 * rng.standard_normal((size, size, 3))
    img = np.clip(img, 0.0, 1.0)
    lab = np.zeros((size, size), dtype=np.uint16)
    occupied = np.zeros((size, size), dtype=bool)
    n_extra = int(rng.integers(min_extra, 3)) if len(extras) else 0
    wanted = [primary] + [int(c) for c in rng.choice(extras, size=n_extra)] if n_extra else [primary]
    lo, hi = max(6, size * 11 // 32), max(7, size * 15 // 32)
    for k, cls in enumerate(wanted):
        look = CATALOGUE[cls]
        placed = False
        for _ in range(50):
            s = int(rng.integers(lo, hi + 1))
            y, x = (int(v) for v in rng.integers(0, size - s + 1, size=2))
            # one-pixel gap between objects
            y0, x0 = max(0, y - 1), max(0, x - 1)
            if occupied[y0:y + s + 1, x0:x + s + 1].any():
                continue
            mask = _shape_mask(look.shape, s)
            if (occupied.sum() + mask.sum()) / size ** 2 > max_fg_ratio:
                break
            region = img[y:y + s, x:x + s]
            region[mask] = _paint(look, s)[mask]
            lab[y:y + s, x:x + s][mask] = BACKGROUND if cls in hidden else cls
            occupied[y:y + s, x:x + s] = True
            placed = True
            break
        if not placed and k == 0:
            # the primary object must exist; place it at the smallest size in the corner
            mask = _shape_mask(look.shape, lo)
            img[:lo, :lo][mask] = _paint(look, lo)[mask]
            lab[:lo, :lo][mask] = cls
            occupied[:lo, :lo] = True
    return img, lab


def _render_set(plan: SplitPlan, stream: int, group_key: int, classes: Sequence[int],
                allowed: Sequence[int], per_class: int, step_tag: int,
                hidden: Sequence[int] = (), min_extra: int = 0) -> Episode:
    size = plan.image_size
    images = np.empty((len(classes) * per_class, size, size, 3))
    labels = np.empty((len(classes) * per_class, size, size), dtype=np.uint16)
    i = 0
    for cls in classes:
        for j in range(per_class):
            rng = np.random.default_rng([plan.seed, stream, group_key, cls, j])
            images[i], labels[i] = render_image(rng, cls, list(allowed), size,
                                                hidden=hidden, min_extra=min_extra)
            i += 1
    return Episode(images, labels, step_tag)


def generate_base(plan: SplitPlan, images_per_class: int) -> Episode:
    """``images_per_class`` images per base class, each with that class as primary object."""
    if images_per_class * len(plan.base_classes) < 1:
        raise ConfigError("base set would be empty")
    return _render_set(plan, _STREAM_BASE, 0, plan.base_classes, plan.base_classes,
                       images_per_class, step_tag=0)


def sample_fewshot(plan: SplitPlan, group_index: int, k: int | None = None) -> Episode:
    """``k`` images per class of one novel group; draws are nested in ``k``.

    Images may also show base-class objects, which are annotated as background:
    only the group's classes are labeled in a few-shot step.
    """
    if not 0 <= group_index < len(plan.novel_class_groups):
        raise ConfigError(f"no novel group {group_index}")
    k = plan.shots if k is None else k
    if k < 1:
        raise ConfigError("k must be >= 1")
    group = plan.novel_class_groups[group_index]
    # keyed by the original group index so merged (single-step) draws reuse the same images
    return _render_set(plan, _STREAM_FEWSHOT, group_index, group, [*group, *plan.base_classes], k,
                       step_tag=group_index + 1, hidden=plan.base_classes, min_extra=FEWSHOT_MIN_EXTRA)


def generate_test(plan: SplitPlan, classes: Sequence[int], images_per_class: int,
                  step_tag: int = 0) -> Episode:
    """Held-out images whose objects are drawn from ``classes`` only."""
    classes = [int(c) for c in classes if c != BACKGROUND]
    return _render_set(plan, _STREAM_TEST, 0, classes, classes, images_per_class, step_tag)


def hue_oracle(images: np.ndarray, classes: Sequence[int], sat_threshold: float = 0.4) -> np.ndarray:
    """Label pixels by nearest catalogue hue; low-saturation pixels are background."""
    images = np.asarray(images, dtype=np.float64)
    mx = images.max(axis=-1)
    mn = images.min(axis=-1)
    chroma = mx - mn
    sat = np.where(mx > 0, chroma / np.where(mx > 0, mx, 1.0), 0.0)
    r, g, b = images[..., 0], images[..., 1], images[..., 2]
    safe = np.where(chroma > 0, chroma, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0)) / 6.0
    hues = np.array([CATALOGUE[c].hue for c in classes])
    d = np.abs(h[..., None] - hues)
    d = np.minimum(d, 1.0 - d)
    out = np.asarray(classes, dtype=np.uint16)[d.argmin(axis=-1)]
    return np.where(sat < sat_threshold, BACKGROUND, out).astype(np.uint16)


# --------------------------------------------------------------------------
# episode files

EPISODE_MAGIC = b"SRAAEP1"
_HEADER = struct.Struct("<III")


def export_episode(ep: Episode, path) -> None:
    n, h, w = ep.labels.shape
    try:
        with open(path, "wb") as fh:
            fh.write(EPISODE_MAGIC)
            fh.write(_HEADER.pack(n, h, w))
            fh.write(ep.images.astype("<f8").tobytes())
            fh.write(ep.labels.astype("<u2").tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def import_episode(path, step_tag: int = 0) -> Episode:
    """Read an episode file. The file carries no step tag; the caller supplies it."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    head = len(EPISODE_MAGIC) + _HEADER.size
    if len(raw) < head or raw[:len(EPISODE_MAGIC)] != EPISODE_MAGIC:
        raise FormatError(f"{path}: not an episode file")
    n, h, w = _HEADER.unpack_from(raw, len(EPISODE_MAGIC))
    n_img, n_lab = n * h * w * 3 * 8, n * h * w * 2
    if len(raw) != head + n_img + n_lab:
        raise FormatError(f"{path}: payload is {len(raw) - head} bytes, header implies {n_img + n_lab}")
    images = np.frombuffer(raw, dtype="<f8", count=n * h * w * 3, offset=head).reshape(n, h, w, 3)
    labels = np.frombuffer(raw, dtype="<u2", count=n * h * w, offset=head + n_img).reshape(n, h, w)
    return Episode(images.astype(np.float64), labels.astype(np.uint16), step_tag)
