"""Visual encoder (small conv stack) and the frozen semantic lookup table."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, IoError, ShapeError, UnknownClassError
from .tensor import Tensor


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int
    c_in: int
    c_out: int


DEFAULT_WIDTHS = (8, 16)


class VisualEncoder:
    """Stack of convolutions with ReLU between layers (none after the last).

    Parameters live in ``params`` as ``[k0, b0, k1, b1, ...]`` gradient-tracked
    leaves; kernels are laid out ``kh x kw x c_in x c_out``.
    """

    def __init__(self, specs: Sequence[ConvSpec], params: Sequence[Tensor]):
        if len(params) != 2 * len(specs):
            raise ConfigError("need one kernel and one bias per layer")
        for spec, k, b in zip(specs, params[0::2], params[1::2]):
            if k.shape != (spec.kernel, spec.kernel, spec.c_in, spec.c_out) or b.shape != (spec.c_out,):
                raise ShapeError(f"parameter shapes {k.shape}/{b.shape} do not fit {spec}")
        self.specs = tuple(specs)
        self.params = list(params)
        for p in self.params:
            p.requires_grad = True

    @classmethod
    def create(cls, feature_dim: int = 16, in_channels: int = 3, seed: int = 0,
               widths: Sequence[int] = DEFAULT_WIDTHS) -> "VisualEncoder":
        """Default three-layer 3x3 encoder, strides 2-2-1 (downsample 4), He init."""
        chans = [in_channels, *widths, feature_dim]
        strides = [2] * len(widths) + [1]
        specs = [ConvSpec(3, s, a, b) for s, a, b in zip(strides, chans[:-1], chans[1:])]
        rng = np.random.default_rng(seed)
        params = []
        for spec in specs:
            fan_in = spec.kernel * spec.kernel * spec.c_in
            k = rng.normal(0.0, np.sqrt(2.0 / fan_in), (spec.kernel, spec.kernel, spec.c_in, spec.c_out))
            params += [Tensor(k), Tensor(np.full(spec.c_out, 0.01))]
        return cls(specs, params)

    @property
    def downsample_factor(self) -> int:
        return int(np.prod([s.stride for s in self.specs]))

    @property
    def feature_dim(self) -> int:
        return self.specs[-1].c_out

    def copy(self, frozen: bool = False) -> "VisualEncoder":
        enc = VisualEncoder(self.specs, [Tensor(p.data) for p in self.params])
        if frozen:
            for p in enc.params:
                p.requires_grad = False
        return enc

    def __call__(self, images) -> Tensor:
        return encode_visual(self, images)


def encode_visual(encoder: VisualEncoder, images) -> Tensor:
    """Map ``N x H x W x C`` images to ``N x H/f x W/f x D`` features (f = downsample)."""
    x = T.as_tensor(images)
    if x.ndim != 4:
        raise ShapeError(f"expected N x H x W x C images, got {x.shape}")
    f = encoder.downsample_factor
    if x.shape[1] % f or x.shape[2] % f:
        raise ShapeError(f"image sides {x.shape[1:3]} not divisible by {f}")
    n_layers = len(encoder.specs)
    for i, spec in enumerate(encoder.specs):
        k, b = encoder.params[2 * i], encoder.params[2 * i + 1]
        x = T.conv2d(x, k, b, stride=spec.stride, padding=spec.kernel // 2)
        if i < n_layers - 1:
            x = T.relu(x)
    return x


class SemanticTable:
    """Read-only map from class id to a unit-norm semantic vector."""

    def __init__(self, vectors: dict[int, np.ndarray]):
        if not vectors:
            raise ConfigError("semantic table is empty")
        dims = {np.asarray(v).shape for v in vectors.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ShapeError("semantic vectors must be 1-d with a common length")
        store = {}
        for cid, v in vectors.items():
            v = np.array(v, dtype=np.float64)
            norm = np.linalg.norm(v)
            if norm == 0.0 or not np.isfinite(norm):
                raise FormatError(f"semantic vector for class {cid} has zero or invalid norm")
            v = v / norm
            v.setflags(write=False)
            store[int(cid)] = v
        self._vectors = store
        self.dim = next(iter(dims))[0]

    frozen = True

    @property
    def classes(self) -> list[int]:
        return sorted(self._vectors)

    def __contains__(self, class_id) -> bool:
        return int(class_id) in self._vectors

    def vector(self, class_id: int) -> np.ndarray:
        try:
            return self._vectors[int(class_id)]
        except KeyError:
            raise UnknownClassError(f"class {class_id} not in semantic table") from None

    def save(self, path) -> None:
        lines = [f"semtab v1 {len(self._vectors)} {self.dim}"]
        for cid in self.classes:
            lines.append(" ".join([str(cid)] + [repr(float(x)) for x in self._vectors[cid]]))
        try:
            Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoError(str(exc)) from exc


def encode_semantic(table: SemanticTable, classes: Iterable[int]) -> Tensor:
    """Stack the table rows for ``classes`` in the given order; never gradient-tracked."""
    rows = [table.vector(c) for c in classes]
    if not rows:
        return Tensor(np.zeros((0, table.dim)))
    return Tensor(np.stack(rows))


def build_semantic_table(source: str, classes: Iterable[int] = (), dim: int = 16, *,
                         seed: int = 0, path=None, visual_dim: int | None = None) -> SemanticTable:
    """Build a table from ``source="random"`` (seeded Gaussian) or ``source="file"``.

    Random vectors are drawn per class from a generator keyed by ``(seed, class_id)``,
    so a class gets the same vector regardless of which other classes are requested.
    """
    if source == "random":
        if visual_dim is not None and dim != visual_dim:
            raise ConfigError(f"semantic dim {dim} != visual feature dim {visual_dim}")
        vecs = {int(c): np.random.default_rng([seed, int(c)]).standard_normal(dim) for c in classes}
        return SemanticTable(vecs)
    if source == "file":
        table = load_semantic_table(path)
        if visual_dim is not None and table.dim != visual_dim:
            raise ConfigError(f"semantic dim {table.dim} != visual feature dim {visual_dim}")
        missing = [c for c in classes if c not in table]
        if missing:
            raise UnknownClassError(f"classes {missing} missing from {path}")
        return table
    raise ConfigError(f"unknown semantic source {source!r}")


def load_semantic_table(path) -> SemanticTable:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty semantic table file")
    head = lines[0].split()
    if len(head) != 4 or head[:2] != ["semtab", "v1"]:
        raise FormatError(f"bad header {lines[0]!r}")
    try:
        count, dim = int(head[2]), int(head[3])
    except ValueError:
        raise FormatError(f"bad header {lines[0]!r}") from None
    if len(lines) - 1 != count:
        raise FormatError(f"header declares {count} classes, found {len(lines) - 1}")
    vecs = {}
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != dim + 1:
            raise FormatError(f"expected {dim} values in line {ln!r}")
        try:
            cid = int(parts[0])
            vecs[cid] = np.array([float(x) for x in parts[1:]])
        except ValueError:
            raise FormatError(f"unparseable line {ln!r}") from None
    if len(vecs) != count:
        raise FormatError("duplicate class ids in semantic table file")
    return SemanticTable(vecs)
