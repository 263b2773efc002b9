"""Dense feature-grid and mask primitives shared by the whole pipeline.

Everything here is a pure function on small immutable-by-convention numpy
arrays. Grid data is float32; reductions accumulate in float64 so that the
results are stable regardless of grid size (verification oracles run in
float64 and expect agreement to ~1e-6 relative).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ZERO_NORM_EPS = 1e-12

FEATURE_FILE_MAGIC = b"TBDF"


class InvalidInputError(ValueError):
    """Raised when an input violates an operation's preconditions."""


class ShapeMismatchError(ValueError):
    """Raised when array shapes that must agree do not."""


@dataclass(frozen=True)
class FeatureGrid:
    """C x H x W stack of per-pixel feature vectors (channel-major, row-major).

    ``normalized`` means every spatial column is unit length (or exactly zero
    for degenerate columns).
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or min(d.shape) < 1:
            raise InvalidInputError(f"feature grid must be (C,H,W) with positive dims, got {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def columns(self) -> np.ndarray:
        """Features as a (C, H*W) matrix, spatial positions row-major."""
        return self.data.reshape(self.channels, -1)


@dataclass(frozen=True)
class ProbMask:
    """Per-pixel two-class distribution; bg and fg sum to 1 at every pixel."""

    bg: np.ndarray
    fg: np.ndarray

    def __post_init__(self):
        bg = np.asarray(self.bg, dtype=np.float32)
        fg = np.asarray(self.fg, dtype=np.float32)
        if bg.ndim != 2 or bg.shape != fg.shape:
            raise ShapeMismatchError(f"bg/fg shapes differ: {bg.shape} vs {fg.shape}")
        object.__setattr__(self, "bg", bg)
        object.__setattr__(self, "fg", fg)

    @property
    def height(self) -> int:
        return self.bg.shape[0]

    @property
    def width(self) -> int:
        return self.bg.shape[1]

    def channel(self, which) -> np.ndarray:
        if which in ("bg", 0):
            return self.bg
        if which in ("fg", 1):
            return self.fg
        raise InvalidInputError(f"unknown mask channel {which!r}")

    @classmethod
    def from_fg(cls, fg) -> "ProbMask":
        fg = np.asarray(fg, dtype=np.float32)
        return cls(bg=1.0 - fg, fg=fg)


@dataclass(frozen=True)
class LabelMask:
    """Integer object-id mask at full resolution; 0 is background."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise InvalidInputError(f"label mask must be 2-D, got shape {lab.shape}")
        if lab.size and lab.min() < 0:
            raise InvalidInputError("label ids must be non-negative")
        object.__setattr__(self, "labels", lab.astype(np.int32))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def object_ids(self) -> tuple:
        ids = np.unique(self.labels)
        return tuple(int(k) for k in ids if k != 0)

    def binary(self, object_id: int) -> np.ndarray:
        return self.labels == int(object_id)


SCORE_CHANNELS = (
    "global_bg",
    "global_fg",
    "local_bg",
    "local_fg",
    "overall_bg",
    "overall_fg",
    "short_bg",
    "short_fg",
    "long_bg",
    "long_fg",
)


@dataclass(frozen=True)
class ScoreStack:
    """Ten matching-score maps in the fixed channel order of SCORE_CHANNELS."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or d.shape[0] != len(SCORE_CHANNELS):
            raise ShapeMismatchError(f"score stack must be (10,H,W), got {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def channel(self, name: str) -> np.ndarray:
        return self.data[SCORE_CHANNELS.index(name)]


def l2_normalize_channels(g: FeatureGrid) -> FeatureGrid:
    """Scale every spatial column of ``g`` to unit length.

    Columns whose norm falls below ZERO_NORM_EPS come back as exact zeros
    (zero-weighted template columns are legitimate inputs, not errors).
    """
    d = g.data
    if not np.all(np.isfinite(d)):
        raise InvalidInputError("feature grid contains non-finite values")
    norms = np.sqrt(np.einsum("chw,chw->hw", d, d, dtype=np.float64))
    safe = np.where(norms < ZERO_NORM_EPS, 1.0, norms)
    out = (d / safe[None, :, :].astype(np.float32)).astype(np.float32)
    out[:, norms < ZERO_NORM_EPS] = 0.0
    return FeatureGrid(out, normalized=True)


def mask_weight(g: FeatureGrid, channel: np.ndarray) -> FeatureGrid:
    """Multiply every feature channel elementwise by one mask channel."""
    ch = np.asarray(channel, dtype=np.float32)
    if ch.shape != (g.height, g.width):
        raise ShapeMismatchError(f"mask channel {ch.shape} does not match grid {(g.height, g.width)}")
    return FeatureGrid(g.data * ch[None, :, :], normalized=False)


def spatial_sum(g: FeatureGrid) -> np.ndarray:
    """Per-channel sum over all spatial positions, accumulated in float64."""
    return np.sum(g.data, axis=(1, 2), dtype=np.float64)


def mask_area(p: ProbMask, which) -> float:
    """Total probability mass of one mask channel."""
    return float(np.sum(p.channel(which), dtype=np.float64))


def _pad_to_multiple(arr: np.ndarray, stride: int) -> np.ndarray:
    h, w = arr.shape[:2]
    ph = (-h) % stride
    pw = (-w) % stride
    if ph == 0 and pw == 0:
        return arr
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad, mode="edge")


def block_mean(arr: np.ndarray, stride: int) -> np.ndarray:
    """Average over stride x stride cells; trailing rows/cols replicate-padded."""
    if stride <= 0:
        raise InvalidInputError(f"stride must be positive, got {stride}")
    a = _pad_to_multiple(np.asarray(arr, dtype=np.float64), stride)
    h, w = a.shape[:2]
    blocked = a.reshape(h // stride, stride, w // stride, stride, *a.shape[2:])
    return blocked.mean(axis=(1, 3))


def downsample_mask(indicator, stride: int) -> ProbMask:
    """Area-average a foreground indicator down to the feature grid.

    ``indicator`` holds per-pixel foreground values in [0, 1] (a binary mask
    or an already-soft map). Output rows always form a distribution.
    """
    ind = np.asarray(indicator, dtype=np.float64)
    if ind.ndim != 2:
        raise InvalidInputError(f"indicator must be 2-D, got shape {ind.shape}")
    fg = block_mean(ind, stride).astype(np.float32)
    return ProbMask(bg=1.0 - fg, fg=fg)


def save_feature_grid(path, g: FeatureGrid) -> None:
    """Write the on-disk feature format: 'TBDF', u32le C,H,W, f32le data."""
    with open(path, "wb") as fh:
        fh.write(FEATURE_FILE_MAGIC)
        fh.write(struct.pack("<III", g.channels, g.height, g.width))
        fh.write(np.ascontiguousarray(g.data, dtype="<f4").tobytes())


def load_feature_grid(path) -> FeatureGrid:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_FILE_MAGIC:
            raise InvalidInputError(f"{path}: bad magic {magic!r}, expected {FEATURE_FILE_MAGIC!r}")
        c, h, w = struct.unpack("<III", fh.read(12))
        raw = fh.read(4 * c * h * w)
        if len(raw) != 4 * c * h * w:
            raise InvalidInputError(f"{path}: truncated feature file")
        data = np.frombuffer(raw, dtype="<f4").reshape(c, h, w)
    # round-trip of a normalized grid stays normalized; caller re-flags if needed
    return FeatureGrid(data.copy(), normalized=False)
