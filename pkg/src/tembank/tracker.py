"""End-to-end per-sequence inference on top of the matching stack.

The embedder is deliberately unlearned: stride-s cell means plus local
gradient magnitudes pushed through a fixed random projection. It exists to
feed the matching pipeline unit-norm dense features deterministically, not to
be a good encoder. The readout is a per-pixel affine map over the ten match
scores and the previous mask, squashed by a two-class softmax.

Sequences run one independent template bank per annotated object; per-frame
foreground probabilities are fused by a soft-aggregation product rule and
upsampled back to image resolution by nearest neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .grid import (
    FeatureGrid,
    InvalidInputError,
    LabelMask,
    ProbMask,
    ScoreStack,
    ShapeMismatchError,
    block_mean,
    downsample_mask,
    l2_normalize_channels,
)
from .matching import DistanceScoreParams, assemble_scores
from .templates import InertiaParams, TemplateBank, bank_init, bank_step

RAW_PATCH_DIM = 29  # 3x3 neighborhood of RGB cell means + 2 gradient magnitudes


@dataclass(frozen=True)
class EmbedderConfig:
    feature_dim: int = 32
    stride: int = 4
    projection_seed: int = 7

    def __post_init__(self):
        if self.feature_dim < 2:
            raise InvalidInputError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.stride < 1:
            raise InvalidInputError(f"stride must be >= 1, got {self.stride}")


@lru_cache(maxsize=8)
def _projection(seed: int, feature_dim: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((feature_dim, RAW_PATCH_DIM))
    # deflate the shared-brightness direction of the neighborhood block;
    # otherwise every cell's raw vector sits in one positive cone and all
    # cosine similarities crowd toward 1, starving the matcher of contrast
    p[:, :27] -= p[:, :27].mean(axis=1, keepdims=True)
    p = p.astype(np.float32)
    p.flags.writeable = False
    return p


def _shift_edge(a: np.ndarray, di: int, dj: int) -> np.ndarray:
    """Shift a 2-D map with edge replication (neighbor lookup at borders)."""
    h, w = a.shape
    rows = np.clip(np.arange(h) + di, 0, h - 1)
    cols = np.clip(np.arange(w) + dj, 0, w - 1)
    return a[rows][:, cols]


def embed_frame(frame: np.ndarray, cfg: EmbedderConfig) -> FeatureGrid:
    """Project stride-cell patch statistics to a normalized feature grid.

    Per cell: mean RGB of the 3x3 cell neighborhood (27 values, edges
    replicated) plus horizontal/vertical central-difference magnitudes of the
    cell intensity. Deterministic in (frame, config).
    """
    f = np.asarray(frame)
    if f.ndim != 3 or f.shape[2] != 3:
        raise InvalidInputError(f"frame must be (H,W,3), got {f.shape}")
    if f.shape[0] < cfg.stride or f.shape[1] < cfg.stride:
        raise InvalidInputError(f"frame {f.shape[:2]} smaller than stride {cfg.stride}")
    f64 = f.astype(np.float64) / 255.0
    cells = np.stack([block_mean(f64[:, :, k], cfg.stride) for k in range(3)])
    hc, wc = cells.shape[1:]
    raw = np.empty((RAW_PATCH_DIM, hc, wc), dtype=np.float64)
    row = 0
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            for k in range(3):
                raw[row] = _shift_edge(cells[k], di, dj)
                row += 1
    intensity = cells.mean(axis=0)
    gx = 0.5 * (_shift_edge(intensity, 0, 1) - _shift_edge(intensity, 0, -1))
    gy = 0.5 * (_shift_edge(intensity, 1, 0) - _shift_edge(intensity, -1, 0))
    raw[27] = np.abs(gx)
    raw[28] = np.abs(gy)
    proj = _projection(cfg.projection_seed, cfg.feature_dim)
    feats = (proj @ raw.reshape(RAW_PATCH_DIM, -1).astype(np.float32)).reshape(
        cfg.feature_dim, hc, wc
    )
    return l2_normalize_channels(FeatureGrid(feats))


@dataclass(frozen=True)
class ReadoutParams:
    """Per-pixel affine head: logits = weight @ [scores; m_prev] + bias."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float32)
        b = np.asarray(self.bias, dtype=np.float32)
        if w.shape != (2, 12) or b.shape != (2,):
            raise ShapeMismatchError(f"readout needs (2,12) weight and (2,) bias, got {w.shape}, {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise InvalidInputError("readout params must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


def default_readout(
    global_gain: float = 12.0,
    local_gain: float = 6.0,
    coarse_gain: float = 0.5,
    mask_prior: float = 0.5,
    bg_margin: float = 0.5,
) -> ReadoutParams:
    """Symmetric hand-set head: each class sums its own score channels.

    Gains are per channel group (global fine, local fine, the three coarse
    pairs share one), plus a carried-mask prior and a background bias that
    sets the decision margin. The global channels anchor to the pristine
    first frame and get the most trust; the defaults were tuned on the
    synthetic suites so the untracked pipeline lands in a sane regime before
    any fitting.
    """
    w = np.zeros((2, 12), dtype=np.float32)
    gains = [global_gain, local_gain, coarse_gain, coarse_gain, coarse_gain]
    for ch, g in enumerate(gains):
        w[0, 2 * ch] = g  # bg channels
        w[1, 2 * ch + 1] = g  # fg channels
    w[0, 10] = mask_prior
    w[1, 11] = mask_prior
    return ReadoutParams(weight=w, bias=np.array([bg_margin, 0.0], dtype=np.float32))


def readout(z: ScoreStack, m_prev: ProbMask, params: ReadoutParams) -> ProbMask:
    """Affine map over [scores; previous mask], two-class softmax per pixel."""
    h, w = z.height, z.width
    if (m_prev.height, m_prev.width) != (h, w):
        raise ShapeMismatchError(f"mask {(m_prev.height, m_prev.width)} vs scores {(h, w)}")
    inp = np.concatenate(
        [z.data.reshape(10, h * w), m_prev.bg.reshape(1, -1), m_prev.fg.reshape(1, -1)], axis=0
    )
    logits = params.weight @ inp + params.bias[:, None]
    shift = logits.max(axis=0, keepdims=True)
    e = np.exp(logits - shift)
    p = e / e.sum(axis=0, keepdims=True)
    return ProbMask(bg=p[0].reshape(h, w), fg=p[1].reshape(h, w))


@dataclass(frozen=True)
class TrackerConfig:
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    distance: DistanceScoreParams = field(default_factory=lambda: DistanceScoreParams(1.0, -1.0))
    inertia: InertiaParams = field(default_factory=InertiaParams)
    readout: ReadoutParams = field(default_factory=default_readout)
    locality: str = "learned"  # "learned" | "window" | "none"
    window_radius: int = 2
    use_fine: bool = True
    use_coarse: bool = True
    backend: str = "auto"


def _step_scores(bank: TemplateBank, feats: FeatureGrid, cfg: TrackerConfig) -> ScoreStack:
    return assemble_scores(
        bank,
        feats,
        None,
        cfg.distance,
        locality=cfg.locality,
        window_radius=cfg.window_radius,
        use_fine=cfg.use_fine,
        use_coarse=cfg.use_coarse,
        backend=cfg.backend,
    )


def step_with_features(
    bank: TemplateBank, feats: FeatureGrid, m_prev: ProbMask, cfg: TrackerConfig
):
    """One tracked frame on precomputed features: scores, readout, bank fold."""
    z = _step_scores(bank, feats, cfg)
    m = readout(z, m_prev, cfg.readout)
    return m, bank_step(bank, feats, m, cfg.inertia)


def track_step(bank: TemplateBank, frame: np.ndarray, m_prev: ProbMask, cfg: TrackerConfig):
    """Embed one frame and advance the bank; returns (ProbMask, new bank)."""
    return step_with_features(bank, embed_frame(frame, cfg.embedder), m_prev, cfg)


def aggregate_multi_object(per_object_fg, object_ids=None) -> LabelMask:
    """Soft-aggregate per-object foreground maps into one label map.

    Background keeps the product of complements; each pixel takes the argmax
    over [background, objects...]. np.argmax's first-wins rule implements the
    declared tie-breaks (background over objects, lower object id first).
    """
    maps = [np.asarray(m, dtype=np.float32) for m in per_object_fg]
    if not maps:
        raise InvalidInputError("need at least one object map")
    if object_ids is None:
        object_ids = list(range(1, len(maps) + 1))
    bg = np.prod(np.stack([1.0 - m for m in maps]), axis=0)
    stacked = np.stack([bg] + maps)
    winner = np.argmax(stacked, axis=0)
    ids = np.array([0] + list(object_ids), dtype=np.int32)
    return LabelMask(ids[winner])


def upsample_labels(labels: LabelMask, stride: int, out_h: int, out_w: int) -> LabelMask:
    """Nearest-neighbor expansion back to image resolution."""
    up = np.repeat(np.repeat(labels.labels, stride, axis=0), stride, axis=1)
    if up.shape[0] < out_h or up.shape[1] < out_w:
        raise ShapeMismatchError(f"upsampled {up.shape} smaller than target {(out_h, out_w)}")
    return LabelMask(up[:out_h, :out_w])


def track_sequence(frames, init_mask: LabelMask, cfg: TrackerConfig):
    """Propagate a first-frame annotation through the whole clip.

    Returns one full-resolution LabelMask per frame; frame 0 is the given
    annotation passed through untouched. Objects run independent banks over
    shared per-frame embeddings.
    """
    frames = list(frames)
    if not frames:
        raise InvalidInputError("need at least one frame")
    h0, w0 = np.asarray(frames[0]).shape[:2]
    if (init_mask.height, init_mask.width) != (h0, w0):
        raise ShapeMismatchError(
            f"init mask {(init_mask.height, init_mask.width)} vs frame {(h0, w0)}"
        )
    ids = list(init_mask.object_ids)
    out = [init_mask]
    if not ids:
        zero = LabelMask(np.zeros((h0, w0), dtype=np.int32))
        return [init_mask] + [zero] * (len(frames) - 1)

    stride = cfg.embedder.stride
    x0 = embed_frame(frames[0], cfg.embedder)
    banks = {}
    prev = {}
    for k in ids:
        m0 = downsample_mask(init_mask.binary(k).astype(np.float64), stride)
        banks[k] = bank_init(x0, m0)
        prev[k] = m0

    for frame in frames[1:]:
        feats = embed_frame(frame, cfg.embedder)
        fg_maps = []
        for k in ids:
            m, banks[k] = step_with_features(banks[k], feats, prev[k], cfg)
            prev[k] = m
            fg_maps.append(m.fg)
        coarse_labels = aggregate_multi_object(fg_maps, object_ids=ids)
        out.append(upsample_labels(coarse_labels, stride, h0, w0))
    return out
