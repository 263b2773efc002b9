"""Fine and coarse template construction and the inertia-updated bank.

A fine template keeps one mask-weighted feature column per grid position.
A coarse template squeezes a fine template to a single unit vector per class
(channel-wise spatial sum, then L2 normalization), which makes it cheap to
keep several long-horizon variants around:

  overall    running average of all past coarse templates, weighted by the
             ratio of accumulated mask area (old frames) to the total,
  short_term EMA with a small learned inertia, tracks recent appearance,
  long_term  EMA with a large learned inertia, drifts slowly.

Every blended template is re-normalized after the update so matching scores
stay bounded cosines. The raw (un-renormalized) blend shrinks over time
whenever consecutive inputs disagree, silently damping that class's scores;
``renormalize=False`` exists to measure exactly that effect.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .grid import (
    FeatureGrid,
    InvalidInputError,
    ProbMask,
    ShapeMismatchError,
    ZERO_NORM_EPS,
    mask_area,
    mask_weight,
    spatial_sum,
)


def sigmoid(x: float) -> float:
    """Numerically tame logistic function on scalars, in double precision."""
    x64 = np.float64(x)
    if x64 >= 0:
        return float(1.0 / (1.0 + np.exp(-x64)))
    e = np.exp(x64)
    return float(e / (1.0 + e))


def _normalize_vec(v: np.ndarray) -> np.ndarray:
    v64 = np.asarray(v, dtype=np.float64)
    n = float(np.sqrt(np.dot(v64, v64)))
    if n < ZERO_NORM_EPS:
        return np.zeros(v64.shape, dtype=np.float32)
    return (v64 / n).astype(np.float32)


@dataclass(frozen=True)
class FineTemplate:
    """Mask-weighted feature columns for one frame, one object.

    bg/fg are (C,H,W) grids; column p equals m_c[p] * x_hat[p] where x_hat is
    the unit appearance vector at p, so every column has norm <= 1. Either
    class may be all-zero (object covering the whole frame, or absent).
    """

    bg: FeatureGrid
    fg: FeatureGrid

    def __post_init__(self):
        if self.bg.data.shape != self.fg.data.shape:
            raise ShapeMismatchError(
                f"bg/fg template shapes differ: {self.bg.data.shape} vs {self.fg.data.shape}"
            )

    @property
    def channels(self) -> int:
        return self.bg.channels

    @property
    def height(self) -> int:
        return self.bg.height

    @property
    def width(self) -> int:
        return self.bg.width


@dataclass(frozen=True)
class CoarseTemplate:
    """One prototype vector per class; unit length or exactly zero."""

    bg: np.ndarray
    fg: np.ndarray

    def __post_init__(self):
        bg = np.asarray(self.bg, dtype=np.float32)
        fg = np.asarray(self.fg, dtype=np.float32)
        if bg.ndim != 1 or bg.shape != fg.shape:
            raise ShapeMismatchError(f"coarse bg/fg shapes differ: {bg.shape} vs {fg.shape}")
        object.__setattr__(self, "bg", bg)
        object.__setattr__(self, "fg", fg)

    @property
    def channels(self) -> int:
        return self.bg.shape[0]

    def norms(self) -> tuple:
        return (
            float(np.linalg.norm(self.bg.astype(np.float64))),
            float(np.linalg.norm(self.fg.astype(np.float64))),
        )


# Pre-activation start values for the EMA inertia weights; sigmoid maps them
# to ~0.269 (short term, mostly-new blend) and ~0.731 (long term, mostly-old).
SHORT_TERM_PREACT_INIT = -1.0
LONG_TERM_PREACT_INIT = 1.0


@dataclass(frozen=True)
class InertiaParams:
    """Learnable pre-activations for the short/long-term blend weights.

    One scalar per template type and class; the effective inertia is
    sigmoid(a), so it stays in (0,1) with no clamping. Both members of a pair
    start identical.
    """

    a_short_bg: float = SHORT_TERM_PREACT_INIT
    a_short_fg: float = SHORT_TERM_PREACT_INIT
    a_long_bg: float = LONG_TERM_PREACT_INIT
    a_long_fg: float = LONG_TERM_PREACT_INIT

    @property
    def short_bg(self) -> float:
        return sigmoid(self.a_short_bg)

    @property
    def short_fg(self) -> float:
        return sigmoid(self.a_short_fg)

    @property
    def long_bg(self) -> float:
        return sigmoid(self.a_long_bg)

    @property
    def long_fg(self) -> float:
        return sigmoid(self.a_long_fg)


def build_fine(features: FeatureGrid, mask: ProbMask) -> FineTemplate:
    """Weight a normalized feature grid by both mask channels."""
    if not features.normalized:
        raise InvalidInputError("fine templates require a normalized feature grid")
    if (features.height, features.width) != (mask.height, mask.width):
        raise ShapeMismatchError(
            f"feature grid {(features.height, features.width)} vs mask {(mask.height, mask.width)}"
        )
    return FineTemplate(bg=mask_weight(features, mask.bg), fg=mask_weight(features, mask.fg))


def compress(fine: FineTemplate) -> CoarseTemplate:
    """Collapse a fine template to one normalized vector per class.

    An all-zero class sum stays the zero vector (absent class), which later
    yields neutral zero matching scores rather than an error.
    """
    return CoarseTemplate(
        bg=_normalize_vec(spatial_sum(fine.bg)),
        fg=_normalize_vec(spatial_sum(fine.fg)),
    )


def overall_inertia(area_sum_prev: float, area_now: float) -> float:
    """Weight on the accumulated template: past mask area over total area.

    Frame 0 (no history) and the empty-class case both give 0, i.e. full
    replacement by the current template.
    """
    if area_sum_prev < 0 or area_now < 0:
        raise InvalidInputError(f"mask areas must be non-negative, got {area_sum_prev}, {area_now}")
    total = area_sum_prev + area_now
    if total < 1e-12:
        return 0.0
    return float(area_sum_prev / total)


def ema_update(prev: np.ndarray, cur: np.ndarray, inertia: float, renormalize: bool = True) -> np.ndarray:
    """Blend ``inertia * prev + (1 - inertia) * cur`` between coarse vectors.

    With ``renormalize`` the blend is rescaled to unit length (a blend of norm
    below 1e-12 collapses to the zero vector); without it the raw convex
    combination is returned, whose norm is <= 1 with equality only when the
    inputs agree.
    """
    if not 0.0 <= inertia <= 1.0:
        raise InvalidInputError(f"inertia must lie in [0,1], got {inertia}")
    prev64 = np.asarray(prev, dtype=np.float64)
    cur64 = np.asarray(cur, dtype=np.float64)
    if prev64.shape != cur64.shape:
        raise ShapeMismatchError(f"coarse vector shapes differ: {prev64.shape} vs {cur64.shape}")
    blend = inertia * prev64 + (1.0 - inertia) * cur64
    if renormalize:
        return _normalize_vec(blend)
    return blend.astype(np.float32)


@dataclass(frozen=True)
class TemplateBank:
    """All per-object templates carried across a sequence; O(1) in length.

    global_fine is frozen at the annotated frame; local_fine is replaced every
    frame; the three coarse templates blend their own past with the newest
    coarse template. area_sum_* accumulate per-class mask mass through the
    last folded frame and drive the overall blend weight. frame_index is the
    index of the next frame to process.
    """

    global_fine: FineTemplate
    local_fine: FineTemplate
    overall: CoarseTemplate
    short_term: CoarseTemplate
    long_term: CoarseTemplate
    area_sum_bg: float
    area_sum_fg: float
    frame_index: int


def bank_init(features: FeatureGrid, mask: ProbMask) -> TemplateBank:
    """Start a bank from the annotated frame.

    All three coarse templates equal the frame's own coarse template exactly:
    every blend weight is defined to be zero on the first frame.
    """
    fine = build_fine(features, mask)
    coarse = compress(fine)
    return TemplateBank(
        global_fine=fine,
        local_fine=fine,
        overall=coarse,
        short_term=coarse,
        long_term=coarse,
        area_sum_bg=mask_area(mask, "bg"),
        area_sum_fg=mask_area(mask, "fg"),
        frame_index=1,
    )


def bank_step(
    bank: TemplateBank,
    features: FeatureGrid,
    mask: ProbMask,
    params: InertiaParams,
    renormalize: bool = True,
) -> TemplateBank:
    """Fold one tracked frame into the bank.

    ``mask`` is the predicted (soft) or given mask for this frame; soft
    probabilities weight the templates directly, no hardening.
    """
    fine = build_fine(features, mask)
    coarse = compress(fine)
    area_bg = mask_area(mask, "bg")
    area_fg = mask_area(mask, "fg")

    def blend(prev: CoarseTemplate, mu_bg: float, mu_fg: float) -> CoarseTemplate:
        return CoarseTemplate(
            bg=ema_update(prev.bg, coarse.bg, mu_bg, renormalize=renormalize),
            fg=ema_update(prev.fg, coarse.fg, mu_fg, renormalize=renormalize),
        )

    return replace(
        bank,
        local_fine=fine,
        overall=blend(
            bank.overall,
            overall_inertia(bank.area_sum_bg, area_bg),
            overall_inertia(bank.area_sum_fg, area_fg),
        ),
        short_term=blend(bank.short_term, params.short_bg, params.short_fg),
        long_term=blend(bank.long_term, params.long_bg, params.long_fg),
        area_sum_bg=bank.area_sum_bg + area_bg,
        area_sum_fg=bank.area_sum_fg + area_fg,
        frame_index=bank.frame_index + 1,
    )
