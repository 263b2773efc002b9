"""Similarity matching of templates against a query grid, with locality.

Fine templates are matched column-against-column (cosine similarities, since
query columns are unit and template columns are unit vectors scaled by mask
probabilities) and reduced by a query-wise max over template positions.
Coarse templates are a single column, so their match is a per-pixel dot
product. The local fine match additionally multiplies every (template pixel,
query pixel) similarity by a learned score of their grid distance before the
max, which is what suppresses far-away lookalikes.

Two implementations are kept: a plain numpy one that materializes the full
similarity matrix (the reference; every test oracle compares against a triple
loop, and this path against the oracle), and a fused numba path that computes
the weighted maxima in one pass over a Gram matrix without materializing the
weighted copies. The fused path recovers unit appearance columns from a fine
template by normalizing bg+fg columns, which is exact whenever both classes
of the template are per-position scalings of one appearance vector (always
true for templates built from a feature grid and a probability mask).

The dense (H*W)^2 distance matrix is precomputed once per grid shape and
cached; this is the scalability limit of the module and is acceptable at the
small grids targeted here.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

from .grid import (
    SCORE_CHANNELS,
    FeatureGrid,
    InvalidInputError,
    ScoreStack,
    ShapeMismatchError,
    ZERO_NORM_EPS,
)
from .templates import CoarseTemplate, FineTemplate, TemplateBank


@dataclass(frozen=True)
class DistanceScoreParams:
    """Scalars of the learned distance-to-score map sigmoid(w2*relu(w1*d)).

    Unconstrained; training drives them so that the composite is high near
    d = 0 and decays with distance (w1 > 0, w2 < 0).
    """

    w1: float
    w2: float

    def __post_init__(self):
        if not (math.isfinite(self.w1) and math.isfinite(self.w2)):
            raise InvalidInputError(f"distance params must be finite, got {self.w1}, {self.w2}")


@lru_cache(maxsize=16)
def distance_matrix(h: int, w: int) -> np.ndarray:
    """All-pairs Euclidean distances between grid coordinates, row-major.

    Entry [p, q] is the distance in feature-grid pixel units. Returned array
    is cached and marked read-only.
    """
    if h < 1 or w < 1:
        raise InvalidInputError(f"grid dims must be >= 1, got {h}x{w}")
    rows, cols = np.divmod(np.arange(h * w), w)
    dr = rows[:, None] - rows[None, :]
    dc = cols[:, None] - cols[None, :]
    d = np.sqrt((dr * dr + dc * dc).astype(np.float64)).astype(np.float32)
    d.flags.writeable = False
    return d


@lru_cache(maxsize=16)
def chebyshev_matrix(h: int, w: int) -> np.ndarray:
    """All-pairs Chebyshev (max-coordinate) distances, for hard windowing."""
    if h < 1 or w < 1:
        raise InvalidInputError(f"grid dims must be >= 1, got {h}x{w}")
    rows, cols = np.divmod(np.arange(h * w), w)
    d = np.maximum(np.abs(rows[:, None] - rows[None, :]), np.abs(cols[:, None] - cols[None, :]))
    d = d.astype(np.int32)
    d.flags.writeable = False
    return d


def distance_score(d, params: DistanceScoreParams):
    """sigmoid(w2 * max(0, w1 * d)), elementwise; output in (0, 1).

    Note the exact form: at d = 0 the score is 0.5, not 1, and with w2 = 0 it
    is 0.5 everywhere.
    """
    d64 = np.asarray(d, dtype=np.float64)
    if d64.size and d64.min() < 0:
        raise InvalidInputError("distances must be non-negative")
    z = params.w2 * np.maximum(0.0, params.w1 * d64)
    # two-sided logistic evaluation, no overflow for any finite z
    pos = 1.0 / (1.0 + np.exp(-np.clip(z, 0.0, None)))
    ez = np.exp(np.clip(z, None, 0.0))
    neg = ez / (1.0 + ez)
    out = np.where(z >= 0, pos, neg)
    if np.isscalar(d) or d64.ndim == 0:
        return float(out)
    return out


@lru_cache(maxsize=8)
def _distance_weight_f32(h: int, w: int, w1: float, w2: float) -> np.ndarray:
    dw = distance_score(distance_matrix(h, w), DistanceScoreParams(w1, w2)).astype(np.float32)
    dw.flags.writeable = False
    return dw


def similarity(template: FeatureGrid, query: FeatureGrid) -> np.ndarray:
    """Dense (template positions) x (query positions) cosine-similarity matrix.

    Requires a normalized query; template columns are expected to have norm
    <= 1 (mask-weighted unit columns), so entries land in [-1, 1]. Stray
    float fuzz is clipped.
    """
    if template.channels != query.channels:
        raise ShapeMismatchError(
            f"channel mismatch: template {template.channels} vs query {query.channels}"
        )
    if not query.normalized:
        raise InvalidInputError("similarity requires a normalized query grid")
    sim = template.columns().T @ query.columns()
    np.clip(sim, -1.0, 1.0, out=sim)
    return sim


def query_max(sim: np.ndarray, height: int, width: int) -> np.ndarray:
    """Per-query-column maximum over template positions, reshaped row-major."""
    sim = np.asarray(sim)
    if sim.ndim != 2 or sim.shape[0] == 0:
        raise InvalidInputError(f"similarity matrix must be non-empty 2-D, got shape {sim.shape}")
    if sim.shape[1] != height * width:
        raise ShapeMismatchError(f"{sim.shape[1]} query columns cannot reshape to {height}x{width}")
    return sim.max(axis=0).reshape(height, width)


def _check_fine_query(template: FineTemplate, query: FeatureGrid) -> None:
    if template.channels != query.channels:
        raise ShapeMismatchError(
            f"channel mismatch: template {template.channels} vs query {query.channels}"
        )
    if not query.normalized:
        raise InvalidInputError("fine matching requires a normalized query grid")


def global_match(template: FineTemplate, query: FeatureGrid):
    """Plain fine matching, one (H, W) score map per class."""
    _check_fine_query(template, query)
    h, w = query.height, query.width
    return (
        query_max(similarity(template.bg, query), h, w),
        query_max(similarity(template.fg, query), h, w),
    )


def local_match(
    template: FineTemplate,
    query: FeatureGrid,
    dm: np.ndarray,
    params: DistanceScoreParams,
):
    """Distance-scored fine matching.

    Every similarity entry is multiplied by the distance score of its
    (template pixel, query pixel) pair before the query-wise max, so a far
    duplicate has to beat a near match through a (0,1) attenuation factor.
    Negative similarities shrink toward 0 under the same rule.
    """
    _check_fine_query(template, query)
    h, w = query.height, query.width
    p = template.height * template.width
    if dm.shape != (p, h * w):
        raise ShapeMismatchError(f"distance matrix {dm.shape} does not match {p}x{h * w}")
    dw = distance_score(dm, params).astype(np.float32)
    return (
        query_max(similarity(template.bg, query) * dw, h, w),
        query_max(similarity(template.fg, query) * dw, h, w),
    )


def local_match_hard_window(template: FineTemplate, query: FeatureGrid, radius: int):
    """Windowed baseline: matches beyond a Chebyshev radius are excluded.

    Exclusion means the similarity entry is forced to -1 (the floor of the
    cosine range) before the max, so an out-of-window position can never win.
    """
    if radius < 0:
        raise InvalidInputError(f"window radius must be >= 0, got {radius}")
    _check_fine_query(template, query)
    if (template.height, template.width) != (query.height, query.width):
        raise ShapeMismatchError("hard windowing requires template and query on the same grid")
    h, w = query.height, query.width
    outside = chebyshev_matrix(h, w) > radius
    maps = []
    for grid in (template.bg, template.fg):
        sim = similarity(grid, query)
        sim[outside] = -1.0
        maps.append(query_max(sim, h, w))
    return tuple(maps)


def coarse_match(template: CoarseTemplate, query: FeatureGrid):
    """Per-pixel dot product against each class prototype."""
    if template.channels != query.channels:
        raise ShapeMismatchError(
            f"channel mismatch: template {template.channels} vs query {query.channels}"
        )
    if not query.normalized:
        raise InvalidInputError("coarse matching requires a normalized query grid")
    cols = query.columns()
    h, w = query.height, query.width
    bg = np.clip(template.bg @ cols, -1.0, 1.0).reshape(h, w)
    fg = np.clip(template.fg @ cols, -1.0, 1.0).reshape(h, w)
    return bg, fg


def decompose_fine(template: FineTemplate):
    """Split a fine template into unit appearance columns and class weights.

    Returns (xhat (C, P), w_bg (P,), w_fg (P,)) with template class c equal to
    xhat * w_c per column. Exact (up to float rounding) whenever bg and fg
    columns are parallel per position, which holds for every template built
    from one feature grid and one mask.
    """
    tb = template.bg.columns()
    tf = template.fg.columns()
    wbg = np.sqrt(np.einsum("cp,cp->p", tb, tb, dtype=np.float64))
    wfg = np.sqrt(np.einsum("cp,cp->p", tf, tf, dtype=np.float64))
    both = tb + tf
    norms = np.sqrt(np.einsum("cp,cp->p", both, both, dtype=np.float64))
    safe = np.where(norms < ZERO_NORM_EPS, 1.0, norms)
    xhat = (both / safe[None, :].astype(np.float32)).astype(np.float32)
    xhat[:, norms < ZERO_NORM_EPS] = 0.0
    return xhat, wbg.astype(np.float32), wfg.astype(np.float32)


if _HAVE_NUMBA:
    # running-max accumulators over one row block of the Gram matrix;
    # row-outer/query-inner keeps every read sequential (the naive
    # query-outer order strides the full row length per step and is
    # an order of magnitude slower at 64x64 grids)

    @njit(cache=True, nogil=True)
    def _wmax_update_nb(gram, wbg, wfg, out):  # pragma: no cover - via dispatch
        b_n, q_n = gram.shape
        for p in range(b_n):
            wb = wbg[p]
            wf = wfg[p]
            row = gram[p]
            for q in range(q_n):
                g = row[q]
                vb = wb * g
                vf = wf * g
                if vb > out[0, q]:
                    out[0, q] = vb
                if vf > out[1, q]:
                    out[1, q] = vf

    @njit(cache=True, nogil=True)
    def _wmax_update_dist_nb(gram, wbg, wfg, dw, out):  # pragma: no cover
        b_n, q_n = gram.shape
        for p in range(b_n):
            wb = wbg[p]
            wf = wfg[p]
            row = gram[p]
            wrow = dw[p]
            for q in range(q_n):
                g = row[q] * wrow[q]
                vb = wb * g
                vf = wf * g
                if vb > out[0, q]:
                    out[0, q] = vb
                if vf > out[1, q]:
                    out[1, q] = vf

    @njit(cache=True, nogil=True)
    def _wmax_update_window_nb(gram, wbg, wfg, inside, out):  # pragma: no cover
        b_n, q_n = gram.shape
        for p in range(b_n):
            wb = wbg[p]
            wf = wfg[p]
            row = gram[p]
            irow = inside[p]
            for q in range(q_n):
                if irow[q]:
                    g = row[q]
                    vb = wb * g
                    vf = wf * g
                else:
                    vb = -1.0
                    vf = -1.0
                if vb > out[0, q]:
                    out[0, q] = vb
                if vf > out[1, q]:
                    out[1, q] = vf


def _wmax_pair_np(gram, wbg, wfg, weight=None, inside=None):
    """Reference for the fused kernels: same semantics, materialized."""
    sim = gram if weight is None else gram * weight
    vb = wbg[:, None] * sim
    vf = wfg[:, None] * sim
    if inside is not None:
        vb = np.where(inside, vb, np.float32(-1.0))
        vf = np.where(inside, vf, np.float32(-1.0))
    return np.stack([vb.max(axis=0), vf.max(axis=0)])


_FUSED_BLOCK_ROWS = 128  # gram block ~2 MB at Q=4096: stays in cache


def _fused_fine_pair(xhat_t, wbg, wfg, xq, weight=None, inside=None):
    """Blockwise Gram + weighted per-query max, one (2, Q) result.

    Never materializes the full (P, Q) Gram: each row block is produced by
    BLAS and folded into the running maxima while still cache-hot.
    """
    if not _HAVE_NUMBA:
        return _wmax_pair_np(xhat_t.T @ xq, wbg, wfg, weight=weight, inside=inside)
    p_n = xhat_t.shape[1]
    q_n = xq.shape[1]
    out = np.full((2, q_n), -np.inf, dtype=np.float32)
    for p0 in range(0, p_n, _FUSED_BLOCK_ROWS):
        p1 = min(p0 + _FUSED_BLOCK_ROWS, p_n)
        gram = xhat_t[:, p0:p1].T @ xq
        if inside is not None:
            _wmax_update_window_nb(gram, wbg[p0:p1], wfg[p0:p1], inside[p0:p1], out)
        elif weight is not None:
            _wmax_update_dist_nb(gram, wbg[p0:p1], wfg[p0:p1], weight[p0:p1], out)
        else:
            _wmax_update_nb(gram, wbg[p0:p1], wfg[p0:p1], out)
    return out


LOCALITY_MODES = ("learned", "window", "none")


def assemble_scores(
    bank: TemplateBank,
    query: FeatureGrid,
    dm: np.ndarray | None = None,
    params: DistanceScoreParams | None = None,
    *,
    locality: str = "learned",
    window_radius: int = 2,
    use_fine: bool = True,
    use_coarse: bool = True,
    backend: str = "auto",
) -> ScoreStack:
    """Build the 10-channel score stack for one query frame.

    Channel order is fixed (grid.SCORE_CHANNELS): global bg/fg from the
    frame-0 fine template, local bg/fg from the previous-frame fine template
    with the selected locality rule, then overall/short/long coarse dot
    products. Channels switched off by use_fine/use_coarse are zero-filled,
    which keeps the stack shape stable for the readout under ablations.

    locality: "learned" multiplies local similarities by distance_score(dm),
    "window" excludes matches beyond window_radius (Chebyshev), "none" leaves
    the local match unweighted.
    """
    if locality not in LOCALITY_MODES:
        raise InvalidInputError(f"unknown locality mode {locality!r}")
    if not query.normalized:
        raise InvalidInputError("assemble_scores requires a normalized query grid")
    if bank.global_fine.channels != query.channels:
        raise ShapeMismatchError(
            f"channel mismatch: bank {bank.global_fine.channels} vs query {query.channels}"
        )
    h, w = query.height, query.width
    stack = np.zeros((len(SCORE_CHANNELS), h, w), dtype=np.float32)

    if use_fine:
        if locality == "learned":
            if params is None:
                raise InvalidInputError("learned locality requires distance params")
            if dm is None:
                tp = bank.local_fine
                if (tp.height, tp.width) != (h, w):
                    raise ShapeMismatchError("default distance matrix needs template grid == query grid")
                dm = distance_matrix(h, w)
        if backend not in ("auto", "numpy", "fused"):
            raise InvalidInputError(f"unknown backend {backend!r}")
        fused = backend == "fused" or (backend == "auto" and _HAVE_NUMBA)
        if fused:
            xq = np.ascontiguousarray(query.columns())
            for base, tpl in ((0, bank.global_fine), (2, bank.local_fine)):
                xhat_t, wbg, wfg = decompose_fine(tpl)
                weight = None
                inside = None
                if base == 2 and locality == "learned":
                    weight = (
                        _distance_weight_f32(h, w, params.w1, params.w2)
                        if dm is distance_matrix(h, w)
                        else distance_score(dm, params).astype(np.float32)
                    )
                elif base == 2 and locality == "window":
                    inside = (chebyshev_matrix(h, w) <= window_radius).view(np.uint8)
                pair = _fused_fine_pair(xhat_t, wbg, wfg, xq, weight=weight, inside=inside)
                np.clip(pair, -1.0, 1.0, out=pair)
                stack[base : base + 2] = pair.reshape(2, h, w)
        else:
            stack[0], stack[1] = global_match(bank.global_fine, query)
            if locality == "learned":
                stack[2], stack[3] = local_match(bank.local_fine, query, dm, params)
            elif locality == "window":
                stack[2], stack[3] = local_match_hard_window(bank.local_fine, query, window_radius)
            else:
                stack[2], stack[3] = global_match(bank.local_fine, query)

    if use_coarse:
        for base, tpl in ((4, bank.overall), (6, bank.short_term), (8, bank.long_term)):
            stack[base], stack[base + 1] = coarse_match(tpl, query)

    return ScoreStack(stack)
