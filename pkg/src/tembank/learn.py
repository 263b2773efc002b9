"""Fitting the trainable scalars by unrolled backpropagation.

Trainables are deliberately few: the two distance-score weights, the four
inertia pre-activations, and the 2x12 readout head. The loss is per-pixel
cross entropy of the predicted masks over an unrolled clip (frame 0 is the
given annotation and is excluded). Gradients come from a mirror of the
tracking forward pass written on the float64 tape in autodiff; the mirror
exploits that features are fixed, so every fine similarity is a constant
Gram matrix scaled per template position by the (differentiable) mask.

The contract for the gradients is finite-difference agreement, enforced by
finite_diff_report; the optimizer is plain Adam with bias correction and no
decay of any kind.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .augment import TrainingSequence, maybe_augment
from .grid import InvalidInputError, ProbMask, downsample_mask
from .matching import DistanceScoreParams
from .templates import InertiaParams
from .tracker import EmbedderConfig, ReadoutParams, TrackerConfig, embed_frame

PROB_CLAMP = 1e-7


class TrainingError(RuntimeError):
    """Raised when training hits a non-finite value or a rejected step."""


@dataclass(frozen=True)
class TrainableParams:
    distance: DistanceScoreParams
    inertia: InertiaParams
    readout: ReadoutParams

    @classmethod
    def from_config(cls, cfg: TrackerConfig) -> "TrainableParams":
        return cls(distance=cfg.distance, inertia=cfg.inertia, readout=cfg.readout)

    def apply_to(self, cfg: TrackerConfig) -> TrackerConfig:
        return replace(cfg, distance=self.distance, inertia=self.inertia, readout=self.readout)


PARAM_NAMES = ("w1", "w2", "a_short_bg", "a_short_fg", "a_long_bg", "a_long_fg", "readout_weight", "readout_bias")


def params_to_arrays(p: TrainableParams) -> dict:
    return {
        "w1": np.float64(p.distance.w1),
        "w2": np.float64(p.distance.w2),
        "a_short_bg": np.float64(p.inertia.a_short_bg),
        "a_short_fg": np.float64(p.inertia.a_short_fg),
        "a_long_bg": np.float64(p.inertia.a_long_bg),
        "a_long_fg": np.float64(p.inertia.a_long_fg),
        "readout_weight": p.readout.weight.astype(np.float64),
        "readout_bias": p.readout.bias.astype(np.float64),
    }


def arrays_to_params(a: dict) -> TrainableParams:
    return TrainableParams(
        distance=DistanceScoreParams(float(a["w1"]), float(a["w2"])),
        inertia=InertiaParams(
            a_short_bg=float(a["a_short_bg"]),
            a_short_fg=float(a["a_short_fg"]),
            a_long_bg=float(a["a_long_bg"]),
            a_long_fg=float(a["a_long_fg"]),
        ),
        readout=ReadoutParams(
            weight=np.asarray(a["readout_weight"], dtype=np.float32),
            bias=np.asarray(a["readout_bias"], dtype=np.float32),
        ),
    )


def save_params(path, params: TrainableParams, embedder: EmbedderConfig) -> None:
    """Write the trained scalars plus the embedder identity as JSON.

    Floats serialize via repr, which round-trips bit-exactly.
    """
    doc = {
        "w1": float(params.distance.w1),
        "w2": float(params.distance.w2),
        "a_short_bg": float(params.inertia.a_short_bg),
        "a_short_fg": float(params.inertia.a_short_fg),
        "a_long_bg": float(params.inertia.a_long_bg),
        "a_long_fg": float(params.inertia.a_long_fg),
        "readout_weight": [float(x) for x in params.readout.weight.reshape(-1)],
        "readout_bias": [float(x) for x in params.readout.bias],
        "embedder_seed": int(embedder.projection_seed),
        "feature_dim": int(embedder.feature_dim),
        "stride": int(embedder.stride),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path):
    """Read back (TrainableParams, EmbedderConfig) from a params JSON."""
    with open(path) as fh:
        doc = json.load(fh)
    required = PARAM_NAMES + ("embedder_seed", "feature_dim", "stride")
    for key in required:
        if key not in doc:
            raise InvalidInputError(f"{path}: missing key {key!r}")
    vals = [doc["w1"], doc["w2"], doc["a_short_bg"], doc["a_short_fg"], doc["a_long_bg"], doc["a_long_fg"], *doc["readout_weight"], *doc["readout_bias"]]
    if not all(math.isfinite(float(v)) for v in vals):
        raise InvalidInputError(f"{path}: non-finite parameter values")
    params = TrainableParams(
        distance=DistanceScoreParams(float(doc["w1"]), float(doc["w2"])),
        inertia=InertiaParams(
            a_short_bg=float(doc["a_short_bg"]),
            a_short_fg=float(doc["a_short_fg"]),
            a_long_bg=float(doc["a_long_bg"]),
            a_long_fg=float(doc["a_long_fg"]),
        ),
        readout=ReadoutParams(
            weight=np.array(doc["readout_weight"], dtype=np.float32).reshape(2, 12),
            bias=np.array(doc["readout_bias"], dtype=np.float32),
        ),
    )
    emb = EmbedderConfig(
        feature_dim=int(doc["feature_dim"]),
        stride=int(doc["stride"]),
        projection_seed=int(doc["embedder_seed"]),
    )
    return params, emb


# ---------------------------------------------------------------------------
# loss and gradients


def cross_entropy_loss(pred_masks, gt_fg_frames) -> float:
    """Mean -log p_true over frames 1.. and pixels; gt entries are 0/1."""
    if len(pred_masks) != len(gt_fg_frames):
        raise InvalidInputError(f"{len(pred_masks)} predictions vs {len(gt_fg_frames)} references")
    total = 0.0
    count = 0
    for m, gt in zip(pred_masks[1:], gt_fg_frames[1:]):
        fg = (m.fg if isinstance(m, ProbMask) else np.asarray(m)).astype(np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        if fg.shape != gt.shape:
            raise InvalidInputError(f"prediction {fg.shape} vs reference {gt.shape}")
        p_true = np.clip(gt * fg + (1.0 - gt) * (1.0 - fg), PROB_CLAMP, 1.0 - PROB_CLAMP)
        total += float(np.sum(-np.log(p_true)))
        count += p_true.size
    if count == 0:
        raise InvalidInputError("loss needs at least one predicted frame")
    return total / count


def _dist64(h: int, w: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(h * w), w)
    dr = rows[:, None] - rows[None, :]
    dc = cols[:, None] - cols[None, :]
    return np.sqrt((dr * dr + dc * dc).astype(np.float64))


def prepare_clip(seq: TrainingSequence, cfg: TrackerConfig) -> dict:
    """Embed a clip and pin every quantity the tape treats as constant.

    The designated foreground object is the sequence's lowest id, so an
    attached (augmented) object stays background. Ground truth at feature
    resolution is hardened at 0.5 cell coverage.
    """
    if len(seq) < 2:
        raise InvalidInputError("training clips need at least 2 frames")
    if not seq.object_ids:
        raise InvalidInputError("training clip has no objects")
    target = seq.object_ids[0]
    stride = cfg.embedder.stride
    cols = []
    gts = []
    for frame, mask in zip(seq.frames, seq.masks):
        grid = embed_frame(frame, cfg.embedder)
        cols.append(grid.columns().astype(np.float64))
        soft = downsample_mask(mask.binary(target).astype(np.float64), stride)
        gts.append((soft.fg.astype(np.float64) >= 0.5).astype(np.float64).reshape(-1))
    h = (seq.frames[0].shape[0] + stride - 1) // stride
    w = (seq.frames[0].shape[1] + stride - 1) // stride
    m0 = downsample_mask(seq.masks[0].binary(target).astype(np.float64), stride)
    if float(m0.fg.sum()) <= 0.0:
        raise InvalidInputError("first frame of clip contains no designated foreground")
    grams_global = [cols[0].T @ c for c in cols[1:]]
    grams_local = [cols[i - 1].T @ cols[i] for i in range(1, len(cols))]
    return {
        "cols": cols,
        "gts": gts,
        "m0_fg": m0.fg.astype(np.float64).reshape(-1),
        "grid_hw": (h, w),
        "grams_global": grams_global,
        "grams_local": grams_local,
        "dist": _dist64(h, w),
    }


def _normalize(v: ad.Value) -> ad.Value:
    return v / ad.sqrt(ad.vsum(v * v))


def clip_loss_value(pvals: dict, prep: dict, cfg: TrackerConfig) -> ad.Value:
    """Forward mirror of the tracker on one clip, as a tape scalar.

    Differences from the float32 path are precision only: similarities are
    exact products of mask weights with constant Gram matrices, and the
    coarse templates follow the same EMA recursions with live gradients.
    """
    n_frames = len(prep["cols"])
    p_count = prep["cols"][0].shape[1]
    m0_fg = prep["m0_fg"]
    m0_bg = 1.0 - m0_fg

    if cfg.locality == "learned":
        dscore = ad.sigmoid(pvals["w2"] * ad.relu(pvals["w1"] * ad.constant(prep["dist"])))
    elif cfg.locality == "none":
        dscore = None
    else:
        raise InvalidInputError(f"training supports locality learned/none, not {cfg.locality!r}")

    mu_s_bg = ad.sigmoid(pvals["a_short_bg"])
    mu_s_fg = ad.sigmoid(pvals["a_short_fg"])
    mu_l_bg = ad.sigmoid(pvals["a_long_bg"])
    mu_l_fg = ad.sigmoid(pvals["a_long_fg"])

    def coarse(cols, m_fg, m_bg):
        return (
            _normalize(ad.constant(cols) @ m_bg),
            _normalize(ad.constant(cols) @ m_fg),
        )

    m_prev_fg = ad.constant(m0_fg)
    m_prev_bg = ad.constant(m0_bg)
    over_bg, over_fg = coarse(prep["cols"][0], m_prev_fg, m_prev_bg)
    short_bg, short_fg = over_bg, over_fg
    long_bg, long_fg = over_bg, over_fg
    area_bg = ad.constant(np.float64(m0_bg.sum()))
    area_fg = ad.constant(np.float64(m0_fg.sum()))

    total = None
    for i in range(1, n_frames):
        cols_i = prep["cols"][i]
        g_glob = ad.constant(prep["grams_global"][i - 1])
        g_loc = ad.constant(prep["grams_local"][i - 1])

        rows = []
        if cfg.use_fine:
            glob_bg = ad.amax(ad.constant(m0_bg[:, None]) * g_glob, axis=0)
            glob_fg = ad.amax(ad.constant(m0_fg[:, None]) * g_glob, axis=0)
            loc_sim_bg = ad.reshape(m_prev_bg, (p_count, 1)) * g_loc
            loc_sim_fg = ad.reshape(m_prev_fg, (p_count, 1)) * g_loc
            if dscore is not None:
                loc_sim_bg = loc_sim_bg * dscore
                loc_sim_fg = loc_sim_fg * dscore
            rows += [glob_bg, glob_fg, ad.amax(loc_sim_bg, axis=0), ad.amax(loc_sim_fg, axis=0)]
        else:
            zero = ad.constant(np.zeros(p_count))
            rows += [zero, zero, zero, zero]
        if cfg.use_coarse:
            xc = ad.constant(cols_i)

            def dot(vec):
                return ad.reshape(ad.reshape(vec, (1, -1)) @ xc, (p_count,))

            rows += [dot(over_bg), dot(over_fg), dot(short_bg), dot(short_fg), dot(long_bg), dot(long_fg)]
        else:
            zero = ad.constant(np.zeros(p_count))
            rows += [zero] * 6
        rows += [m_prev_bg, m_prev_fg]

        inp = ad.concat([ad.reshape(r, (1, p_count)) for r in rows], axis=0)
        logits = pvals["readout_weight"] @ inp + ad.reshape(pvals["readout_bias"], (2, 1))
        diff = ad.constant(np.array([[-1.0, 1.0]])) @ logits
        p_fg = ad.sigmoid(ad.reshape(diff, (p_count,)))

        gt = prep["gts"][i]
        p_true = ad.constant(gt) * p_fg + ad.constant(1.0 - gt) * (1.0 - p_fg)
        frame_loss = ad.vsum(-ad.log(ad.clip(p_true, PROB_CLAMP, 1.0 - PROB_CLAMP)))
        if not np.isfinite(frame_loss.data):
            raise TrainingError(f"non-finite loss at frame {i}")
        total = frame_loss if total is None else total + frame_loss

        # fold the prediction into the bank, gradients flowing through
        m_prev_fg = p_fg
        m_prev_bg = 1.0 - p_fg
        cur_bg, cur_fg = coarse(cols_i, m_prev_fg, m_prev_bg)
        a_bg = ad.vsum(m_prev_bg)
        a_fg = ad.vsum(m_prev_fg)
        mu_o_bg = area_bg / (area_bg + a_bg)
        mu_o_fg = area_fg / (area_fg + a_fg)
        over_bg = _normalize(mu_o_bg * over_bg + (1.0 - mu_o_bg) * cur_bg)
        over_fg = _normalize(mu_o_fg * over_fg + (1.0 - mu_o_fg) * cur_fg)
        short_bg = _normalize(mu_s_bg * short_bg + (1.0 - mu_s_bg) * cur_bg)
        short_fg = _normalize(mu_s_fg * short_fg + (1.0 - mu_s_fg) * cur_fg)
        long_bg = _normalize(mu_l_bg * long_bg + (1.0 - mu_l_bg) * cur_bg)
        long_fg = _normalize(mu_l_fg * long_fg + (1.0 - mu_l_fg) * cur_fg)
        area_bg = area_bg + a_bg
        area_fg = area_fg + a_fg

    return total / float((n_frames - 1) * p_count)


def _param_values(params: TrainableParams) -> dict:
    return {k: ad.Value(v) for k, v in params_to_arrays(params).items()}


def batch_loss_value(pvals: dict, preps, cfg: TrackerConfig) -> ad.Value:
    total = None
    for prep in preps:
        lv = clip_loss_value(pvals, prep, cfg)
        total = lv if total is None else total + lv
    return total / float(len(preps))


def grad(params: TrainableParams, batch, cfg: TrackerConfig):
    """Loss and exact gradients for a batch of clips.

    Returns (loss: float, grads: dict keyed like params_to_arrays).
    """
    preps = [b if isinstance(b, dict) else prepare_clip(b, cfg) for b in batch]
    if not preps:
        raise InvalidInputError("empty batch")
    pvals = _param_values(params)
    loss = batch_loss_value(pvals, preps, cfg)
    ad.backward(loss)
    grads = {}
    for k, v in pvals.items():
        # params outside the active graph (w1/w2 with locality off) get zeros
        if v.grad is None:
            grads[k] = np.zeros_like(np.asarray(v.data, dtype=np.float64))
        else:
            grads[k] = np.array(v.grad, dtype=np.float64)
    return float(loss.data), grads


def finite_diff_report(params: TrainableParams, batch, cfg: TrackerConfig, step: float = 1e-3):
    """Relative error |analytic - central difference| / max(1, |numeric|).

    Covers every trainable scalar exactly once; keys mirror the param dict,
    values are arrays of per-scalar relative errors.
    """
    preps = [b if isinstance(b, dict) else prepare_clip(b, cfg) for b in batch]
    base = params_to_arrays(params)
    _, analytic = grad(params, preps, cfg)

    def loss_at(arrays) -> float:
        pvals = {k: ad.Value(v) for k, v in arrays.items()}
        return float(batch_loss_value(pvals, preps, cfg).data)

    report = {}
    for name in PARAM_NAMES:
        flat = np.atleast_1d(np.array(base[name], dtype=np.float64)).reshape(-1)
        errs = np.zeros(flat.size)
        for i in range(flat.size):
            trial = {k: np.array(v, dtype=np.float64) for k, v in base.items()}
            t = np.atleast_1d(trial[name]).reshape(-1)
            t[i] = flat[i] + step
            trial[name] = t.reshape(np.shape(base[name]))
            up = loss_at(trial)
            t[i] = flat[i] - step
            trial[name] = t.reshape(np.shape(base[name]))
            down = loss_at(trial)
            numeric = (up - down) / (2.0 * step)
            a = np.atleast_1d(analytic[name]).reshape(-1)[i]
            errs[i] = abs(a - numeric) / max(1.0, abs(numeric))
        report[name] = errs
    return report


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = None
    v: dict = None

    def __post_init__(self):
        if self.m is None:
            self.m = {}
        if self.v is None:
            self.v = {}


def adam_step(params: TrainableParams, grads: dict, state: AdamState):
    """One bias-corrected Adam update; rejects non-finite gradients."""
    arrays = params_to_arrays(params)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}")
    state.t += 1
    b1t = 1.0 - state.beta1**state.t
    b2t = 1.0 - state.beta2**state.t
    out = {}
    for k in PARAM_NAMES:
        g = np.asarray(grads[k], dtype=np.float64)
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[k] = m
        state.v[k] = v
        update = state.lr * (m / b1t) / (np.sqrt(v / b2t) + state.eps)
        out[k] = np.asarray(arrays[k], dtype=np.float64) - update
    new_params = arrays_to_params(out)
    for k, val in params_to_arrays(new_params).items():
        if not np.all(np.isfinite(val)):
            raise TrainingError(f"non-finite parameter {k} after step {state.t}")
    return new_params, state


# ---------------------------------------------------------------------------
# data sampling and the fit loop


def sample_clip(seq: TrainingSequence, crop: int, frames_per_clip: int, min_fg_pixels: int, rng):
    """One designated-object binary clip, jointly cropped; None if unusable."""
    n = len(seq)
    span = min(frames_per_clip, n)
    start = int(rng.integers(0, n - span + 1))
    h, w = seq.frame_shape
    ch = min(crop, h)
    cw = min(crop, w)
    for _ in range(20):
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        first = seq.masks[start].labels[top : top + ch, left : left + cw]
        present = [k for k in seq.object_ids if np.any(first == k)]
        if not present:
            continue
        target = int(present[int(rng.integers(0, len(present)))])
        frames = []
        masks = []
        fg_total = 0
        for t in range(start, start + span):
            frames.append(np.ascontiguousarray(seq.frames[t][top : top + ch, left : left + cw]))
            sel = seq.masks[t].labels[top : top + ch, left : left + cw] == target
            fg_total += int(sel.sum())
            masks.append(np.where(sel, 1, 0).astype(np.int32))
        if fg_total < min_fg_pixels:
            return None
        return TrainingSequence(frames=tuple(frames), masks=tuple(masks), object_ids=(1,))
    return None


def sample_batch(dataset, batch_size: int, rng_seed: int, crop: int = 96, frames_per_clip: int = 6, min_fg_pixels: int = 100):
    """Draw usable clips from a dataset of sequences, deterministically."""
    if not dataset:
        raise InvalidInputError("empty dataset")
    rng = np.random.default_rng(rng_seed)
    batch = []
    attempts = 0
    while len(batch) < batch_size:
        attempts += 1
        if attempts > 200 * batch_size:
            raise TrainingError("could not sample enough usable clips (foreground too sparse?)")
        seq = dataset[int(rng.integers(0, len(dataset)))]
        clip = sample_clip(seq, crop, frames_per_clip, min_fg_pixels, rng)
        if clip is not None:
            batch.append(clip)
    return batch


def _clip_fg_mass(seq: TrainingSequence, stride: int) -> float:
    target = seq.object_ids[0]
    return float(downsample_mask(seq.masks[0].binary(target).astype(np.float64), stride).fg.sum())


def fit(
    dataset,
    epochs: int,
    cfg: TrackerConfig,
    augment_probability: float = 0.2,
    rng_seed: int = 0,
    batch_size: int = 2,
    steps_per_epoch: int = 10,
    crop: int = 96,
    frames_per_clip: int = 6,
    min_fg_pixels: int = 100,
    lr: float = 1e-4,
):
    """sample -> maybe augment -> grad -> Adam, epochs x steps_per_epoch times.

    Returns (TrainableParams, per-epoch mean losses). All randomness descends
    from rng_seed.
    """
    params = TrainableParams.from_config(cfg)
    state = AdamState(lr=lr)
    history = []
    seed_stream = np.random.default_rng(rng_seed)
    for _ in range(epochs):
        losses = []
        for _ in range(steps_per_epoch):
            batch = sample_batch(
                dataset,
                batch_size,
                int(seed_stream.integers(0, 2**63)),
                crop=crop,
                frames_per_clip=frames_per_clip,
                min_fg_pixels=min_fg_pixels,
            )
            aug_seed = int(seed_stream.integers(0, 2**63))
            if len(batch) >= 2 and len(batch[0]) == len(batch[1]) and batch[0].frame_shape == batch[1].frame_shape:
                a, b = maybe_augment(batch[0], batch[1], augment_probability, aug_seed)
                # an attachment that buries the designated object in frame 0
                # would leave the bank with an empty class; keep the originals then
                if _clip_fg_mass(a, cfg.embedder.stride) > 0 and _clip_fg_mass(b, cfg.embedder.stride) > 0:
                    batch[0], batch[1] = a, b
            loss, grads = grad(params, batch, cfg)
            params, state = adam_step(params, grads, state)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    if not all(math.isfinite(x) for x in history):
        raise TrainingError("loss history contains non-finite entries")
    return params, history
