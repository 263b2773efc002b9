"""Segmentation metrics, sequence file IO, and synthetic scene generation.

Metrics follow the usual region/contour split: J is plain IoU, F is a
boundary F-measure with a pixel tolerance, G averages the two. Boundary
matching is a distance-threshold check (not optimal assignment), computed
with a Euclidean distance transform; good enough at these resolutions and
fully deterministic.

File layout for a sequence directory:

    <dir>/frames/00000.ppm  (P6 binary, 8-bit; .png also accepted)
    <dir>/masks/00000.pgm   (P5, 8-bit, pixel value = label id; .png too)

Synthetic scenes are solid-color axis-aligned squares bouncing over a cell-
textured background. Distractors duplicate a target's exact appearance but
stay labeled background, which is precisely the failure mode distance
scoring is supposed to fix.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import distance_transform_edt

from .augment import TrainingSequence
from .grid import InvalidInputError, LabelMask, ShapeMismatchError


# ---------------------------------------------------------------------------
# metrics


def region_accuracy(pred: LabelMask, gt: LabelMask, object_id: int) -> float:
    """Intersection over union of one object's binary masks."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ShapeMismatchError(f"mask dims differ: {(pred.height, pred.width)} vs {(gt.height, gt.width)}")
    p = pred.binary(object_id)
    g = gt.binary(object_id)
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Object pixels with a 4-neighbor outside the object or off the image."""
    m = mask.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def default_tolerance(height: int, width: int) -> int:
    return int(math.ceil(0.008 * math.hypot(height, width)))


def contour_accuracy(pred: LabelMask, gt: LabelMask, object_id: int, tolerance_px=None) -> float:
    """Boundary F-measure at a pixel tolerance.

    Precision counts predicted boundary pixels within tolerance of the ground
    truth boundary, recall the reverse; empty/empty agrees perfectly, a
    one-sided empty mask scores 0.
    """
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ShapeMismatchError(f"mask dims differ: {(pred.height, pred.width)} vs {(gt.height, gt.width)}")
    if tolerance_px is None:
        tolerance_px = default_tolerance(pred.height, pred.width)
    pb = _boundary(pred.binary(object_id))
    gb = _boundary(gt.binary(object_id))
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    dist_to_gt = distance_transform_edt(~gb)
    dist_to_pred = distance_transform_edt(~pb)
    precision = float((dist_to_gt[pb] <= tolerance_px).mean())
    recall = float((dist_to_pred[gb] <= tolerance_px).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def overall_accuracy(j: float, f: float) -> float:
    return 0.5 * (j + f)


@dataclass(frozen=True)
class SequenceScore:
    name: str
    J: float
    F: float
    per_object: dict = field(default_factory=dict)

    @property
    def G(self) -> float:
        return overall_accuracy(self.J, self.F)


@dataclass(frozen=True)
class MetricsReport:
    per_sequence: tuple

    def mean(self) -> dict:
        if not self.per_sequence:
            return {"J": 0.0, "F": 0.0, "G": 0.0}
        j = float(np.mean([s.J for s in self.per_sequence]))
        f = float(np.mean([s.F for s in self.per_sequence]))
        return {"J": j, "F": f, "G": overall_accuracy(j, f)}

    def to_json(self) -> str:
        doc = {
            "per_sequence": [
                {
                    "name": s.name,
                    "J": s.J,
                    "F": s.F,
                    "G": s.G,
                    "per_object": {str(k): dict(v) for k, v in sorted(s.per_object.items())},
                }
                for s in self.per_sequence
            ],
            "mean": self.mean(),
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def evaluate_masks(pred_masks, gt_masks, name: str = "", tolerance_px=None) -> SequenceScore:
    """Score one sequence: per-object J/F averaged over predicted frames.

    Frame 0 carries the given annotation, so it is excluded; a single-frame
    sequence therefore scores a vacuous 1. Objects are taken from the ground
    truth's first frame.
    """
    if len(pred_masks) != len(gt_masks):
        raise InvalidInputError(f"{name or 'sequence'}: {len(pred_masks)} predictions vs {len(gt_masks)} references")
    if not gt_masks:
        raise InvalidInputError("cannot evaluate an empty sequence")
    ids = gt_masks[0].object_ids
    if not ids or len(gt_masks) == 1:
        return SequenceScore(name=name, J=1.0, F=1.0)
    per_object = {}
    for k in ids:
        js = [region_accuracy(p, g, k) for p, g in zip(pred_masks[1:], gt_masks[1:])]
        fs = [contour_accuracy(p, g, k, tolerance_px) for p, g in zip(pred_masks[1:], gt_masks[1:])]
        j = float(np.mean(js))
        f = float(np.mean(fs))
        per_object[k] = {"J": j, "F": f, "G": overall_accuracy(j, f)}
    j = float(np.mean([v["J"] for v in per_object.values()]))
    f = float(np.mean([v["F"] for v in per_object.values()]))
    return SequenceScore(name=name, J=j, F=f, per_object=per_object)


# ---------------------------------------------------------------------------
# image IO


def _read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P([56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise InvalidInputError(f"{path}: not a binary PPM/PGM file")
    kind, w, h, maxval = int(m.group(1)), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval > 255:
        raise InvalidInputError(f"{path}: only 8-bit PNM supported, maxval {maxval}")
    body = data[m.end():]
    channels = 3 if kind == 6 else 1
    need = w * h * channels
    if len(body) < need:
        raise InvalidInputError(f"{path}: truncated PNM payload ({len(body)} < {need})")
    arr = np.frombuffer(body[:need], dtype=np.uint8)
    return arr.reshape(h, w, 3) if kind == 6 else arr.reshape(h, w)


def _write_pnm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 3:
        header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n"
    elif arr.ndim == 2:
        header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n"
    else:
        raise InvalidInputError(f"cannot write array of shape {arr.shape} as PNM")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.tobytes())


def read_frame(path) -> np.ndarray:
    path = str(path)
    if path.endswith((".ppm", ".pgm")):
        arr = _read_pnm(path)
        if arr.ndim != 3:
            raise InvalidInputError(f"{path}: expected color frame, got grayscale")
        return arr
    arr = np.asarray(Image.open(path).convert("RGB"))
    return arr


def read_mask(path) -> LabelMask:
    path = str(path)
    if path.endswith((".pgm", ".ppm")):
        arr = _read_pnm(path)
        if arr.ndim != 2:
            raise InvalidInputError(f"{path}: expected single-channel mask")
        return LabelMask(arr)
    img = Image.open(path)
    if img.mode not in ("P", "L", "I"):
        img = img.convert("L")
    return LabelMask(np.asarray(img))


def _indexed(dirpath, exts) -> list:
    try:
        names = sorted(os.listdir(dirpath))
    except FileNotFoundError:
        raise InvalidInputError(f"missing directory: {dirpath}")
    picked = [n for n in names if n.lower().endswith(exts)]
    if not picked:
        raise InvalidInputError(f"no usable files under {dirpath}")
    return [os.path.join(dirpath, n) for n in picked]


def load_sequence(root) -> TrainingSequence:
    """Read a frames/ + masks/ directory pair into a TrainingSequence."""
    frame_paths = _indexed(os.path.join(root, "frames"), (".ppm", ".png"))
    mask_paths = _indexed(os.path.join(root, "masks"), (".pgm", ".png"))
    if len(frame_paths) != len(mask_paths):
        raise InvalidInputError(
            f"{root}: {len(frame_paths)} frames vs {len(mask_paths)} masks "
            f"(first frame {os.path.basename(frame_paths[0])})"
        )
    frames = [read_frame(p) for p in frame_paths]
    masks = []
    for p, f in zip(mask_paths, frames):
        m = read_mask(p)
        if (m.height, m.width) != f.shape[:2]:
            raise ShapeMismatchError(f"{p}: mask {(m.height, m.width)} vs frame {f.shape[:2]}")
        masks.append(m)
    ids = sorted(set().union(*[set(m.object_ids) for m in masks]))
    return TrainingSequence(frames=tuple(frames), masks=tuple(masks), object_ids=tuple(ids))


def save_masks(root, masks, fmt: str = "pgm") -> None:
    """Write label masks as masks/NNNNN.<fmt>, 5-digit indices from 00000."""
    outdir = os.path.join(root, "masks")
    os.makedirs(outdir, exist_ok=True)
    for i, m in enumerate(masks):
        labels = m.labels if isinstance(m, LabelMask) else np.asarray(m)
        if labels.max(initial=0) > 255:
            raise InvalidInputError("label ids above 255 cannot be stored in 8-bit masks")
        path = os.path.join(outdir, f"{i:05d}.{fmt}")
        if fmt == "pgm":
            _write_pnm(path, labels.astype(np.uint8))
        elif fmt == "png":
            Image.fromarray(labels.astype(np.uint8), mode="L").save(path)
        else:
            raise InvalidInputError(f"unknown mask format {fmt!r}")


def save_sequence(root, seq: TrainingSequence, fmt: str = "ppm") -> None:
    """Write frames and masks of a sequence under one directory."""
    framedir = os.path.join(root, "frames")
    os.makedirs(framedir, exist_ok=True)
    for i, f in enumerate(seq.frames):
        path = os.path.join(framedir, f"{i:05d}.{fmt}")
        if fmt == "ppm":
            _write_pnm(path, f)
        elif fmt == "png":
            Image.fromarray(np.asarray(f, dtype=np.uint8), mode="RGB").save(path)
        else:
            raise InvalidInputError(f"unknown frame format {fmt!r}")
    save_masks(root, seq.masks, fmt="pgm" if fmt == "ppm" else "png")


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SynthSceneConfig:
    """Bouncing-squares scene: targets are labeled, distractors are not.

    Geometry snaps to `cell` pixels so that stride-`cell` feature grids see
    block-aligned objects. `motion` is the per-frame speed bound in cells.
    """

    frames: int = 10
    height: int = 64
    width: int = 64
    objects: int = 1
    distractors: int = 0
    motion: int = 1
    seed: int = 0
    cell: int = 4
    object_cells: int = 4  # square side, in cells
    target_motion: int = -1  # cells/frame for labeled targets; -1 → same as motion

    def __post_init__(self):
        if self.frames < 1 or self.objects < 0 or self.distractors < 0 or self.motion < 0:
            raise InvalidInputError("counts must be non-negative and frames >= 1")
        if self.target_motion < -1:
            raise InvalidInputError(f"target_motion must be >= -1, got {self.target_motion}")
        if self.height < 16 or self.width < 16:
            raise InvalidInputError(f"scene must be at least 16x16, got {self.height}x{self.width}")


def _cell_texture(rng, cfg) -> np.ndarray:
    # a dim, low-contrast field: enough structure that background cells are
    # not all identical, dim enough that objects dominate any mixed patch
    hc = (cfg.height + cfg.cell - 1) // cfg.cell
    wc = (cfg.width + cfg.cell - 1) // cfg.cell
    tex = rng.integers(25, 66, size=(hc, wc, 3), dtype=np.uint8)
    big = np.repeat(np.repeat(tex, cfg.cell, axis=0), cfg.cell, axis=1)
    return big[: cfg.height, : cfg.width]


def synth_sequence(cfg: SynthSceneConfig) -> TrainingSequence:
    """Render bouncing solid squares over a static cell texture.

    Each distractor clones the appearance (color and size) of one target and
    moves independently; its pixels stay label 0. Draw order is distractors
    first, then targets by id, so every labeled pixel shows its own object's
    color. Raises when the requested squares cannot be placed disjointly.
    """
    rng = np.random.default_rng(cfg.seed)
    side_cells = cfg.object_cells
    side = side_cells * cfg.cell
    if side > min(cfg.height, cfg.width) // 2:
        raise InvalidInputError(f"{side}px squares do not fit a {cfg.height}x{cfg.width} scene")
    hc_max = cfg.height // cfg.cell - side_cells
    wc_max = cfg.width // cfg.cell - side_cells

    n_total = cfg.objects + cfg.distractors
    placements = []
    for _ in range(200):
        placements = [
            (int(rng.integers(0, hc_max + 1)), int(rng.integers(0, wc_max + 1)))
            for _ in range(n_total)
        ]
        ok = True
        for i in range(n_total):
            for j in range(i + 1, n_total):
                if (
                    abs(placements[i][0] - placements[j][0]) < side_cells + 1
                    and abs(placements[i][1] - placements[j][1]) < side_cells + 1
                ):
                    ok = False
        if ok:
            break
    else:
        raise InvalidInputError(
            f"could not place {n_total} disjoint {side}px squares in {cfg.height}x{cfg.width}"
        )

    # bright, saturated, mutually distinct target colors; distractors clone one
    palette = np.array(
        [[230, 40, 40], [40, 220, 40], [60, 80, 235], [235, 220, 40], [235, 40, 220], [40, 225, 225]],
        dtype=np.uint8,
    )
    colors = [palette[i % len(palette)] for i in range(cfg.objects)]
    clone_of = [int(rng.integers(0, cfg.objects)) if cfg.objects else 0 for _ in range(cfg.distractors)]

    def rand_vel(speed):
        if speed == 0:
            return (0, 0)
        v = (0, 0)
        while v == (0, 0):
            v = (int(rng.integers(-speed, speed + 1)), int(rng.integers(-speed, speed + 1)))
        return v

    target_speed = cfg.motion if cfg.target_motion < 0 else cfg.target_motion
    vels = [rand_vel(target_speed if i < cfg.objects else cfg.motion) for i in range(n_total)]
    texture = _cell_texture(rng, cfg)

    frames = []
    masks = []
    pos = list(placements)
    for _ in range(cfg.frames):
        frame = texture.copy()
        labels = np.zeros((cfg.height, cfg.width), dtype=np.int32)

        def draw(idx, color, label):
            r = pos[idx][0] * cfg.cell
            c = pos[idx][1] * cfg.cell
            frame[r : r + side, c : c + side] = color
            if label:
                labels[r : r + side, c : c + side] = label

        for d in range(cfg.distractors):
            draw(cfg.objects + d, colors[clone_of[d]] if cfg.objects else palette[0], 0)
        for k in range(cfg.objects):
            draw(k, colors[k], k + 1)
        frames.append(frame)
        masks.append(LabelMask(labels))

        nxt = []
        for i in range(n_total):
            r, c = pos[i]
            vr, vc = vels[i]
            r2, c2 = r + vr, c + vc
            if not 0 <= r2 <= hc_max:
                vr = -vr
                r2 = r + vr
            if not 0 <= c2 <= wc_max:
                vc = -vc
                c2 = c + vc
            vels[i] = (vr, vc)
            nxt.append((min(max(r2, 0), hc_max), min(max(c2, 0), wc_max)))
        pos = nxt

    return TrainingSequence(
        frames=tuple(frames), masks=tuple(masks), object_ids=tuple(range(1, cfg.objects + 1))
    )


def benchmark_suite(kind: str, count: int, seed: int, frames: int = 10, size: int = 64):
    """Named list of seeded scenes for the three standard test beds."""
    presets = {
        "static": dict(objects=1, distractors=0, motion=0),
        "translate": dict(objects=1, distractors=0, motion=1),
        # lookalikes sweep past a slow target: the case locality has to solve
        "distractor": dict(objects=1, distractors=2, motion=2, target_motion=0),
    }
    if kind not in presets:
        raise InvalidInputError(f"unknown suite kind {kind!r}")
    out = []
    for i in range(count):
        cfg = SynthSceneConfig(
            frames=frames, height=size, width=size, seed=seed + i, **presets[kind]
        )
        out.append((f"{kind}-{i:03d}", synth_sequence(cfg)))
    return out
