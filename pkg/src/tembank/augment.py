"""Swap-and-attach augmentation between two training sequences.

Objects are copied pixel-for-pixel at their own coordinates from one sequence
onto the other, jointly across all frames, so motion stays coherent and the
recipient's objects get genuinely occluded. The attached object receives a
fresh label id in the recipient's mask. No rescaling, no repositioning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import InvalidInputError, LabelMask, ShapeMismatchError


@dataclass(frozen=True)
class TrainingSequence:
    """Aligned RGB frames and label masks for one clip."""

    frames: tuple
    masks: tuple
    object_ids: tuple

    def __post_init__(self):
        frames = tuple(np.asarray(f) for f in self.frames)
        masks = tuple(m if isinstance(m, LabelMask) else LabelMask(m) for m in self.masks)
        if len(frames) != len(masks) or len(frames) < 1:
            raise InvalidInputError(
                f"need equal, non-zero frame/mask counts, got {len(frames)}/{len(masks)}"
            )
        ids = tuple(sorted(set(int(k) for k in self.object_ids)))
        if any(k <= 0 for k in ids):
            raise InvalidInputError(f"object ids must be positive, got {ids}")
        allowed = set(ids) | {0}
        for t, (f, m) in enumerate(zip(frames, masks)):
            if f.ndim != 3 or f.shape[2] != 3:
                raise InvalidInputError(f"frame {t} must be (H,W,3), got {f.shape}")
            if f.shape[:2] != (m.height, m.width):
                raise ShapeMismatchError(f"frame {t} {f.shape[:2]} vs mask {(m.height, m.width)}")
            present = set(int(k) for k in np.unique(m.labels))
            if not present <= allowed:
                raise InvalidInputError(f"mask {t} holds labels {present - allowed} outside {allowed}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "object_ids", ids)

    def __len__(self):
        return len(self.frames)

    @property
    def frame_shape(self):
        return self.frames[0].shape[:2]


def _fresh_id(ids) -> int:
    return (max(ids) if ids else 0) + 1


def _attach(recipient: TrainingSequence, donor: TrainingSequence, donor_id: int) -> TrainingSequence:
    new_id = _fresh_id(recipient.object_ids)
    frames = []
    masks = []
    for t in range(len(recipient)):
        sel = donor.masks[t].labels == donor_id
        frame = recipient.frames[t].copy()
        labels = recipient.masks[t].labels.copy()
        frame[sel] = donor.frames[t][sel]
        labels[sel] = new_id
        frames.append(frame)
        masks.append(LabelMask(labels))
    return TrainingSequence(
        frames=tuple(frames), masks=tuple(masks), object_ids=recipient.object_ids + (new_id,)
    )


def swap_and_attach(a: TrainingSequence, b: TrainingSequence, rng_seed: int):
    """Donate one object each way, pasting it over the recipient's content.

    Donor pixels come from the pristine input sequences (the two attachments
    do not see each other), so the operation is symmetric up to which object
    the seed selects. Sequences of unequal geometry are rejected; a pair with
    an object-less member passes through unchanged.
    """
    if len(a) != len(b):
        raise ShapeMismatchError(f"sequence lengths differ: {len(a)} vs {len(b)}")
    if a.frame_shape != b.frame_shape:
        raise ShapeMismatchError(f"frame shapes differ: {a.frame_shape} vs {b.frame_shape}")
    if not a.object_ids or not b.object_ids:
        return a, b
    rng = np.random.default_rng(rng_seed)
    # the draw order is part of the seeded behavior: first donor, then picks
    a_donates_first = bool(rng.random() < 0.5)
    first, second = (a, b) if a_donates_first else (b, a)
    first_pick = int(rng.choice(first.object_ids))
    second_pick = int(rng.choice(second.object_ids))
    a_pick, b_pick = (first_pick, second_pick) if a_donates_first else (second_pick, first_pick)
    return _attach(a, b, b_pick), _attach(b, a, a_pick)


def maybe_augment(a: TrainingSequence, b: TrainingSequence, probability: float, rng_seed: int):
    """One Bernoulli draw per pair; on success, swap_and_attach."""
    if not 0.0 <= probability <= 1.0:
        raise InvalidInputError(f"probability must be in [0,1], got {probability}")
    rng = np.random.default_rng(rng_seed)
    if rng.random() < probability:
        return swap_and_attach(a, b, int(rng.integers(0, 2**63)))
    return a, b
