"""Differentiable rewards over batches of decoded clips shaped (B, N, C, H, W).

Every function returns a per-sample reward tensor of shape (B,).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from vaderlab import autograd as ag
from vaderlab.autograd import Tensor
from vaderlab.rewards.discriminators import Discriminators, patch_keep_mask

BRIGHTNESS = "brightness"
FRAME_CLASSIFIER = "frame_classifier"
VIDEO_ACTION = "video_action"
OBJECT_ABSENCE = "object_absence"
MASKED_CONSISTENCY = "masked_consistency"
KINDS = (BRIGHTNESS, FRAME_CLASSIFIER, VIDEO_ACTION, OBJECT_ABSENCE, MASKED_CONSISTENCY)
FRAME_LEVEL = frozenset({BRIGHTNESS, FRAME_CLASSIFIER, OBJECT_ABSENCE})


def brightness(frames: Tensor) -> Tensor:
    """Mean pixel value per frame, shape (B, N)."""
    B, N = frames.shape[:2]
    return frames.reshape(B, N, -1).mean(axis=2)


def reward_frame_mean(frames: Tensor, metric: Callable[[Tensor], Tensor] = brightness,
                      aggregate: str = "mean") -> Tensor:
    """Aggregate a per-frame metric over frames; ``aggregate='sum'`` restores the plain sum."""
    per_frame = metric(frames)
    return per_frame.sum(axis=1) if aggregate == "sum" else per_frame.mean(axis=1)


def _class_onehot(labels: np.ndarray, n: int, dtype) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.min() < 0 or labels.max() >= n:
        raise IndexError(f"class index outside [0, {n})")
    return np.eye(n, dtype=dtype)[labels]


def reward_text_sim(frames: Tensor, shape_labels, classifier) -> Tensor:
    """Mean over frames of the classifier's log-probability of the prompted shape."""
    logp = ag.log_softmax(classifier.logits(frames))  # (B, N, S)
    onehot = _class_onehot(shape_labels, logp.shape[-1], logp.data.dtype)[:, None, :]
    return (logp * Tensor(onehot)).sum(axis=2).mean(axis=1)


def reward_video_action(frames: Tensor, motion_labels, classifier) -> Tensor:
    """Probability of the prompted motion under the clip classifier."""
    if frames.shape[1] < 2:
        raise ValueError("video action reward needs at least 2 frames")
    prob = ag.softmax(classifier.logits(frames))
    onehot = _class_onehot(motion_labels, prob.shape[-1], prob.data.dtype)
    return (prob * Tensor(onehot)).sum(axis=1)


def reward_object_absence(frames: Tensor, target: int, detector) -> Tensor:
    """Mean over frames of one minus the detector confidence for ``target``."""
    conf = detector.confidence(frames)[..., target]  # (B, N)
    return (1.0 - conf).mean(axis=1)


def reward_masked_consistency(frames: Tensor, predictor, mask_rng: np.random.Generator,
                              window: int | None = None, ratio: float = 0.5) -> Tensor:
    """Negative masked-reconstruction error.

    Clips longer than the predictor's window are scored on half-overlapping
    windows (so clip seams are covered) and averaged.
    """
    B, N = frames.shape[:2]
    if N < 2:
        raise ValueError("masked consistency needs at least 2 frames")
    window = window or N
    if N < window:
        raise ValueError(f"clip has {N} frames, predictor window is {window}")
    stride = max(1, window // 2)
    starts = list(range(0, N - window + 1, stride))
    if starts[-1] != N - window:
        starts.append(N - window)
    scores = []
    for s in starts:
        clip = frames[:, s:s + window] if (s, window) != (0, N) else frames
        keep = patch_keep_mask(clip.shape[1:], B, mask_rng, ratio)
        rec = predictor.reconstruct(clip, keep)
        hide = (~keep).astype(clip.data.dtype)
        err = (ag.square(rec - clip) * Tensor(hide)).reshape(B, -1).sum(axis=1)
        scores.append(err * (-1.0 / float(hide[0].sum())))
    if len(scores) == 1:
        return scores[0]
    return ag.stack(scores, axis=1).mean(axis=1)


def subsample_frames(N: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` distinct frame indices drawn uniformly, in increasing order."""
    if not 1 <= m <= N:
        raise ValueError(f"need 1 <= m <= N, got m={m}, N={N}")
    if m == N:
        return np.arange(N)
    return np.sort(rng.choice(N, size=m, replace=False))


@dataclass
class RewardModel:
    """Weighted mixture of reward kinds bound to frozen discriminators.

    ``labels`` passed at call time are prompt indices; shape and motion
    classes are derived from them through the world spec.
    """

    kinds: Sequence[str]
    discs: Discriminators | None = None
    weights: Sequence[float] | None = None
    target: int = 0
    aggregate: str = "mean"
    queries: int = field(default=0, init=False)

    def __post_init__(self):
        if isinstance(self.kinds, str):
            self.kinds = (self.kinds,)
        self.kinds = tuple(self.kinds)
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown reward kind {k!r}")
            if k != BRIGHTNESS and self.discs is None:
                raise ValueError(f"reward kind {k!r} needs trained discriminators")
        if self.weights is None:
            self.weights = (1.0,) * len(self.kinds)
        if len(self.weights) != len(self.kinds):
            raise ValueError("one weight per reward kind")

    @property
    def frame_level(self) -> bool:
        return all(k in FRAME_LEVEL for k in self.kinds)

    def __call__(self, frames: Tensor, labels=None, rng: np.random.Generator | None = None,
                 frame_subset: np.ndarray | None = None) -> Tensor:
        """Per-sample reward (B,). Each call counts one query per clip."""
        self.queries += frames.shape[0]
        total = None
        for kind, w in zip(self.kinds, self.weights):
            sub = frames
            if frame_subset is not None and kind in FRAME_LEVEL:
                sub = frames[:, frame_subset]
            r = self._one(kind, sub, labels, rng)
            r = r * float(w) if w != 1.0 else r
            total = r if total is None else total + r
        return total

    def _one(self, kind, frames, labels, rng) -> Tensor:
        spec = self.discs.spec if self.discs is not None else None
        if kind == BRIGHTNESS:
            return reward_frame_mean(frames, brightness, self.aggregate)
        if kind == FRAME_CLASSIFIER:
            shapes = np.asarray(labels) // len(spec.motions)
            return reward_text_sim(frames, shapes, self.discs.frame)
        if kind == VIDEO_ACTION:
            motions = np.asarray(labels) % len(spec.motions)
            return reward_video_action(frames, motions, self.discs.video)
        if kind == OBJECT_ABSENCE:
            return reward_object_absence(frames, self.target, self.discs.detector)
        if rng is None:
            raise ValueError("masked consistency reward needs a mask rng")
        return reward_masked_consistency(frames, self.discs.predictor, rng, window=spec.frames)
