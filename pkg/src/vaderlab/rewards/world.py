"""Procedural moving-shape clips and prompt splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from vaderlab.diffusion.model import Conditioning

SHAPES = ("square", "cross", "disk")
MOTIONS = ("left", "right", "up", "down")
_VELOCITY = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}


@dataclass(frozen=True)
class ToyWorldSpec:
    frames: int = 4
    channels: int = 1
    height: int = 8
    width: int = 8
    shape_classes: tuple[str, ...] = SHAPES
    motions: tuple[str, ...] = MOTIONS
    brightness: tuple[float, float] = (0.5, 1.0)
    shape_size: int | None = None
    velocity: int | None = None

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("a clip needs at least 2 frames")
        lo, hi = self.brightness
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("brightness range must lie inside [0, 1]")
        unknown = set(self.shape_classes) - set(SHAPES) or set(self.motions) - set(MOTIONS)
        if unknown:
            raise ValueError(f"unknown shapes/motions: {sorted(unknown)}")

    @property
    def size(self) -> int:
        return self.shape_size or max(3, (5 * min(self.height, self.width)) // 8)

    @property
    def speed(self) -> int:
        return self.velocity or max(1, self.height // 8)

    @property
    def vocab(self) -> int:
        return len(self.shape_classes) * len(self.motions)

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def clip_shape(self) -> tuple[int, int, int, int]:
        return (self.frames,) + self.frame_shape

    def label(self, shape: int, motion: int) -> int:
        return shape * len(self.motions) + motion

    def shape_of(self, label: int) -> int:
        return label // len(self.motions)

    def motion_of(self, label: int) -> int:
        return label % len(self.motions)

    def at_resolution(self, side: int) -> "ToyWorldSpec":
        """Same world at ``side`` x ``side`` pixels, with shape size and speed rescaled."""
        return ToyWorldSpec(self.frames, self.channels, side, side, self.shape_classes,
                            self.motions, self.brightness)

    @cached_property
    def masks(self) -> dict[str, np.ndarray]:
        return {name: shape_mask(name, self.size) for name in self.shape_classes}


def shape_mask(name: str, s: int) -> np.ndarray:
    c = (s - 1) / 2.0
    i, j = np.mgrid[0:s, 0:s]
    if name == "square":
        return np.ones((s, s), dtype=bool)
    if name == "cross":
        half = max(1, s // 3) / 2.0
        return (np.abs(i - c) < half) | (np.abs(j - c) < half)
    if name == "disk":
        return (i - c) ** 2 + (j - c) ** 2 <= (s / 2.0) ** 2 * 0.8
    raise ValueError(f"unknown shape {name!r}")


@dataclass
class ToyDataset:
    clips: np.ndarray  # (count, N, C, H, W) in [0, 1]
    labels: np.ndarray  # prompt index per clip
    conds: list[Conditioning]
    spec: ToyWorldSpec

    def __len__(self) -> int:
        return len(self.clips)

    def __getitem__(self, i):
        return self.clips[i], self.conds[i]

    def __iter__(self):
        return iter(zip(self.clips, self.conds))

    @property
    def shape_labels(self) -> np.ndarray:
        return self.labels // len(self.spec.motions)

    @property
    def motion_labels(self) -> np.ndarray:
        return self.labels % len(self.spec.motions)


def render(spec: ToyWorldSpec, shape: int, motion: int, rng: np.random.Generator,
           frames: int | None = None) -> np.ndarray:
    """One clip of ``frames`` frames (default ``spec.frames``)."""
    n = frames or spec.frames
    s, v = spec.size, spec.speed
    H, W = spec.height, spec.width
    dy, dx = _VELOCITY[spec.motions[motion]]
    travel = (n - 1) * v
    need_h = s + abs(dy) * travel
    need_w = s + abs(dx) * travel
    if need_h > H or need_w > W:
        raise ValueError(f"shape of size {s} moving {travel}px does not fit a {H}x{W} grid")
    y0 = int(rng.integers(0, H - need_h + 1)) + (travel if dy < 0 else 0)
    x0 = int(rng.integers(0, W - need_w + 1)) + (travel if dx < 0 else 0)
    level = rng.uniform(*spec.brightness)
    mask = spec.masks[spec.shape_classes[shape]]
    clip = np.zeros((n, spec.channels, H, W))
    for k in range(n):
        y, x = y0 + dy * v * k, x0 + dx * v * k
        clip[k, :, y:y + s, x:x + s][:, mask] = level
    return clip


def gen_toy_dataset(spec: ToyWorldSpec, count: int, rng: np.random.Generator,
                    labels=None, first_frame: bool = False) -> ToyDataset:
    """``count`` clips with uniformly drawn (or given) prompt labels.

    With ``first_frame`` each clip is the continuation of a reference frame
    one step earlier, and conditioning carries that frame instead of the label.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if labels is None:
        labels = rng.integers(0, spec.vocab, size=count)
    else:
        labels = np.resize(np.asarray(labels, dtype=int), count)
    clips, conds = [], []
    for lab in labels:
        shape, motion = spec.shape_of(int(lab)), spec.motion_of(int(lab))
        if first_frame:
            full = render(spec, shape, motion, rng, frames=spec.frames + 1)
            clips.append(full[1:])
            conds.append(Conditioning.of_frame(full[0]))
        else:
            clips.append(render(spec, shape, motion, rng))
            conds.append(Conditioning.of_class(int(lab)))
    return ToyDataset(np.stack(clips), np.asarray(labels), conds, spec)


@dataclass
class PromptSet:
    train: list[Conditioning]
    test: list[Conditioning]
    disjoint: bool = True
    names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.disjoint:
            self.check_disjoint()

    def check_disjoint(self) -> None:
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise ValueError(f"train and test prompts overlap: {len(overlap)} shared")


def prompt_split(spec: ToyWorldSpec) -> PromptSet:
    """Hold out one (shape, motion) pairing per shape plus one extra.

    Every shape and every motion still appears in the test split, but never in
    a combination seen during fine-tuning.
    """
    n_m = len(spec.motions)
    held = {spec.label(s, s % n_m) for s in range(len(spec.shape_classes))}
    held.add(spec.label(0, n_m - 1))
    names = {spec.label(s, m): f"{spec.shape_classes[s]} moving {spec.motions[m]}"
             for s in range(len(spec.shape_classes)) for m in range(n_m)}
    train = [Conditioning.of_class(k) for k in range(spec.vocab) if k not in held]
    test = [Conditioning.of_class(k) for k in sorted(held)]
    return PromptSet(train, test, True, names)
