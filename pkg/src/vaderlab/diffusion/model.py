"""Toy conditional video denoiser: per-frame MLP trunk plus one cross-frame mixing layer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from vaderlab import autograd as ag
from vaderlab.autograd import Parameter, Tensor
from vaderlab.errors import ShapeError
from vaderlab.nn import Linear, Module

CLASS = "class"
FRAME = "frame"


@dataclass(frozen=True)
class Conditioning:
    """Either a prompt index or a reference frame of shape (C, H, W)."""

    kind: str
    label: int | None = None
    frame: np.ndarray | None = None

    @classmethod
    def of_class(cls, label: int) -> "Conditioning":
        return cls(CLASS, label=int(label))

    @classmethod
    def of_frame(cls, frame) -> "Conditioning":
        return cls(FRAME, frame=np.asarray(frame))

    def key(self):
        if self.kind == CLASS:
            return (CLASS, self.label)
        return (FRAME, self.frame.tobytes())

    def __eq__(self, other) -> bool:
        return isinstance(other, Conditioning) and self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class DenoiserModel(Module):
    """Predicts the noise in a batch of clips shaped (B, N, C, H, W).

    Layout: per-frame MLP trunk (``in`` -> ``hidden`` -> ``out``) with time,
    conditioning and frame-position features added after the first layer, a
    residual ``mix`` layer acting across the N frames, and a time-gated skip
    from the input.

    Conditioning is a class index looked up in an embedding table, or (in
    ``frame`` mode) a reference frame passed through an affine layer.
    """

    def __init__(self, frames: int, channels: int, height: int, width: int, *,
                 hidden: int = 256, vocab: int = 12, time_dim: int = 32,
                 conditioning_mode: str = CLASS, seed: int = 0):
        if conditioning_mode not in (CLASS, FRAME):
            raise ValueError(f"unknown conditioning mode {conditioning_mode!r}")
        rng = np.random.default_rng(seed)
        self.frames, self.channels, self.height, self.width = frames, channels, height, width
        self.dim = channels * height * width
        self.hidden = hidden
        self.vocab = vocab
        self.time_dim = time_dim
        self.conditioning_mode = conditioning_mode
        h = hidden
        self.layers: dict[str, Linear] = {
            "in": Linear("in", self.dim, h, rng),
            "time": Linear("time", time_dim, h, rng),
            "hidden": Linear("hidden", h, h, rng),
            "mix": Linear("mix", frames, frames, rng, scale=0.5 / np.sqrt(frames)),
            "out": Linear("out", h, self.dim, rng, scale=0.1 / np.sqrt(h)),
            "skip": Linear("skip", time_dim, 1, rng, scale=0.0),
        }
        if conditioning_mode == CLASS:
            self.cond_table = Parameter("cond.table", rng.standard_normal((vocab, h)))
        else:
            self.layers["cond"] = Linear("cond", self.dim, h, rng)
        self.frame_pos = Parameter("frame.pos", rng.standard_normal((frames, h)) * 0.5)

    @property
    def video_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.channels, self.height, self.width)

    @property
    def affine_layer_names(self) -> list[str]:
        return list(self.layers)

    def cond_features(self, cond) -> Tensor:
        """(B, hidden) conditioning embedding.

        ``cond`` is an int array of labels, a Tensor of frames (B, C, H, W), or a
        list of :class:`Conditioning`.
        """
        if isinstance(cond, (list, tuple)) and cond and isinstance(cond[0], Conditioning):
            cond = conditioning_batch(cond)
        if self.conditioning_mode == CLASS:
            labels = np.asarray(cond, dtype=int)
            if labels.min() < 0 or labels.max() >= self.vocab:
                raise IndexError(f"class index outside vocabulary of {self.vocab}")
            onehot = np.zeros((len(labels), self.vocab))
            onehot[np.arange(len(labels)), labels] = 1.0
            return ag.matmul(Tensor(onehot), self.cond_table)
        frames = ag.as_tensor(cond)
        return self.layers["cond"](frames.reshape(frames.shape[0], self.dim))

    def __call__(self, x: Tensor, cond, t) -> Tensor:
        B = x.shape[0]
        if x.shape[1:] != self.video_shape:
            raise ShapeError("denoiser", x.shape, self.video_shape)
        t_arr = np.broadcast_to(np.asarray(t), (B,))
        temb = Tensor(timestep_embedding(t_arr, self.time_dim))
        ctx = self.layers["time"](temb) + self.cond_features(cond)  # (B, h)
        L = self.layers
        h = L["in"](x.reshape(B, self.frames, self.dim))
        h = ag.silu(h + ctx.reshape(B, 1, self.hidden) + self.frame_pos)
        h = ag.silu(L["hidden"](h))
        mixed = L["mix"](h.transpose(0, 2, 1)).transpose(0, 2, 1)
        h = h + ag.tanh(mixed)
        out = L["out"](h)
        # time-gated identity path: at high noise the target is close to x_t itself
        gate = L["skip"](temb).reshape(B, 1, 1)
        out = out + x.reshape(B, self.frames, self.dim) * gate
        return out.reshape(x.shape)


def conditioning_batch(conds: Sequence[Conditioning]):
    kinds = {c.kind for c in conds}
    if len(kinds) != 1:
        raise ValueError("mixed conditioning kinds in one batch")
    if kinds == {CLASS}:
        return np.array([c.label for c in conds], dtype=int)
    return Tensor(np.stack([c.frame for c in conds]))


def lora_attach(model: DenoiserModel, rank: int = 4, targets: Sequence[str] | None = None,
                seed: int = 0) -> DenoiserModel:
    """Freeze ``model`` and add zero-initialised adapters to the named affine layers.

    Returns the same model object; its output is unchanged until the
    adapters are trained.
    """
    if rank < 1:
        raise ValueError(f"LoRA rank must be >= 1, got {rank}")
    targets = list(model.layers) if targets is None else list(targets)
    unknown = [t for t in targets if t not in model.layers]
    if unknown:
        raise KeyError(f"unknown layer name(s): {unknown}")
    rng = np.random.default_rng(seed)
    model.freeze()
    for name in targets:
        layer = model.layers[name]
        layer.attach_lora(rank, rng)
    return model


def lora_merge(model: DenoiserModel) -> DenoiserModel:
    for layer in model.layers.values():
        layer.merge_lora()
    return model
