"""Long clips by chaining first-frame-conditioned generations."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from vaderlab import autograd as ag
from vaderlab.autograd import Tensor
from vaderlab.diffusion.model import FRAME, Conditioning, conditioning_batch
from vaderlab.diffusion.sampling import SamplerConfig, decode, sample
from vaderlab.diffusion.schedule import NoiseSchedule


def autoregressive_extend(model, seeds, rounds: int, cfg: SamplerConfig,
                          rng: np.random.Generator, *, sched: NoiseSchedule,
                          grad_cutoff_K: int = 0, checkpointing: bool = False) -> Tensor:
    """Generate ``rounds`` clips, each conditioned on the previous clip's last frame.

    ``seeds`` are frame conditionings (or a (B, C, H, W) tensor of pixel
    frames) for the first round. Returns the concatenation in model space,
    shape (B, rounds * N, C, H, W). Gradients, when a tape is active, flow
    through the last ``grad_cutoff_K`` steps of every round and through the
    frame handed from one round to the next.
    """
    if model.conditioning_mode != FRAME:
        raise ValueError("autoregressive extension needs a first-frame conditioned model")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if isinstance(seeds, Tensor):
        cond = seeds
    else:
        seeds = list(seeds)
        if any(c.kind != FRAME for c in seeds):
            raise ValueError("seeds must be frame conditionings")
        cond = conditioning_batch(seeds)
    clips = []
    for _ in range(rounds):
        x0, _ = sample(model, cond, sched, cfg, rng, grad_cutoff_K,
                       checkpointing=checkpointing)
        clips.append(x0)
        cond = decode(x0)[:, -1]
    return clips[0] if rounds == 1 else ag.concat(clips, axis=1)


def seed_frames(dataset, n: int, rng: np.random.Generator) -> list[Conditioning]:
    """``n`` first-frame conditionings drawn from a frame-conditioned dataset."""
    idx = rng.choice(len(dataset), size=n, replace=n > len(dataset))
    return [dataset.conds[i] for i in idx]


__all__: Sequence[str] = ["autoregressive_extend", "seed_frames"]
