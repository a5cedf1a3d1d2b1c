"""Reward-gradient fine-tuning through a truncated sampling chain."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from vaderlab import autograd as ag
from vaderlab.align.common import Clock, RunMetrics, cond_labels, draw_prompts
from vaderlab.align.extend import autoregressive_extend
from vaderlab.diffusion.model import Conditioning, conditioning_batch
from vaderlab.diffusion.sampling import SamplerConfig, decode, sample
from vaderlab.diffusion.schedule import NoiseSchedule
from vaderlab.errors import NonFiniteError, TrainingError
from vaderlab.optim import Adam, clip_grad_norm
from vaderlab.rewards.rewards import subsample_frames

log = logging.getLogger(__name__)


@dataclass
class VaderConfig:
    K: int = 10
    lr: float = 1e-4
    subsample: int | None = None  # frames scored per clip; None means N // 2
    batch_size: int = 8
    steps: int = 200
    grad_clip: float = 10.0
    truncate_backprop_one_step: bool = False
    checkpointing: bool = False
    rounds: int = 1  # >1 trains on autoregressive extensions
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    @property
    def cutoff(self) -> int:
        return 1 if self.truncate_backprop_one_step else self.K

    def validate(self, frames: int) -> None:
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.cutoff > self.sampler.steps:
            raise ValueError(f"K={self.cutoff} exceeds sampler steps {self.sampler.steps}")
        m = self.subsample_for(frames)
        if not 1 <= m <= frames:
            raise ValueError(f"subsample m={m} outside [1, {frames}]")

    def subsample_for(self, frames: int) -> int:
        return self.subsample if self.subsample is not None else max(1, frames // 2)


class VaderTrainer:
    """Owns the model being aligned, its optimizer and the query counter."""

    algo = "vader"

    def __init__(self, model, reward, prompts: Sequence[Conditioning], sched: NoiseSchedule,
                 cfg: VaderConfig, rng: np.random.Generator):
        cfg.validate(model.frames)
        self.model = model
        self.reward = reward
        self.prompts = list(prompts)
        self.sched = sched
        self.cfg = cfg
        self.rng = rng
        self.opt = Adam(model.trainable_parameters(), lr=cfg.lr)
        self.queries = 0
        self.updates = 0
        self.clock = Clock()
        self.metrics = RunMetrics()
        self.last_grad_norm = 0.0

    def next_cost(self) -> int:
        """Reward queries the next :meth:`step` will spend."""
        return self.cfg.batch_size

    def step(self) -> dict:
        """One sample-score-backprop-update cycle. Returns the metrics row."""
        return vader_step(self)


def vader_step(tr: VaderTrainer) -> dict:
    cfg, model = tr.cfg, tr.model
    params = model.trainable_parameters()
    with tr.clock:
        conds = draw_prompts(tr.prompts, cfg.batch_size, tr.rng)
        with ag.Tape():
            if cfg.rounds > 1:
                x0 = autoregressive_extend(model, conds, cfg.rounds, cfg.sampler, tr.rng,
                                           sched=tr.sched, grad_cutoff_K=cfg.cutoff,
                                           checkpointing=cfg.checkpointing)
            else:
                x0, _ = sample(model, conditioning_batch(conds), tr.sched, cfg.sampler, tr.rng,
                               cfg.cutoff, checkpointing=cfg.checkpointing)
            if getattr(tr.reward, "frame_level", False):
                # decode and score only a random subset of frames
                keep = subsample_frames(x0.shape[1], cfg.subsample_for(x0.shape[1]), tr.rng)
                x0 = x0[:, keep]
            try:
                r = tr.reward(decode(x0), cond_labels(conds), tr.rng)
                loss = -r.mean()
            except NonFiniteError as e:
                raise TrainingError(f"reward is not finite: {e}", step=tr.updates) from e
            grads = ag.backward(loss, params)
        tr.queries += cfg.batch_size
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for {name}", step=tr.updates)
        norm = clip_grad_norm(grads, cfg.grad_clip)
        if cfg.cutoff > 0 and norm == 0.0:
            warnings.warn("zero reward gradient with K > 0; check for an unintended detach "
                          "or a saturated reward", RuntimeWarning, stacklevel=2)
        tr.opt.step(grads)
    tr.last_grad_norm = norm
    tr.updates += 1
    rv = r.data.astype(np.float64)
    return tr.metrics.append(tr.updates, tr.queries, tr.clock.total, float(rv.mean()),
                             float(rv.std()))
