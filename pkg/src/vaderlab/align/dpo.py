"""Preference baseline: Diffusion-DPO on reward-labelled sample pairs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from vaderlab import autograd as ag
from vaderlab.align.common import Clock, RunMetrics, cond_labels, draw_prompts
from vaderlab.diffusion.model import Conditioning, conditioning_batch
from vaderlab.diffusion.sampling import SamplerConfig, decode, sample, to_model_space
from vaderlab.diffusion.schedule import NoiseSchedule
from vaderlab.diffusion.train import denoising_errors
from vaderlab.optim import Adam, clip_grad_norm


@dataclass
class PreferencePair:
    cond: Conditioning
    winner: np.ndarray  # decoded clip, pixel space
    loser: np.ndarray
    winner_reward: float
    loser_reward: float

    def __post_init__(self):
        if self.winner_reward < self.loser_reward:
            raise ValueError("winner must not score below loser")


@dataclass
class DPOConfig:
    beta: float = 500.0
    lr: float = 1e-4
    prompts_per_round: int = 4
    updates_per_round: int = 10
    grad_clip: float = 10.0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)


def dpo_pairgen(model_ref, reward, prompts: Sequence[Conditioning], rng: np.random.Generator, *,
                sched: NoiseSchedule, sampler: SamplerConfig,
                counter: dict | None = None) -> list[PreferencePair]:
    """Two reference samples per prompt; higher reward wins, exact ties are dropped.

    ``counter['queries']`` (when given) grows by two per prompt.
    """
    prompts = list(prompts)
    conds = [c for c in prompts for _ in range(2)]
    with ag.no_grad():
        x0, _ = sample(model_ref, conditioning_batch(conds), sched, sampler, rng)
        clips = decode(x0)
        r = reward(clips, cond_labels(conds), rng).data.astype(np.float64)
    if counter is not None:
        counter["queries"] = counter.get("queries", 0) + len(conds)
    pairs = []
    for i, c in enumerate(prompts):
        a, b = 2 * i, 2 * i + 1
        if r[a] == r[b]:
            continue
        w, l = (a, b) if r[a] > r[b] else (b, a)
        pairs.append(PreferencePair(c, clips.data[w], clips.data[l], float(r[w]), float(r[l])))
    return pairs


def dpo_loss(model, model_ref, pairs: Sequence[PreferencePair], beta: float,
             sched: NoiseSchedule, rng: np.random.Generator):
    """Mean of ``-log sigmoid(-beta * ((e_w - e_w_ref) - (e_l - e_l_ref)))``.

    Winner and loser of a pair share the sampled timestep and noise. Errors
    are per-element means, so ``beta`` is already normalised by dimension.
    """
    P = len(pairs)
    x = to_model_space(np.concatenate([np.stack([p.winner for p in pairs]),
                                       np.stack([p.loser for p in pairs])]))
    conds = [p.cond for p in pairs] * 2
    cond = conditioning_batch(conds)
    t = np.tile(rng.integers(0, sched.T, size=P), 2)
    eps = rng.standard_normal((P,) + x.shape[1:])
    eps = np.concatenate([eps, eps])
    err = denoising_errors(model, x, cond, t, eps, sched)
    with ag.no_grad():
        err_ref = denoising_errors(model_ref, x, cond, t, eps, sched)
    diff = err - ag.Tensor(err_ref.data)  # (2P,)
    inside = diff[:P] - diff[P:]
    return -ag.log_sigmoid(inside * (-beta)).mean()


class DPOTrainer:
    algo = "dpo"

    def __init__(self, model, model_ref, reward, prompts: Sequence[Conditioning],
                 sched: NoiseSchedule, cfg: DPOConfig, rng: np.random.Generator):
        self.model = model
        self.model_ref = model_ref
        self.reward = reward
        self.prompts = list(prompts)
        self.sched = sched
        self.cfg = cfg
        self.rng = rng
        self.opt = Adam(model.trainable_parameters(), lr=cfg.lr)
        self.counter = {"queries": 0}
        self.updates = 0
        self.pairs: list[PreferencePair] = []
        self.last_loss = float("nan")
        self.clock = Clock()
        self.metrics = RunMetrics()

    @property
    def queries(self) -> int:
        return self.counter["queries"]

    def _needs_pairs(self) -> bool:
        return self.updates % self.cfg.updates_per_round == 0 or not self.pairs

    def next_cost(self) -> int:
        return 2 * self.cfg.prompts_per_round if self._needs_pairs() else 0

    def step(self) -> dict:
        with self.clock:
            if self._needs_pairs():
                conds = draw_prompts(self.prompts, self.cfg.prompts_per_round, self.rng)
                self.pairs = dpo_pairgen(self.model_ref, self.reward, conds, self.rng,
                                         sched=self.sched, sampler=self.cfg.sampler,
                                         counter=self.counter)
            self.last_loss = dpo_update(self, self.pairs)
        # rows carry the reward of the reference samples behind the current pairs
        r = np.array([v for p in self.pairs for v in (p.winner_reward, p.loser_reward)])
        mean, std = (float(r.mean()), float(r.std())) if len(r) else (float("nan"), 0.0)
        return self.metrics.append(self.updates, self.queries, self.clock.total, mean, std)


def dpo_update(tr: DPOTrainer, pairs: Sequence[PreferencePair]) -> float:
    """One gradient step on the preference loss; returns the loss value."""
    if not pairs:
        tr.updates += 1
        return float(np.log(2.0))
    params = tr.model.trainable_parameters()
    with ag.Tape():
        loss = dpo_loss(tr.model, tr.model_ref, pairs, tr.cfg.beta, tr.sched, tr.rng)
        grads = ag.backward(loss, params)
    clip_grad_norm(grads, tr.cfg.grad_clip)
    tr.opt.step(grads)
    tr.updates += 1
    return loss.item()
