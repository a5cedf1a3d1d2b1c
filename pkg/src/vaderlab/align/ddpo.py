"""Policy-gradient baseline: PPO over the stochastic denoising chain."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from vaderlab import autograd as ag
from vaderlab.align.common import Clock, RunMetrics, cond_labels, draw_prompts
from vaderlab.autograd import Tensor
from vaderlab.diffusion.model import Conditioning, conditioning_batch
from vaderlab.diffusion.sampling import DDPM, SamplerConfig, decode, sample
from vaderlab.diffusion.schedule import NoiseSchedule, ddpm_mean
from vaderlab.optim import Adam, clip_grad_norm

log = logging.getLogger(__name__)

LOG_RATIO_CAP = 30.0


@dataclass
class Transition:
    index: int  # position in the (respaced) chain
    t: int  # model timestep
    x_t: np.ndarray
    x_prev: np.ndarray
    mean: np.ndarray
    sigma: float
    log_prob: np.ndarray  # (B,)


@dataclass
class TrajectoryRecord:
    """One rollout batch: all reverse transitions plus final rewards."""

    conds: list[Conditioning]
    transitions: list[Transition]
    chain: NoiseSchedule
    rewards: np.ndarray
    x0: np.ndarray

    @property
    def batch(self) -> int:
        return len(self.conds)


def gaussian_log_prob(x: Tensor, mean: Tensor, sigma: float) -> Tensor:
    """Per-sample log density of ``x`` under an isotropic Gaussian, shape (B,)."""
    B = x.shape[0]
    d = int(np.prod(x.shape[1:]))
    z = (x - mean) * (1.0 / sigma)
    const = -d * (np.log(sigma) + 0.5 * np.log(2 * np.pi))
    return ag.square(z).reshape(B, -1).sum(axis=1) * -0.5 + float(const)


@dataclass
class DDPOConfig:
    lr: float = 1e-4
    clip_eps: float = 1e-4
    epochs: int = 1
    batch_size: int = 8
    group: int = 4  # samples per prompt in a rollout batch
    grad_clip: float = 10.0
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(DDPM))


def ddpo_rollout(model, reward, conds: Sequence[Conditioning], rng: np.random.Generator, *,
                 sched: NoiseSchedule, sampler: SamplerConfig) -> TrajectoryRecord:
    """Sample with the stochastic sampler, recording every transition.

    The final step is deterministic (no noise at t = 0); it is recorded with
    ``sigma = 0`` and a zero log-density and contributes nothing to the policy
    gradient.
    """
    if not sampler.stochastic:
        raise ValueError("policy gradient is undefined for a deterministic sampler")
    if sampler.scheduler_kind != DDPM:
        raise ValueError("rollouts use the DDPM sampler")
    transitions: list[Transition] = []
    chains: list[NoiseSchedule] = []

    def hook(i, t, x_t, pred, x_prev, chain):
        if not chains:
            chains.append(chain)
        mean = ddpm_mean(pred, i, x_t, chain)
        sigma = float(chain.sigma[i]) if i > 0 else 0.0
        if sigma > 0:
            logp = gaussian_log_prob(x_prev, mean, sigma).data
        else:
            logp = np.zeros(x_t.shape[0])
        if not np.all(np.isfinite(logp)):
            raise FloatingPointError(f"non-finite transition log-density at t={t}")
        transitions.append(Transition(i, t, x_t.data, x_prev.data, mean.data, sigma, logp))

    with ag.no_grad():
        x0, _ = sample(model, conditioning_batch(conds), sched, sampler, rng, on_step=hook)
        r = reward(decode(x0), cond_labels(conds), rng)
    return TrajectoryRecord(list(conds), transitions, chains[0], r.data.astype(np.float64), x0.data)


def group_advantages(conds: Sequence[Conditioning], rewards: np.ndarray,
                     scale: bool = True) -> np.ndarray:
    """Reward minus its per-prompt mean; optionally divided by the batch std."""
    rewards = np.asarray(rewards, dtype=np.float64)
    adv = np.empty_like(rewards)
    keys = [c.key() for c in conds]
    for k in set(keys):
        idx = [i for i, kk in enumerate(keys) if kk == k]
        adv[idx] = rewards[idx] - rewards[idx].mean()
    if scale:
        s = adv.std()
        if s > 0:
            adv = adv / s
    return adv


def ppo_objective(log_prob: Tensor, old_log_prob: np.ndarray, adv: np.ndarray,
                  clip_eps: float) -> tuple[Tensor, Tensor, int]:
    """Clipped surrogate (to maximise), ratio, and the count of skipped transitions.

    Transitions whose log-ratio magnitude exceeds the overflow cap are masked out.
    """
    log_ratio = log_prob - Tensor(old_log_prob)
    ok = np.abs(log_ratio.data) <= LOG_RATIO_CAP
    mask = Tensor(ok.astype(log_ratio.data.dtype))
    ratio = ag.exp(log_ratio * mask)
    a = Tensor(adv)
    surrogate = ag.minimum(ratio * a, ag.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * a)
    return (surrogate * mask).mean(), ratio, int((~ok).sum())


def ddpo_gradients(model, record: TrajectoryRecord, clip_eps: float,
                   adv: np.ndarray | None = None) -> tuple[dict, dict]:
    """Gradient of the negative surrogate, averaged over stochastic transitions."""
    params = model.trainable_parameters()
    adv = group_advantages(record.conds, record.rewards) if adv is None else adv
    cond = conditioning_batch(record.conds)
    total = {p.name: np.zeros_like(p.data) for p in params}
    ratios, skipped, used = [], 0, 0
    for tr in record.transitions:
        if tr.sigma <= 0:
            continue
        with ag.Tape():
            pred = model(Tensor(tr.x_t), cond, tr.t)
            mean = ddpm_mean(pred, tr.index, Tensor(tr.x_t), record.chain)
            logp = gaussian_log_prob(Tensor(tr.x_prev), mean, tr.sigma)
            obj, ratio, n_skip = ppo_objective(logp, tr.log_prob, adv, clip_eps)
            loss = -obj
            grads = ag.backward(loss, params)
        for k, g in grads.items():
            total[k] += g
        ratios.append(ratio.data)
        skipped += n_skip
        used += 1
    if used:
        for k in total:
            total[k] /= used
    if skipped:
        log.info("ddpo: skipped %d transitions with overflowing ratio", skipped)
    stats = {"ratios": np.concatenate(ratios) if ratios else np.zeros(0), "skipped": skipped}
    return total, stats


class DDPOTrainer:
    algo = "ddpo"

    def __init__(self, model, reward, prompts: Sequence[Conditioning], sched: NoiseSchedule,
                 cfg: DDPOConfig, rng: np.random.Generator):
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
        self.skipped = 0
        self.last_stats: dict = {}

    def next_cost(self) -> int:
        return self.cfg.batch_size

    def step(self) -> dict:
        with self.clock:
            conds = draw_prompts(self.prompts, self.cfg.batch_size, self.rng, self.cfg.group)
            record = ddpo_rollout(self.model, self.reward, conds, self.rng, sched=self.sched,
                                  sampler=self.cfg.sampler)
            self.queries += record.batch
            ddpo_update(self, [record])
        r = record.rewards
        return self.metrics.append(self.updates, self.queries, self.clock.total,
                                   float(r.mean()), float(r.std()))


def ddpo_update(tr: DDPOTrainer, records: Sequence[TrajectoryRecord]) -> None:
    """PPO epochs over ``records``; one optimizer step per record per epoch."""
    if not records:
        raise ValueError("no trajectory records to learn from")
    for _ in range(tr.cfg.epochs):
        for rec in records:
            grads, stats = ddpo_gradients(tr.model, rec, tr.cfg.clip_eps)
            tr.skipped += stats["skipped"]
            tr.last_stats = stats
            clip_grad_norm(grads, tr.cfg.grad_clip)
            tr.opt.step(grads)
    tr.updates += 1
