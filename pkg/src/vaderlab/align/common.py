"""Shared trainer plumbing: metrics rows, prompt batching, evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from vaderlab import autograd as ag
from vaderlab.diffusion.model import FRAME, Conditioning, conditioning_batch
from vaderlab.diffusion.sampling import SamplerConfig, decode, sample
from vaderlab.diffusion.schedule import NoiseSchedule

METRIC_FIELDS = ("step", "reward_queries", "wallclock_s", "mean_reward", "std_reward")


@dataclass
class RunMetrics:
    """Per-update log; ``reward_queries`` never decreases."""

    rows: list[dict] = field(default_factory=list)

    def append(self, step: int, reward_queries: int, wallclock_s: float,
               mean_reward: float, std_reward: float) -> dict:
        if self.rows and reward_queries < self.rows[-1]["reward_queries"]:
            raise ValueError("reward query counter went backwards")
        row = dict(step=step, reward_queries=reward_queries, wallclock_s=wallclock_s,
                   mean_reward=mean_reward, std_reward=std_reward)
        self.rows.append(row)
        return row

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])


class Clock:
    """Accumulates wall-clock seconds spent inside ``with clock:`` blocks."""

    def __init__(self):
        self.total = 0.0
        self._t0 = None

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.total += time.perf_counter() - self._t0


def cond_labels(conds: Sequence[Conditioning]):
    """Prompt labels for reward models, or ``None`` for frame conditioning."""
    if conds and conds[0].kind == FRAME:
        return None
    return np.array([c.label for c in conds], dtype=int)


def draw_prompts(prompts: Sequence[Conditioning], n: int, rng: np.random.Generator,
                 group: int = 1) -> list[Conditioning]:
    """``n`` prompts drawn with replacement, each repeated ``group`` times consecutively."""
    if n % group:
        raise ValueError(f"batch {n} is not a multiple of group size {group}")
    idx = rng.integers(0, len(prompts), size=n // group)
    return [prompts[i] for i in idx for _ in range(group)]


def evaluate(model, prompts: Sequence[Conditioning], reward, n_samples: int, *,
             sched: NoiseSchedule, sampler: SamplerConfig | None = None, seed: int = 1234,
             batch: int = 64, rounds: int = 1) -> tuple[float, float]:
    """Mean and std of ``reward`` over ``n_samples`` clips per prompt.

    Uses a fixed seed, draws no gradients and leaves weights untouched.
    ``rounds > 1`` scores autoregressive extensions.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    sampler = sampler or SamplerConfig(steps=sched.T)
    rng = np.random.default_rng(seed)
    mask_rng = np.random.default_rng(seed + 1)
    conds = [c for c in prompts for _ in range(n_samples)]
    values = []
    queries_before = getattr(reward, "queries", None)
    with ag.no_grad():
        for start in range(0, len(conds), batch):
            chunk = conds[start:start + batch]
            if rounds > 1:
                from vaderlab.align.extend import autoregressive_extend

                x0 = autoregressive_extend(model, chunk, rounds, sampler, rng, sched=sched)
            else:
                x0, _ = sample(model, conditioning_batch(chunk), sched, sampler, rng)
            r = reward(decode(x0), cond_labels(chunk), mask_rng)
            values.append(r.data.astype(np.float64))
    if queries_before is not None:
        reward.queries = queries_before  # evaluation is not a training query
    v = np.concatenate(values)
    return float(v.mean()), float(v.std())
