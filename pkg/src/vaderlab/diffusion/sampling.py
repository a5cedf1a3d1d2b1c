"""Reverse-process sampling with a gradient cutoff."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from vaderlab import autograd as ag
from vaderlab.autograd import Tensor
from vaderlab.diffusion.schedule import NoiseSchedule, ddim_step, ddpm_step, ddim_eta_sigma

DDPM = "DDPM"
DDIM = "DDIM"


@dataclass(frozen=True)
class SamplerConfig:
    scheduler_kind: str = DDIM
    eta: float = 0.0
    steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.scheduler_kind not in (DDPM, DDIM):
            raise ValueError(f"unknown scheduler {self.scheduler_kind!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.steps < 1:
            raise ValueError("steps must be positive")

    @property
    def stochastic(self) -> bool:
        return self.scheduler_kind == DDPM or self.eta > 0


def timesteps_for(sched: NoiseSchedule, steps: int) -> np.ndarray:
    """Increasing model timesteps visited by a ``steps``-step sampler."""
    if steps > sched.T:
        raise ValueError(f"sampler steps {steps} exceed schedule length {sched.T}")
    return np.unique(np.round(np.linspace(0, sched.T - 1, steps)).astype(int))


# (step_index, model_t, x_t, pred, x_prev, chain_schedule) for each reverse transition
StepHook = Callable[[int, int, Tensor, Tensor, Tensor, NoiseSchedule], None]


def sample(model, cond, sched: NoiseSchedule, cfg: SamplerConfig, rng: np.random.Generator,
           grad_cutoff_K: int = 0, *, batch: int | None = None, x_T: np.ndarray | None = None,
           checkpointing: bool = False, on_step: StepHook | None = None):
    """Run the reverse chain and return ``(x0, tape)``.

    Only the final ``grad_cutoff_K`` steps are recorded on the active tape;
    for earlier steps both the prediction and the carried state are detached.
    Values never depend on ``grad_cutoff_K``. ``tape`` is the tape ``x0`` was
    recorded on, or ``None`` when no graph was built.
    """
    ts = timesteps_for(sched, cfg.steps)
    S = len(ts)
    if grad_cutoff_K < 0 or grad_cutoff_K > S:
        raise ValueError(f"grad cutoff {grad_cutoff_K} outside [0, {S}]")
    chain = sched.respace(ts) if cfg.scheduler_kind == DDPM else sched
    if batch is None:
        batch = _cond_len(cond)
    shape = (batch,) + tuple(model.video_shape)
    x = Tensor(x_T if x_T is not None else rng.standard_normal(shape))

    for i in range(S - 1, -1, -1):
        t = int(ts[i])
        step_no = i + 1  # counts down S..1
        if step_no > grad_cutoff_K:
            with ag.no_grad():
                x_prev, pred = _step(model, cond, x, i, t, ts, chain, cfg, rng, False)
        else:
            x_prev, pred = _step(model, cond, x, i, t, ts, chain, cfg, rng, checkpointing)
        if on_step is not None:
            on_step(i, t, x, pred, x_prev, chain)
        x = x_prev
    return x, x._tape


def _step(model, cond, x, i, t, ts, chain, cfg, rng, checkpointing):
    if checkpointing:
        pred = ag.checkpoint(lambda xx: model(xx, cond, t), x)
    else:
        pred = model(x, cond, t)
    if cfg.scheduler_kind == DDPM:
        z = Tensor(rng.standard_normal(x.shape)) if i > 0 else None
        return ddpm_step(pred, i, x, chain, z), pred
    t_prev = int(ts[i - 1]) if i > 0 else -1
    z = None
    if ddim_eta_sigma(t, t_prev, chain, cfg.eta) > 0:
        z = Tensor(rng.standard_normal(x.shape))
    return ddim_step(pred, t, t_prev, x, chain, cfg.eta, z), pred


def _cond_len(cond) -> int:
    if isinstance(cond, Tensor):
        return cond.shape[0]
    return len(cond)


def to_model_space(pixels):
    """Map [0, 1] pixels to the [-1, 1] space the chain runs in."""
    return np.asarray(pixels) * 2.0 - 1.0


def decode(x: Tensor) -> Tensor:
    """Map chain output back to the [0, 1] pixel range (differentiable inside it)."""
    return ag.clip(x * 0.5 + 0.5, 0.0, 1.0)
