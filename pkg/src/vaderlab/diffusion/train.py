"""Denoising-objective pretraining."""

from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np

from vaderlab import autograd as ag
from vaderlab.autograd import Tensor
from vaderlab.diffusion.model import Conditioning, conditioning_batch
from vaderlab.diffusion.sampling import to_model_space
from vaderlab.diffusion.schedule import NoiseSchedule
from vaderlab.errors import NonFiniteError, TrainingError
from vaderlab.optim import Adam, clip_grad_norm

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    batch_size: int = 32
    grad_clip: float = 1.0


def noised(x0: np.ndarray, t: np.ndarray, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Batched forward noising with a per-sample timestep."""
    ab = sched.alpha_bar[t].reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def denoising_errors(model, x0: np.ndarray, cond, t: np.ndarray, eps: np.ndarray,
                     sched: NoiseSchedule) -> Tensor:
    """Per-sample mean squared noise-prediction error, shape (B,)."""
    x_t = Tensor(noised(x0, t, eps, sched))
    pred = model(x_t, cond, t)
    diff = pred - Tensor(eps)
    B = x0.shape[0]
    return ag.square(diff).reshape(B, -1).mean(axis=1)


def diffusion_loss(x0: np.ndarray, cond, model, sched: NoiseSchedule,
                   rng: np.random.Generator) -> Tensor:
    """Mean over the batch of the per-element noise-prediction error.

    ``x0`` is in model space; ``t`` is drawn uniformly from ``[0, T)`` per sample.
    """
    if len(x0) == 0:
        raise ValueError("empty batch")
    t = rng.integers(0, sched.T, size=len(x0))
    eps = rng.standard_normal(x0.shape)
    return denoising_errors(model, x0, cond, t, eps, sched).mean()


def stack_dataset(dataset) -> tuple[np.ndarray, list[Conditioning]]:
    """Split a list of ``(clip, conditioning)`` pairs into a model-space array and conditions."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    clips = np.stack([np.asarray(v) for v, _ in dataset])
    conds = [c for _, c in dataset]
    return to_model_space(clips), conds


def pretrain(dataset, model, opt_cfg: OptimizerConfig, steps: int, rng: np.random.Generator,
             sched: NoiseSchedule, log_every: int = 0):
    """Adam on the denoising loss. Returns ``(model, losses)``."""
    X, conds = stack_dataset(dataset)
    X = X.astype(ag.default_dtype())
    opt = Adam(model.trainable_parameters(), lr=opt_cfg.lr)
    losses = []
    for step in range(steps):
        idx = rng.choice(len(X), size=min(opt_cfg.batch_size, len(X)), replace=False)
        cond = conditioning_batch([conds[i] for i in idx])
        try:
            with ag.Tape():
                loss = diffusion_loss(X[idx], cond, model, sched, rng)
                grads = ag.backward(loss, model.trainable_parameters())
        except NonFiniteError as e:
            raise TrainingError(f"pretraining diverged: {e}", step=step) from e
        value = float(loss.item())
        if not np.isfinite(value):
            raise TrainingError("pretraining loss is NaN", step=step)
        clip_grad_norm(grads, opt_cfg.grad_clip)
        opt.step(grads)
        losses.append(value)
        if log_every and step % log_every == 0:
            log.info("pretrain step %d loss %.4f", step, value)
    return model, losses
