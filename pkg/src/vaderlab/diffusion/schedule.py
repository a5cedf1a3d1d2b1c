"""Noise schedules and the single-step forward/reverse updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vaderlab.autograd import Tensor
from vaderlab.errors import ShapeError

__all__ = ["NoiseSchedule", "make_schedule", "forward_noise", "ddpm_step", "ddim_step"]


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) == 0 or np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("betas must be a nonempty vector in (0, 1)")
        alpha = 1.0 - beta
        return cls(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha), sigma=np.sqrt(beta))

    def respace(self, timesteps) -> "NoiseSchedule":
        """Schedule over an increasing subsequence of timesteps.

        Keeps the cumulative products at the kept steps, so a DDPM chain over
        the subsequence has the same marginals.
        """
        ts = np.asarray(timesteps, dtype=int)
        if np.any(np.diff(ts) <= 0) or ts[0] < 0 or ts[-1] >= self.T:
            raise ValueError("timesteps must be increasing and inside [0, T)")
        ab = self.alpha_bar[ts]
        prev = np.concatenate([[1.0], ab[:-1]])
        return NoiseSchedule.from_betas(1.0 - ab / prev)


def make_schedule(T: int = 50, beta_min: float = 1e-4, beta_max: float = 0.02,
                  rescale: bool = False) -> NoiseSchedule:
    """Linear beta schedule.

    With ``rescale`` the endpoints are stretched by ``1000 / T`` (capped below
    one) so that a short chain still ends near pure noise.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if rescale:
        scale = 1000.0 / T
        beta_min, beta_max = min(beta_min * scale, 0.999), min(beta_max * scale, 0.999)
    return NoiseSchedule.from_betas(np.linspace(beta_min, beta_max, T))


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 0 <= t < sched.T:
        raise IndexError(f"timestep {t} outside [0, {sched.T})")


def forward_noise(x: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    _check_t(t, sched)
    if x.shape != eps.shape:
        raise ShapeError("forward_noise", x.shape, eps.shape)
    ab = sched.alpha_bar[t]
    return x * float(np.sqrt(ab)) + eps * float(np.sqrt(1.0 - ab))


def ddpm_step(pred: Tensor, t: int, x_t: Tensor, sched: NoiseSchedule, z: Tensor | None) -> Tensor:
    """One ancestral reverse step; ``z`` is ignored at ``t == 0``."""
    _check_t(t, sched)
    if pred.shape != x_t.shape:
        raise ShapeError("ddpm_step", pred.shape, x_t.shape)
    mean = ddpm_mean(pred, t, x_t, sched)
    if t == 0 or z is None:
        return mean
    if z.shape != x_t.shape:
        raise ShapeError("ddpm_step", z.shape, x_t.shape)
    return mean + z * float(sched.sigma[t])


def ddpm_mean(pred: Tensor, t: int, x_t: Tensor, sched: NoiseSchedule) -> Tensor:
    coef = sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t])
    return (x_t - pred * float(coef)) * float(1.0 / np.sqrt(sched.alpha[t]))


def ddim_eta_sigma(t: int, t_prev: int, sched: NoiseSchedule, eta: float) -> float:
    if t_prev < 0:
        return 0.0
    ab_t, ab_p = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    return float(eta * np.sqrt((1 - ab_p) / (1 - ab_t)) * np.sqrt(1 - ab_t / ab_p))


def ddim_step(pred: Tensor, t: int, t_prev: int, x_t: Tensor, sched: NoiseSchedule,
              eta: float = 0.0, z: Tensor | None = None) -> Tensor:
    """DDIM update from ``t`` to ``t_prev``; ``t_prev < 0`` returns the clean estimate."""
    _check_t(t, sched)
    if not t_prev < t:
        raise ValueError(f"ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if pred.shape != x_t.shape:
        raise ShapeError("ddim_step", pred.shape, x_t.shape)
    ab_t = sched.alpha_bar[t]
    x0 = (x_t - pred * float(np.sqrt(1 - ab_t))) * float(1.0 / np.sqrt(ab_t))
    if t_prev < 0:
        return x0
    ab_p = sched.alpha_bar[t_prev]
    s = ddim_eta_sigma(t, t_prev, sched, eta)
    out = x0 * float(np.sqrt(ab_p)) + pred * float(np.sqrt(max(1 - ab_p - s * s, 0.0)))
    if s > 0:
        if z is None:
            raise ValueError("stochastic DDIM step needs a noise draw")
        out = out + z * s
    return out
