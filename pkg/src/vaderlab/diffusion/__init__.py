"""Schedules, the toy denoiser, samplers, and pretraining."""

from vaderlab.diffusion.model import (CLASS, FRAME, Conditioning, DenoiserModel,
                                      conditioning_batch, lora_attach, lora_merge)
from vaderlab.diffusion.sampling import DDIM, DDPM, SamplerConfig, decode, sample, to_model_space
from vaderlab.diffusion.schedule import (NoiseSchedule, ddim_step, ddpm_step, forward_noise,
                                         make_schedule)
from vaderlab.diffusion.train import OptimizerConfig, diffusion_loss, pretrain

__all__ = [
    "CLASS", "FRAME", "Conditioning", "DenoiserModel", "conditioning_batch", "lora_attach",
    "lora_merge", "DDIM", "DDPM", "SamplerConfig", "decode", "sample", "to_model_space",
    "NoiseSchedule", "ddim_step", "ddpm_step", "forward_noise", "make_schedule",
    "OptimizerConfig", "diffusion_loss", "pretrain",
]
