"""Alignment trainers: reward-gradient, policy-gradient and preference baselines."""

from vaderlab.align.common import RunMetrics, draw_prompts, evaluate
from vaderlab.align.ddpo import (DDPOConfig, DDPOTrainer, TrajectoryRecord, ddpo_gradients,
                                 ddpo_rollout, ddpo_update, group_advantages)
from vaderlab.align.dpo import (DPOConfig, DPOTrainer, PreferencePair, dpo_loss, dpo_pairgen,
                                dpo_update)
from vaderlab.align.extend import autoregressive_extend, seed_frames
from vaderlab.align.vader import VaderConfig, VaderTrainer, vader_step

__all__ = [
    "RunMetrics", "draw_prompts", "evaluate", "DDPOConfig", "DDPOTrainer", "TrajectoryRecord",
    "ddpo_gradients", "ddpo_rollout", "ddpo_update", "group_advantages", "DPOConfig",
    "DPOTrainer", "PreferencePair", "dpo_loss", "dpo_pairgen", "dpo_update",
    "autoregressive_extend", "seed_frames", "VaderConfig", "VaderTrainer", "vader_step",
]
