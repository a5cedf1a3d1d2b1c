"""Toy video world, frozen discriminators, and differentiable rewards."""

from vaderlab.rewards.discriminators import (Discriminators, build_discriminators,
                                              train_discriminators)
from vaderlab.rewards.rewards import (BRIGHTNESS, FRAME_CLASSIFIER, KINDS, MASKED_CONSISTENCY,
                                      OBJECT_ABSENCE, VIDEO_ACTION, RewardModel,
                                      reward_frame_mean, reward_masked_consistency,
                                      reward_object_absence, reward_text_sim,
                                      reward_video_action, subsample_frames)
from vaderlab.rewards.world import (PromptSet, ToyDataset, ToyWorldSpec, gen_toy_dataset,
                                    prompt_split)

__all__ = [
    "Discriminators", "build_discriminators", "train_discriminators", "BRIGHTNESS", "FRAME_CLASSIFIER", "KINDS",
    "MASKED_CONSISTENCY", "OBJECT_ABSENCE", "VIDEO_ACTION", "RewardModel", "reward_frame_mean",
    "reward_masked_consistency", "reward_object_absence", "reward_text_sim",
    "reward_video_action", "subsample_frames", "PromptSet", "ToyDataset", "ToyWorldSpec",
    "gen_toy_dataset", "prompt_split",
]
