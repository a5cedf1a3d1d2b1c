"""Configuration, persistence, metrics sinks, plots and the canned experiments."""

from vaderlab.harness.checkpoint import load_checkpoint, save_checkpoint
from vaderlab.harness.config import ExperimentConfig, parse_config, serialize
from vaderlab.harness.plot import emit_plot
from vaderlab.harness.sink import MetricsSink

__all__ = ["load_checkpoint", "save_checkpoint", "ExperimentConfig", "parse_config", "serialize",
           "emit_plot", "MetricsSink"]
