"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from vaderlab.errors import ConfigError

EXPERIMENTS = ("pretrain", "align", "sweep-resolution", "sweep-efficiency", "generalize", "extend")
ALGOS = ("vader", "ddpo", "dpo")
REWARD_KINDS = ("brightness", "frame_classifier", "video_action", "object_absence",
                "masked_consistency")


@dataclass
class ExperimentConfig:
    experiment: str = ""
    algo: str = "vader"
    reward: tuple[str, ...] = ("frame_classifier",)
    reward_weights: tuple[float, ...] = ()
    aggregate: str = "mean"

    # world
    frames: int = 4
    channels: int = 1
    resolution: int = 8
    conditioning: str = "class"
    dataset_size: int = 2000

    # base model and pretraining
    hidden: int = 128
    T: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.02
    rescale: bool = True
    pretrain_steps: int = 2000
    pretrain_lr: float = 2e-3
    pretrain_batch: int = 64
    pretrain_clip: float = 10.0
    disc_hidden: int = 64
    disc_steps: int = 600

    # sampling
    scheduler: str = "DDIM"
    eta: float = 0.0
    sampler_steps: int = 20

    # trainers
    lr: float = 1e-3
    batch_size: int = 8
    grad_clip: float = 10.0
    lora_rank: int = 4
    K: int = 10
    subsample: int = 0  # 0 means N // 2
    truncate_one_step: bool = False
    checkpointing: bool = False
    rounds: int = 3
    ddpo_clip_eps: float = 1e-4
    ddpo_epochs: int = 1
    ddpo_group: int = 4
    dpo_beta: float = 500.0
    dpo_prompts: int = 4
    dpo_regen: int = 10

    # budgets and evaluation
    query_budget: int = 5000
    wallclock_budget: float = 0.0  # seconds; 0 disables
    updates: int = 100
    eval_every: int = 250  # queries between evaluation rows
    eval_samples: int = 8
    eval_seed: int = 1234
    resolutions: tuple[int, ...] = (8, 16, 32)
    generalize_kinds: tuple[str, ...] = ("frame_classifier", "brightness", "video_action")
    control_arm: bool = False

    seeds: tuple[int, ...] = (0, 1, 2)
    precision: str = "float32"
    out: str = "runs"
    auto_pretrain: bool = False

    def validate(self) -> None:
        """Raise :class:`ConfigError` for the first violated constraint."""
        for key, ok, rule in self._constraints():
            if not ok:
                raise ConfigError(f"{key} = {getattr(self, key)!r} violates: {rule}", key=key)

    def _constraints(self):
        yield "experiment", self.experiment in EXPERIMENTS, f"one of {', '.join(EXPERIMENTS)}"
        yield "algo", self.algo in ALGOS, f"one of {', '.join(ALGOS)}"
        yield "reward", len(self.reward) > 0 and set(self.reward) <= set(REWARD_KINDS), \
            f"kinds from {', '.join(REWARD_KINDS)}"
        yield "reward_weights", len(self.reward_weights) in (0, len(self.reward)), \
            "empty or one weight per reward kind"
        yield "aggregate", self.aggregate in ("mean", "sum"), "mean or sum"
        yield "frames", self.frames >= 2, ">= 2"
        yield "channels", self.channels >= 1, ">= 1"
        yield "resolution", self.resolution >= 4 and self.resolution % 2 == 0, "even and >= 4"
        yield "conditioning", self.conditioning in ("class", "frame"), "class or frame"
        yield "dataset_size", self.dataset_size >= 1, ">= 1"
        yield "hidden", self.hidden >= 1, ">= 1"
        yield "T", self.T >= 1, ">= 1"
        yield "beta_min", 0 < self.beta_min <= self.beta_max < 1, "0 < beta_min <= beta_max < 1"
        yield "beta_max", 0 < self.beta_max < 1, "0 < beta_max < 1"
        yield "pretrain_steps", self.pretrain_steps >= 0, ">= 0"
        yield "pretrain_lr", self.pretrain_lr >= 0, ">= 0"
        yield "scheduler", self.scheduler in ("DDPM", "DDIM"), "DDPM or DDIM"
        yield "eta", 0.0 <= self.eta <= 1.0, "0 <= eta <= 1"
        yield "sampler_steps", 1 <= self.sampler_steps <= self.T, "1 <= sampler_steps <= T"
        yield "lr", self.lr >= 0, ">= 0"
        yield "batch_size", self.batch_size >= 1, ">= 1"
        yield "grad_clip", self.grad_clip > 0, "> 0"
        yield "lora_rank", self.lora_rank >= 1, ">= 1"
        yield "K", self.K >= 0, "K >= 0"
        yield "K", self.K <= self.sampler_steps, "K <= sampler_steps"
        yield "subsample", 0 <= self.subsample <= self.frames, "0 <= subsample <= frames"
        yield "rounds", self.rounds >= 1, ">= 1"
        yield "ddpo_clip_eps", self.ddpo_clip_eps > 0, "> 0"
        yield "ddpo_epochs", self.ddpo_epochs >= 1, ">= 1"
        yield "ddpo_group", self.ddpo_group >= 1 and self.batch_size % self.ddpo_group == 0, \
            "divides batch_size"
        yield "dpo_beta", self.dpo_beta >= 0, ">= 0"
        yield "dpo_prompts", self.dpo_prompts >= 1, ">= 1"
        yield "dpo_regen", self.dpo_regen >= 1, ">= 1"
        yield "query_budget", self.query_budget >= 1, ">= 1"
        yield "wallclock_budget", self.wallclock_budget >= 0, ">= 0"
        yield "updates", self.updates >= 1, ">= 1"
        yield "eval_every", self.eval_every >= 1, ">= 1"
        yield "eval_samples", self.eval_samples >= 1, ">= 1"
        yield "resolutions", len(self.resolutions) > 0 and all(
            r >= 4 and r % 2 == 0 for r in self.resolutions), "even sizes >= 4"
        yield "generalize_kinds", set(self.generalize_kinds) <= set(REWARD_KINDS), \
            f"kinds from {', '.join(REWARD_KINDS)}"
        yield "seeds", len(self.seeds) > 0, "at least one seed"
        yield "precision", self.precision in ("float32", "float64"), "float32 or float64"

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    f = _FIELDS[key]
    kind = f.type  # annotation string
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind.startswith("tuple["):
            inner = kind[len("tuple["):].split(",")[0].strip()
            items = [s.strip() for s in raw.split(",") if s.strip()]
            cast = {"int": int, "float": float}.get(inner, str)
            return tuple(cast(s) for s in items)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}", key=key) from None


def parse_config(text: str, overrides: list[str] | None = None,
                 default_experiment: str | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a validated config.

    ``overrides`` are extra ``key=value`` strings applied after the text.
    """
    values: dict[str, object] = {}
    where: dict[str, int] = {}
    lines = [(i, ln) for i, ln in enumerate(text.splitlines(), start=1)]
    for i, s in enumerate(overrides or [], start=1):
        lines.append((-i, s))
    for lineno, line in lines:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        label = lineno if lineno > 0 else None
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=label)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", line=label, key=key)
        try:
            values[key] = _convert(key, raw)
        except ConfigError as e:
            raise ConfigError(str(e), line=label, key=key) from None
        where[key] = label
    if "experiment" not in values:
        if default_experiment is None:
            raise ConfigError("missing required key 'experiment'", key="experiment")
        values["experiment"] = default_experiment
    cfg = ExperimentConfig(**values)
    try:
        cfg.validate()
    except ConfigError as e:
        raise ConfigError(str(e), line=where.get(e.key), key=e.key) from None
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | None = None,
                default_experiment: str | None = None) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config(text, overrides, default_experiment)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(cfg: ExperimentConfig) -> str:
    """Every key in declaration order; reparses to an equal config."""
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def echo(cfg: ExperimentConfig, directory: str | Path | None = None) -> Path:
    """Write the resolved config to ``<out>/resolved.cfg``."""
    d = Path(directory) if directory is not None else cfg.out_dir
    d.mkdir(parents=True, exist_ok=True)
    path = d / "resolved.cfg"
    path.write_text(serialize(cfg), encoding="utf-8")
    return path


def replace(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    new = dataclasses.replace(cfg, **changes)
    new.validate()
    return new
