"""Canned experiments: pretraining, single runs, and the comparative sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vaderlab import autograd as ag
from vaderlab.align import (DDPOConfig, DDPOTrainer, DPOConfig, DPOTrainer, VaderConfig,
                            VaderTrainer, evaluate)
from vaderlab.diffusion import (DDPM, CLASS, FRAME, DenoiserModel, OptimizerConfig,
                                SamplerConfig, lora_attach, make_schedule, pretrain)
from vaderlab.errors import CheckpointError, ConfigError
from vaderlab.harness.checkpoint import load_checkpoint, save_checkpoint
from vaderlab.harness.config import ExperimentConfig, echo, serialize
from vaderlab.harness.plot import emit_plot
from vaderlab.harness.sink import MetricsSink, merge_shards
from vaderlab.rewards import (MASKED_CONSISTENCY, RewardModel, ToyWorldSpec,
                              build_discriminators, gen_toy_dataset, prompt_split,
                              train_discriminators)
from vaderlab.rewards.world import PromptSet

log = logging.getLogger(__name__)

LABEL_FREE_KINDS = ("brightness", "object_absence", "masked_consistency")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class Report:
    """Outcome of one experiment: trend checks plus anything worth keeping."""

    experiment: str
    checks: list[Check] = field(default_factory=list)
    data: dict = field(default_factory=dict)
    files: list[Path] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def text(self) -> str:
        return "".join(c.line() + "\n" for c in self.checks)


@dataclass
class Lab:
    """Everything an alignment run needs at one resolution and conditioning mode."""

    cfg: ExperimentConfig
    spec: ToyWorldSpec
    mode: str
    sched: object
    discs: object
    base: DenoiserModel

    @property
    def side(self) -> int:
        return self.spec.height


# ---------------------------------------------------------------- building blocks

def world_spec(cfg: ExperimentConfig, side: int | None = None) -> ToyWorldSpec:
    side = side or cfg.resolution
    return ToyWorldSpec(frames=cfg.frames, channels=cfg.channels, height=side, width=side)


def schedule(cfg: ExperimentConfig):
    return make_schedule(cfg.T, cfg.beta_min, cfg.beta_max, rescale=cfg.rescale)


def sampler(cfg: ExperimentConfig, kind: str | None = None) -> SamplerConfig:
    kind = kind or cfg.scheduler
    eta = cfg.eta if kind != DDPM else 1.0
    return SamplerConfig(kind, eta, cfg.sampler_steps)


def _tag(cfg: ExperimentConfig, side: int) -> str:
    return f"{cfg.frames}f{cfg.channels}c{side}px"


def checkpoint_paths(cfg: ExperimentConfig, side: int, mode: str) -> tuple[Path, Path]:
    d = cfg.out_dir / "checkpoints"
    return d / f"base_{mode}_{_tag(cfg, side)}.vdrl", d / f"disc_{_tag(cfg, side)}.vdrl"


def build_model(cfg: ExperimentConfig, spec: ToyWorldSpec, mode: str) -> DenoiserModel:
    return DenoiserModel(*spec.clip_shape, hidden=cfg.hidden, vocab=spec.vocab,
                         conditioning_mode=mode, seed=cfg.seeds[0])


def _dataset_rng(cfg: ExperimentConfig, purpose: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seeds[0], purpose])


def frame_prompts(cfg: ExperimentConfig, spec: ToyWorldSpec, n: int, purpose: int):
    """First-frame conditionings from fresh ground-truth clips."""
    try:
        data = gen_toy_dataset(spec, n, _dataset_rng(cfg, purpose), first_frame=True)
    except ValueError as e:
        raise ConfigError(f"first-frame clips do not fit the grid: {e}", key="frames") from None
    return data.conds


def run_pretrain(cfg: ExperimentConfig, side: int | None = None,
                 mode: str | None = None) -> Report:
    """Train and save the frozen discriminators and the base denoiser."""
    side = side or cfg.resolution
    mode = mode or cfg.conditioning
    spec = world_spec(cfg, side)
    base_path, disc_path = checkpoint_paths(cfg, side, mode)
    report = Report("pretrain")
    with ag.precision(cfg.precision):
        if disc_path.exists():
            discs = _load_discs(cfg, spec, disc_path)
        else:
            discs = train_discriminators(spec, _dataset_rng(cfg, 1), hidden=cfg.disc_hidden,
                                         steps=cfg.disc_steps)
            save_checkpoint(_disc_state(discs), disc_path)
            report.data["discriminators"] = discs.report
        try:
            data = gen_toy_dataset(spec, cfg.dataset_size, _dataset_rng(cfg, 2),
                                   first_frame=mode == FRAME)
        except ValueError as e:
            raise ConfigError(f"world spec does not fit: {e}", key="resolution") from None
        model = build_model(cfg, spec, mode)
        opt = OptimizerConfig(cfg.pretrain_lr, cfg.pretrain_batch, cfg.pretrain_clip)
        _, losses = pretrain(list(data), model, opt, cfg.pretrain_steps,
                             _dataset_rng(cfg, 3), schedule(cfg))
        save_checkpoint(model, base_path)
    if losses:
        head, tail = float(np.mean(losses[:50])), float(np.mean(losses[-50:]))
        report.data["loss_first"], report.data["loss_last"] = head, tail
        report.checks.append(Check("pretrain loss decreased", tail < head,
                                   f"{head:.4f} -> {tail:.4f}"))
    report.files += [base_path, disc_path]
    return report


def _disc_state(discs) -> dict[str, np.ndarray]:
    state = {}
    for mod in discs.modules().values():
        state.update(mod.state_dict())
    return state


def _load_discs(cfg: ExperimentConfig, spec: ToyWorldSpec, path: Path):
    discs = build_discriminators(spec, np.random.default_rng(0), cfg.disc_hidden)
    state = load_checkpoint(path)
    for mod in discs.modules().values():
        names = {n for n, _ in mod.named_parameters()}
        mod.load_state_dict({k: v for k, v in state.items() if k in names})
        mod.freeze()
    return discs


def load_lab(cfg: ExperimentConfig, side: int | None = None, mode: str | None = None) -> Lab:
    """Load the base model and discriminators, pretraining first if allowed."""
    side = side or cfg.resolution
    mode = mode or cfg.conditioning
    base_path, disc_path = checkpoint_paths(cfg, side, mode)
    if not (base_path.exists() and disc_path.exists()):
        if not cfg.auto_pretrain:
            raise CheckpointError(f"missing checkpoint {base_path if not base_path.exists() else disc_path}; "
                                  "run `vaderlab pretrain` first or set auto_pretrain = true")
        run_pretrain(cfg, side, mode)
    spec = world_spec(cfg, side)
    with ag.precision(cfg.precision):
        discs = _load_discs(cfg, spec, disc_path)
        base = load_checkpoint(base_path, build_model(cfg, spec, mode))
    base.freeze()
    return Lab(cfg, spec, mode, schedule(cfg), discs, base)


def make_reward(cfg: ExperimentConfig, discs, kinds=None) -> RewardModel:
    kinds = tuple(kinds or cfg.reward)
    weights = cfg.reward_weights if kinds == tuple(cfg.reward) and cfg.reward_weights else None
    return RewardModel(kinds, discs, weights, aggregate=cfg.aggregate)


def make_trainer(cfg: ExperimentConfig, lab: Lab, algo: str, reward, prompts, seed: int,
                 rounds: int = 1):
    model = lora_attach(lab.base.clone(), cfg.lora_rank, seed=seed)
    rng = np.random.default_rng([seed, 7])
    if algo == "vader":
        vc = VaderConfig(K=cfg.K, lr=cfg.lr, subsample=cfg.subsample or None,
                         batch_size=cfg.batch_size, steps=cfg.updates, grad_clip=cfg.grad_clip,
                         truncate_backprop_one_step=cfg.truncate_one_step,
                         checkpointing=cfg.checkpointing, rounds=rounds, sampler=sampler(cfg))
        return VaderTrainer(model, reward, prompts, lab.sched, vc, rng)
    if algo == "ddpo":
        dc = DDPOConfig(lr=cfg.lr, clip_eps=cfg.ddpo_clip_eps, epochs=cfg.ddpo_epochs,
                        batch_size=cfg.batch_size, group=cfg.ddpo_group,
                        grad_clip=cfg.grad_clip, sampler=sampler(cfg, DDPM))
        return DDPOTrainer(model, reward, prompts, lab.sched, dc, rng)
    if algo == "dpo":
        pc = DPOConfig(beta=cfg.dpo_beta, lr=cfg.lr, prompts_per_round=cfg.dpo_prompts,
                       updates_per_round=cfg.dpo_regen, grad_clip=cfg.grad_clip,
                       sampler=sampler(cfg))
        return DPOTrainer(model, lab.base, reward, prompts, lab.sched, pc, rng)
    raise ConfigError(f"unknown algo {algo!r}", key="algo")


def eval_model(cfg: ExperimentConfig, lab: Lab, model, prompts, reward,
               rounds: int = 1) -> tuple[float, float]:
    with ag.precision(cfg.precision):
        return evaluate(model, prompts, reward, cfg.eval_samples, sched=lab.sched,
                        sampler=sampler(cfg), seed=cfg.eval_seed, rounds=rounds)


def run_alignment(cfg: ExperimentConfig, lab: Lab, algo: str, seed: int, sink: MetricsSink,
                  prompts, eval_prompts, *, reward=None, query_budget: int | None = None,
                  updates: int | None = None, rounds: int = 1):
    """Train one arm, writing an evaluation row at step 0, every ``eval_every``
    queries, and at the end. Stops before the next step would exceed the query
    budget, after ``updates`` updates, or past the wall-clock budget.

    Returns ``(trainer, rows)``; ``wallclock_s`` counts training time only.
    """
    reward = reward or make_reward(cfg, lab.discs)
    rows = []

    with ag.precision(cfg.precision):
        tr = make_trainer(cfg, lab, algo, reward, prompts, seed, rounds)

        def emit():
            mean, std = eval_model(cfg, lab, tr.model, eval_prompts, reward, rounds)
            row = dict(step=tr.updates, reward_queries=tr.queries,
                       wallclock_s=round(tr.clock.total, 3), mean_reward=mean, std_reward=std)
            sink.write(row, algo=algo, seed=seed)
            rows.append(row)

        emit()
        next_eval = cfg.eval_every
        while True:
            if query_budget is not None and tr.queries + tr.next_cost() > query_budget:
                break
            if updates is not None and tr.updates >= updates:
                break
            if cfg.wallclock_budget and tr.clock.total >= cfg.wallclock_budget:
                break
            tr.step()
            if tr.queries >= next_eval:
                emit()
                while next_eval <= tr.queries:
                    next_eval += cfg.eval_every
        if rows[-1]["step"] != tr.updates:
            emit()
    return tr, rows


def _median(xs) -> float:
    return float(np.median(np.asarray(xs, dtype=float)))


def _queries_to_reach(rows: list[dict], target: float, rising: bool = True) -> float:
    for r in rows:
        if (r["mean_reward"] >= target) if rising else (r["mean_reward"] <= target):
            return float(r["reward_queries"])
    return float("inf")


def _prep_dir(cfg: ExperimentConfig, name: str) -> Path:
    d = cfg.out_dir / name
    (d / "shards").mkdir(parents=True, exist_ok=True)
    echo(cfg, d)
    return d


def _fresh_sink(path: Path, **fixed) -> MetricsSink:
    path.unlink(missing_ok=True)
    return MetricsSink(path, **fixed)


# ---------------------------------------------------------------- experiments

def run_align(cfg: ExperimentConfig) -> Report:
    """One algorithm, every seed, on the training prompts."""
    d = _prep_dir(cfg, "align")
    lab = load_lab(cfg)
    prompts, eval_prompts, rounds = _prompts_for(cfg, lab)
    report = Report("align")
    shards = []
    for seed in cfg.seeds:
        path = d / "shards" / f"{cfg.algo}_s{seed}.csv"
        with _fresh_sink(path, experiment="align", resolution=lab.side) as sink:
            tr, rows = run_alignment(cfg, lab, cfg.algo, seed, sink, prompts, eval_prompts,
                                     query_budget=cfg.query_budget, rounds=rounds)
        save_checkpoint(tr.model, d / f"{cfg.algo}_s{seed}.vdrl")
        shards.append(path)
        gain = rows[-1]["mean_reward"] - rows[0]["mean_reward"]
        report.checks.append(Check(f"seed {seed} eval reward rose", gain > 0,
                                   f"{rows[0]['mean_reward']:.4f} -> {rows[-1]['mean_reward']:.4f}"))
    merged = merge_shards(shards, d / "metrics.csv")
    report.files += [merged, emit_plot(merged, d / "reward_vs_queries.txt")]
    return report


def _prompts_for(cfg: ExperimentConfig, lab: Lab):
    if lab.mode == FRAME:
        if set(cfg.reward) - set(LABEL_FREE_KINDS):
            raise ConfigError("first-frame conditioning only supports label-free rewards "
                              f"({', '.join(LABEL_FREE_KINDS)})", key="reward")
        return (frame_prompts(cfg, lab.spec, 256, 4), frame_prompts(cfg, lab.spec, 16, 5),
                cfg.rounds)
    ps = prompt_split(lab.spec)
    return ps.train, ps.train, 1


def run_efficiency_sweep(cfg: ExperimentConfig) -> Report:
    """All three algorithms under one query budget; reward vs queries and vs wall-clock."""
    d = _prep_dir(cfg, "sweep-efficiency")
    lab = load_lab(cfg, mode=CLASS)
    ps = prompt_split(lab.spec)
    curves: dict[str, dict[int, list[dict]]] = {a: {} for a in ("vader", "ddpo", "dpo")}
    shards = []
    for algo in curves:
        for seed in cfg.seeds:
            path = d / "shards" / f"{algo}_s{seed}.csv"
            with _fresh_sink(path, experiment="sweep-efficiency", resolution=lab.side) as sink:
                _, rows = run_alignment(cfg, lab, algo, seed, sink, ps.train, ps.train,
                                        query_budget=cfg.query_budget)
            curves[algo][seed] = rows
            shards.append(path)
            log.info("efficiency %s seed %d: %.4f -> %.4f", algo, seed,
                     rows[0]["mean_reward"], rows[-1]["mean_reward"])
    merged = merge_shards(shards, d / "metrics.csv")
    report = Report("sweep-efficiency", files=[merged])
    for x in ("reward_queries", "wallclock_s"):
        report.files.append(emit_plot(merged, d / f"reward_vs_{x}.txt", x=x, png=True))

    base = _median([curves["vader"][s][0]["mean_reward"] for s in cfg.seeds])
    final = {a: _median([curves[a][s][-1]["mean_reward"] for s in cfg.seeds]) for a in curves}
    target = base + 0.5 * (final["vader"] - base)
    rising = final["vader"] >= base
    reach = {a: _median([_queries_to_reach(curves[a][s], target, rising) for s in cfg.seeds])
             for a in curves}
    spent = {a: sorted({curves[a][s][-1]["reward_queries"] for s in cfg.seeds}) for a in curves}
    starts = [curves[a][s][0]["mean_reward"] for a in curves for s in cfg.seeds]
    report.data.update(base=base, final=final, target=target, reach=reach, spent=spent)
    report.checks += [
        Check("vader >= ddpo at budget", final["vader"] >= final["ddpo"],
              f"{final['vader']:.4f} vs {final['ddpo']:.4f}"),
        Check("vader >= dpo at budget", final["vader"] >= final["dpo"],
              f"{final['vader']:.4f} vs {final['dpo']:.4f}"),
        Check("vader reaches half-improvement in <= 50% of ddpo queries",
              reach["vader"] <= 0.5 * reach["ddpo"],
              f"target {target:.4f}: vader {reach['vader']:g}, ddpo {reach['ddpo']:g}, "
              f"dpo {reach['dpo']:g}"),
        Check("all arms start at the base reward", float(np.ptp(starts)) <= 1e-9,
              f"spread {float(np.ptp(starts)):.2e}"),
        Check("query budgets identical", len({q for v in spent.values() for q in v}) == 1
              and max(max(v) for v in spent.values()) <= cfg.query_budget,
              f"{spent} (budget {cfg.query_budget})"),
    ]
    _write_summary(d, report)
    return report


def gap_slope(sides, gaps) -> float:
    """Least-squares slope of the gap against log2(resolution)."""
    x = np.log2(np.asarray(sides, dtype=float))
    if len(x) < 2:
        return 0.0
    return float(np.polyfit(x, np.asarray(gaps, dtype=float), 1)[0])


def run_resolution_sweep(cfg: ExperimentConfig) -> Report:
    """VADER minus DDPO after a fixed number of updates, at each resolution.

    With ``control_arm`` the second arm is VADER again (different seed stream).
    """
    d = _prep_dir(cfg, "sweep-resolution")
    second = "control" if cfg.control_arm else "ddpo"
    gaps: dict[int, list[float]] = {}
    stds: dict[int, list[float]] = {}
    shards = []
    for side in cfg.resolutions:
        lab = load_lab(cfg, side, CLASS)
        ps = prompt_split(lab.spec)
        gaps[side], stds[side] = [], []
        for seed in cfg.seeds:
            finals = {}
            for arm in ("vader", second):
                algo = "vader" if arm == "control" else arm
                arm_seed = seed + 1000 if arm == "control" else seed
                path = d / "shards" / f"{arm}_{side}px_s{seed}.csv"
                with _fresh_sink(path, experiment="sweep-resolution", resolution=side) as sink:
                    _, rows = run_alignment(cfg, lab, algo, arm_seed, sink, ps.train, ps.train,
                                            updates=cfg.updates)
                finals[arm] = rows[-1]
                shards.append(path)
            gaps[side].append(finals["vader"]["mean_reward"] - finals[second]["mean_reward"])
            stds[side].append(0.5 * (finals["vader"]["std_reward"] + finals[second]["std_reward"]))
    merged = merge_shards(shards, d / "metrics.csv")
    sides = list(cfg.resolutions)
    med = [_median(gaps[s]) for s in sides]
    slope = gap_slope(sides, med)
    report = Report("sweep-resolution", files=[merged])
    report.data.update(gaps=gaps, median_gap=dict(zip(sides, med)), slope=slope)
    table = ["resolution  median_gap  per_seed"]
    table += [f"{s:>10}  {m:>10.4f}  {', '.join(f'{g:.4f}' for g in gaps[s])}"
              for s, m in zip(sides, med)]
    (d / "gaps.txt").write_text("\n".join(table) + "\n", encoding="utf-8")
    report.files.append(d / "gaps.txt")
    if cfg.control_arm:
        worst = max(abs(m) - _median(stds[s]) for s, m in zip(sides, med))
        report.checks.append(Check("control gap within eval std", worst <= 0,
                                   f"max(|gap| - std) = {worst:.4f}"))
    else:
        report.checks += [
            Check("gap slope >= 0", slope >= 0, f"slope {slope:.4f} per doubling, gaps {med}"),
            Check("gap(largest) >= gap(smallest)", med[-1] >= med[0],
                  f"{med[-1]:.4f} vs {med[0]:.4f}"),
        ]
    _write_summary(d, report)
    return report


def run_generalization(cfg: ExperimentConfig, prompt_set: PromptSet | None = None) -> Report:
    """Base and fine-tuned eval reward on disjoint train/test prompts, per reward kind."""
    d = _prep_dir(cfg, "generalize")
    lab = load_lab(cfg, mode=CLASS)
    ps = prompt_set or prompt_split(lab.spec)
    ps.check_disjoint()
    algos = ("vader", "ddpo", "dpo")
    table: dict[str, dict[str, float]] = {a: {} for a in ("base",) + algos}
    shards = []
    report = Report("generalize")
    for kind in cfg.generalize_kinds:
        reward = make_reward(cfg, lab.discs, (kind,))
        for split, prompts in (("train", ps.train), ("test", ps.test)):
            table["base"][f"{kind}:{split}"] = eval_model(cfg, lab, lab.base, prompts, reward)[0]
        for algo in algos:
            per = {"train": [], "test": []}
            for seed in cfg.seeds:
                path = d / "shards" / f"{kind}_{algo}_s{seed}.csv"
                with _fresh_sink(path, experiment=f"generalize/{kind}/train",
                                 resolution=lab.side) as sink:
                    tr, rows = run_alignment(cfg, lab, algo, seed, sink, ps.train, ps.train,
                                             reward=reward, query_budget=cfg.query_budget)
                    mean, std = eval_model(cfg, lab, tr.model, ps.test, reward)
                    sink.write(dict(rows[-1], mean_reward=mean, std_reward=std),
                               experiment=f"generalize/{kind}/test", algo=algo, seed=seed)
                shards.append(path)
                per["train"].append(rows[-1]["mean_reward"])
                per["test"].append(mean)
            for split in per:
                table[algo][f"{kind}:{split}"] = _median(per[split])
        for split in ("train", "test"):
            col = f"{kind}:{split}"
            report.checks.append(Check(f"vader > base on {col}",
                                       table["vader"][col] > table["base"][col],
                                       f"{table['vader'][col]:.4f} vs {table['base'][col]:.4f}"))
    merged = merge_shards(shards, d / "metrics.csv")
    cols = [f"{k}:{s}" for k in cfg.generalize_kinds for s in ("train", "test")]
    lines = ["| model | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
    for name, row in table.items():
        lines.append(f"| {name} | " + " | ".join(f"{row[c]:.4f}" for c in cols) + " |")
    (d / "table.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    report.data["table"] = table
    report.files += [merged, d / "table.md"]
    _write_summary(d, report)
    return report


def run_extend(cfg: ExperimentConfig) -> Report:
    """Consistency fine-tuning on autoregressive extensions, scored on held-out seed frames."""
    if set(cfg.reward) != {MASKED_CONSISTENCY}:
        raise ConfigError("the extend experiment scores masked_consistency", key="reward")
    d = _prep_dir(cfg, "extend")
    lab = load_lab(cfg, mode=FRAME)
    prompts, seeds, rounds = _prompts_for(cfg, lab)
    reward = make_reward(cfg, lab.discs)
    base_mean, base_std = eval_model(cfg, lab, lab.base, seeds, reward, rounds)
    report = Report("extend", data={"base": base_mean, "tuned": {}})
    shards = []
    for seed in cfg.seeds:
        path = d / "shards" / f"vader_s{seed}.csv"
        with _fresh_sink(path, experiment="extend", resolution=lab.side) as sink:
            _, rows = run_alignment(cfg, lab, "vader", seed, sink, prompts, seeds,
                                    updates=cfg.updates, rounds=rounds)
        shards.append(path)
        tuned = rows[-1]["mean_reward"]
        report.data["tuned"][seed] = tuned
        report.checks.append(Check(f"seed {seed} extended clips more consistent", tuned > base_mean,
                                   f"{tuned:.5f} vs base {base_mean:.5f}"))
    merged = merge_shards(shards, d / "metrics.csv")
    report.files += [merged, emit_plot(merged, d / "reward_vs_queries.txt")]
    _write_summary(d, report)
    return report


def _write_summary(d: Path, report: Report) -> None:
    (d / "summary.txt").write_text(report.text(), encoding="utf-8")
    report.files.append(d / "summary.txt")


RUNNERS = {
    "pretrain": run_pretrain,
    "align": run_align,
    "sweep-efficiency": run_efficiency_sweep,
    "sweep-resolution": run_resolution_sweep,
    "generalize": run_generalization,
    "extend": run_extend,
}


def run(cfg: ExperimentConfig) -> Report:
    log.debug("resolved config:\n%s", serialize(cfg))
    return RUNNERS[cfg.experiment](cfg)
