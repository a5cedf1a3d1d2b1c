"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

The experiment criteria (5 to 8) run the canned harness experiments at their
default budgets and take several minutes each.
"""

import numpy as np
import pytest

from conftest import analytic_grads, fd_grads, rel_err
from test_autograd import OPS, _weighted
from vaderlab import autograd as ag
from vaderlab.align.ddpo import ddpo_gradients, ddpo_rollout
from vaderlab.align.dpo import dpo_loss, dpo_pairgen
from vaderlab.autograd import Parameter, Tensor
from vaderlab.diffusion import (DDIM, DDPM, SamplerConfig, ddim_step, ddpm_step, forward_noise,
                                lora_attach, make_schedule, sample)
from vaderlab.diffusion.sampling import decode, timesteps_for
from vaderlab.errors import ChecksumError, TruncatedError, VersionError
from vaderlab.harness import experiments as ex
from vaderlab.harness.checkpoint import VERSION, decode as decode_ckpt, encode
from vaderlab.harness.checkpoint import load_checkpoint, save_checkpoint
from vaderlab.harness.config import replace
from vaderlab.harness.sink import COLUMNS
from vaderlab.nn import Module
from vaderlab.rewards import (BRIGHTNESS, KINDS, RewardModel, gen_toy_dataset, prompt_split,
                              subsample_frames)

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(request):
    """Call ``report(n, ok, detail)`` to print the criterion line, then assert."""
    tr = request.config.pluginmanager.getplugin("terminalreporter")

    def emit(n: int, checks: list[tuple[str, bool, str]]):
        ok = all(c[1] for c in checks)
        lines = [f"criterion {n}: {'PASS' if ok else 'FAIL'}"]
        lines += [f"    [{'ok' if c[1] else 'FAIL'}] {c[0]}: {c[2]}" for c in checks]
        text = "\n".join(lines)
        if tr is not None:
            tr.write_line("")
            tr.write_line(text)
        else:
            print(text)
        assert ok, text

    return emit


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_criterion_1_gradient_correctness(world, discs, report):
    worst_op = 0.0
    for _, make, fn in OPS:
        for seed in range(10):
            arrays = make(np.random.default_rng(seed))
            f = lambda *ts, fn=fn: _weighted(fn(*ts))  # noqa: E731
            for a, n in zip(analytic_grads(f, arrays), fd_grads(f, arrays)):
                worst_op = max(worst_op, rel_err(a, n))
    worst_reward = 0.0
    for kind in KINDS:
        reward = RewardModel(kind, discs)
        for seed in range(10):
            r = np.random.default_rng(seed)
            clips = gen_toy_dataset(world, 5, r).clips + r.normal(0, 0.05, (5,) + world.clip_shape)
            f = lambda x, reward=reward, seed=seed: reward(  # noqa: E731
                x, np.arange(5), np.random.default_rng(seed)).sum()
            (a,), (n,) = analytic_grads(f, [clips]), fd_grads(f, [clips])
            worst_reward = max(worst_reward, rel_err(a, n))
    report(1, [(f"{len(OPS)} ops x 10 seeds, worst rel err < 1e-4", worst_op < 1e-4,
                f"{worst_op:.2e}"),
               (f"{len(KINDS)} reward kinds x 10 seeds, worst rel err < 1e-3",
                worst_reward < 1e-3, f"{worst_reward:.2e}")])


# ---------------------------------------------------------------------------
# 2. sampler identities


def test_criterion_2_sampler_identities(trained_model, sched, report):
    s = make_schedule(2, 0.1, 0.2)
    ones = Tensor(np.ones((1, 4)))
    fwd = forward_noise(ones, 1, ones, s).data[0, 0]
    rev = ddpm_step(ones, 1, Tensor(np.full((1, 4), 1.377678)), s, Tensor(np.zeros((1, 4))))
    ddim = ddim_step(ones, 1, 0, forward_noise(ones, 1, ones, s), s).data[0, 0]
    hand = max(abs(fwd - 1.377678), abs(rev.data[0, 0] - 1.117716), abs(ddim - 1.264911))

    long = make_schedule(50, rescale=True)
    r = np.random.default_rng(0)
    x = r.uniform(-1, 1, size=(4, 4, 1, 8, 8))
    eps = r.standard_normal(x.shape)
    worst = 0.0
    for t in range(long.T):
        cur = forward_noise(Tensor(x), t, Tensor(eps), long)
        for tt in range(t, -1, -1):
            cur = ddim_step(Tensor(eps), tt, tt - 1, cur, long)
        worst = max(worst, float(np.max(np.abs(cur.data - x))))

    same = True
    for kind in (DDIM, DDPM):
        res = []
        for ckpt in (False, True):
            with ag.Tape():
                x0, _ = sample(trained_model, np.arange(3), sched, SamplerConfig(kind, steps=10),
                               np.random.default_rng(1), 5, checkpointing=ckpt)
                g = ag.backward(ag.square(x0).mean(), trained_model.parameters())
            res.append((x0.data.tobytes(), {k: v.tobytes() for k, v in g.items()}))
        same &= res[0] == res[1]
    report(2, [("hand examples within 1e-5", hand <= 1e-5, f"max dev {hand:.1e}"),
               ("DDIM round trip from every t (64-bit)", worst <= 1e-12, f"max dev {worst:.1e}"),
               ("checkpointed == plain (values and grads, bitwise)", same, str(same))])


# ---------------------------------------------------------------------------
# 3. truncation


class _Gated(Module):
    def __init__(self, base, above):
        self.base, self.above = base, above
        self.gate = Parameter("gate", np.zeros(base.video_shape))
        self.video_shape, self.frames = base.video_shape, base.frames

    def __call__(self, x, cond, t):
        out = self.base(x, cond, t)
        return out + self.gate if int(t) > self.above else out


def test_criterion_3_truncation(trained_model, sched, report):
    cfg = SamplerConfig(DDIM, steps=10)
    m = lora_attach(trained_model.clone(), 4)
    for p in m.trainable_parameters():
        p.data = np.random.default_rng(0).standard_normal(p.shape) * 0.05
    with ag.Tape():
        x0, _ = sample(m, np.arange(4), sched, cfg, np.random.default_rng(0), 0)
        g0 = ag.backward(x0.sum(), m.trainable_parameters())
    zero = all(not np.any(g) for g in g0.values())

    values = []
    for K in range(0, 11):
        with ag.Tape():
            x0, _ = sample(m, np.arange(4), sched, cfg, np.random.default_rng(3), K)
        values.append(x0.data.tobytes())
    unchanged = len(set(values)) == 1

    base = trained_model.clone()
    base.freeze()
    ts = timesteps_for(sched, cfg.steps)
    local = True
    for K in range(1, 10):
        gm = _Gated(base, int(ts[K - 1]))
        with ag.Tape():
            x0, _ = sample(gm, np.arange(4), sched, cfg, np.random.default_rng(0), K)
            (g,) = ag.backward(ag.square(x0).mean(), [gm.gate]).values()
        local &= not np.any(g)
    report(3, [("K=0 gives exactly zero parameter gradients", zero, str(zero)),
               ("K in 0..10 gives identical samples", unchanged, str(unchanged)),
               ("parameter active only above the cutoff gets zero gradient (K=1..9)", local,
                str(local))])


# ---------------------------------------------------------------------------
# 4. baseline exactness


class _Scalar(Module):
    video_shape = (1, 1, 1, 2)
    frames = 1

    def __init__(self, theta):
        self.theta = Parameter("theta", np.asarray(theta, dtype=float))

    def __call__(self, x, cond, t):
        zero = x * 0.0
        return zero + self.theta if int(np.max(t)) == 1 else zero


def _quadratic(frames, labels=None, rng=None):
    d = frames.reshape(frames.shape[0], 2) - Tensor(np.array([0.9, 0.1]))
    return -ag.square(d).sum(axis=1)


def test_criterion_4_baseline_exactness(trained_model, sched, report):
    from vaderlab.diffusion import Conditioning

    m = lora_attach(trained_model.clone(), 4)
    for p in m.trainable_parameters():
        p.data = np.random.default_rng(0).standard_normal(p.shape) * 0.05
    conds = [Conditioning.of_class(k) for k in range(4)]
    rec = ddpo_rollout(m, RewardModel(BRIGHTNESS), conds * 2, np.random.default_rng(0),
                       sched=sched, sampler=SamplerConfig(DDPM, steps=10))
    _, stats = ddpo_gradients(m, rec, 1e-4)
    ratio_one = bool(np.all(stats["ratios"] == 1.0))

    pairs = dpo_pairgen(trained_model, RewardModel(BRIGHTNESS), conds, np.random.default_rng(1),
                        sched=sched, sampler=SamplerConfig(DDIM, steps=10))
    with ag.Tape():
        loss = dpo_loss(lora_attach(trained_model.clone(), 4), trained_model, pairs, 500.0, sched,
                        np.random.default_rng(2)).item()

    small = make_schedule(2, 0.3, 0.5)
    cfg = SamplerConfig(DDPM, steps=2)
    n = 1_000_000
    theta = np.array([0.2, -0.1])

    def expected(th):
        with ag.no_grad():
            x0, _ = sample(_Scalar(th), np.zeros(n, dtype=int), small, cfg,
                           np.random.default_rng(42))
            return _quadratic(decode(x0)).data.mean()

    h = 1e-3
    oracle = np.array([(expected(theta + h * e) - expected(theta - h * e)) / (2 * h)
                       for e in np.eye(2)])
    policy = _Scalar(theta)
    rec = ddpo_rollout(policy, _quadratic, [conds[0]] * n, np.random.default_rng(7), sched=small,
                       sampler=cfg)
    g, _ = ddpo_gradients(policy, rec, 1e-4)
    ascent = -g["theta"]
    cos = float(ascent @ oracle / (np.linalg.norm(ascent) * np.linalg.norm(oracle)))
    report(4, [("PPO ratio == 1 at collection", ratio_one, f"{stats['ratios'].size} transitions"),
               ("DPO loss == log 2 at reference", loss == np.log(2.0), repr(loss)),
               ("PPO gradient vs 1e6-sample oracle, cosine > 0.9", cos > 0.9, f"{cos:.4f}")])


# ---------------------------------------------------------------------------
# 5-8. trend experiments through the harness


def _checks(rep):
    return [(c.name, c.passed, c.detail) for c in rep.checks]


@pytest.mark.slow
def test_criterion_5_efficiency(lab_cfg, report):
    cfg = replace(lab_cfg, experiment="sweep-efficiency", reward=("frame_classifier",),
                  query_budget=5000)
    rep = ex.run_efficiency_sweep(cfg)
    report(5, _checks(rep))


@pytest.mark.slow
def test_criterion_6_resolution(lab_cfg, report):
    cfg = replace(lab_cfg, experiment="sweep-resolution", resolutions=(8, 16, 32), updates=100,
                  auto_pretrain=True)
    rep = ex.run_resolution_sweep(cfg)
    report(6, _checks(rep))


@pytest.mark.slow
def test_criterion_7_generalization(lab_cfg, report):
    cfg = replace(lab_cfg, experiment="generalize",
                  generalize_kinds=("frame_classifier", "brightness", "video_action"))
    rep = ex.run_generalization(cfg)
    rows = rep.data["table"]
    emitted = all(f"{k}:{s}" in rows[a] for a in ("ddpo", "dpo")
                  for k in cfg.generalize_kinds for s in ("train", "test"))
    report(7, _checks(rep) + [("ddpo and dpo rows emitted", emitted, "table.md")])


@pytest.mark.slow
def test_criterion_8_long_horizon(lab_cfg, report):
    cfg = replace(lab_cfg, experiment="extend", conditioning="frame", frames=3,
                  reward=("masked_consistency",), updates=150, rounds=3, auto_pretrain=True)
    rep = ex.run_extend(cfg)
    report(8, _checks(rep))


# ---------------------------------------------------------------------------
# 9. unbiasedness


def test_criterion_9_unbiased_subsampling(report):
    rng = np.random.default_rng(0)
    levels = (0.1, 0.3, 0.6, 0.9)
    clip = Tensor(np.concatenate([np.full((1, 1, 1, 4, 4), v) for v in levels], axis=1))
    reward = RewardModel(BRIGHTNESS)
    full = reward(clip).item()
    checks = []
    for m in (1, 2, 3):
        est = np.mean([reward(clip, frame_subset=subsample_frames(4, m, rng)).item()
                       for _ in range(10_000)])
        checks.append((f"m={m} of 4, 10,000 draws within 0.01", abs(est - full) <= 0.01,
                       f"{est:.4f} vs {full:.4f}"))
    report(9, checks)


# ---------------------------------------------------------------------------
# 10. reproducibility and persistence


def _csv_without_wallclock(path):
    import csv

    with open(path, newline="") as fh:
        return [[c for k, c in zip(COLUMNS, row) if k != "wallclock_s"] for row in csv.reader(fh)]


def test_criterion_10_reproducibility(lab_cfg, lab, tmp_path, report):
    same = True
    for algo in ("vader", "ddpo", "dpo"):
        cfg = replace(lab_cfg, algo=algo, seeds=(0, 1), query_budget=48, eval_every=16,
                      eval_samples=2)
        runs = []
        for _ in range(2):
            ex.run_align(cfg)
            runs.append(_csv_without_wallclock(cfg.out_dir / "align" / "metrics.csv"))
        same &= runs[0] == runs[1] and len(runs[0]) > 2

    model = lora_attach(lab.base.clone(), 4, seed=3)
    for p in model.trainable_parameters():
        p.data = np.random.default_rng(0).standard_normal(p.shape).astype(p.data.dtype)
    path = save_checkpoint(model, tmp_path / "m.vdrl")
    back = load_checkpoint(path)
    state = model.state_dict()
    bitwise = state.keys() == back.keys() and all(
        state[k].astype(np.float32).tobytes() == back[k].tobytes() for k in state)

    buf = path.read_bytes()
    flipped = bytearray(buf)
    flipped[len(buf) // 2] ^= 0x10
    detected = []
    for bad, err in ((bytes(flipped), ChecksumError), (buf[:-20], TruncatedError),
                     (encode(state, version=VERSION + 1), VersionError)):
        try:
            decode_ckpt(bad)
            detected.append(False)
        except err:
            detected.append(True)
    report(10, [("metrics CSVs identical across reruns (vader, ddpo, dpo; 2 seeds)", same,
                 str(same)),
                ("checkpoint round trip bitwise at 32-bit", bitwise, f"{len(state)} tensors"),
                ("flipped byte / truncation / future version detected", all(detected),
                 str(detected))])


def test_prompt_split_used_by_experiments_is_disjoint(lab):
    ps = prompt_split(lab.spec)
    assert not set(ps.train) & set(ps.test)
