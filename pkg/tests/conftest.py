import numpy as np
import pytest

from vaderlab import autograd as ag
from vaderlab.diffusion import DenoiserModel, OptimizerConfig, make_schedule, pretrain
from vaderlab.rewards import ToyWorldSpec, gen_toy_dataset, train_discriminators


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` (numpy in, float out) at ``x``."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def analytic_grads(fn, arrays):
    """Gradients of scalar ``fn(*tensors)`` w.r.t. each array."""
    ts = [ag.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ag.Tape():
        out = fn(*ts)
        ag.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def fd_grads(fn, arrays, h=1e-5):
    out = []
    for k in range(len(arrays)):
        def f(x, k=k):
            args = [ag.Tensor(a) for a in arrays]
            args[k] = ag.Tensor(x)
            with ag.no_grad():
                return fn(*args).item()
        out.append(numeric_grad(f, arrays[k].copy(), h))
    return out


@pytest.fixture(scope="session")
def world():
    return ToyWorldSpec()


@pytest.fixture(scope="session")
def discs(world):
    return train_discriminators(world, np.random.default_rng(0))


@pytest.fixture(scope="session")
def toy_data(world):
    return gen_toy_dataset(world, 1000, np.random.default_rng(1))


@pytest.fixture(scope="session")
def sched():
    return make_schedule(50, rescale=True)


@pytest.fixture(scope="session")
def trained_model(world, toy_data, sched):
    """Small float64 denoiser, pretrained briefly. Treat as read-only."""
    model = DenoiserModel(*world.clip_shape, hidden=64, vocab=world.vocab, seed=3)
    pretrain(list(toy_data), model, OptimizerConfig(lr=2e-3, batch_size=64, grad_clip=10.0), 600,
             np.random.default_rng(2), sched)
    return model


@pytest.fixture(scope="session")
def lab_cfg(tmp_path_factory):
    """Default experiment config with its 8x8 base model and discriminators pretrained."""
    from vaderlab.harness.config import ExperimentConfig
    from vaderlab.harness.experiments import run_pretrain

    cfg = ExperimentConfig(experiment="align", out=str(tmp_path_factory.mktemp("runs")))
    cfg.validate()
    run_pretrain(cfg)
    return cfg


@pytest.fixture(scope="session")
def lab(lab_cfg):
    from vaderlab.harness.experiments import load_lab

    return load_lab(lab_cfg)
