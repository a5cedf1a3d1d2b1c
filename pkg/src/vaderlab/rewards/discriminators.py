"""Small frozen discriminators trained on ground-truth toy clips."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from vaderlab import autograd as ag
from vaderlab.autograd import Tensor
from vaderlab.errors import TrainingError
from vaderlab.nn import Linear, Module
from vaderlab.optim import Adam
from vaderlab.rewards.world import ToyDataset, ToyWorldSpec, gen_toy_dataset

log = logging.getLogger(__name__)


class MLPHead(Module):
    """Two-layer tanh MLP over flattened inputs."""

    def __init__(self, kind: str, d_in: int, d_out: int, hidden: int, rng: np.random.Generator):
        self.kind = kind
        self.l1 = Linear(f"{kind}.l1", d_in, hidden, rng)
        self.l2 = Linear(f"{kind}.l2", hidden, hidden, rng)
        self.l3 = Linear(f"{kind}.l3", hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.l3(ag.tanh(self.l2(ag.tanh(self.l1(x)))))


class FrameClassifier(MLPHead):
    """Shape-class logits for single frames; input (..., C, H, W)."""

    def logits(self, frames: Tensor) -> Tensor:
        lead = frames.shape[:-3]
        d = int(np.prod(frames.shape[-3:]))
        return self(frames.reshape(lead + (d,)))


class VideoClassifier(MLPHead):
    """Motion-class logits for whole clips; input (B, N, C, H, W)."""

    def logits(self, clips: Tensor) -> Tensor:
        B = clips.shape[0]
        return self(clips.reshape(B, -1))


class Detector(MLPHead):
    """Per-shape presence confidences in [0, 1] for single frames."""

    def confidence(self, frames: Tensor) -> Tensor:
        lead = frames.shape[:-3]
        d = int(np.prod(frames.shape[-3:]))
        return ag.sigmoid(self(frames.reshape(lead + (d,))))


class MaskedPredictor(MLPHead):
    """Reconstructs a clip from its visible patches and the patch mask."""

    def reconstruct(self, clips: Tensor, keep: np.ndarray) -> Tensor:
        B = clips.shape[0]
        keep_t = Tensor(keep.astype(clips.data.dtype))
        visible = (clips * keep_t).reshape(B, -1)
        inp = ag.concat([visible, keep_t.reshape(B, -1)], axis=1)
        return self(inp).reshape(clips.shape)


@dataclass
class Discriminators:
    frame: FrameClassifier
    video: VideoClassifier
    detector: Detector
    predictor: MaskedPredictor
    spec: ToyWorldSpec
    report: dict

    def modules(self) -> dict[str, Module]:
        return {"frame": self.frame, "video": self.video, "detector": self.detector,
                "predictor": self.predictor}


def build_discriminators(spec: ToyWorldSpec, rng: np.random.Generator,
                         hidden: int = 64) -> Discriminators:
    """Freshly initialised (untrained, unfrozen) heads sized for ``spec``."""
    D = int(np.prod(spec.frame_shape))
    N = spec.frames
    n_s, n_m = len(spec.shape_classes), len(spec.motions)
    return Discriminators(FrameClassifier("disc.frame", D, n_s, hidden, rng),
                          VideoClassifier("disc.video", N * D, n_m, hidden, rng),
                          Detector("disc.detector", D, n_s, hidden, rng),
                          MaskedPredictor("disc.predictor", 2 * N * D, N * D, hidden * 2, rng),
                          spec, {})


def patch_keep_mask(clip_shape, batch: int, rng: np.random.Generator, ratio: float = 0.5,
                    patch: int = 2) -> np.ndarray:
    """Boolean keep-mask (True = visible) over 2x2x1 spatio-temporal patches.

    Exactly ``round(ratio * patches)`` patches per clip are hidden.
    """
    N, C, H, W = clip_shape
    ph, pw = H // patch, W // patch
    P = N * ph * pw
    hidden = int(round(ratio * P))
    if hidden <= 0 or hidden >= P:
        raise ValueError(f"mask ratio {ratio} hides {hidden} of {P} patches; need some of each")
    keep = np.ones((batch, P), dtype=bool)
    for b in range(batch):
        keep[b, rng.choice(P, size=hidden, replace=False)] = False
    keep = keep.reshape(batch, N, 1, ph, 1, pw, 1)
    keep = np.broadcast_to(keep, (batch, N, C, ph, patch, pw, patch))
    return keep.reshape(batch, N, C, H, W).copy()


def _fit(module, loss_fn, steps: int, lr: float, rng: np.random.Generator):
    opt = Adam(module.trainable_parameters(), lr=lr)
    losses = []
    for step in range(steps):
        with ag.Tape():
            loss = loss_fn(rng)
            grads = ag.backward(loss, module.trainable_parameters())
        opt.step(grads)
        losses.append(loss.item())
    return losses


def _nll(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[-1])[labels]
    return -(ag.log_softmax(logits) * Tensor(onehot)).sum(axis=-1).mean()


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def train_discriminators(spec: ToyWorldSpec, rng: np.random.Generator, *, count: int = 2000,
                         hidden: int = 64, steps: int = 600, batch: int = 64, lr: float = 3e-3,
                         noise: float = 0.1, floor: float = 0.95,
                         dataset: ToyDataset | None = None) -> Discriminators:
    """Train the four reward backbones on fresh ground-truth clips and freeze them.

    Raises :class:`TrainingError` when a classifier misses ``floor`` held-out accuracy.
    """
    data = dataset if dataset is not None else gen_toy_dataset(spec, count, rng)
    held = gen_toy_dataset(spec, 400, rng)
    N = spec.frames
    n_s = len(spec.shape_classes)
    dtype = ag.default_dtype()
    clips = data.clips.astype(dtype)
    shapes, motions = data.shape_labels, data.motion_labels

    def jitter(x, r):
        return x + r.normal(0.0, noise, size=x.shape).astype(dtype)

    heads = build_discriminators(spec, rng, hidden)
    frame, video, detector, predictor = heads.frame, heads.video, heads.detector, heads.predictor

    def frame_loss(r):
        i = r.integers(0, len(clips), batch)
        k = r.integers(0, N, batch)
        return _nll(frame.logits(Tensor(jitter(clips[i, k], r))), shapes[i])

    def video_loss(r):
        i = r.integers(0, len(clips), batch)
        return _nll(video.logits(Tensor(jitter(clips[i], r))), motions[i])

    def detector_loss(r):
        i = r.integers(0, len(clips), batch)
        k = r.integers(0, N, batch)
        x = jitter(clips[i, k], r)
        target = np.eye(n_s)[shapes[i]]
        blank = r.random(batch) < 0.2
        x[blank] = r.uniform(0, 0.3, size=x[blank].shape)
        target[blank] = 0.0
        logits = detector(Tensor(x.reshape(batch, -1)))
        # binary cross-entropy on logits
        t = Tensor(target)
        return -(t * ag.log_sigmoid(logits) + (1.0 - t) * ag.log_sigmoid(-logits)).mean()

    def predictor_loss(r):
        i = r.integers(0, len(clips), batch)
        x = clips[i]
        keep = patch_keep_mask(spec.clip_shape, batch, r)
        rec = predictor.reconstruct(Tensor(x), keep)
        hide = Tensor((~keep).astype(dtype))
        return (ag.square(rec - Tensor(x)) * hide).sum() / float((~keep).sum())

    report = {}
    for name, mod, fn, n_steps in (("frame", frame, frame_loss, steps),
                                   ("video", video, video_loss, steps),
                                   ("detector", detector, detector_loss, steps),
                                   ("predictor", predictor, predictor_loss, 2 * steps)):
        losses = _fit(mod, fn, n_steps, lr, rng)
        report[f"{name}_loss_first"] = float(np.mean(losses[:20]))
        report[f"{name}_loss_last"] = float(np.mean(losses[-20:]))
        mod.freeze()

    hc = held.clips.astype(dtype)
    with ag.no_grad():
        fl = frame.logits(Tensor(hc)).data.reshape(-1, n_s)
        report["frame_acc"] = _accuracy(fl, np.repeat(held.shape_labels, N))
        report["video_acc"] = _accuracy(video.logits(Tensor(hc)).data, held.motion_labels)
        conf = detector.confidence(Tensor(hc)).data  # (B, N, n_s)
        own = np.take_along_axis(conf, held.shape_labels[:, None, None].repeat(N, 1), axis=2)
        report["detector_acc"] = float(np.mean((conf > 0.5) == (np.eye(n_s)[held.shape_labels][:, None, :] > 0)))
        report["detector_own_conf"] = float(own.mean())
    for key in ("frame_acc", "video_acc", "detector_acc"):
        if report[key] < floor:
            raise TrainingError(f"{key} = {report[key]:.3f} below floor {floor}; "
                                "increase discriminator steps/count or simplify the world spec")
    if report["predictor_loss_last"] >= report["predictor_loss_first"]:
        raise TrainingError("masked predictor loss did not decrease")
    log.info("discriminators trained: %s", report)
    return Discriminators(frame, video, detector, predictor, spec, report)
