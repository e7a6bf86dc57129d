"""Training loop: sample a scene, draw c, build the target, step Adam."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .scenegen import StereoSample
from .stereonet import ModelConfig, StereoNet
from .supervise import CSampler, LossWeights, build_target, compute_loss

MODEL_CONFIG_NAME = "model_config.json"
CHECKPOINT_NAME = "model.stdp"
LOG_NAME = "train_log.csv"


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainSettings:
    steps: int = 20000
    batch_size: int = 1
    lr: float = 1e-3
    lr_final_ratio: float = 0.05
    rho: float = 0.5
    lambda_seg: float = 0.2
    use_masking: bool = True
    checkpoint_every: int = 1000
    seed: int = 0


def learning_rate(step: int, settings: TrainSettings) -> float:
    """Cosine decay from ``lr`` to ``lr * lr_final_ratio`` over the run (step is 1-based)."""
    if settings.steps <= 1:
        return settings.lr
    t = (step - 1) / (settings.steps - 1)
    floor = settings.lr * settings.lr_final_ratio
    return floor + 0.5 * (settings.lr - floor) * (1.0 + math.cos(math.pi * t))


def save_model(model: StereoNet, directory: str | Path, name: str = CHECKPOINT_NAME) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / MODEL_CONFIG_NAME).write_text(json.dumps(model.cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    path = d / name
    ag.save_checkpoint(path, model.params.state_dict())
    return path


def load_model(checkpoint: str | Path) -> StereoNet:
    """Rebuild a model from a checkpoint and the ``model_config.json`` beside it."""
    checkpoint = Path(checkpoint)
    cfg_path = checkpoint.parent / MODEL_CONFIG_NAME
    if not checkpoint.is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    if not cfg_path.is_file():
        raise FileNotFoundError(f"model config not found beside checkpoint: {cfg_path}")
    model = StereoNet(ModelConfig.from_dict(json.loads(cfg_path.read_text())))
    model.params.load_state_dict(ag.load_checkpoint(checkpoint))
    return model


def train(
    model: StereoNet,
    samples: Sequence[StereoSample],
    settings: TrainSettings,
    out_dir: str | Path | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> list[tuple[int, float, float]]:
    """Run ``settings.steps`` optimizer steps; returns the (step, loss, mean c) log.

    With ``out_dir`` set, the log goes to ``train_log.csv`` and checkpoints
    are written every ``checkpoint_every`` steps plus once at the end.
    """
    if not samples:
        raise ValueError("training set is empty")
    d_max = {s.d_max for s in samples}
    if d_max != {float(model.cfg.d_max)}:
        raise ValueError(f"dataset d_max {sorted(d_max)} does not match model d_max {model.cfg.d_max}")
    index_rng = np.random.default_rng([settings.seed, 0])
    sampler = CSampler(settings.rho, np.random.default_rng([settings.seed, 1]))
    weights = LossWeights(seg=settings.lambda_seg)
    opt = ag.Adam(list(model.params), lr=settings.lr)
    out = Path(out_dir) if out_dir is not None else None
    log: list[tuple[int, float, float]] = []
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        fh = open(out / LOG_NAME, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "c", "lr"])
    try:
        for step in range(1, settings.steps + 1):
            idx = index_rng.integers(0, len(samples), settings.batch_size)
            batch = [samples[i] for i in idx]
            cs = [sampler.sample(s) for s in batch]
            targets = [build_target(s, c, settings.use_masking) for s, c in zip(batch, cs)]
            pred = model.forward(np.stack([s.left for s in batch]), np.stack([s.right for s in batch]), np.array(cs))
            seg_gt = np.stack([s.mask for s in batch])
            loss = compute_loss(pred.iterations, pred.seg_logits, targets, seg_gt, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.state.lr = learning_rate(step, settings)
            opt.step()
            c_mean = float(np.mean(cs))
            log.append((step, value, c_mean))
            if writer is not None:
                writer.writerow([step, repr(value), repr(c_mean), repr(opt.state.lr)])
                if step % settings.checkpoint_every == 0:
                    save_model(model, out / "checkpoints", f"step_{step:06d}.stdp")
            if progress is not None:
                progress(step, value)
        if out is not None:
            save_model(model, out)
    finally:
        if writer is not None:
            fh.close()
    return log
