"""Diffusion training loop: condition dropout, dataset mixing, staged strategies.

Strategies: MIX trains one phase at a fixed synthetic-sampling probability p;
TS runs a real-only stage (p=0) then a mixed stage (p=0.5) with everything
trainable; TSF does the same but freezes the input-side parameters and the
first half of the blocks for stage 2. An image-customization ablation flag
replaces each synthetic video with one of its frames (tiled) during stage 2.

Every draw comes from a child RNG keyed by (stage, step), so a full strategy
run reproduces its final checkpoint bit-exactly from the seed.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .datapipe import DataError, Triplet
from .embedders import EmbedderBundle
from .model import SugarModel, patchify
from .rng import Rng
from .schedule import NoiseSchedule, q_sample
from .tensor import AdamState, NumericError, adam_step, backward, mse_loss

__all__ = [
    "Triplet", "DropoutConfig", "StrategyConfig", "Optimizer", "TrainingExample",
    "prepare_examples", "sample_batch", "apply_condition_dropout", "train_step",
    "eval_loss", "run_strategy", "TrainResult",
]


@dataclass(frozen=True)
class DropoutConfig:
    """Independent per-stream drop probabilities used during training."""

    p_fine: float = 0.5
    p_coarse: float = 0.2
    p_text: float = 0.2

    def __post_init__(self):
        for name in ("p_fine", "p_coarse", "p_text"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class StrategyConfig:
    """Training strategy: MIX(p) single phase, TS/TSF two stages (p=0 then 0.5)."""

    kind: str = "MIX"
    p: float = 0.5
    stage1_steps: int = 1000
    stage2_steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    image_mode: bool = False  # stage-2 ablation: synthetic videos as single frames

    def __post_init__(self):
        if self.kind not in ("MIX", "TS", "TSF"):
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")


@dataclass
class Optimizer:
    state: AdamState = field(default_factory=AdamState)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainingExample:
    """Triplet with cached conditioning embeddings and patchified video."""

    triplet: Triplet
    e_fine: np.ndarray
    e_coarse: np.ndarray
    e_text: np.ndarray
    x_frames: np.ndarray  # (frames, tokens_per_frame, patch_dim), centered to [-1, 1]

    @property
    def origin(self) -> str:
        return self.triplet.origin


def prepare_examples(triplets: list[Triplet], embedders: EmbedderBundle, patch_size: int = 4) -> list[TrainingExample]:
    out = []
    for t in triplets:
        out.append(
            TrainingExample(
                triplet=t,
                e_fine=embedders.fine.image_tokens(t.z),
                e_coarse=embedders.coarse.image_tokens(t.z),
                e_text=embedders.text.text_tokens(t.c),
                x_frames=patchify(t.x * 2.0 - 1.0, patch_size),
            )
        )
    return out


def sample_batch(real_set, synth_set, p: float, batch_size: int, rng: Rng) -> list:
    """Each slot independently synthetic with probability p, else real; uniform
    within each set. A set is only touched when its side can be drawn."""
    if p > 0.0 and len(synth_set) == 0:
        raise DataError("synthetic set empty but p > 0")
    if p < 1.0 and len(real_set) == 0:
        raise DataError("real set empty but p < 1")
    batch = []
    for _ in range(batch_size):
        use_synth = rng.random() < p
        pool = synth_set if use_synth else real_set
        batch.append(pool[int(rng.integers(0, len(pool)))])
    return batch


def apply_condition_dropout(e_fine, e_coarse, e_text, cfg: DropoutConfig, rng: Rng):
    """Replace each stream by None (the model's learned null) independently."""
    ef = None if rng.random() < cfg.p_fine else e_fine
    ec = None if rng.random() < cfg.p_coarse else e_coarse
    et = None if rng.random() < cfg.p_text else e_text
    return ef, ec, et


def _batch_arrays(model: SugarModel, batch: list[TrainingExample], dropout_cfg: DropoutConfig,
                  rng: Rng, sched: NoiseSchedule, image_mode: bool = False):
    cfg = model.config
    n_video = cfg.frames * cfg.tokens_per_frame
    xs, ts, eps_all, efs, ecs, ets = [], [], [], [], [], []
    for ex in batch:
        frames = ex.x_frames
        if image_mode and ex.origin == "SYNTHETIC":
            pick = int(rng.integers(0, cfg.frames))
            frames = np.broadcast_to(frames[pick], frames.shape)
        x0 = frames.reshape(n_video, cfg.patch_dim)
        t = int(rng.integers(0, sched.timesteps))
        eps = rng.normal(x0.shape)
        xs.append(q_sample(x0, t, eps, sched))
        ts.append(t)
        eps_all.append(eps)
        ef, ec, et = apply_condition_dropout(ex.e_fine, ex.e_coarse, ex.e_text, dropout_cfg, rng)
        efs.append(ef)
        ecs.append(ec)
        ets.append(et)
    return np.stack(xs), ts, np.stack(eps_all), efs, ecs, ets


def train_step(model: SugarModel, batch: list[TrainingExample], sched: NoiseSchedule,
               optimizer: Optimizer, dropout_cfg: DropoutConfig, rng: Rng,
               image_mode: bool = False) -> float:
    """One noise-matching step over the batch; frozen parameters are skipped."""
    x_ts, ts, eps_target, efs, ecs, ets = _batch_arrays(model, batch, dropout_cfg, rng, sched, image_mode)
    model.zero_grad()
    eps_hat = model.forward_batch(x_ts, ts, efs, ecs, ets)
    loss = mse_loss(eps_hat, eps_target)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError("non-finite training loss")
    backward(loss)
    adam_step(model.parameters(), optimizer.state, lr=optimizer.lr,
              beta1=optimizer.beta1, beta2=optimizer.beta2, eps=optimizer.eps,
              frozen=model.frozen)
    return value


def eval_loss(model: SugarModel, examples: list[TrainingExample], sched: NoiseSchedule,
              seed: int = 0) -> float:
    """Held-out loss with fixed (t, eps) draws: comparable across calls."""
    rng = Rng(seed).child("eval-loss")
    no_drop = DropoutConfig(0.0, 0.0, 0.0)
    x_ts, ts, eps_target, efs, ecs, ets = _batch_arrays(model, examples, no_drop, rng, sched)
    eps_hat = model.predict_batch(x_ts, ts, efs, ecs, ets)
    return float(((eps_hat - eps_target) ** 2).mean())


@dataclass
class TrainResult:
    model: SugarModel
    log: list[dict]
    stage_params: dict[int, dict[str, np.ndarray]]  # stage -> name -> copy
    synth_draws: int = 0
    checkpoints: dict[int, str] = field(default_factory=dict)


def run_strategy(model: SugarModel, cfg: StrategyConfig,
                 real_examples: list[TrainingExample], synth_examples: list[TrainingExample],
                 sched: NoiseSchedule, seed: int = 0,
                 dropout: DropoutConfig = DropoutConfig(),
                 checkpoint_dir: str | None = None, log_path: str | None = None,
                 progress=None) -> TrainResult:
    """Run the configured strategy; checkpoints and parameter snapshots per stage."""
    if cfg.kind == "MIX":
        stages = [(1, cfg.p, cfg.stage1_steps, False)]
    else:
        stages = [(1, 0.0, cfg.stage1_steps, False), (2, 0.5, cfg.stage2_steps, cfg.kind == "TSF")]
    for _, _, steps, _ in stages:
        if steps < 1:
            raise ValueError("every stage needs at least one step")
    root = Rng(seed)
    optimizer = Optimizer(lr=cfg.lr)
    result = TrainResult(model=model, log=[], stage_params={})
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    global_step = 0
    try:
        for stage, p, steps, freeze in stages:
            if freeze:
                model.freeze_first_half()
            image_mode = cfg.image_mode and stage == max(s for s, *_ in stages)
            for k in range(steps):
                rng = root.child("stage", stage, "step", k)
                batch = sample_batch(real_examples, synth_examples, p, cfg.batch_size, rng.child("batch"))
                result.synth_draws += sum(1 for ex in batch if ex.origin == "SYNTHETIC")
                loss = train_step(model, batch, sched, optimizer, dropout, rng.child("step"),
                                  image_mode=image_mode)
                global_step += 1
                row = {"step": global_step, "stage": stage, "loss": loss, "p": p, "lr": cfg.lr}
                result.log.append(row)
                if log_fh:
                    log_fh.write(json.dumps(row, sort_keys=True) + "\n")
                if progress:
                    progress(row)
            result.stage_params[stage] = {n: t.data.copy() for n, t in model.parameters().items()}
            if checkpoint_dir:
                os.makedirs(checkpoint_dir, exist_ok=True)
                path = os.path.join(checkpoint_dir, f"stage{stage}.ckpt")
                model.save(path)
                result.checkpoints[stage] = path
    finally:
        if log_fh:
            log_fh.close()
    return result
