"""Guided reverse-diffusion sampling with dual-scale conditioning.

The noise estimate combines up to four conditioning patterns of the model —
unconditional, text-only, identity-only, and fully conditional — under two
scales: omega_i on the identity contrast and omega_t on the text contrast.
Two algebraic variants are supported (which contrast sits on the fully
conditional term); with equal scales both telescope to single-scale
classifier-free guidance exactly.

Above the timestep gate t_bar the configured drop set replaces the fine
identity embedding (and optionally the coarse one) with the learned null in
every pattern, trading identity detail for motion freedom early in the
reverse process while the coarse embedding keeps the identity anchored.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .embedders import EmbedderBundle
from .model import SugarModel, unpatchify
from .rng import Rng
from .schedule import NoiseSchedule, ddim_step, ddim_timesteps, ddpm_step

VARIANTS = ("identity_inner", "text_inner")
DROP_SETS = ("none", "fine_only", "fine_and_coarse")

# (omega_t, omega_i) operating points reported for the reference system
GUIDANCE_OPERATING_POINTS: tuple[tuple[float, float], ...] = (
    (7.5, 7.5), (5.0, 7.5), (4.0, 7.5), (3.0, 7.5), (2.5, 7.5),
)


@dataclass(frozen=True)
class GuidanceConfig:
    """Scales, variant, timestep gate, and embedding drop set."""

    omega_i: float = 7.5
    omega_t: float = 7.5
    variant: str = "text_inner"
    t_bar: int = 1000
    drop_set: str = "none"

    def __post_init__(self):
        if self.omega_i < 0 or self.omega_t < 0:
            raise ValueError("guidance scales must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.drop_set not in DROP_SETS:
            raise ValueError(f"drop_set must be one of {DROP_SETS}")
        if self.t_bar < 0:
            raise ValueError("t_bar must be >= 0")


@dataclass
class EvalCounter:
    """Counts noise-model evaluations (memoized duplicates count once)."""

    count: int = 0


@dataclass
class SampleRequest:
    z: np.ndarray
    prompt: list[str]
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    steps: int = 50
    seed: int = 0
    method: str = "ddim"
    negative_prompt: list[str] | None = None  # None -> the learned null text

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.method not in ("ddim", "ddpm"):
            raise ValueError("method must be 'ddim' or 'ddpm'")


def guided_eps(model, x_t: np.ndarray, t: int, e_fine, e_coarse, e_text,
               cfg: GuidanceConfig, counter: EvalCounter | None = None,
               e_text_negative=None) -> np.ndarray:
    """Combined noise estimate at timestep t.

    Below t_bar (or with drop set "none") the four-pattern pool is evaluated
    whenever both scales are nonzero; at t >= t_bar the drop set nulls the
    fine (and optionally coarse) embedding in every pattern, which may
    collapse patterns — collapsed duplicates are evaluated once.
    `model` needs a predict(x, t, ef, ec, et) method; predict_batch is used
    when available. `e_text_negative` replaces the learned null text in the
    text-unconditioned patterns (a negative prompt).
    """
    dropping = cfg.drop_set != "none" and t >= cfg.t_bar
    ef = None if (dropping and cfg.drop_set in ("fine_only", "fine_and_coarse")) else e_fine
    ec = None if (dropping and cfg.drop_set == "fine_and_coarse") else e_coarse

    def pattern(use_identity: bool, use_text: bool):
        f = ef if use_identity else None
        c = ec if use_identity else None
        tx = e_text if use_text else e_text_negative
        key = (f is not None, c is not None, use_text)
        return key, (f, c, tx)

    wi, wt = cfg.omega_i, cfg.omega_t
    if wi == 0.0 and wt == 0.0:
        needed = [pattern(False, False)]
    elif wi != 0.0 and wt != 0.0:
        needed = [pattern(False, False), pattern(False, True), pattern(True, False), pattern(True, True)]
    elif cfg.variant == "identity_inner":
        # eps = u + wi*(full - text_only) + wt*(text_only - u)
        needed = [pattern(False, False), pattern(False, True)]
        if wi != 0.0:
            needed.append(pattern(True, True))
    else:
        # eps = u + wt*(full - identity_only) + wi*(identity_only - u)
        needed = [pattern(False, False), pattern(True, False)]
        if wt != 0.0:
            needed.append(pattern(True, True))

    distinct: dict[tuple, tuple] = {}
    for key, conds in needed:
        distinct.setdefault(key, conds)
    keys = list(distinct)
    if hasattr(model, "predict_batch") and len(keys) > 1:
        xs = np.broadcast_to(x_t, (len(keys),) + x_t.shape)
        efs, ecs, ets = zip(*(distinct[k] for k in keys))
        outs = model.predict_batch(xs, [t] * len(keys), list(efs), list(ecs), list(ets))
        memo = {k: outs[i] for i, k in enumerate(keys)}
    else:
        memo = {k: model.predict(x_t, t, *distinct[k]) for k in keys}
    if counter is not None:
        counter.count += len(keys)

    def ev(use_identity: bool, use_text: bool) -> np.ndarray:
        return memo[pattern(use_identity, use_text)[0]]

    u = ev(False, False)
    if wi == 0.0 and wt == 0.0:
        return u
    if cfg.variant == "identity_inner":
        ct = ev(False, True)
        out = u + wt * (ct - u)
        if wi != 0.0:
            out = out + wi * (ev(True, True) - ct)
        return out
    ti = ev(True, False)
    out = u + wi * (ti - u)
    if wt != 0.0:
        out = out + wt * (ev(True, True) - ti)
    return out


def sample(model: SugarModel, request: SampleRequest, sched: NoiseSchedule,
           embedders: EmbedderBundle, metrics_hooks=None) -> tuple[np.ndarray, dict]:
    """Reverse-diffuse a video from pure noise under the request's guidance.

    Returns the video as (frames, H, W, C) in [0, 1] plus a trace recording,
    per step, the mapped timestep, which conditioning slots were nulled by
    the drop gate, and the evaluation count.
    """
    cfg = model.config
    if request.guidance.t_bar > sched.timesteps:
        raise ValueError("t_bar exceeds the schedule's timestep count")
    rng = Rng(request.seed)
    e_fine = embedders.fine.image_tokens(request.z)
    e_coarse = embedders.coarse.image_tokens(request.z)
    e_text = embedders.text.text_tokens(request.prompt)
    e_text_neg = (embedders.text.text_tokens(request.negative_prompt)
                  if request.negative_prompt is not None else None)
    n_video = cfg.frames * cfg.tokens_per_frame
    x = rng.child("init").normal((n_video, cfg.patch_dim))
    g = request.guidance
    steps: list[dict] = []

    def record(index: int, t: int, counter: EvalCounter) -> None:
        dropping = g.drop_set != "none" and t >= g.t_bar
        steps.append({
            "index": index,
            "t": int(t),
            "fine_null": bool(dropping and g.drop_set in ("fine_only", "fine_and_coarse")),
            "coarse_null": bool(dropping and g.drop_set == "fine_and_coarse"),
            "text_null": False,
            "evals": counter.count,
        })

    if request.method == "ddim":
        schedule_pairs = ddim_timesteps(sched.timesteps, request.steps)
        for i, (t, t_prev) in enumerate(schedule_pairs):
            counter = EvalCounter()
            eps = guided_eps(model, x, t, e_fine, e_coarse, e_text, g, counter,
                             e_text_negative=e_text_neg)
            x = ddim_step(x, t, t_prev, eps, sched)
            record(i, t, counter)
            if metrics_hooks:
                for hook in metrics_hooks:
                    hook(i, t, x)
    else:
        noise_rng = rng.child("ddpm")
        for i, t in enumerate(range(sched.timesteps - 1, 0, -1)):
            counter = EvalCounter()
            eps = guided_eps(model, x, t, e_fine, e_coarse, e_text, g, counter,
                             e_text_negative=e_text_neg)
            x = ddpm_step(x, t, eps, sched, noise_rng)
            record(i, t, counter)
            if metrics_hooks:
                for hook in metrics_hooks:
                    hook(i, t, x)

    frames = unpatchify(x.reshape(cfg.frames, cfg.tokens_per_frame, cfg.patch_dim),
                        cfg.patch_size, cfg.image_size, cfg.channels)
    video = np.clip((frames + 1.0) / 2.0, 0.0, 1.0)
    trace = {
        "guidance": asdict(g),
        "steps": steps,
        "method": request.method,
        "seed": request.seed,
        "prompt": " ".join(request.prompt),
    }
    return video, trace
