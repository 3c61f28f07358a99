"""Synthetic-triplet construction pipeline and the real-world stand-in set.

Stages per sample: render the subject, draw a prompt, run the mock
customized-image generator, filter the image (identity and text-alignment
cosines), preprocess to video resolution, run the mock image-to-video
generator, filter the video (embedding consistency and optical-flow
magnitude), and emit a (subject image, identity image, text, video) triplet.
Every stochastic choice draws from a per-sample child RNG, so a run is a
pure function of its seed and the report accounting is exact.

The mock generators expose defect knobs: a corruption rate that swaps in a
wrong silhouette (caught by the identity filter) and a lazy rate that emits
static videos (caught by the flow filter).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import sprites
from .embedders import EmbedderBundle, cosine, default_embedders
from .flow import BlockMatchingFlow
from .metrics import dynamic_degree
from .rng import Rng
from .sprites import (
    BACKGROUNDS,
    IMAGE_SIZE,
    PALETTE,
    PromptAttrs,
    PromptError,
    SubjectSpec,
    parse_prompt,
    render_prompt,
    render_subject,
    sample_prompt,
    shape_mask,
)
from .tensor import read_tensors, write_tensors


class DataError(RuntimeError):
    """Dataset construction or loading failure."""


@dataclass(frozen=True)
class FilterThresholds:
    """Acceptance thresholds; raising any of them never accepts more samples."""

    tau_identity: float = 0.6
    tau_text: float = 0.25
    tau_consistency: float = 0.85
    tau_flow: float = 0.3

    def __post_init__(self):
        for name in ("tau_identity", "tau_text", "tau_consistency"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [-1, 1]")
        if self.tau_flow < 0:
            raise ValueError("tau_flow must be >= 0")


@dataclass
class Triplet:
    """One training sample: subject image, identity image, text, target video."""

    s: np.ndarray
    z: np.ndarray
    c: list[str]
    x: np.ndarray
    origin: str  # "REAL" | "SYNTHETIC"
    meta: dict = field(default_factory=dict)


@dataclass
class FilterDecision:
    accepted: bool
    reason: str | None
    scores: dict[str, float]


REJECT_STAGES = ("rejected_identity", "rejected_text", "rejected_consistency", "rejected_static")


@dataclass
class PipelineReport:
    """Per-stage counts plus one audit row per candidate."""

    counts: dict[str, int] = field(default_factory=lambda: {
        "generated": 0, "accepted": 0, **{k: 0 for k in REJECT_STAGES},
    })
    rows: list[dict] = field(default_factory=list)

    def record(self, status: str, audit: dict) -> None:
        self.counts["generated"] += 1
        self.counts[status if status != "accepted" else "accepted"] += 1
        self.rows.append({"status": status, **audit})

    def check_accounting(self) -> None:
        total = self.counts["accepted"] + sum(self.counts[k] for k in REJECT_STAGES)
        if total != self.counts["generated"]:
            raise DataError(f"report accounting broken: {self.counts}")

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "rows": list(self.rows)}


# -----------------------------------------------------------------------------
# Mock generators
# -----------------------------------------------------------------------------


def _z_support(z: np.ndarray) -> np.ndarray:
    # identity images have an exactly zero background
    return z.max(axis=-1) > 0.0


def _detect_shape(support: np.ndarray) -> str:
    overlaps = {
        name: (support & shape_mask(name)).sum() / max(1, (support | shape_mask(name)).sum())
        for name in sprites.SHAPES
    }
    return max(overlaps, key=overlaps.get)


def mock_t2i(z: np.ndarray, prompt: list[str], rng: Rng, corruption_rate: float = 0.0) -> np.ndarray:
    """Procedural subject-driven text-to-image: re-render the sprite with the
    prompt's attribute changes on the requested background.

    With probability `corruption_rate` the output silhouette is a different
    shape — an identity-breaking defect for the filters to catch.
    """
    attrs = parse_prompt(prompt)
    support = _z_support(z)
    mask = support
    if corruption_rate > 0 and rng.random() < corruption_rate:
        actual = _detect_shape(support)
        mask = shape_mask(rng.choice([s for s in sprites.SHAPES if s != actual]))
    bg = np.asarray(BACKGROUNDS[attrs.background])
    out = np.empty_like(z)
    out[:] = bg
    changed = attrs.color is not None or attrs.texture is not None or attrs.style is not None
    if not changed and mask is support:
        out[support] = z[support]
        return out
    fill = np.asarray(PALETTE[attrs.color]) if attrs.color else z[support].mean(axis=0)
    if attrs.style == "muted":
        fill = 0.5 * fill + 0.25
    sprite = sprites.paint_sprite(mask, tuple(fill), attrs.texture or "solid")
    out[mask] = sprite[mask]
    return out


def preprocess(image: np.ndarray) -> np.ndarray:
    """Center-pad to square (padding inpainted with the border background
    color) and nearest-resize to video resolution."""
    h, w = image.shape[:2]
    side = max(h, w)
    if h != w:
        border = np.concatenate([image[0, :], image[-1, :], image[:, 0], image[:, -1]], axis=0)
        bg = np.median(border, axis=0)
        canvas = np.empty((side, side, image.shape[2]))
        canvas[:] = bg
        oy, ox = (side - h) // 2, (side - w) // 2
        canvas[oy : oy + h, ox : ox + w] = image
        image = canvas
    if side != IMAGE_SIZE:
        idx = np.floor((np.arange(IMAGE_SIZE) + 0.5) * side / IMAGE_SIZE).astype(int)
        image = image[np.ix_(idx, idx)]
    return np.ascontiguousarray(image)


_SLIDE_VELOCITY = {
    "sliding left": (0, -1),
    "sliding right": (0, 1),
    "sliding up": (-1, 0),
    "sliding down": (1, 0),
}
# px/frame for translation motions; bounce is a faster vertical slide
MOTION_SPEED = {**{m: 2 for m in _SLIDE_VELOCITY}, "bouncing": 2}
SPIN_DEGREES_PER_FRAME = 30.0


def render_motion_video(image: np.ndarray, motion: str, frames: int, speed: int | None = None) -> np.ndarray:
    """Move the sprite per the motion token; frame 0 is the input exactly.

    Translations reflect off the frame walls, so the per-frame centroid step
    stays at `speed` pixels. Spin rotates about the sprite centroid with
    nearest-neighbor resampling.
    """
    from .embedders import sprite_support, support_centroid

    video = np.empty((frames,) + image.shape)
    video[0] = image
    if motion == "standing still":
        video[1:] = image
        return video
    support = sprite_support(image)
    border = np.concatenate([image[0, :], image[-1, :], image[:, 0], image[:, -1]], axis=0)
    bg = np.median(border, axis=0)
    ys, xs = np.nonzero(support)
    if ys.size == 0:
        video[1:] = image
        return video
    if motion == "spinning":
        cy, cx = support_centroid(support)
        h, w = image.shape[:2]
        gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        for k in range(1, frames):
            theta = np.deg2rad(SPIN_DEGREES_PER_FRAME * k)
            sy = np.rint(cy + (gy - cy) * np.cos(theta) - (gx - cx) * np.sin(theta)).astype(int)
            sx = np.rint(cx + (gy - cy) * np.sin(theta) + (gx - cx) * np.cos(theta)).astype(int)
            ok = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
            frame = np.empty_like(image)
            frame[:] = bg
            hit = ok & support[np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)]
            frame[hit] = image[sy[hit], sx[hit]]
            video[k] = frame
        return video
    if motion == "bouncing":
        vel = np.array([1, 0]) * (speed or MOTION_SPEED["bouncing"])
    elif motion in _SLIDE_VELOCITY:
        vel = np.asarray(_SLIDE_VELOCITY[motion]) * (speed or MOTION_SPEED[motion])
    else:
        raise PromptError(f"unknown motion {motion!r}")
    h, w = image.shape[:2]
    lo = np.array([ys.min(), xs.min()])
    hi = np.array([ys.max(), xs.max()])
    offset = np.zeros(2, dtype=int)
    for k in range(1, frames):
        for axis in range(2):
            nxt = offset[axis] + vel[axis]
            limit = (h, w)[axis] - 1
            if lo[axis] + nxt < 0 or hi[axis] + nxt > limit:
                vel[axis] = -vel[axis]
                nxt = offset[axis] + vel[axis]
            offset[axis] = nxt
        frame = np.empty_like(image)
        frame[:] = bg
        frame[ys + offset[0], xs + offset[1]] = image[ys, xs]
        video[k] = frame
    return video


def mock_i2v(image: np.ndarray, prompt: list[str], rng: Rng, frames: int = 8, lazy_rate: float = 0.0) -> np.ndarray:
    """Procedural image-to-video per the prompt's motion token.

    With probability `lazy_rate` the generator is lazy and emits a static
    video regardless of the requested motion — the defect the flow filter
    catches.
    """
    attrs = parse_prompt(prompt)
    if lazy_rate > 0 and rng.random() < lazy_rate:
        return render_motion_video(image, "standing still", frames)
    return render_motion_video(image, attrs.motion, frames)


# -----------------------------------------------------------------------------
# Filters
# -----------------------------------------------------------------------------


def filter_image(candidate: np.ndarray, z: np.ndarray, prompt: list[str],
                 embedders: EmbedderBundle, thresholds: FilterThresholds) -> FilterDecision:
    """Reject on identity drift first, then on text misalignment."""
    id_cos = cosine(embedders.fine.embed_image(candidate), embedders.fine.embed_image(z))
    text_cos = cosine(embedders.joint.embed_image(candidate), embedders.joint.embed_text(prompt))
    scores = {"identity_cos": float(id_cos), "text_cos": float(text_cos)}
    if id_cos < thresholds.tau_identity:
        return FilterDecision(False, "identity", scores)
    if text_cos < thresholds.tau_text:
        return FilterDecision(False, "text", scores)
    return FilterDecision(True, None, scores)


def filter_video(video: np.ndarray, embedders: EmbedderBundle, flow: BlockMatchingFlow,
                 thresholds: FilterThresholds, rng: Rng, n_random_pairs: int = 8) -> FilterDecision:
    """Reject inconsistent-subject videos, then static ones."""
    embs = [embedders.fine.embed_image(frame) for frame in video]
    consec = float(np.mean([cosine(embs[i], embs[i + 1]) for i in range(len(embs) - 1)]))
    pair_sims = []
    for _ in range(n_random_pairs):
        i = int(rng.integers(0, len(embs)))
        j = int(rng.integers(0, len(embs) - 1))
        if j >= i:
            j += 1
        pair_sims.append(cosine(embs[i], embs[j]))
    consistency = min(consec, float(np.mean(pair_sims)))
    flow_mag = dynamic_degree(video, flow)
    scores = {"consistency": consistency, "flow": float(flow_mag)}
    if consistency < thresholds.tau_consistency:
        return FilterDecision(False, "consistency", scores)
    if flow_mag < thresholds.tau_flow:
        return FilterDecision(False, "static", scores)
    return FilterDecision(True, None, scores)


# -----------------------------------------------------------------------------
# Pipeline
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    n_subjects: int = 64
    frames: int = 8
    corruption_rate: float = 0.0
    lazy_rate: float = 0.0
    thresholds: FilterThresholds = field(default_factory=FilterThresholds)


def process_candidate(spec: SubjectSpec, attrs: PromptAttrs, rng: Rng, cfg: PipelineConfig,
                      embedders: EmbedderBundle, flow: BlockMatchingFlow) -> tuple[str, Triplet | None, dict]:
    """Run one subject through every stage; returns (status, triplet?, audit)."""
    s, z = render_subject(spec, rng.child("render"))
    prompt = render_prompt(attrs)
    audit: dict = {"subject": asdict(spec), "prompt": " ".join(prompt)}
    candidate = mock_t2i(z, prompt, rng.child("t2i"), cfg.corruption_rate)
    d_img = filter_image(candidate, z, prompt, embedders, cfg.thresholds)
    audit.update(d_img.scores)
    if not d_img.accepted:
        return f"rejected_{d_img.reason}", None, audit
    processed = preprocess(candidate)
    video = mock_i2v(processed, prompt, rng.child("i2v"), cfg.frames, cfg.lazy_rate)
    d_vid = filter_video(video, embedders, flow, cfg.thresholds, rng.child("pairs"))
    audit.update(d_vid.scores)
    if not d_vid.accepted:
        return f"rejected_{d_vid.reason}", None, audit
    triplet = Triplet(s=s, z=z, c=prompt, x=video, origin="SYNTHETIC",
                      meta={"subject": asdict(spec), "scores": dict(audit)})
    return "accepted", triplet, audit


def run_pipeline(cfg: PipelineConfig, seed: int = 0,
                 embedders: EmbedderBundle | None = None) -> tuple[list[Triplet], PipelineReport]:
    """Deterministic synthetic dataset construction with exact accounting."""
    embedders = embedders or default_embedders()
    flow = BlockMatchingFlow()
    root = Rng(seed)
    report = PipelineReport()
    accepted: list[Triplet] = []
    for i in range(cfg.n_subjects):
        rng = root.child("sample", i)
        spec = sprites.random_subject(rng.child("subject"))
        attrs = sample_prompt(spec, rng.child("prompt"))
        status, triplet, audit = process_candidate(spec, attrs, rng, cfg, embedders, flow)
        report.record(status, audit)
        if triplet is not None:
            accepted.append(triplet)
    report.check_accounting()
    return accepted, report


def generate_real_dataset(n: int, seed: int = 0, frames: int = 8) -> list[Triplet]:
    """Real-world stand-in: identity and video share all visual attributes,
    but the clips carry rich motions (no attribute-change supervision)."""
    root = Rng(seed)
    out: list[Triplet] = []
    motions = [m for m in sprites.MOTIONS if m != "standing still"]
    for i in range(n):
        rng = root.child("real", i)
        spec = sprites.random_subject(rng.child("subject"))
        s, z = render_subject(spec, rng.child("render"))
        motion = rng.choice(motions)
        mention_color = rng.random() < 0.5
        attrs = PromptAttrs(
            subject=spec.label,
            background=_bg_name_of(s),
            motion=motion,
            color=spec.color if mention_color else None,
        )
        video = render_motion_video(s, motion, frames)
        out.append(Triplet(s=s, z=z, c=render_prompt(attrs), x=video, origin="REAL",
                           meta={"subject": asdict(spec)}))
    return out


def _bg_name_of(image: np.ndarray) -> str:
    border = np.concatenate([image[0, :], image[-1, :], image[:, 0], image[:, -1]], axis=0)
    bg = np.median(border, axis=0)
    return min(BACKGROUNDS, key=lambda n: np.abs(np.asarray(BACKGROUNDS[n]) - bg).max())


# -----------------------------------------------------------------------------
# Dataset on disk
# -----------------------------------------------------------------------------


def save_dataset(path: str, triplets: list[Triplet]) -> None:
    """Manifest JSONL plus one tensor container per triplet."""
    samples_dir = os.path.join(path, "samples")
    os.makedirs(samples_dir, exist_ok=True)
    with open(os.path.join(path, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        for i, t in enumerate(triplets):
            rel = os.path.join("samples", f"sample_{i:05d}.tensors")
            write_tensors(os.path.join(path, rel), {"s": t.s, "z": t.z, "x": t.x})
            row = {"id": i, "path": rel, "prompt": " ".join(t.c), "tokens": t.c,
                   "origin": t.origin, "meta": t.meta}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(path: str) -> list[Triplet]:
    manifest = os.path.join(path, "manifest.jsonl")
    if not os.path.exists(manifest):
        raise DataError(f"no manifest at {manifest}")
    out: list[Triplet] = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            arrays = read_tensors(os.path.join(path, row["path"]))
            out.append(Triplet(s=arrays["s"], z=arrays["z"], c=list(row["tokens"]),
                               x=arrays["x"], origin=row["origin"], meta=row.get("meta", {})))
    return out
