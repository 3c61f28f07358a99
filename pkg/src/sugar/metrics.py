"""Evaluation metrics for generated videos.

Identity: mean cosine between the reference-image embedding and each frame
embedding (fine embedder). Text alignment: mean frame-text cosine in the
joint attribute space. Dynamic degree: mean block-matching flow magnitude
over consecutive frame pairs. Subject/background consistency: mean of the
consecutive-pair cosine and the anchor-to-frame-1 cosine, with the
background variant embedding each frame after zeroing the sprite support.

All cosine scores use the full cosine formula, so positive rescaling of raw
embeddings never changes a metric. Embedders are pluggable: anything with
the right embed method works.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .embedders import cosine, sprite_support
from .flow import BlockMatchingFlow, FlowError


@dataclass
class MetricReport:
    """Per-video scores; cosine fields lie in [-1, 1], dynamic_degree >= 0."""

    identity_score: float
    text_alignment: float
    dynamic_degree: float
    subject_consistency: float
    background_consistency: float

    def to_dict(self) -> dict:
        return asdict(self)


def identity_score(video: np.ndarray, subject_image: np.ndarray, fine_embedder) -> float:
    """Mean cosine between each frame and the reference image."""
    ref = fine_embedder.embed_image(subject_image)
    sims = [cosine(fine_embedder.embed_image(frame), ref) for frame in video]
    return float(np.mean(sims))


def text_alignment(video: np.ndarray, text_tokens: list[str], joint_embedder) -> float:
    """Mean frame-text cosine in the joint attribute space."""
    ref = joint_embedder.embed_text(text_tokens)
    sims = [cosine(joint_embedder.embed_image(frame), ref) for frame in video]
    return float(np.mean(sims))


def dynamic_degree(video: np.ndarray, flow_estimator: BlockMatchingFlow | None = None) -> float:
    """Mean flow magnitude (px/frame) over consecutive frame pairs."""
    if len(video) < 2:
        raise FlowError("dynamic degree needs at least 2 frames")
    flow = flow_estimator or BlockMatchingFlow()
    mags = [flow.mean_magnitude(video[i], video[i + 1]) for i in range(len(video) - 1)]
    return float(np.mean(mags))


def _consistency(embeddings: list[np.ndarray]) -> float:
    consec = [cosine(embeddings[i], embeddings[i + 1]) for i in range(len(embeddings) - 1)]
    anchor = [cosine(embeddings[0], e) for e in embeddings[1:]]
    return float((np.mean(consec) + np.mean(anchor)) / 2.0)


def subject_consistency(video: np.ndarray, fine_embedder) -> float:
    """Frame-to-frame plus first-frame-anchored similarity of subject embeddings."""
    return _consistency([fine_embedder.embed_image(frame) for frame in video])


def background_consistency(video: np.ndarray, coarse_embedder) -> float:
    """Same structure over coarse embeddings of frames with the sprite zeroed."""
    embs = []
    for frame in video:
        masked = frame.copy()
        masked[sprite_support(frame)] = 0.0
        embs.append(coarse_embedder.embed_image(masked))
    return _consistency(embs)


def evaluate_video(video, subject_image, text_tokens, embedders, flow_estimator=None) -> MetricReport:
    return MetricReport(
        identity_score=identity_score(video, subject_image, embedders.fine),
        text_alignment=text_alignment(video, text_tokens, embedders.joint),
        dynamic_degree=dynamic_degree(video, flow_estimator),
        subject_consistency=subject_consistency(video, embedders.fine),
        background_consistency=background_consistency(video, embedders.coarse),
    )


def evaluate_run(videos, subject_images, prompts, embedders, flow_estimator=None) -> tuple[list[MetricReport], dict]:
    """Per-video reports plus the exact arithmetic mean of each column."""
    if not (len(videos) == len(subject_images) == len(prompts)):
        raise ValueError("videos, subjects, and prompts must align")
    if not videos:
        raise ValueError("evaluate_run needs at least one video")
    reports = [
        evaluate_video(v, s, p, embedders, flow_estimator)
        for v, s, p in zip(videos, subject_images, prompts)
    ]
    keys = list(reports[0].to_dict())
    aggregate = {k: float(np.mean([r.to_dict()[k] for r in reports])) for k in keys}
    return reports, aggregate
