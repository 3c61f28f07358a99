"""Synthetic pipeline: rendering, mock generators, filters, accounting."""
from __future__ import annotations

import numpy as np
import pytest

from sugar.datapipe import (
    FilterThresholds,
    PipelineConfig,
    filter_image,
    filter_video,
    generate_real_dataset,
    load_dataset,
    mock_i2v,
    mock_t2i,
    preprocess,
    render_motion_video,
    run_pipeline,
    save_dataset,
)
from sugar.embedders import default_embedders, sprite_support, support_centroid
from sugar.flow import BlockMatchingFlow
from sugar.rng import Rng
from sugar.sprites import (
    PALETTE,
    PromptAttrs,
    PromptError,
    SubjectSpec,
    parse_prompt,
    render_prompt,
    render_subject,
    shape_mask,
    sample_prompt,
    random_subject,
)

BUNDLE = default_embedders()
FLOW = BlockMatchingFlow()
THRESH = FilterThresholds()


def subject(shape="circle", color="red"):
    nouns = {"circle": "ball", "square": "box", "triangle": "cone", "star": "star"}
    return SubjectSpec(shape, color, nouns[shape])


def attrs_for(spec, **kw):
    base = dict(subject=spec.label, background="white", motion="sliding right")
    base.update(kw)
    return PromptAttrs(**base)


# -----------------------------------------------------------------------------
# rendering
# -----------------------------------------------------------------------------


def test_render_subject_zero_background_and_agreement():
    spec = subject()
    s, z = render_subject(spec, Rng(0))
    mask = shape_mask(spec.shape)
    assert np.array_equal(z[~mask], np.zeros_like(z[~mask]))
    assert np.array_equal(s[mask], z[mask])


def test_render_subject_color_difference_on_support_only():
    a, _ = subject("star", "red"), None
    b = subject("star", "blue")
    _, za = render_subject(a, Rng(1))
    _, zb = render_subject(b, Rng(1))
    mask = shape_mask("star")
    assert np.abs(za[mask] - zb[mask]).max() > 0.5
    assert np.array_equal(za[~mask], zb[~mask])


def test_prompt_roundtrip():
    spec = subject("triangle", "cyan")
    for seed in range(20):
        attrs = sample_prompt(spec, Rng(seed))
        assert parse_prompt(render_prompt(attrs)) == attrs
    with pytest.raises(PromptError):
        parse_prompt(["no", "clause", "here"])


# -----------------------------------------------------------------------------
# mock generators
# -----------------------------------------------------------------------------


def test_mock_t2i_no_attribute_change_copies_sprite():
    spec = subject()
    _, z = render_subject(spec, Rng(2))
    attrs = attrs_for(spec)  # background + motion only
    out = mock_t2i(z, render_prompt(attrs), Rng(3))
    mask = shape_mask(spec.shape)
    assert np.array_equal(out[mask], z[mask])
    assert np.allclose(out[~mask], 0.98)  # white background


def test_mock_t2i_texture_keeps_silhouette():
    spec = subject("square", "green")
    _, z = render_subject(spec, Rng(4))
    attrs = attrs_for(spec, color="magenta", texture="striped")
    out = mock_t2i(z, render_prompt(attrs), Rng(5))
    sup_out = sprite_support(out)
    sup_z = sprite_support(z)
    iou = (sup_out & sup_z).sum() / (sup_out | sup_z).sum()
    assert iou == 1.0


def test_mock_t2i_corruption_breaks_silhouette_and_filter_catches():
    spec = subject("star", "yellow")
    _, z = render_subject(spec, Rng(6))
    prompt = render_prompt(attrs_for(spec, color="blue"))
    out = mock_t2i(z, prompt, Rng(7), corruption_rate=1.0)
    sup_out, sup_z = sprite_support(out), sprite_support(z)
    iou = (sup_out & sup_z).sum() / (sup_out | sup_z).sum()
    assert iou < 1.0
    decision = filter_image(out, z, prompt, BUNDLE, THRESH)
    assert not decision.accepted and decision.reason == "identity"


def test_filter_image_accepts_identity_and_vacuous_thresholds():
    spec = subject("triangle", "purple")
    _, z = render_subject(spec, Rng(8))
    prompt = render_prompt(attrs_for(spec, background="gray"))
    candidate = mock_t2i(z, prompt, Rng(9))
    assert filter_image(candidate, z, prompt, BUNDLE, THRESH).accepted
    vacuous = FilterThresholds(tau_identity=-1.0, tau_text=-1.0, tau_consistency=-1.0, tau_flow=0.0)
    corrupted = mock_t2i(z, prompt, Rng(10), corruption_rate=1.0)
    assert filter_image(corrupted, z, prompt, BUNDLE, vacuous).accepted


def test_filter_image_rejects_text_mismatch():
    spec = subject("circle", "red")
    _, z = render_subject(spec, Rng(11))
    made_with = render_prompt(attrs_for(spec, color="green", texture="striped", background="black"))
    checked_against = render_prompt(attrs_for(spec, color="magenta", texture="dotted",
                                              background="white", motion="bouncing"))
    candidate = mock_t2i(z, made_with, Rng(12))
    decision = filter_image(candidate, z, checked_against, BUNDLE, THRESH)
    assert not decision.accepted and decision.reason == "text"


def test_preprocess_passthrough_and_padding():
    img = Rng(13).random((16, 16, 3))
    assert np.array_equal(preprocess(img), img)
    rect = np.full((12, 20, 3), 0.5)
    rect[4:8, 6:10] = 0.9
    out = preprocess(rect)
    assert out.shape == (16, 16, 3)
    assert np.allclose(out[0, 0], 0.5)  # padding inpainted with border color


def test_mock_i2v_static_and_frame1_exact():
    spec = subject("square", "cyan")
    _, z = render_subject(spec, Rng(14))
    prompt = render_prompt(attrs_for(spec, motion="standing still"))
    vid = mock_i2v(preprocess(mock_t2i(z, prompt, Rng(15))), prompt, Rng(16))
    assert all(np.array_equal(vid[0], f) for f in vid)
    moving = render_prompt(attrs_for(spec, motion="bouncing"))
    img = preprocess(mock_t2i(z, moving, Rng(17)))
    vid2 = mock_i2v(img, moving, Rng(18))
    assert np.array_equal(vid2[0], img)
    assert not np.array_equal(vid2[1], img)


def test_mock_i2v_lazy_rate_forces_static():
    spec = subject()
    _, z = render_subject(spec, Rng(19))
    prompt = render_prompt(attrs_for(spec, motion="sliding left"))
    img = preprocess(mock_t2i(z, prompt, Rng(20)))
    vid = mock_i2v(img, prompt, Rng(21), lazy_rate=1.0)
    assert all(np.array_equal(vid[0], f) for f in vid)


def test_slide_speed_one_centroid_tracking():
    spec = subject("square", "orange")
    _, z = render_subject(spec, Rng(22))
    prompt = render_prompt(attrs_for(spec, motion="sliding right"))
    img = preprocess(mock_t2i(z, prompt, Rng(23)))
    vid = render_motion_video(img, "sliding right", 8, speed=1)
    cents = [support_centroid(sprite_support(f)) for f in vid]
    for (y0, x0), (y1, x1) in zip(cents, cents[1:]):
        step = abs(y1 - y0) + abs(x1 - x0)
        assert abs(step - 1.0) <= 0.1


# -----------------------------------------------------------------------------
# video filter
# -----------------------------------------------------------------------------


def test_filter_video_static_rejected_with_full_consistency():
    spec = subject("triangle", "green")
    _, z = render_subject(spec, Rng(24))
    prompt = render_prompt(attrs_for(spec))
    img = preprocess(mock_t2i(z, prompt, Rng(25)))
    vid = render_motion_video(img, "standing still", 8)
    decision = filter_video(vid, BUNDLE, FLOW, THRESH, Rng(26))
    assert not decision.accepted and decision.reason == "static"
    assert decision.scores["consistency"] > 0.999
    assert decision.scores["flow"] == 0.0


def test_filter_video_accepts_sliding_sprite():
    spec = subject("star", "magenta")
    _, z = render_subject(spec, Rng(27))
    prompt = render_prompt(attrs_for(spec, motion="sliding down"))
    img = preprocess(mock_t2i(z, prompt, Rng(28)))
    vid = mock_i2v(img, prompt, Rng(29))
    assert filter_video(vid, BUNDLE, FLOW, THRESH, Rng(30)).accepted


def test_filter_video_rejects_midstream_shape_swap():
    spec = subject("square", "blue")
    _, z = render_subject(spec, Rng(31))
    prompt = render_prompt(attrs_for(spec, motion="sliding left"))
    img = preprocess(mock_t2i(z, prompt, Rng(32)))
    vid = mock_i2v(img, prompt, Rng(33)).copy()
    # adversarial clip: replace the tail with a different subject
    other = preprocess(mock_t2i(render_subject(subject("circle", "blue"), Rng(34))[1],
                                prompt, Rng(35)))
    vid[4:] = render_motion_video(other, "sliding left", 8)[:4]
    decision = filter_video(vid, BUNDLE, FLOW, THRESH, Rng(36))
    assert not decision.accepted and decision.reason == "consistency"


# -----------------------------------------------------------------------------
# pipeline runs
# -----------------------------------------------------------------------------


def test_pipeline_accounting_and_determinism():
    cfg = PipelineConfig(n_subjects=30, corruption_rate=0.3, lazy_rate=0.3)
    trips_a, rep_a = run_pipeline(cfg, seed=5, embedders=BUNDLE)
    trips_b, rep_b = run_pipeline(cfg, seed=5, embedders=BUNDLE)
    rep_a.check_accounting()
    assert rep_a.counts == rep_b.counts
    assert len(trips_a) == rep_a.counts["accepted"]
    assert all(np.array_equal(a.x, b.x) for a, b in zip(trips_a, trips_b))
    assert {r["status"] for r in rep_a.rows} >= {"accepted"}


def test_pipeline_zero_defect_rates_accept_everything():
    cfg = PipelineConfig(n_subjects=25, corruption_rate=0.0, lazy_rate=0.0)
    trips, rep = run_pipeline(cfg, seed=6, embedders=BUNDLE)
    assert rep.counts["accepted"] == rep.counts["generated"] == 25
    assert len(trips) == 25
    for t in trips:
        assert t.origin == "SYNTHETIC"
        assert t.x.min() >= 0.0 and t.x.max() <= 1.0


def test_pipeline_threshold_monotonicity():
    base = PipelineConfig(n_subjects=25, corruption_rate=0.3, lazy_rate=0.3)
    accepted_base = run_pipeline(base, seed=7, embedders=BUNDLE)[1].counts["accepted"]
    for stricter in (
        FilterThresholds(tau_identity=0.8),
        FilterThresholds(tau_text=0.5),
        FilterThresholds(tau_consistency=0.95),
        FilterThresholds(tau_flow=1.0),
    ):
        cfg = PipelineConfig(n_subjects=25, corruption_rate=0.3, lazy_rate=0.3, thresholds=stricter)
        got = run_pipeline(cfg, seed=7, embedders=BUNDLE)[1].counts["accepted"]
        assert got <= accepted_base


def test_real_dataset_shares_attributes_and_moves():
    trips = generate_real_dataset(8, seed=8)
    assert all(t.origin == "REAL" for t in trips)
    for t in trips:
        sup = sprite_support(t.s)
        assert np.array_equal(t.z[sup], t.s[sup])  # z = s with background zeroed
        assert np.array_equal(t.z[~sup], np.zeros_like(t.z[~sup]))
        assert np.array_equal(t.x[0], t.s)


def test_dataset_save_load_roundtrip(tmp_path):
    cfg = PipelineConfig(n_subjects=5)
    trips, _ = run_pipeline(cfg, seed=9, embedders=BUNDLE)
    save_dataset(str(tmp_path / "ds"), trips)
    back = load_dataset(str(tmp_path / "ds"))
    assert len(back) == len(trips)
    for a, b in zip(trips, back):
        assert np.array_equal(a.x, b.x) and np.array_equal(a.z, b.z)
        assert a.c == b.c and a.origin == b.origin


def test_thresholds_validation():
    with pytest.raises(ValueError):
        FilterThresholds(tau_identity=2.0)
    with pytest.raises(ValueError):
        FilterThresholds(tau_flow=-0.1)
