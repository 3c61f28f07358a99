"""Transformer denoiser: mask faithfulness, nulls, freezing, persistence."""
from __future__ import annotations

import numpy as np
import pytest

from sugar.model import ModelConfig, SugarModel, patchify, unpatchify
from sugar.rng import Rng
from sugar.tensor import AdamState, Tensor, adam_step, backward, mean_all, slice_axis


def tiny_config(**kw) -> ModelConfig:
    base = dict(frames=2, image_size=8, patch_size=4, d_model=16, layers=2, heads=2,
                n_fine=2, n_coarse=1, n_text=3, d_fine=8, d_coarse=8, d_text=8, timesteps=50)
    base.update(kw)
    return ModelConfig(**base)


def rand_streams(cfg: ModelConfig, seed: int = 0):
    rng = Rng(seed)
    return (
        rng.normal((cfg.n_fine, cfg.d_fine)),
        rng.normal((cfg.n_coarse, cfg.d_coarse)),
        rng.normal((cfg.n_text, cfg.d_text)),
    )


def test_forward_shapes_and_framed_equivalence():
    cfg = tiny_config()
    model = SugarModel(cfg, rng=Rng(1))
    rng = Rng(2)
    framed = rng.normal((cfg.frames, cfg.tokens_per_frame, cfg.patch_dim))
    flat = framed.reshape(-1, cfg.patch_dim)
    out_framed = model.predict(framed, 3)
    out_flat = model.predict(flat, 3)
    assert out_framed.shape == framed.shape
    assert np.array_equal(out_framed.reshape(-1, cfg.patch_dim), out_flat)
    assert np.isfinite(out_framed).all()


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(layers=0)
    with pytest.raises(ValueError):
        tiny_config(d_model=15)
    with pytest.raises(ValueError):
        tiny_config(image_size=10)
    # odd layer counts are constructible (single-layer mask checks) but
    # cannot be half-frozen
    model = SugarModel(tiny_config(layers=1), rng=Rng(0))
    with pytest.raises(ValueError):
        model.freeze_first_half()


def test_design_a_output_invariant_to_identity_embeddings():
    cfg = tiny_config(design="A", layers=4)
    model = SugarModel(cfg, rng=Rng(3))
    x = Rng(4).normal((cfg.frames * cfg.tokens_per_frame, cfg.patch_dim))
    ef1, ec1, et = rand_streams(cfg, 5)
    ef2, ec2, _ = rand_streams(cfg, 6)
    a = model.predict(x, 7, ef1, ec1, et)
    b = model.predict(x, 7, ef2, ec2, et)
    assert np.abs(a - b).max() <= 1e-12


def test_design_e_sensitive_to_text():
    cfg = tiny_config(design="E")
    model = SugarModel(cfg, rng=Rng(8))
    x = Rng(9).normal((cfg.frames * cfg.tokens_per_frame, cfg.patch_dim))
    ef, ec, et = rand_streams(cfg, 10)
    base = model.predict(x, 1, ef, ec, et)
    bumped = model.predict(x, 1, ef, ec, et + 0.1)
    assert np.abs(base - bumped).max() > 0


def test_design_b_single_layer_rest_frames_blind_to_identity():
    cfg = tiny_config(design="B", layers=1)
    model = SugarModel(cfg, rng=Rng(11))
    x = Rng(12).normal((cfg.frames * cfg.tokens_per_frame, cfg.patch_dim))
    ef, ec, et = rand_streams(cfg, 13)
    e_fine = Tensor(ef, requires_grad=True)
    out = model.forward(x, 5, e_fine, ec, et)
    # FRAME_REST outputs = second frame's tokens
    rest = slice_axis(out, 0, cfg.tokens_per_frame, 2 * cfg.tokens_per_frame)
    backward(mean_all(rest))
    assert e_fine.grad is not None
    assert np.abs(e_fine.grad).max() == 0.0
    # frame-1 outputs do depend on the identity stream
    model.zero_grad()
    e_fine2 = Tensor(ef, requires_grad=True)
    out2 = model.forward(x, 5, e_fine2, ec, et)
    first = slice_axis(out2, 0, 0, cfg.tokens_per_frame)
    backward(mean_all(first))
    assert np.abs(e_fine2.grad).max() > 0.0


def test_null_substitution_bit_exact():
    cfg = tiny_config()
    model = SugarModel(cfg, rng=Rng(14))
    x = Rng(15).normal((cfg.frames * cfg.tokens_per_frame, cfg.patch_dim))
    implicit = model.predict(x, 2)
    explicit = model.predict(
        x, 2,
        model.params["null.fine"].data.copy(),
        model.params["null.coarse"].data.copy(),
        model.params["null.text"].data.copy(),
    )
    assert np.array_equal(implicit, explicit)


def test_save_load_bit_identical(tmp_path):
    cfg = tiny_config(design="C")
    model = SugarModel(cfg, rng=Rng(16))
    x = Rng(17).normal((cfg.frames * cfg.tokens_per_frame, cfg.patch_dim))
    path = tmp_path / "model.ckpt"
    model.freeze_first_half()
    model.save(path)
    loaded = SugarModel.load(path)
    assert loaded.frozen == model.frozen
    assert np.array_equal(model.predict(x, 9), loaded.predict(x, 9))


def test_freeze_first_half_name_set_and_counts():
    cfg = tiny_config(layers=4)
    model = SugarModel(cfg, rng=Rng(18))
    frozen = model.freeze_first_half()
    # blocks 1,2 frozen; 3,4 trainable
    assert any(n.startswith("block1.") for n in frozen)
    assert any(n.startswith("block2.") for n in frozen)
    assert not any(n.startswith("block3.") for n in frozen)
    assert not any(n.startswith("block4.") for n in frozen)
    for prefix in ("proj.", "null.", "emb."):
        assert all(n in frozen for n in model.params if n.startswith(prefix))
    assert all(not n.startswith(("final.", "head.")) for n in frozen)
    total = model.n_params()
    n_frozen = sum(model.params[n].size for n in frozen)
    trainable = sum(p.size for n, p in model.params.items() if n not in frozen)
    assert n_frozen + trainable == total


def test_frozen_parameters_bitwise_unchanged_after_optimizer_steps():
    cfg = tiny_config(layers=2)
    model = SugarModel(cfg, rng=Rng(19))
    frozen = model.freeze_first_half()
    before = {n: model.params[n].data.copy() for n in frozen}
    state = AdamState()
    rng = Rng(20)
    x = rng.normal((cfg.frames * cfg.tokens_per_frame, cfg.patch_dim))
    for step in range(100):
        model.zero_grad()
        out = model.forward(x, step % cfg.timesteps)
        backward(mean_all(out))
        adam_step(model.parameters(), state, lr=1e-2, frozen=model.frozen)
    for n in frozen:
        assert np.array_equal(model.params[n].data, before[n]), n
    # and at least one trainable parameter moved
    assert any(
        not np.array_equal(model.params[n].data, SugarModel(cfg, rng=Rng(19)).params[n].data)
        for n in model.params if n not in frozen
    )


def test_patchify_roundtrip_exact():
    video = Rng(21).normal((3, 8, 8, 3))
    patches = patchify(video, 4)
    assert patches.shape == (3, 4, 48)
    assert np.array_equal(unpatchify(patches, 4, 8, 3), video)


def test_forward_rejects_bad_t_and_shapes():
    cfg = tiny_config()
    model = SugarModel(cfg, rng=Rng(22))
    x = np.zeros((cfg.frames * cfg.tokens_per_frame, cfg.patch_dim))
    with pytest.raises(ValueError):
        model.predict(x, cfg.timesteps)
    with pytest.raises(Exception):
        model.predict(np.zeros((3, 3)), 0)
    with pytest.raises(Exception):
        model.predict(x, 0, e_fine=np.zeros((1, 1)))
