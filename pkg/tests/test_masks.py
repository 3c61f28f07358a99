"""Selective-attention group matrices and token-level mask expansion."""
from __future__ import annotations

import numpy as np
import pytest

from sugar.masks import (
    COARSE,
    DESIGNS,
    FINE,
    FRAME_1,
    FRAME_REST,
    MaskDesignError,
    SelectiveMask,
    TEXT,
    TokenLayout,
    build_mask,
)
from sugar.tensor import LARGE_NEG

L = LARGE_NEG


def small_layout():
    # 7 tokens: fine, coarse, text, f1p1, f1p2, f2p1, f2p2
    return TokenLayout(n_fine=1, n_coarse=1, n_text=1, frames=2, tokens_per_frame=2, d_model=8)


def test_layout_counts_and_slices():
    lay = TokenLayout()
    assert lay.total_tokens == 4 + 1 + 8 + 8 * 16
    assert lay.n_video == 128
    assert lay.video_slice == slice(13, 141)
    gids = lay.group_ids()
    assert len(gids) == lay.total_tokens
    assert list(gids[:4]) == [FINE] * 4
    assert gids[13] == FRAME_1 and gids[13 + 16] == FRAME_REST


def test_layout_rejects_nonpositive():
    with pytest.raises(ValueError):
        TokenLayout(n_fine=0)


def test_design_e_allows_everything():
    mask = build_mask("E", small_layout())
    assert np.array_equal(mask, np.zeros((7, 7)))


def test_design_a_blocks_identity_columns_for_video_and_text():
    lay = small_layout()
    mask = build_mask("A", lay)
    # video rows carry LARGE_NEG in fine/coarse columns
    for row in range(3, 7):
        assert mask[row, 0] == L and mask[row, 1] == L
    # text row must not read identity either: no path to the video output
    assert mask[2, 0] == L and mask[2, 1] == L
    # text<->video stays open
    assert mask[2, 3] == 0 and mask[3, 2] == 0


def test_design_b_matches_hand_expanded_7x7():
    # tokens: [fine, coarse, text, f1p1, f1p2, f2p1, f2p2]
    expected = np.array([
        [0, 0, 0, L, L, 0, 0],
        [0, 0, 0, L, L, 0, 0],
        [0, 0, 0, 0, 0, 0, 0],
        [0, 0, 0, 0, 0, 0, 0],
        [0, 0, 0, 0, 0, 0, 0],
        [L, L, 0, 0, 0, 0, 0],
        [L, L, 0, 0, 0, 0, 0],
    ])
    assert np.array_equal(build_mask("B", small_layout()), expected)


def test_design_c_and_d_presets():
    lay = small_layout()
    c = build_mask("C", lay)
    # every frame reads identity; identity reads no frames
    for row in range(3, 7):
        assert c[row, 0] == 0 and c[row, 1] == 0
    for col in range(3, 7):
        assert c[0, col] == L and c[1, col] == L
    d = build_mask("D", lay)
    # only frame 1 reads identity; identity reads frame 1 only
    assert d[3, 0] == 0 and d[4, 0] == 0
    assert d[5, 0] == L and d[6, 0] == L
    assert d[0, 3] == 0 and d[0, 5] == L


def test_custom_mask_roundtrip_and_validation():
    attend = np.ones((5, 5), dtype=bool)
    attend[FINE, TEXT] = False
    mask = build_mask("CUSTOM", small_layout(), custom_attend=attend)
    assert mask[0, 2] == L and mask[2, 0] == 0

    bad_self = np.ones((5, 5), dtype=bool)
    bad_self[TEXT, TEXT] = False
    with pytest.raises(MaskDesignError):
        build_mask("CUSTOM", small_layout(), custom_attend=bad_self)

    bad_video = np.ones((5, 5), dtype=bool)
    bad_video[FRAME_REST, FRAME_1] = False
    with pytest.raises(MaskDesignError):
        build_mask("CUSTOM", small_layout(), custom_attend=bad_video)

    with pytest.raises(MaskDesignError):
        SelectiveMask.from_design("CUSTOM")
    with pytest.raises(MaskDesignError):
        SelectiveMask.from_design("Z")


def test_named_design_invariants():
    for design in DESIGNS[:-1]:
        attend = SelectiveMask.from_design(design).attend
        assert np.all(np.diag(attend)), design
        assert attend[FRAME_1, FRAME_REST] and attend[FRAME_REST, FRAME_1], design
        # text<->video always allowed
        assert attend[TEXT, FRAME_1] and attend[TEXT, FRAME_REST], design
        assert attend[FRAME_1, TEXT] and attend[FRAME_REST, TEXT], design


def test_design_b_group_matrix_contract():
    attend = SelectiveMask.from_design("B").attend
    assert not attend[FINE, FRAME_1] and not attend[COARSE, FRAME_1]
    assert attend[FINE, FRAME_REST] and attend[COARSE, FRAME_REST]
    assert attend[FRAME_1, FINE] and attend[FRAME_1, COARSE]
    assert not attend[FRAME_REST, FINE] and not attend[FRAME_REST, COARSE]
