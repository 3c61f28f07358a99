"""Group-level selective attention masks expanded to token-level matrices.

Token groups, in sequence order: fine-identity tokens, coarse-identity
tokens, text tokens, first-frame video tokens, remaining-frame video tokens.
A design is a 5x5 boolean attend matrix (row = query group, column = key
group) expanded to an additive token mask of {0, LARGE_NEG}.

Named designs:
  A  video and text never read the identity tokens (plain text-to-video;
     the identity island cannot influence the generated video at any depth)
  B  identity tokens cannot read frame 1; frame 1 reads identity tokens;
     remaining frames do not read identity tokens directly
  C  preset reconstruction: every frame reads identity tokens, identity
     tokens read no frames
  D  preset reconstruction: only frame 1 reads identity tokens, identity
     tokens read frame 1
  E  everything attends to everything
Designs C and D are figure-only in origin and shipped as labeled preset
matrices; CUSTOM takes an explicit matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import LARGE_NEG

FINE, COARSE, TEXT, FRAME_1, FRAME_REST = range(5)
GROUP_NAMES = ("FINE", "COARSE", "TEXT", "FRAME_1", "FRAME_REST")

DESIGNS = ("A", "B", "C", "D", "E", "CUSTOM")

_DESIGN_MATRICES: dict[str, np.ndarray] = {
    "A": np.array(
        [
            [1, 1, 0, 0, 0],
            [1, 1, 0, 0, 0],
            [0, 0, 1, 1, 1],
            [0, 0, 1, 1, 1],
            [0, 0, 1, 1, 1],
        ],
        dtype=bool,
    ),
    "B": np.array(
        [
            [1, 1, 1, 0, 1],
            [1, 1, 1, 0, 1],
            [1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1],
            [0, 0, 1, 1, 1],
        ],
        dtype=bool,
    ),
    "C": np.array(
        [
            [1, 1, 1, 0, 0],
            [1, 1, 1, 0, 0],
            [1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1],
        ],
        dtype=bool,
    ),
    "D": np.array(
        [
            [1, 1, 1, 1, 0],
            [1, 1, 1, 1, 0],
            [1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1],
            [0, 0, 1, 1, 1],
        ],
        dtype=bool,
    ),
    "E": np.ones((5, 5), dtype=bool),
}


class MaskDesignError(ValueError):
    """Attend matrix violates a structural invariant."""


@dataclass(frozen=True)
class TokenLayout:
    """Token counts per group and the model width."""

    n_fine: int = 4
    n_coarse: int = 1
    n_text: int = 8
    frames: int = 8
    tokens_per_frame: int = 16
    d_model: int = 64

    def __post_init__(self):
        for name in ("n_fine", "n_coarse", "n_text", "frames", "tokens_per_frame", "d_model"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def n_video(self) -> int:
        return self.frames * self.tokens_per_frame

    @property
    def total_tokens(self) -> int:
        return self.n_fine + self.n_coarse + self.n_text + self.n_video

    def group_ids(self) -> np.ndarray:
        """Group index of every token in sequence order."""
        p = self.tokens_per_frame
        return np.concatenate(
            [
                np.full(self.n_fine, FINE),
                np.full(self.n_coarse, COARSE),
                np.full(self.n_text, TEXT),
                np.full(p, FRAME_1),
                np.full((self.frames - 1) * p, FRAME_REST),
            ]
        ).astype(np.int64)

    def group_slice(self, group: int) -> slice:
        """Token index range of a group."""
        p = self.tokens_per_frame
        bounds = np.cumsum([0, self.n_fine, self.n_coarse, self.n_text, p, (self.frames - 1) * p])
        return slice(int(bounds[group]), int(bounds[group + 1]))

    @property
    def video_slice(self) -> slice:
        start = self.n_fine + self.n_coarse + self.n_text
        return slice(start, start + self.n_video)


def _validate_attend(attend: np.ndarray) -> np.ndarray:
    attend = np.asarray(attend, dtype=bool)
    if attend.shape != (5, 5):
        raise MaskDesignError(f"attend matrix must be 5x5, got {attend.shape}")
    if not np.all(np.diag(attend)):
        raise MaskDesignError("every group must attend to itself")
    if not (attend[FRAME_1, FRAME_REST] and attend[FRAME_REST, FRAME_1]):
        raise MaskDesignError("video groups must mutually attend")
    return attend


@dataclass(frozen=True)
class SelectiveMask:
    """A named design or a validated custom group attend matrix."""

    design: str
    attend: np.ndarray

    @classmethod
    def from_design(cls, design: str, custom_attend: np.ndarray | None = None) -> "SelectiveMask":
        design = design.upper()
        if design not in DESIGNS:
            raise MaskDesignError(f"unknown design {design!r}, expected one of {DESIGNS}")
        if design == "CUSTOM":
            if custom_attend is None:
                raise MaskDesignError("design CUSTOM requires an attend matrix")
            return cls(design="CUSTOM", attend=_validate_attend(custom_attend))
        return cls(design=design, attend=_DESIGN_MATRICES[design].copy())


def build_mask(design: str | SelectiveMask, layout: TokenLayout, custom_attend: np.ndarray | None = None) -> np.ndarray:
    """Expand a group attend matrix to a token-level additive mask.

    Returns (total_tokens, total_tokens) with 0 for allowed query->key pairs
    and LARGE_NEG for disallowed ones.
    """
    sel = design if isinstance(design, SelectiveMask) else SelectiveMask.from_design(design, custom_attend)
    gids = layout.group_ids()
    allowed = sel.attend[np.ix_(gids, gids)]
    return np.where(allowed, 0.0, LARGE_NEG)
