"""Procedural sprite subjects, prompt templates, and prompt parsing.

Images are float64 RGB in [0, 1] at 16x16. A subject is a shape mask filled
with a palette color; the identity image is the same sprite on an exactly
zero background. Prompts are rendered from structured attributes through a
fixed template list and can be parsed back exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .rng import Rng

IMAGE_SIZE = 16
CHANNELS = 3

# fill values capped at 0.8 so the +25% texture tone never clips
PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.8, 0.08, 0.08),
    "green": (0.08, 0.8, 0.08),
    "blue": (0.08, 0.08, 0.8),
    "yellow": (0.8, 0.8, 0.08),
    "magenta": (0.8, 0.08, 0.8),
    "cyan": (0.08, 0.8, 0.8),
    "orange": (0.8, 0.44, 0.08),
    "purple": (0.44, 0.08, 0.8),
}

BACKGROUNDS: dict[str, tuple[float, float, float]] = {
    **PALETTE,
    "black": (0.02, 0.02, 0.02),
    "white": (0.98, 0.98, 0.98),
    "gray": (0.5, 0.5, 0.5),
}

SHAPES = ("circle", "square", "triangle", "star")

# subject nouns; "thing" is the appearance-neutral noun used at evaluation
SHAPE_NOUNS = {"circle": "ball", "square": "box", "triangle": "cone", "star": "star"}
NOUNS = ("ball", "box", "cone", "star", "thing")

TEXTURES = ("solid", "striped", "dotted")
STYLES = ("vivid", "muted")
MOTIONS = (
    "sliding left",
    "sliding right",
    "sliding up",
    "sliding down",
    "bouncing",
    "spinning",
    "standing still",
)
# motions eligible for synthetic-template sampling: no "standing still"
# (static clips come only from the lazy-generator rate) and no "spinning"
# (choppy toy rotation fails the consistency filter by design)
TEMPLATE_MOTIONS = ("sliding left", "sliding right", "sliding up", "sliding down", "bouncing")


def _grid() -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(IMAGE_SIZE, dtype=np.float64)
    return np.meshgrid(idx, idx, indexing="ij")


def shape_mask(shape: str) -> np.ndarray:
    """Boolean 16x16 support mask for a canonical centered shape.

    Shapes are sized so their silhouette boundaries occupy distinct radii:
    at this resolution similarly-sized convex blobs would have near-identical
    boundary maps.
    """
    y, x = _grid()
    cy = cx = (IMAGE_SIZE - 1) / 2.0
    dy, dx = y - cy, x - cx
    if shape == "circle":
        return dy * dy + dx * dx <= 3.2 ** 2
    if shape == "square":
        return (np.abs(dy) <= 5.2) & (np.abs(dx) <= 5.2)
    if shape == "triangle":
        # apex up: row widens from the top
        top, height = 2.0, 11.0
        half = np.clip((y - top) / height, 0.0, 1.0) * 5.8
        return (y >= top) & (y <= top + height) & (np.abs(dx) <= half)
    if shape == "star":
        # four-pointed star: two thin crossing diamonds
        a = np.abs(dx) + 3.2 * np.abs(dy) <= 7.2
        b = np.abs(dy) + 3.2 * np.abs(dx) <= 7.2
        return a | b
    raise ValueError(f"unknown shape {shape!r}")


@dataclass(frozen=True)
class SubjectSpec:
    """A subject: shape, fill color (palette values in [0,1]), noun label."""

    shape: str
    color: str
    label: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in PALETTE:
            raise ValueError(f"unknown color {self.color!r}")


def random_subject(rng: Rng) -> SubjectSpec:
    shape = rng.choice(SHAPES)
    return SubjectSpec(shape=shape, color=rng.choice(sorted(PALETTE)), label=SHAPE_NOUNS[shape])


def paint_sprite(mask: np.ndarray, fill: tuple[float, float, float], texture: str = "solid") -> np.ndarray:
    """Render the masked sprite on a zero background with a texture pattern.

    Textures alternate tones at 0.75x/1.25x of the fill so the mean over the
    pattern stays at the fill color.
    """
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, CHANNELS))
    fill_arr = np.asarray(fill)
    y, x = _grid()
    if texture == "solid":
        tone = np.ones((IMAGE_SIZE, IMAGE_SIZE))
    elif texture == "striped":
        tone = np.where(y.astype(int) % 2 == 0, 1.25, 0.75)
    elif texture == "dotted":
        tone = np.where((y.astype(int) + x.astype(int)) % 2 == 0, 1.25, 0.75)
    else:
        raise ValueError(f"unknown texture {texture!r}")
    img[mask] = tone[mask, None] * fill_arr
    return np.clip(img, 0.0, 1.0)


def render_subject(spec: SubjectSpec, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Subject image on a random background, and the zero-background identity image."""
    mask = shape_mask(spec.shape)
    z = paint_sprite(mask, PALETTE[spec.color])
    bg_name = spec.color
    while bg_name == spec.color:
        bg_name = rng.choice(sorted(BACKGROUNDS))
    s = np.empty_like(z)
    s[:] = np.asarray(BACKGROUNDS[bg_name])
    s[mask] = z[mask]
    return s, z


# -----------------------------------------------------------------------------
# Prompts
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptAttrs:
    """Structured content of a prompt; None means the slot is absent."""

    subject: str
    background: str
    motion: str
    color: str | None = None
    texture: str | None = None  # "striped" | "dotted" (solid is unspoken)
    style: str | None = None  # "vivid" | "muted"


class PromptError(ValueError):
    """Prompt token sequence does not match the template grammar."""


_TEXTURE_WORDS = {"striped": "stripes", "dotted": "dots"}
_WORD_TEXTURES = {w: t for t, w in _TEXTURE_WORDS.items()}


def render_prompt(attrs: PromptAttrs) -> list[str]:
    """Token sequence for a structured prompt."""
    if attrs.background not in BACKGROUNDS:
        raise PromptError(f"unknown background {attrs.background!r}")
    if attrs.motion not in MOTIONS:
        raise PromptError(f"unknown motion {attrs.motion!r}")
    tokens = ["a"]
    if attrs.style:
        tokens.append(attrs.style)
    if attrs.color:
        tokens.append(attrs.color)
    tokens.append(attrs.subject)
    if attrs.texture:
        tokens += ["made", "of", _TEXTURE_WORDS[attrs.texture]]
    tokens += ["on", "a", attrs.background, "background"]
    tokens += attrs.motion.split()
    return tokens


def parse_prompt(tokens: list[str]) -> PromptAttrs:
    """Invert `render_prompt`; raises PromptError on malformed input."""
    toks = [t.lower().strip(",.") for t in tokens]
    try:
        bg_pos = toks.index("background")
    except ValueError as exc:
        raise PromptError("prompt has no background clause") from exc
    if bg_pos < 1 or toks[bg_pos - 1] not in BACKGROUNDS:
        raise PromptError("background clause names no known color")
    background = toks[bg_pos - 1]
    motion = None
    for m in MOTIONS:
        parts = m.split()
        for i in range(bg_pos, len(toks) - len(parts) + 1):
            if toks[i : i + len(parts)] == parts:
                motion = m
                break
        if motion:
            break
    if motion is None:
        raise PromptError("prompt has no known motion clause")
    head = toks[: bg_pos - 2]  # up to "on a"
    style = next((w for w in head if w in STYLES), None)
    color = next((w for w in head if w in PALETTE), None)
    subject = next((w for w in head if w in NOUNS), None)
    if subject is None:
        raise PromptError("prompt names no known subject noun")
    texture = next((_WORD_TEXTURES[w] for w in head if w in _WORD_TEXTURES), None)
    return PromptAttrs(
        subject=subject, background=background, motion=motion,
        color=color, texture=texture, style=style,
    )


# fixed template list: which attribute slots each template fills
TEMPLATES: tuple[tuple[str, ...], ...] = (
    ("color", "texture", "background", "motion"),
    ("color", "background", "motion"),
    ("style", "color", "texture", "background", "motion"),
    ("background", "motion"),
)


def sample_prompt(spec: SubjectSpec, rng: Rng) -> PromptAttrs:
    """Draw a template and fill its slots; the subject noun matches the spec."""
    slots = rng.choice(TEMPLATES)
    color = rng.choice(sorted(PALETTE)) if "color" in slots else None
    texture = rng.choice(["striped", "dotted"]) if "texture" in slots else None
    style = rng.choice(list(STYLES)) if "style" in slots else None
    background = spec.color
    while background == (color or spec.color):
        background = rng.choice(sorted(BACKGROUNDS))
    motion = rng.choice(TEMPLATE_MOTIONS)
    return PromptAttrs(
        subject=spec.label, background=background, motion=motion,
        color=color, texture=texture, style=style,
    )


def vocabulary() -> list[str]:
    """Every word that can appear in a rendered prompt."""
    words = {"a", "made", "of", "on", "background"}
    words.update(NOUNS)
    words.update(PALETTE)
    words.update(BACKGROUNDS)
    words.update(_TEXTURE_WORDS.values())
    words.update(STYLES)
    for m in MOTIONS:
        words.update(m.split())
    return sorted(words)
