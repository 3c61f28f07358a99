"""Deterministic toy embedders for identity, style, text, and image-text space.

All embedders return unit vectors and are pure functions of their input.
The fine embedder is identity-sensitive: it sees the silhouette boundary of
the sprite (translation-normalized by centroid) plus a weaker mean-color
term, so shape changes move the embedding far while prompted color/texture
changes keep it close. The coarse embedder is an 8-bin color histogram.
The joint embedder maps images and prompt tokens into one attribute space
for text-alignment scoring.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sprites
from .rng import Rng
from .sprites import IMAGE_SIZE, PALETTE, BACKGROUNDS, STYLES, MOTIONS, PromptAttrs, parse_prompt

_CENTER = (IMAGE_SIZE - 1) / 2.0

# fine-feature mix: silhouette boundary dominates, mean color breaks ties
_W_SHAPE = np.sqrt(0.7)
_W_COLOR = np.sqrt(0.3)


def estimate_background(img: np.ndarray) -> np.ndarray:
    """Per-channel median of the border ring."""
    border = np.concatenate([img[0, :], img[-1, :], img[1:-1, 0], img[1:-1, -1]], axis=0)
    return np.median(border, axis=0)


def sprite_support(img: np.ndarray, threshold: float = 0.15) -> np.ndarray:
    """Pixels whose max-channel distance from the border background exceeds the threshold."""
    bg = estimate_background(img)
    dist = np.abs(img - bg).max(axis=-1)
    return dist > threshold


def support_centroid(support: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(support)
    if ys.size == 0:
        return _CENTER, _CENTER
    return float(ys.mean()), float(xs.mean())


def center_on_support(img: np.ndarray, support: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integer-roll image and support so the support centroid sits at the center."""
    cy, cx = support_centroid(support)
    dy, dx = int(round(_CENTER - cy)), int(round(_CENTER - cx))
    return np.roll(img, (dy, dx), axis=(0, 1)), np.roll(support, (dy, dx), axis=(0, 1))


def boundary_map(support: np.ndarray) -> np.ndarray:
    """Support pixels with at least one 4-neighbor off the support."""
    interior = support.copy()
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        interior &= np.roll(support, shift, axis=axis)
    return support & ~interior


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


class FineEmbedder:
    """Identity embedding: centroid-centered silhouette boundary + mean fill color."""

    dim = IMAGE_SIZE * IMAGE_SIZE + 3

    def __init__(self, n_tokens: int = 4, token_dim: int = 32, seed: int = 101):
        self.n_tokens = n_tokens
        self.token_dim = token_dim
        rng = Rng(seed).child("fine-projection")
        self._proj = rng.normal((n_tokens * token_dim, self.dim)) / np.sqrt(self.dim)

    def features(self, img: np.ndarray) -> np.ndarray:
        support = sprite_support(img)
        centered_img, centered_sup = center_on_support(img, support)
        edge = boundary_map(centered_sup).astype(np.float64).ravel()
        if support.any():
            color = centered_img[centered_sup].mean(axis=0)
        else:
            color = np.zeros(3)
        return np.concatenate([_W_SHAPE * _unit(edge), _W_COLOR * _unit(color)])

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        return _unit(self.features(img))

    def image_tokens(self, img: np.ndarray) -> np.ndarray:
        """(n_tokens, token_dim) conditioning rows, each unit-normalized."""
        flat = self._proj @ self.features(img)
        tokens = flat.reshape(self.n_tokens, self.token_dim)
        norms = np.linalg.norm(tokens, axis=1, keepdims=True)
        return tokens / np.where(norms > 0, norms, 1.0)


class CoarseEmbedder:
    """Style-coarse embedding: unit-normalized 8-bin color histogram."""

    dim = 8

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        bits = (img > 0.5).astype(np.int64)
        bins = bits[..., 0] * 4 + bits[..., 1] * 2 + bits[..., 2]
        hist = np.bincount(bins.ravel(), minlength=8).astype(np.float64)
        return _unit(hist)

    def image_tokens(self, img: np.ndarray) -> np.ndarray:
        return self.embed_image(img)[None, :]


class TextTokenEmbedder:
    """Model-facing text stream: fixed random unit row per vocabulary word."""

    def __init__(self, n_tokens: int = 8, token_dim: int = 16, seed: int = 202):
        self.n_tokens = n_tokens
        self.token_dim = token_dim
        words = sprites.vocabulary()
        rng = Rng(seed).child("text-table")
        table = rng.normal((len(words) + 2, token_dim))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        self._rows = {w: table[i] for i, w in enumerate(words)}
        self._pad = table[len(words)]
        self._unk = table[len(words) + 1]

    def text_tokens(self, tokens: list[str]) -> np.ndarray:
        rows = [self._rows.get(t.lower().strip(",."), self._unk) for t in tokens[: self.n_tokens]]
        while len(rows) < self.n_tokens:
            rows.append(self._pad)
        return np.stack(rows)


class JointEmbedder:
    """Shared image/text attribute space: color, texture, style, background, motion.

    Image attributes are detected from pixels (exact on the procedural
    renders); text attributes come from prompt parsing. Both sides emit a
    unit multi-hot vector, so cosine measures attribute agreement.
    """

    def __init__(self):
        self._colors = sorted(PALETTE)
        self._textures = list(sprites.TEXTURES)
        self._styles = list(STYLES)
        self._backgrounds = sorted(BACKGROUNDS)
        self._motions = list(MOTIONS)
        self._offsets = {}
        pos = 0
        for name, vocab in (
            ("color", self._colors),
            ("texture", self._textures),
            ("style", self._styles),
            ("background", self._backgrounds),
            ("motion", self._motions),
        ):
            self._offsets[name] = pos
            pos += len(vocab)
        self.dim = pos

    def _hot(self, slot: str, vocab: list[str], value: str) -> np.ndarray:
        v = np.zeros(self.dim)
        v[self._offsets[slot] + vocab.index(value)] = 1.0
        return v

    def embed_text(self, tokens: list[str]) -> np.ndarray:
        attrs = parse_prompt(tokens)
        v = np.zeros(self.dim)
        if attrs.color:
            v += self._hot("color", self._colors, attrs.color)
        if attrs.texture:
            v += self._hot("texture", self._textures, attrs.texture)
        if attrs.style:
            v += self._hot("style", self._styles, attrs.style)
        v += self._hot("background", self._backgrounds, attrs.background)
        v += self._hot("motion", self._motions, attrs.motion)
        return _unit(v)

    def detect_attrs(self, img: np.ndarray) -> dict[str, str]:
        """Best-guess color/texture/style/background of a rendered image."""
        bg = estimate_background(img)
        bg_name = min(self._backgrounds, key=lambda n: np.abs(np.asarray(BACKGROUNDS[n]) - bg).max())
        support = sprite_support(img)
        if not support.any():
            return {"color": self._colors[0], "texture": "solid", "style": "vivid", "background": bg_name}
        fg = img[support]
        mean = fg.mean(axis=0)
        best, style = None, "vivid"
        best_d = np.inf
        for name in self._colors:
            base = np.asarray(PALETTE[name])
            for st, cand in (("vivid", base), ("muted", 0.5 * base + 0.25)):
                d = np.abs(cand - mean).max()
                if d < best_d:
                    best_d, best, style = d, name, st
        dev = fg.mean(axis=1) - fg.mean()
        if np.abs(dev).max() < 0.04:
            texture = "solid"
        else:
            rows = np.nonzero(support)[0]
            row_means = [dev[rows == r].mean() for r in np.unique(rows)]
            coherence = np.mean(np.abs(row_means)) / np.mean(np.abs(dev))
            texture = "striped" if coherence > 0.5 else "dotted"
        return {"color": best, "texture": texture, "style": style, "background": bg_name}

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        got = self.detect_attrs(img)
        v = self._hot("color", self._colors, got["color"])
        v += self._hot("texture", self._textures, got["texture"])
        v += self._hot("style", self._styles, got["style"])
        v += self._hot("background", self._backgrounds, got["background"])
        return _unit(v)


@dataclass
class EmbedderBundle:
    """The full set used by the pipeline, training, sampling, and metrics."""

    fine: FineEmbedder
    coarse: CoarseEmbedder
    text: TextTokenEmbedder
    joint: JointEmbedder


def default_embedders(n_fine: int = 4, d_fine: int = 32, n_text: int = 8, d_text: int = 16) -> EmbedderBundle:
    return EmbedderBundle(
        fine=FineEmbedder(n_tokens=n_fine, token_dim=d_fine),
        coarse=CoarseEmbedder(),
        text=TextTokenEmbedder(n_tokens=n_text, token_dim=d_text),
        joint=JointEmbedder(),
    )
