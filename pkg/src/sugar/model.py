"""Conditional diffusion transformer over identity/text/video token groups.

Per-stream input projections map fine-identity, coarse-identity, text, and
video-patch embeddings to a shared width; the concatenated sequence (plus
learned positional and timestep embeddings) runs through pre-norm attention
blocks under a selective token mask, and a linear head maps the video tokens
back to patch pixels as the noise prediction. Identity and text token
outputs are discarded.

A stream passed as None is substituted by that stream's learned null
embedding, which is how both condition dropout during training and the
unconditional branches of guidance are realized.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .masks import SelectiveMask, TokenLayout, build_mask
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Shape and wiring of the transformer; layers must be even."""

    frames: int = 8
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    d_model: int = 64
    layers: int = 4
    heads: int = 4
    n_fine: int = 4
    n_coarse: int = 1
    n_text: int = 8
    d_fine: int = 32
    d_coarse: int = 8
    d_text: int = 16
    design: str = "B"
    custom_attend: tuple | None = None
    timesteps: int = 1000

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")

    @property
    def tokens_per_frame(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def layout(self) -> TokenLayout:
        return TokenLayout(
            n_fine=self.n_fine,
            n_coarse=self.n_coarse,
            n_text=self.n_text,
            frames=self.frames,
            tokens_per_frame=self.tokens_per_frame,
            d_model=self.d_model,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.custom_attend is not None:
            d["custom_attend"] = [list(map(int, row)) for row in self.custom_attend]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("custom_attend") is not None:
            d["custom_attend"] = tuple(tuple(bool(v) for v in row) for row in d["custom_attend"])
        return cls(**d)


def patchify(video: np.ndarray, patch_size: int) -> np.ndarray:
    """(F, H, W, C) -> (F, P, patch_size*patch_size*C), row-major patch grid."""
    f, h, w, c = video.shape
    gh, gw = h // patch_size, w // patch_size
    x = video.reshape(f, gh, patch_size, gw, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(f, gh * gw, patch_size * patch_size * c))


def unpatchify(patches: np.ndarray, patch_size: int, image_size: int, channels: int) -> np.ndarray:
    """Exact inverse of `patchify`."""
    f = patches.shape[0]
    gh = gw = image_size // patch_size
    x = patches.reshape(f, gh, gw, patch_size, patch_size, channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(f, image_size, image_size, channels))


class SugarModel:
    """Transformer denoiser with selective attention and learned null streams."""

    def __init__(self, config: ModelConfig, rng: Rng | int = 0):
        if isinstance(rng, int):
            rng = Rng(rng)
        self.config = config
        layout = config.layout
        self.mask = build_mask(
            SelectiveMask.from_design(config.design, _attend_array(config.custom_attend)), layout
        )
        self.frozen: set[str] = set()
        d = config.d_model
        init = rng.child("init")

        def w(name: str, shape: tuple[int, ...], scale: float = 0.02) -> None:
            self.params[name] = Tensor(init.normal(shape, scale=scale), requires_grad=True)

        def zeros(name: str, shape: tuple[int, ...]) -> None:
            self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name: str, shape: tuple[int, ...]) -> None:
            self.params[name] = Tensor(np.ones(shape), requires_grad=True)

        self.params: dict[str, Tensor] = {}
        for stream, din in (("fine", config.d_fine), ("coarse", config.d_coarse),
                            ("text", config.d_text), ("patch", config.patch_dim)):
            w(f"proj.{stream}.w", (din, d))
            zeros(f"proj.{stream}.b", (d,))
        w("null.fine", (config.n_fine, config.d_fine))
        w("null.coarse", (config.n_coarse, config.d_coarse))
        w("null.text", (config.n_text, config.d_text))
        w("emb.time", (config.timesteps, d))
        w("emb.pos", (layout.total_tokens, d))
        for i in range(1, config.layers + 1):
            ones(f"block{i}.ln1.g", (d,))
            zeros(f"block{i}.ln1.b", (d,))
            for proj in ("wq", "wk", "wv", "wo"):
                w(f"block{i}.attn.{proj}", (d, d))
            for bias in ("bq", "bk", "bv", "bo"):
                zeros(f"block{i}.attn.{bias}", (d,))
            ones(f"block{i}.ln2.g", (d,))
            zeros(f"block{i}.ln2.b", (d,))
            w(f"block{i}.mlp.w1", (d, 4 * d))
            zeros(f"block{i}.mlp.b1", (4 * d,))
            w(f"block{i}.mlp.w2", (4 * d, d))
            zeros(f"block{i}.mlp.b2", (d,))
        ones("final.ln.g", (d,))
        zeros("final.ln.b", (d,))
        w("head.w", (d, config.patch_dim))
        zeros("head.b", (config.patch_dim,))

    # -- parameter plumbing ----------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        T.zero_grad(self.params)

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # -- forward -----------------------------------------------------------------

    def _stream(self, value, null_name: str, expected: tuple[int, int], what: str) -> Tensor:
        if value is None:
            return self._p(null_name)
        t = value if isinstance(value, Tensor) else Tensor(value)
        if t.shape != expected:
            raise T.ShapeError(f"{what} shape {t.shape}, expected {expected}")
        return t

    def _project(self, stream_name: str, xs: Tensor) -> Tensor:
        # (B, n, din) @ (din, d) via a flattened 2-D matmul
        b, n, din = xs.shape
        w, bias = self._p(f"proj.{stream_name}.w"), self._p(f"proj.{stream_name}.b")
        flat = T.matmul(T.reshape(xs, (b * n, din)), w)
        return T.reshape(T.add(flat, bias), (b, n, w.shape[1]))

    def forward_batch(self, x_ts, ts, e_fines, e_coarses, e_texts) -> Tensor:
        """Batched noise prediction.

        x_ts: (B, frames*tokens_per_frame, patch_dim); ts: B ints; each
        condition list holds per-sample embeddings or None (null stream).
        """
        cfg = self.config
        layout = cfg.layout
        x = x_ts if isinstance(x_ts, Tensor) else Tensor(x_ts)
        bsz = x.shape[0]
        if x.shape != (bsz, layout.n_video, cfg.patch_dim):
            raise T.ShapeError(f"x_ts shape {x.shape}")
        ts = [int(t) for t in ts]
        for t in ts:
            if not (0 <= t < cfg.timesteps):
                raise ValueError(f"t={t} outside [0, {cfg.timesteps})")
        if not (len(ts) == len(e_fines) == len(e_coarses) == len(e_texts) == bsz):
            raise T.ShapeError("batch length mismatch")

        def stack(values, null_name: str, expected: tuple[int, int], what: str) -> Tensor:
            rows = [self._stream(v, null_name, expected, what) for v in values]
            return T.concat([T.reshape(r, (1,) + expected) for r in rows], axis=0)

        fine = stack(e_fines, "null.fine", (cfg.n_fine, cfg.d_fine), "e_fine")
        coarse = stack(e_coarses, "null.coarse", (cfg.n_coarse, cfg.d_coarse), "e_coarse")
        text = stack(e_texts, "null.text", (cfg.n_text, cfg.d_text), "e_text")

        h = T.concat(
            [
                self._project("fine", fine),
                self._project("coarse", coarse),
                self._project("text", text),
                self._project("patch", x),
            ],
            axis=1,
        )
        h = T.add(h, self._p("emb.pos"))
        time_rows = T.embedding_lookup(self._p("emb.time"), ts)
        h = T.add(h, T.reshape(time_rows, (bsz, 1, cfg.d_model)))

        n_tok, d = layout.total_tokens, cfg.d_model
        for i in range(1, cfg.layers + 1):
            pre = T.layer_norm(h, self._p(f"block{i}.ln1.g"), self._p(f"block{i}.ln1.b"))
            flat = T.reshape(pre, (bsz * n_tok, d))
            q = T.reshape(T.add(T.matmul(flat, self._p(f"block{i}.attn.wq")), self._p(f"block{i}.attn.bq")), (bsz, n_tok, d))
            k = T.reshape(T.add(T.matmul(flat, self._p(f"block{i}.attn.wk")), self._p(f"block{i}.attn.bk")), (bsz, n_tok, d))
            v = T.reshape(T.add(T.matmul(flat, self._p(f"block{i}.attn.wv")), self._p(f"block{i}.attn.bv")), (bsz, n_tok, d))
            att = T.masked_attention(q, k, v, self.mask, cfg.heads)
            att_flat = T.matmul(T.reshape(att, (bsz * n_tok, d)), self._p(f"block{i}.attn.wo"))
            att = T.reshape(T.add(att_flat, self._p(f"block{i}.attn.bo")), (bsz, n_tok, d))
            h = T.add(h, att)
            pre2 = T.layer_norm(h, self._p(f"block{i}.ln2.g"), self._p(f"block{i}.ln2.b"))
            mid = T.gelu(T.add(T.matmul(T.reshape(pre2, (bsz * n_tok, d)), self._p(f"block{i}.mlp.w1")), self._p(f"block{i}.mlp.b1")))
            out = T.reshape(T.add(T.matmul(mid, self._p(f"block{i}.mlp.w2")), self._p(f"block{i}.mlp.b2")), (bsz, n_tok, d))
            h = T.add(h, out)

        vid = T.slice_axis(h, 1, layout.video_slice.start, layout.video_slice.stop)
        vid = T.layer_norm(vid, self._p("final.ln.g"), self._p("final.ln.b"))
        eps_flat = T.add(T.matmul(T.reshape(vid, (bsz * layout.n_video, d)), self._p("head.w")), self._p("head.b"))
        return T.reshape(eps_flat, (bsz, layout.n_video, cfg.patch_dim))

    def forward(self, x_t, t: int, e_fine=None, e_coarse=None, e_text=None) -> Tensor:
        """Noise prediction over video tokens; conditions may be None (null)."""
        cfg = self.config
        layout = cfg.layout
        x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        in_shape = x.shape
        framed = in_shape == (cfg.frames, cfg.tokens_per_frame, cfg.patch_dim)
        if framed:
            x = T.reshape(x, (layout.n_video, cfg.patch_dim))
        elif in_shape != (layout.n_video, cfg.patch_dim):
            raise T.ShapeError(f"x_t shape {in_shape}")
        eps = self.forward_batch(
            T.reshape(x, (1, layout.n_video, cfg.patch_dim)), [t], [e_fine], [e_coarse], [e_text]
        )
        eps = T.reshape(eps, in_shape if framed else (layout.n_video, cfg.patch_dim))
        return eps

    def predict(self, x_t, t: int, e_fine=None, e_coarse=None, e_text=None) -> np.ndarray:
        """Graph-free forward for sampling and evaluation."""
        with T.no_grad():
            return self.forward(x_t, t, e_fine, e_coarse, e_text).data

    def predict_batch(self, x_ts, ts, e_fines, e_coarses, e_texts) -> np.ndarray:
        """Graph-free batched forward."""
        with T.no_grad():
            return self.forward_batch(x_ts, ts, e_fines, e_coarses, e_texts).data

    # -- freezing ----------------------------------------------------------------

    def freeze_first_half(self) -> set[str]:
        """Freeze input-side parameters and blocks 1..L/2; returns the name set.

        Requires an even layer count so "first half" is well defined.
        """
        if self.config.layers % 2 != 0:
            raise ValueError("freeze_first_half needs an even layer count")
        half = self.config.layers // 2
        prefixes = ["proj.", "null.", "emb."] + [f"block{i}." for i in range(1, half + 1)]
        frozen = {n for n in self.params if any(n.startswith(p) for p in prefixes)}
        self.frozen = frozen
        return set(frozen)

    def unfreeze_all(self) -> None:
        self.frozen = set()

    # -- persistence ---------------------------------------------------------------

    def save(self, path) -> None:
        """Write parameters to `path` and the config sidecar to `path + '.json'`."""
        T.write_tensors(path, {n: p.data for n, p in self.params.items()})
        sidecar = {"config": self.config.to_dict(), "frozen": sorted(self.frozen)}
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SugarModel":
        with open(str(path) + ".json", "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        model = cls(ModelConfig.from_dict(sidecar["config"]), rng=Rng(0))
        arrays = T.read_tensors(path)
        if set(arrays) != set(model.params):
            missing = set(model.params) ^ set(arrays)
            raise ValueError(f"checkpoint parameter names mismatch: {sorted(missing)[:5]}")
        for name, arr in arrays.items():
            if arr.shape != model.params[name].shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            model.params[name] = Tensor(arr, requires_grad=True)
        model.frozen = set(sidecar.get("frozen", []))
        return model


def _attend_array(custom_attend) -> np.ndarray | None:
    if custom_attend is None:
        return None
    return np.asarray(custom_attend, dtype=bool)
