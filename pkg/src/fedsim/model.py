"""Dual-scale transformer student with LoRA-adapted encoder attention.

Pipeline per Figure-2-style design: two patch embeddings (fine P1, coarse
P2), each prepended with learned classification (CT) and distillation (DT)
tokens plus a positional table; the fine sequence passes a local-window
attention stage (patch tokens attend within w x w windows, CT/DT attend
globally) and the coarse sequence a global self-attention stage, both as
attention + residual only; each branch then runs `depth` pre-norm encoder
blocks whose Q and K projections carry LoRA adapters (base weights frozen);
finally each branch's CT token cross-attends over the other branch's patch
tokens through a single-head linear cross-attention unit, the two fused
vectors are concatenated through a small MLP, and a linear classifier emits
the logits.

Only the LoRA A/B factors are trainable in student mode. A and B are the
whole federation payload; everything else is reconstructible from (config,
seed), which is what the config fingerprint certifies.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .rand import substream
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_small: int = 16
    patch_large: int = 32
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    window: int = 7
    channels: int = 3
    num_classes: int = 7
    lora_rank: int = 4
    lora_alpha: float = 4.0
    lora_dropout: float = 0.2
    ffn_hidden: int = 0  # 0 means head_dim

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def grid_small(self) -> int:
        return self.image_size // self.patch_small

    @property
    def grid_large(self) -> int:
        return self.image_size // self.patch_large

    @property
    def tokens_small(self) -> int:
        return self.grid_small ** 2

    @property
    def tokens_large(self) -> int:
        return self.grid_large ** 2

    @property
    def ffn_dim(self) -> int:
        return self.ffn_hidden if self.ffn_hidden else self.head_dim

    def validate(self) -> None:
        if self.image_size < 1 or self.channels < 1 or self.num_classes < 2:
            raise ConfigError("image_size/channels/num_classes out of range")
        if self.image_size % self.patch_small or self.image_size % self.patch_large:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch sizes "
                f"{self.patch_small}/{self.patch_large}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.window < 1 or self.grid_small % self.window:
            raise ConfigError(
                f"window {self.window} must divide the fine token grid side {self.grid_small}")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.lora_rank > self.head_dim:
            raise ConfigError(f"lora_rank {self.lora_rank} exceeds head dim {self.head_dim}")
        if self.lora_alpha <= 0:
            raise ConfigError("lora_alpha must be positive")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError("lora_dropout must lie in [0, 1)")

    def canonical(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.canonical().encode("utf-8")).digest()


class DualScaleTransformer:
    def __init__(self, config: ModelConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = seed
        self._params: dict[str, Tensor] = {}
        self._attn_sink: list[np.ndarray] | None = None
        c = config

        for branch, patch, tokens in (("small", c.patch_small, c.tokens_small),
                                      ("large", c.patch_large, c.tokens_large)):
            in_dim = c.channels * patch * patch
            self._add(f"embed_{branch}/proj", (in_dim, c.embed_dim), std=1.0 / math.sqrt(in_dim))
            self._add(f"embed_{branch}/bias", (c.embed_dim,), zero=True)
            # frozen tables never train here, so they must carry a usable
            # position signal from construction; 0.5 sits at token-content scale
            self._add(f"embed_{branch}/pos", (tokens + 2, c.embed_dim), std=0.5)
            self._add(f"embed_{branch}/ct", (c.embed_dim,), std=0.5)
            self._add(f"embed_{branch}/dt", (c.embed_dim,), std=0.5)
            for proj in ("wq", "wk", "wv"):
                self._add(f"pre_{branch}/{proj}", (c.embed_dim, c.embed_dim),
                          std=1.0 / math.sqrt(c.embed_dim))
            for i in range(c.depth):
                base = f"branch_{branch}/{i}"
                self._add(f"{base}/ln1_g", (c.embed_dim,), one=True)
                self._add(f"{base}/ln1_b", (c.embed_dim,), zero=True)
                for proj in ("wq", "wk", "wv", "wo"):
                    self._add(f"{base}/{proj}", (c.embed_dim, c.embed_dim),
                              std=1.0 / math.sqrt(c.embed_dim))
                for p in ("q", "k"):
                    self._add(f"{base}/lora_{p}_a", (c.embed_dim, c.lora_rank), std=0.02)
                    self._add(f"{base}/lora_{p}_b", (c.lora_rank, c.embed_dim), zero=True)
                self._add(f"{base}/ln2_g", (c.embed_dim,), one=True)
                self._add(f"{base}/ln2_b", (c.embed_dim,), zero=True)
                self._add(f"{base}/ffn_w1", (c.embed_dim, c.ffn_dim), std=1.0 / math.sqrt(c.embed_dim))
                self._add(f"{base}/ffn_b1", (c.ffn_dim,), zero=True)
                self._add(f"{base}/ffn_w2", (c.ffn_dim, c.embed_dim), std=1.0 / math.sqrt(c.ffn_dim))
                self._add(f"{base}/ffn_b2", (c.embed_dim,), zero=True)

        for unit in ("cross_small", "cross_large"):
            for proj in ("wq", "wk", "wv"):
                self._add(f"fusion/{unit}/{proj}", (c.embed_dim, c.embed_dim),
                          std=1.0 / math.sqrt(c.embed_dim))
        self._add("fusion/mlp_w", (2 * c.embed_dim, c.embed_dim), std=1.0 / math.sqrt(2 * c.embed_dim))
        self._add("fusion/mlp_b", (c.embed_dim,), zero=True)
        self._add("fusion/head_w", (c.embed_dim, c.num_classes), std=1.0 / math.sqrt(c.embed_dim))
        self._add("fusion/head_b", (c.num_classes,), zero=True)

        self.set_lora_only_trainable()

    # parameter registry -------------------------------------------------

    def _add(self, path: str, shape: tuple[int, ...], std: float | None = None,
             zero: bool = False, one: bool = False) -> None:
        if zero:
            data = np.zeros(shape)
        elif one:
            data = np.ones(shape)
        else:
            # per-path streams make init independent of construction order
            data = substream(self.seed, "init", path).normal(0.0, std, size=shape)
        self._params[path] = Tensor(data)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def lora_paths(self) -> list[str]:
        out = []
        for branch in ("small", "large"):
            for i in range(self.config.depth):
                for p in ("q", "k"):
                    out.append(f"branch_{branch}/{i}/{p}")
        return out

    def lora_parameters(self) -> dict[str, Tensor]:
        out = {}
        for path in self.lora_paths():
            base, proj = path.rsplit("/", 1)
            out[f"{base}/lora_{proj}_a"] = self._params[f"{base}/lora_{proj}_a"]
            out[f"{base}/lora_{proj}_b"] = self._params[f"{base}/lora_{proj}_b"]
        return out

    def base_parameters(self) -> dict[str, Tensor]:
        lora = set(self.lora_parameters())
        return {p: t for p, t in self._params.items() if p not in lora}

    def set_lora_only_trainable(self) -> None:
        lora = set(self.lora_parameters())
        for path, t in self._params.items():
            t.requires_grad = path in lora

    def set_all_trainable(self) -> None:
        for t in self._params.values():
            t.requires_grad = True

    def freeze_all(self) -> None:
        for t in self._params.values():
            t.requires_grad = False

    def lora_state(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Adapter path -> (A, B) copies, insertion-ordered by branch/layer."""
        out = {}
        for path in self.lora_paths():
            base, proj = path.rsplit("/", 1)
            a = self._params[f"{base}/lora_{proj}_a"].data.copy()
            b = self._params[f"{base}/lora_{proj}_b"].data.copy()
            out[path] = (a, b)
        return out

    def load_lora_state(self, adapters: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
        expected = set(self.lora_paths())
        got = set(adapters)
        if expected != got:
            diff = sorted(expected.symmetric_difference(got))
            raise ShapeError(f"adapter key set mismatch at '{diff[0]}'")
        for path, (a, b) in adapters.items():
            base, proj = path.rsplit("/", 1)
            ta = self._params[f"{base}/lora_{proj}_a"]
            tb = self._params[f"{base}/lora_{proj}_b"]
            if a.shape != ta.data.shape or b.shape != tb.data.shape:
                raise ShapeError(f"adapter '{path}' shape mismatch: "
                                 f"{a.shape}/{b.shape} vs {ta.data.shape}/{tb.data.shape}")
            ta.data = np.array(a, dtype=np.float64)
            tb.data = np.array(b, dtype=np.float64)

    def base_checksum(self) -> str:
        h = hashlib.sha256()
        for path in sorted(self.base_parameters()):
            h.update(path.encode("utf-8"))
            h.update(self._params[path].data.tobytes())
        return h.hexdigest()

    def parameter_counts(self) -> tuple[int, int]:
        """(trainable, total) parameter counts."""
        trainable = sum(t.size for t in self._params.values() if t.requires_grad)
        total = sum(t.size for t in self._params.values())
        return trainable, total

    def fingerprint(self) -> bytes:
        return self.config.fingerprint()

    # forward pieces ------------------------------------------------------

    def _patch_embed(self, images: Tensor, branch: str) -> Tensor:
        c = self.config
        patch = c.patch_small if branch == "small" else c.patch_large
        p = self._params
        tokens = T.extract_patches(images, patch) @ p[f"embed_{branch}/proj"]
        tokens = tokens + p[f"embed_{branch}/bias"]
        batch = images.shape[0]
        ct = T.broadcast_to(T.reshape(p[f"embed_{branch}/ct"], (1, 1, c.embed_dim)),
                            (batch, 1, c.embed_dim))
        dt = T.broadcast_to(T.reshape(p[f"embed_{branch}/dt"], (1, 1, c.embed_dim)),
                            (batch, 1, c.embed_dim))
        seq = T.concat([ct, dt, tokens], axis=1)
        return seq + p[f"embed_{branch}/pos"]

    def _mha(self, x_q: Tensor, x_kv: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
             heads: int, wo: Tensor | None = None,
             lora_prefix: str | None = None, train: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
        b, nq, e = x_q.shape
        nk = x_kv.shape[1]
        d = e // heads
        q = x_q @ wq
        k = x_kv @ wk
        if lora_prefix is not None:
            q = q + self._lora_delta(x_q, f"{lora_prefix}/lora_q", train, rng)
            k = k + self._lora_delta(x_kv, f"{lora_prefix}/lora_k", train, rng)
        v = x_kv @ wv
        q = T.transpose(T.reshape(q, (b, nq, heads, d)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, (b, nk, heads, d)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(v, (b, nk, heads, d)), (0, 2, 1, 3))
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d))
        attn = T.softmax_lastdim(scores)
        if self._attn_sink is not None:
            self._attn_sink.append(attn.data.copy())
        ctx = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (b, nq, e))
        if wo is not None:
            ctx = ctx @ wo
        return ctx

    def _lora_delta(self, x: Tensor, prefix: str, train: bool,
                    rng: np.random.Generator | None) -> Tensor:
        c = self.config
        h = x
        if train and c.lora_dropout > 0.0:
            if rng is None:
                raise ConfigError("training forward needs an rng for LoRA dropout")
            h = T.dropout(h, c.lora_dropout, rng)
        return ((h @ self._params[f"{prefix}_a"]) @ self._params[f"{prefix}_b"]) * (
            c.lora_alpha / c.lora_rank)

    def _local_window_attention(self, seq: Tensor) -> Tensor:
        c = self.config
        p = self._params
        b, n2, e = seq.shape
        g, w = c.grid_small, c.window
        nw = g // w
        patches = T.slice_axis(seq, 1, 2, n2)
        grid = T.reshape(patches, (b, nw, w, nw, w, e))
        windows = T.reshape(T.transpose(grid, (0, 1, 3, 2, 4, 5)), (b * nw * nw, w * w, e))
        args = (p["pre_small/wq"], p["pre_small/wk"], p["pre_small/wv"], c.heads)
        out_w = self._mha(windows, windows, *args)
        out_w = T.reshape(out_w, (b, nw, nw, w, w, e))
        out_w = T.reshape(T.transpose(out_w, (0, 1, 3, 2, 4, 5)), (b, g * g, e))
        ctdt = T.slice_axis(seq, 1, 0, 2)
        out_ct = self._mha(ctdt, seq, *args)  # CT/DT see the whole sequence
        return seq + T.concat([out_ct, out_w], axis=1)

    def _global_self_attention(self, seq: Tensor) -> Tensor:
        p = self._params
        out = self._mha(seq, seq, p["pre_large/wq"], p["pre_large/wk"],
                        p["pre_large/wv"], self.config.heads)
        return seq + out

    def _encoder_block(self, x: Tensor, branch: str, index: int, train: bool,
                       rng: np.random.Generator | None) -> Tensor:
        p = self._params
        base = f"branch_{branch}/{index}"
        h = T.layer_norm(x, p[f"{base}/ln1_g"], p[f"{base}/ln1_b"])
        attn = self._mha(h, h, p[f"{base}/wq"], p[f"{base}/wk"], p[f"{base}/wv"],
                         self.config.heads, wo=p[f"{base}/wo"],
                         lora_prefix=base, train=train, rng=rng)
        x = x + attn
        h2 = T.layer_norm(x, p[f"{base}/ln2_g"], p[f"{base}/ln2_b"])
        f = T.gelu(h2 @ p[f"{base}/ffn_w1"] + p[f"{base}/ffn_b1"])
        f = f @ p[f"{base}/ffn_w2"] + p[f"{base}/ffn_b2"]
        return x + f

    def _cross_attention(self, query: Tensor, tokens: Tensor, unit: str) -> Tensor:
        p = self._params
        return self._mha(query, tokens, p[f"fusion/{unit}/wq"], p[f"fusion/{unit}/wk"],
                         p[f"fusion/{unit}/wv"], heads=1)

    def _fuse(self, h_small: Tensor, h_large: Tensor) -> Tensor:
        p = self._params
        b = h_small.shape[0]
        e = self.config.embed_dim
        cls_small = T.slice_axis(h_small, 1, 0, 1)
        cls_large = T.slice_axis(h_large, 1, 0, 1)
        tok_small = T.slice_axis(h_small, 1, 2, h_small.shape[1])
        tok_large = T.slice_axis(h_large, 1, 2, h_large.shape[1])
        z_small = self._cross_attention(cls_small, tok_large, "cross_small")
        z_large = self._cross_attention(cls_large, tok_small, "cross_large")
        fused = T.reshape(T.concat([z_small, z_large], axis=2), (b, 2 * e))
        fused = T.gelu(fused @ p["fusion/mlp_w"] + p["fusion/mlp_b"])
        return fused @ p["fusion/head_w"] + p["fusion/head_b"]

    def forward(self, images: Tensor, train: bool = False,
                rng: np.random.Generator | None = None,
                capture: dict | None = None) -> Tensor:
        c = self.config
        if images.ndim != 4:
            raise ShapeError(f"expected (B, C, H, W) batch, got {images.shape}")
        if images.shape[1:] != (c.channels, c.image_size, c.image_size):
            raise ShapeError(f"batch {images.shape} does not match config "
                             f"({c.channels}, {c.image_size}, {c.image_size})")
        self._attn_sink = capture.get("attention") if capture is not None else None
        try:
            x1 = self._local_window_attention(self._patch_embed(images, "small"))
            small_blocks = []
            for i in range(c.depth):
                x1 = self._encoder_block(x1, "small", i, train, rng)
                small_blocks.append(x1)
            x2 = self._global_self_attention(self._patch_embed(images, "large"))
            for i in range(c.depth):
                x2 = self._encoder_block(x2, "large", i, train, rng)
            if capture is not None:
                capture["small_blocks"] = small_blocks
            return self._fuse(x1, x2)
        finally:
            self._attn_sink = None

    def __call__(self, images: Tensor, **kwargs) -> Tensor:
        return self.forward(images, **kwargs)
