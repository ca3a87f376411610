"""Many-to-one multi-scale regression transformer.

One patch per pyramid level goes through a level-specific patch embedding
producing equal-length token sequences, which a stack of encoders mixes
alternately along tokens (per-level masked self-attention) and across
levels (channel-concatenated bottleneck MLP). The leading tokens of every
level feed one linear regression head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor

ENCODER_MODES = ("decoupled", "coupled_attention", "coupled_full")

# preset (N, n_head, C) triples for the three published sizes
VARIANTS = {
    "small": (6, 3, 192),
    "base": (8, 4, 256),
    "large": (12, 6, 384),
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    N        encoder repeat count
    n_head   attention heads per token mixer
    C        embedding channels per level
    p        patch side at level 0 (levels 1/2 use p/2, p/4)
    m        probability that an attention score is masked to zero
    k        output gene count
    H, W     level-0 crop extents in pixels
    """

    N: int
    n_head: int
    C: int
    p: int = 16
    m: float = 0.1
    k: int = 250
    H: int = 224
    W: int = 224
    dropout_rate: float = 0.1
    levels: tuple = (0, 1, 2)
    encoder_mode: str = "decoupled"
    disable_itmm: bool = False
    disable_icmm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(sorted(self.levels)))
        if not self.levels or any(l not in (0, 1, 2) for l in self.levels):
            raise ValueError(f"levels must be a nonempty subset of {{0,1,2}}, got {self.levels}")
        if len(set(self.levels)) != len(self.levels):
            raise ValueError(f"duplicate levels in {self.levels}")
        if self.C % (4 * self.n_head) != 0:
            raise ValueError(
                f"C={self.C} must be divisible by 4*n_head={4 * self.n_head}"
            )
        if self.p % 4 != 0:
            raise ValueError(f"p={self.p} must be divisible by 4")
        if self.H % self.p != 0 or self.W % self.p != 0:
            raise ValueError(
                f"crop extents {self.H}x{self.W} must be divisible by p={self.p}"
            )
        if not 0.0 <= self.m <= 1.0:
            raise ValueError(f"mask probability m={self.m} outside [0, 1]")
        if self.k < 1:
            raise ValueError(f"k={self.k} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate={self.dropout_rate} outside [0, 1)")
        if self.encoder_mode not in ENCODER_MODES:
            raise ValueError(
                f"unknown encoder_mode {self.encoder_mode!r}; expected one of {ENCODER_MODES}"
            )
        if self.disable_itmm and self.disable_icmm:
            raise ValueError("at most one of disable_itmm/disable_icmm may be set")
        if self.N < 0:
            raise ValueError(f"N={self.N} must be >= 0")

    @property
    def seq_len(self) -> int:
        """Tokens per level before the leading [cls] slot: H*W/p^2."""
        return (self.H * self.W) // (self.p * self.p)

    @property
    def tokens(self) -> int:
        return self.seq_len + 1

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def mixer_hidden(self) -> int:
        """Bottleneck width of the cross-level mixer: 2*v*C/3 rounded to
        nearest (exactly 2C for v=3)."""
        return (2 * self.n_levels * self.C + 1) // 3

    def patch_side(self, level: int) -> int:
        return self.p // (2 ** level)

    def patch_dim(self, level: int) -> int:
        side = self.patch_side(level)
        return side * side * 3

    def embed_hidden(self, level: int) -> int:
        """Latent width of the level's patch embedding: 3C, 3C/2, 3C/4."""
        return (3 * self.C) // (2 ** level)

    def image_extents(self, level: int) -> tuple:
        return (3, self.H // (2 ** level), self.W // (2 ** level))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["levels"] = tuple(d.get("levels", (0, 1, 2)))
        return cls(**d)


def variant_config(name: str, **overrides) -> ModelConfig:
    """Config for a named size preset, with field overrides."""
    try:
        n, n_head, c = VARIANTS[name.lower()]
    except KeyError:
        raise ValueError(
            f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}"
        ) from None
    base = {"N": n, "n_head": n_head, "C": c}
    base.update(overrides)
    return ModelConfig(**base)


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Ordered (name, shape, kind) plan of every learnable tensor.

    The model builder allocates in exactly this order (which fixes the
    init draw order) and the profiler sums over it, so the two can never
    disagree. Kinds: weight / bias / gamma / beta / table.
    """
    out: list[tuple[str, tuple, str]] = []

    def lin(prefix, fin, fout):
        out.append((f"{prefix}.w", (fin, fout), "weight"))
        out.append((f"{prefix}.b", (fout,), "bias"))

    def norm(prefix, c):
        out.append((f"{prefix}.gamma", (c,), "gamma"))
        out.append((f"{prefix}.beta", (c,), "beta"))

    for lvl in config.levels:
        d_in = config.patch_dim(lvl)
        hidden = config.embed_hidden(lvl)
        norm(f"embed{lvl}.norm_in", d_in)
        lin(f"embed{lvl}.fc1", d_in, hidden)
        lin(f"embed{lvl}.fc2", hidden, config.C)
        norm(f"embed{lvl}.norm_out", config.C)
    for lvl in config.levels:
        out.append((f"cls{lvl}", (1, config.C), "table"))
        out.append((f"pos{lvl}", (config.tokens, config.C), "table"))

    vc = config.n_levels * config.C
    for i in range(config.N):
        norm(f"enc{i}.norm1", vc)
        if not config.disable_itmm:
            if config.encoder_mode == "decoupled":
                for lvl in config.levels:
                    lin(f"enc{i}.attn{lvl}.qkv", config.C, 3 * config.C)
                    lin(f"enc{i}.attn{lvl}.out", config.C, config.C)
            else:
                lin(f"enc{i}.attn.qkv", vc, 3 * vc)
                lin(f"enc{i}.attn.out", vc, vc)
        norm(f"enc{i}.norm2", vc)
        if not config.disable_icmm:
            hidden = 4 * vc if config.encoder_mode == "coupled_full" else config.mixer_hidden
            lin(f"enc{i}.mix.fc1", vc, hidden)
            lin(f"enc{i}.mix.fc2", hidden, vc)
    norm("final_norm", vc)
    lin("head", vc, config.k)
    return out


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """[B, 3, h, w] -> [B, L, patch*patch*3] row-major patch vectors."""
    b, c, h, w = img.shape
    gh, gw = h // patch, w // patch
    x = img.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(x).reshape(b, gh * gw, patch * patch * c)


class Model:
    """The assembled network: a config plus its named parameter map."""

    def __init__(self, config: ModelConfig,
                 init_rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        for name, shape, kind in parameter_shapes(config):
            if kind == "weight":
                if init_rng is None:
                    data = np.zeros(shape)
                else:
                    bound = 1.0 / math.sqrt(shape[0])
                    data = init_rng.uniform(-bound, bound, size=shape)
            elif kind == "table":
                if init_rng is None:
                    data = np.zeros(shape)
                else:
                    data = init_rng.normal(0.0, 0.02, size=shape)
            elif kind == "gamma":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            self.params[name] = Tensor(data.astype(self.dtype), requires_grad=True)

    # -- building blocks -------------------------------------------------

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return T.add(T.matmul(x, self.params[f"{prefix}.w"]),
                     self.params[f"{prefix}.b"])

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm_lastdim(x, self.params[f"{prefix}.gamma"],
                                    self.params[f"{prefix}.beta"])

    def embed_level(self, level: int, img: np.ndarray) -> Tensor:
        """Patch pipeline for one level: norm -> linear -> GELU -> linear
        -> norm, producing [B, L, C]."""
        cfg = self.config
        expected = cfg.image_extents(level)
        if img.ndim == 3:
            img = img[None]
        if img.shape[1:] != expected:
            raise T.ShapeError(
                f"level {level} image has extents {img.shape[1:]}, expected {expected}"
            )
        patches = patchify(img.astype(self.dtype, copy=False), cfg.patch_side(level))
        x = Tensor(patches)
        x = self._norm(x, f"embed{level}.norm_in")
        x = T.gelu(self._linear(x, f"embed{level}.fc1"))
        x = self._linear(x, f"embed{level}.fc2")
        return self._norm(x, f"embed{level}.norm_out")

    def attach_cls_and_pos(self, level: int, seq: Tensor) -> Tensor:
        """Prepend the level's learned leading token, add its position table."""
        b = seq.shape[0]
        cfg = self.config
        cls = T.broadcast_to(T.reshape(self.params[f"cls{level}"], (1, 1, cfg.C)),
                             (b, 1, cfg.C))
        x = T.concat([cls, seq], axis=1)
        return T.add(x, self.params[f"pos{level}"])

    def shared_norm(self, states: list[Tensor], prefix: str) -> list[Tensor]:
        """Layer-norm over the channel concatenation of all levels, split back."""
        c = self.config.C
        if len(states) == 1:
            return [self._norm(states[0], prefix)]
        cat = T.concat(states, axis=-1)
        cat = self._norm(cat, prefix)
        return T.split(cat, [c] * len(states), axis=-1)

    def masked_attention(self, x: Tensor, prefix: str, training: bool,
                         mask_rng: np.random.Generator | None) -> Tensor:
        """Multi-head self-attention whose post-softmax scores are zeroed
        independently with probability m in training mode (no rescaling),
        followed by the output projection and a residual add."""
        cfg = self.config
        b, t, c = x.shape
        nh = cfg.n_head
        dh = c // nh
        qkv = self._linear(x, f"{prefix}.qkv")
        q, k, v = T.split(qkv, [c, c, c], axis=-1)

        def heads(z):
            return T.transpose(T.reshape(z, (b, t, nh, dh)), (0, 2, 1, 3))

        q, k, v = heads(q), heads(k), heads(v)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                         1.0 / math.sqrt(dh))
        attn = T.softmax_lastdim(scores)
        if training and cfg.m > 0.0:
            if mask_rng is None:
                raise ValueError("training forward with m > 0 needs a mask stream")
            keep = (mask_rng.random(attn.shape) >= cfg.m).astype(self.dtype)
            attn = T.mul(attn, Tensor(keep))
        ctx = T.matmul(attn, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, c))
        return T.add(self._linear(merged, f"{prefix}.out"), x)

    def channel_mix(self, states: list[Tensor], prefix: str, training: bool,
                    dropout_rng: np.random.Generator | None) -> list[Tensor]:
        """Cross-level bottleneck MLP on the channel concatenation with a
        residual add, split back per level."""
        cfg = self.config
        cat = states[0] if len(states) == 1 else T.concat(states, axis=-1)
        h = T.gelu(self._linear(cat, f"{prefix}.fc1"))
        h = T.dropout(h, cfg.dropout_rate, dropout_rng, training)
        up = self._linear(h, f"{prefix}.fc2")
        out = T.add(up, cat)
        if len(states) == 1:
            return [out]
        return T.split(out, [cfg.C] * len(states), axis=-1)

    def encoder(self, states: list[Tensor], index: int, training: bool,
                mask_rng, dropout_rng) -> list[Tensor]:
        cfg = self.config
        states = self.shared_norm(states, f"enc{index}.norm1")
        if not cfg.disable_itmm:
            if cfg.encoder_mode == "decoupled":
                states = [
                    self.masked_attention(s, f"enc{index}.attn{lvl}", training, mask_rng)
                    for lvl, s in zip(cfg.levels, states)
                ]
            else:
                cat = states[0] if len(states) == 1 else T.concat(states, axis=-1)
                cat = self.masked_attention(cat, f"enc{index}.attn", training, mask_rng)
                states = [cat] if len(states) == 1 else T.split(
                    cat, [cfg.C] * cfg.n_levels, axis=-1)
        states = self.shared_norm(states, f"enc{index}.norm2")
        if not cfg.disable_icmm:
            states = self.channel_mix(states, f"enc{index}.mix", training, dropout_rng)
        return states

    def forward(self, images: dict[int, np.ndarray], training: bool = False,
                rng=None) -> Tensor:
        """Predict [B, k] expressions from one image per active level.

        ``rng`` is an RngHub; it is only consumed in training mode (mask
        and dropout streams), so eval-mode forwards are pure functions of
        (weights, input).
        """
        cfg = self.config
        states = []
        batch = None
        for lvl in cfg.levels:
            if lvl not in images or images[lvl] is None:
                raise ValueError(f"missing image for level {lvl}")
            x = self.embed_level(lvl, images[lvl])
            if batch is None:
                batch = x.shape[0]
            states.append(self.attach_cls_and_pos(lvl, x))
        mask_rng = rng.get("mask") if (rng is not None and training) else None
        dropout_rng = rng.get("dropout") if (rng is not None and training) else None
        for i in range(cfg.N):
            states = self.encoder(states, i, training, mask_rng, dropout_rng)
        states = self.shared_norm(states, "final_norm")
        lead = [
            T.reshape(T.split(s, [1, cfg.seq_len], axis=-2)[0], (batch, cfg.C))
            for s in states
        ]
        feat = lead[0] if len(lead) == 1 else T.concat(lead, axis=-1)
        return self._linear(feat, "head")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
