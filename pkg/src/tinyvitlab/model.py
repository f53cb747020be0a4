"""Tiny Vision Transformer: tokenization, blocks, latent-compressed attention,
multi-CLS head, and parameter bookkeeping.

All forward math is written against :mod:`tinyvitlab.tensor`, so a single
tape records the whole model and `backward` differentiates it end to end.
Parameters live in a flat path -> Tensor map (e.g. ``blocks.3.attn.q.weight``)
iterated in sorted order everywhere that order matters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tinyvitlab import tensor as T
from tinyvitlab.tensor import Tensor

MLA_VARIANTS = ("none", "q", "k", "qk", "kv", "qkv")


class ConfigError(ValueError):
    """Model configuration violates a structural invariant."""


@dataclass
class MlaConfig:
    """Low-rank (latent) compression settings for attention projections.

    `variant` names the set of projections replaced by a down/up factored
    pair; `d_c` is the latent dimension shared by all compressed projections.
    """

    variant: str = "none"
    d_c: int = 48

    def compressed(self) -> set[str]:
        if self.variant == "none":
            return set()
        return set(self.variant)  # "qk" -> {"q", "k"} etc.

    def validate(self, embed_dim: int) -> None:
        if self.variant not in MLA_VARIANTS:
            raise ConfigError(f"unknown mla variant {self.variant!r}")
        if self.variant != "none":
            if self.d_c < 1:
                raise ConfigError("compression dim d_c must be >= 1")
            if self.d_c >= embed_dim:
                raise ConfigError(f"d_c={self.d_c} must be < embed_dim={embed_dim} to compress")


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 192
    num_heads: int = 12
    depth: int = 9
    ffn_ratio: int = 4
    num_classes: int = 10
    num_cls_tokens: int = 1
    pos_embed: str = "learnable"  # learnable | sinusoidal | zero
    patch_init: str = "random"    # random | whitening
    mla: MlaConfig = field(default_factory=MlaConfig)
    drop_path_rate: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.num_cls_tokens < 1:
            raise ConfigError("num_cls_tokens must be >= 1")
        if self.pos_embed not in ("learnable", "sinusoidal", "zero"):
            raise ConfigError(f"unknown pos_embed kind {self.pos_embed!r}")
        if self.pos_embed == "sinusoidal" and self.embed_dim % 2 != 0:
            raise ConfigError("sinusoidal positional table needs an even embed_dim")
        if self.patch_init not in ("random", "whitening"):
            raise ConfigError(f"unknown patch_init kind {self.patch_init!r}")
        if not (0.0 <= self.drop_path_rate < 1.0):
            raise ConfigError("drop_path_rate must be in [0, 1)")
        self.mla.validate(self.embed_dim)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def seq_len(self) -> int:
        return self.num_patches + self.num_cls_tokens

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until within +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


# ---------------------------------------------------------------------------
# tokenization

def patchify(images: Tensor, patch: int) -> Tensor:
    """Rearrange [B,3,H,W] (or [3,H,W]) into a patch sequence [B,L,3*P*P].

    Row i*(W/P)+j holds the channel-major flattening of the PxP patch at
    grid position (i, j).
    """
    single = images.ndim == 3
    if single:
        images = T.reshape(images, (1,) + images.shape)
    b, c, hh, ww = images.shape
    if hh % patch != 0 or ww % patch != 0:
        raise ConfigError(f"image extents {hh}x{ww} not divisible by patch {patch}")
    gh, gw = hh // patch, ww // patch
    x = T.reshape(images, (b, c, gh, patch, gw, patch))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))          # [B, gh, gw, C, P, P]
    x = T.reshape(x, (b, gh * gw, c * patch * patch))
    if single:
        x = T.reshape(x, x.shape[1:])
    return x


def sinusoidal_table(length: int, channels: int, dtype=np.float32) -> np.ndarray:
    if channels % 2 != 0:
        raise ConfigError("sinusoidal table needs an even channel count")
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(channels // 2)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * i / channels)
    table = np.zeros((length, channels))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table.astype(dtype)


def positional_table(kind: str, length: int, channels: int,
                     rng: np.random.Generator | None = None, dtype=np.float32) -> Tensor:
    """Build the positional table: trainable (truncated normal), frozen
    sinusoidal, or frozen zeros."""
    if kind == "learnable":
        if rng is None:
            raise ValueError("learnable positional table needs an rng")
        return Tensor(trunc_normal(rng, (length, channels), dtype=dtype), requires_grad=True)
    if kind == "sinusoidal":
        return Tensor(sinusoidal_table(length, channels, dtype))
    if kind == "zero":
        return Tensor(np.zeros((length, channels), dtype=dtype))
    raise ConfigError(f"unknown positional table kind {kind!r}")


def whitening_init(patch_sample: np.ndarray, out_dim: int,
                   rng: np.random.Generator, eps: float = 1e-5,
                   dtype=np.float32) -> np.ndarray:
    """Patch-embedding matrix [D, out_dim] whose first min(out_dim, D)
    filters are inverse-sqrt-eigenvalue-scaled eigenvectors of the sample
    patch covariance, so embedded patches are approximately decorrelated
    on those coordinates. Remaining filters are truncated-normal.
    """
    sample = np.asarray(patch_sample, dtype=np.float64)
    n, d = sample.shape
    if n < 10 * d:
        raise ValueError(f"whitening needs a sample of >= {10 * d} patches, got {n}")
    if out_dim < 1:
        raise ValueError("out_dim must be >= 1")
    centered = sample - sample.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    floored = np.maximum(evals, 0.0) + eps
    k = min(out_dim, d)
    weight = trunc_normal(rng, (d, out_dim), dtype=np.float64)
    weight[:, :k] = evecs[:, :k] / np.sqrt(floored[:k])[None, :]
    return weight.astype(dtype)


# ---------------------------------------------------------------------------
# parameters

def mla_factor(variant_set: set[str], proj: str, embed_dim: int, d_c: int,
               rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Allocate one projection: factored (down [d_c,C] + up [C,d_c]) when
    `proj` is in the compressed set, otherwise a full [C,C] matrix."""
    if proj in variant_set:
        return {
            "down": trunc_normal(rng, (d_c, embed_dim), dtype=dtype),
            "up": trunc_normal(rng, (embed_dim, d_c), dtype=dtype),
        }
    return {"weight": trunc_normal(rng, (embed_dim, embed_dim), dtype=dtype)}


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32,
                patch_sample: np.ndarray | None = None) -> dict[str, Tensor]:
    """Build the full parameter map. `patch_sample` (raw patch rows) is
    required when cfg.patch_init == "whitening"."""
    c, d = cfg.embed_dim, cfg.patch_dim
    p: dict[str, np.ndarray] = {}

    if cfg.patch_init == "whitening":
        if patch_sample is None:
            raise ConfigError("whitening patch_init needs a patch_sample")
        p["patch_embed.weight"] = whitening_init(patch_sample, c, rng, dtype=dtype)
    else:
        p["patch_embed.weight"] = trunc_normal(rng, (d, c), dtype=dtype)
    p["patch_embed.bias"] = np.zeros(c, dtype=dtype)

    p["cls_token"] = trunc_normal(rng, (cfg.num_cls_tokens, c), dtype=dtype)

    compressed = cfg.mla.compressed()
    hidden = cfg.ffn_ratio * c
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        p[f"{pre}.norm1.gamma"] = np.ones(c, dtype=dtype)
        p[f"{pre}.norm1.beta"] = np.zeros(c, dtype=dtype)
        for proj in ("q", "k", "v"):
            for name, arr in mla_factor(compressed, proj, c, cfg.mla.d_c, rng, dtype).items():
                p[f"{pre}.attn.{proj}.{name}"] = arr
        p[f"{pre}.attn.o.weight"] = trunc_normal(rng, (c, c), dtype=dtype)
        p[f"{pre}.norm2.gamma"] = np.ones(c, dtype=dtype)
        p[f"{pre}.norm2.beta"] = np.zeros(c, dtype=dtype)
        p[f"{pre}.ffn.w1"] = trunc_normal(rng, (c, hidden), dtype=dtype)
        p[f"{pre}.ffn.b1"] = np.zeros(hidden, dtype=dtype)
        p[f"{pre}.ffn.w2"] = trunc_normal(rng, (hidden, c), dtype=dtype)
        p[f"{pre}.ffn.b2"] = np.zeros(c, dtype=dtype)

    p["norm.gamma"] = np.ones(c, dtype=dtype)
    p["norm.beta"] = np.zeros(c, dtype=dtype)

    head_in = cfg.num_cls_tokens * c
    p["head.w1"] = trunc_normal(rng, (head_in, c), dtype=dtype)
    p["head.b1"] = np.zeros(c, dtype=dtype)
    p["head.w2"] = trunc_normal(rng, (c, cfg.num_classes), dtype=dtype)
    p["head.b2"] = np.zeros(cfg.num_classes, dtype=dtype)

    params = {k: Tensor(v, requires_grad=True) for k, v in sorted(p.items())}
    if cfg.pos_embed == "learnable":
        params["pos_embed"] = positional_table("learnable", cfg.num_patches, c, rng, dtype)
    return dict(sorted(params.items()))


def effective_projection(params: dict[str, Tensor], prefix: str) -> np.ndarray:
    """The projection as one [C_in, C_out] matrix (up/down collapsed)."""
    if f"{prefix}.weight" in params:
        return params[f"{prefix}.weight"].data
    down = params[f"{prefix}.down"].data
    up = params[f"{prefix}.up"].data
    return down.T @ up.T


def _project(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    if f"{prefix}.weight" in params:
        return T.matmul(x, params[f"{prefix}.weight"])
    latent = T.matmul(x, T.transpose(params[f"{prefix}.down"], (1, 0)))
    return T.matmul(latent, T.transpose(params[f"{prefix}.up"], (1, 0)))


# ---------------------------------------------------------------------------
# forward pieces

def attention(x: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
              prefix: str = "attn") -> Tensor:
    """Multi-head scaled dot-product attention over [B,S,C] (or [S,C])."""
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    b, s, c = x.shape
    h, dk = cfg.num_heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, s, h, dk)), (0, 2, 1, 3))

    q = heads(_project(x, params, f"{prefix}.q"))
    k = heads(_project(x, params, f"{prefix}.k"))
    v = heads(_project(x, params, f"{prefix}.v"))

    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)                        # [B,h,S,dk]
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, s, c))
    out = T.matmul(out, params[f"{prefix}.o.weight"])
    if single:
        out = T.reshape(out, (s, c))
    return out


def ffn(x: Tensor, params: dict[str, Tensor], prefix: str = "ffn") -> Tensor:
    hidden = T.add(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])
    hidden = T.gelu(hidden)
    return T.add(T.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _drop_path_mask(batch: int, drop_prob: float, rng: np.random.Generator,
                    dtype) -> np.ndarray:
    keep = 1.0 - drop_prob
    kept = (rng.random(batch) < keep).astype(dtype)
    return (kept / dtype.type(keep)).reshape(batch, 1, 1)


def block(x: Tensor, params: dict[str, Tensor], cfg: ModelConfig, prefix: str,
          drop_prob: float = 0.0, mode: str = "train",
          rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm transformer block with per-sample stochastic depth."""
    if not (0.0 <= drop_prob < 1.0):
        raise ConfigError("drop_prob must be in [0, 1)")
    train_drop = mode == "train" and drop_prob > 0.0
    if train_drop and rng is None:
        raise ValueError("drop-path in train mode needs an rng")
    b = x.shape[0] if x.ndim == 3 else 1

    branch = attention(T.layer_norm(x, params[f"{prefix}.norm1.gamma"],
                                    params[f"{prefix}.norm1.beta"]), params, cfg,
                       prefix=f"{prefix}.attn")
    if train_drop:
        mask = _drop_path_mask(b, drop_prob, rng, x.data.dtype)
        branch = T.mul(branch, Tensor(mask if x.ndim == 3 else mask[0]))
    x = T.add(x, branch)

    branch = ffn(T.layer_norm(x, params[f"{prefix}.norm2.gamma"],
                              params[f"{prefix}.norm2.beta"]), params,
                 prefix=f"{prefix}.ffn")
    if train_drop:
        mask = _drop_path_mask(b, drop_prob, rng, x.data.dtype)
        branch = T.mul(branch, Tensor(mask if x.ndim == 3 else mask[0]))
    return T.add(x, branch)


def cls_head(tokens: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Concatenate the CLS-token outputs and run the 2-layer projection MLP."""
    single = tokens.ndim == 2
    if single:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    b = tokens.shape[0]
    cls = T.narrow(tokens, 1, 0, cfg.num_cls_tokens)
    flat = T.reshape(cls, (b, cfg.num_cls_tokens * cfg.embed_dim))
    hidden = T.gelu(T.add(T.matmul(flat, params["head.w1"]), params["head.b1"]))
    logits = T.add(T.matmul(hidden, params["head.w2"]), params["head.b2"])
    if single:
        logits = T.reshape(logits, (cfg.num_classes,))
    return logits


def forward(cfg: ModelConfig, params: dict[str, Tensor], images: Tensor,
            mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    """Full model: images [B,3,H,W] -> logits [B,num_classes].

    CLS tokens receive no positional embedding; drop-path rates ramp
    linearly from 0 to cfg.drop_path_rate across blocks. Eval mode is a
    pure function of (params, images).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    b = images.shape[0]
    x = patchify(images, cfg.patch_size)              # [B,L,D]
    x = T.add(T.matmul(x, params["patch_embed.weight"]), params["patch_embed.bias"])

    if cfg.pos_embed == "learnable":
        pos = params["pos_embed"]
    else:
        pos = positional_table(cfg.pos_embed, cfg.num_patches, cfg.embed_dim,
                               dtype=images.data.dtype)
    x = T.add(x, pos)

    cls = T.broadcast_to(T.reshape(params["cls_token"],
                                   (1, cfg.num_cls_tokens, cfg.embed_dim)),
                         (b, cfg.num_cls_tokens, cfg.embed_dim))
    x = T.concat([cls, x], axis=1)

    for i in range(cfg.depth):
        rate = cfg.drop_path_rate * i / max(cfg.depth - 1, 1)
        x = block(x, params, cfg, f"blocks.{i}", drop_prob=rate, mode=mode, rng=rng)

    x = T.layer_norm(x, params["norm.gamma"], params["norm.beta"])
    return cls_head(x, params, cfg)


def grad_check_point(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Random float64 parameter point for gradient verification.

    Matrices are fan-in scaled and biases jittered so signals (and therefore
    gradients) stay O(1) through the depth; at the training init (sigma 0.02)
    early-layer gradients shrink below finite-difference resolution.
    """
    params = init_params(cfg, rng, dtype=np.float64)
    for name, p in params.items():
        if p.data.ndim == 2 and "norm" not in name:
            p.data *= (1.0 / np.sqrt(p.data.shape[0])) / 0.02
        elif name == "cls_token" or name == "pos_embed":
            p.data *= 10.0
        elif "bias" in name or ".b" in name or "beta" in name:
            p.data += rng.normal(0.0, 0.05, p.data.shape)
    return params


# ---------------------------------------------------------------------------
# accounting

def param_count(params: dict[str, Tensor]) -> dict[str, int]:
    """Element counts by top-level group, plus an attention-projection
    subtotal (so compression savings are directly visible) and the total."""
    counts: dict[str, int] = {}
    attn = 0
    total = 0
    for path in sorted(params):
        n = params[path].size
        total += n
        group = path.split(".", 1)[0]
        counts[group] = counts.get(group, 0) + n
        if ".attn." in path:
            attn += n
    counts["attention"] = attn
    counts["total"] = total
    return counts


def attention_params_per_layer(cfg: ModelConfig) -> int:
    """Q/K/V/O parameter elements in one block under cfg.mla."""
    c, dc = cfg.embed_dim, cfg.mla.d_c
    compressed = cfg.mla.compressed()
    n = c * c  # output projection
    for proj in ("q", "k", "v"):
        n += 2 * c * dc if proj in compressed else c * c
    return n
