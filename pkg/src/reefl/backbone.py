"""Toy vision-transformer backbone executed as a depth prefix.

Tokenizer + positional embeddings + class token, followed by a stack of
architecturally identical blocks (pre-norm attention and MLP, both
residual). A client with budget r runs only blocks 1..r.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BudgetError, ConfigError, ShapeError
from .numerics import (
    Tensor,
    broadcast_to,
    concat,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)

LN_EPS = 1e-5
INIT_STD = 0.02
MLP_RATIO = 4


@dataclass
class BackboneConfig:
    depth: int
    dim: int
    heads: int
    patch_size: int
    num_classes: int
    image_size: int = 16
    image_channels: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")

    @property
    def num_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.image_channels * self.patch_size * self.patch_size


@dataclass
class BlockParams:
    """One transformer block: pre-norm MSA and pre-norm MLP, both residual."""

    ln1_gamma: Tensor
    ln1_beta: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor
    mlp_w2: Tensor


@dataclass
class BackboneParams:
    patch_embed: Tensor
    pos_embed: Tensor
    class_token: Tensor
    blocks: list = field(default_factory=list)


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    vals = rng.normal(0.0, std, size=shape)
    return np.clip(vals, -2 * std, 2 * std).astype(dtype)


def init_block(rng: np.random.Generator, dim: int, attn_dim: int, mlp_hidden: int, dtype=np.float32) -> BlockParams:
    ones = lambda n: Tensor(np.ones(n, dtype=dtype), requires_grad=True)
    zeros = lambda n: Tensor(np.zeros(n, dtype=dtype), requires_grad=True)
    w = lambda *s: Tensor(trunc_normal(rng, s, dtype=dtype), requires_grad=True)
    return BlockParams(
        ln1_gamma=ones(dim),
        ln1_beta=zeros(dim),
        wq=w(dim, attn_dim),
        wk=w(dim, attn_dim),
        wv=w(dim, attn_dim),
        wo=w(attn_dim, dim),
        ln2_gamma=ones(dim),
        ln2_beta=zeros(dim),
        mlp_w1=w(dim, mlp_hidden),
        mlp_w2=w(mlp_hidden, dim),
    )


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32) -> BackboneParams:
    d = cfg.dim
    return BackboneParams(
        patch_embed=Tensor(trunc_normal(rng, (cfg.patch_dim, d), dtype=dtype), requires_grad=True),
        pos_embed=Tensor(trunc_normal(rng, (cfg.num_tokens, d), dtype=dtype), requires_grad=True),
        class_token=Tensor(trunc_normal(rng, (d,), dtype=dtype), requires_grad=True),
        blocks=[
            init_block(rng, d, attn_dim=d, mlp_hidden=MLP_RATIO * d, dtype=dtype)
            for _ in range(cfg.depth)
        ],
    )


# -- forward ---------------------------------------------------------------


def _as_batched(z: Tensor) -> tuple[Tensor, bool]:
    if z.data.ndim == 2:
        return reshape(z, (1,) + z.shape), True
    if z.data.ndim == 3:
        return z, False
    raise ShapeError(f"token tensor must be rank 2 or 3, got {z.shape}")


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B,C,H,W] -> [B, n, C*p*p], row-major over the patch grid."""
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch_size}")
    hp, wp = h // patch_size, w // patch_size
    x = images.reshape(b, c, hp, patch_size, wp, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, hp * wp, c * patch_size * patch_size))


def tokenize(images, params: BackboneParams, cfg: BackboneConfig) -> Tensor:
    """Project patches, prepend the class token, add positional embeddings.

    Accepts one image [C,H,W] (returns [(n+1),d]) or a batch [B,C,H,W]
    (returns [B,(n+1),d]).
    """
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got {arr.shape}")
    patches = extract_patches(arr.astype(params.patch_embed.dtype, copy=False), cfg.patch_size)
    tokens = matmul(Tensor(patches), params.patch_embed)  # [B,n,d]
    b = tokens.shape[0]
    cls = broadcast_to(reshape(params.class_token, (1, 1, cfg.dim)), (b, 1, cfg.dim))
    z = concat([cls, tokens], axis=1)
    z = z + params.pos_embed
    return z.select(0, 0) if single else z


def msa_forward(z: Tensor, blk: BlockParams, heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product multi-head self-attention.

    Returns (output, attention); attention rows are softmax-normalized and
    shaped [heads,T,T] (or [B,heads,T,T] for batched input).
    """
    zb, single = _as_batched(z)
    b, t, _ = zb.shape
    proj = blk.wq.shape[1]
    if proj % heads != 0:
        raise ShapeError(f"attention width {proj} not divisible by {heads} heads")
    hd = proj // heads
    scale = 1.0 / float(np.sqrt(hd))

    def split(x: Tensor) -> Tensor:  # [B,T,proj] -> [B,h,T,hd]
        return transpose(reshape(x, (b, t, heads, hd)), (0, 2, 1, 3))

    q = split(matmul(zb, blk.wq))
    k = split(matmul(zb, blk.wk))
    v = split(matmul(zb, blk.wv))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale  # [B,h,T,T]
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)  # [B,h,T,hd]
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, proj))
    out = matmul(merged, blk.wo)
    if single:
        return out.select(0, 0), attn.select(0, 0)
    return out, attn


def block_forward(z: Tensor, blk: BlockParams, heads: int, eps: float = LN_EPS) -> tuple[Tensor, Tensor]:
    """One pre-norm transformer block; shape preserved. Returns (tokens, attention)."""
    attn_out, attn = msa_forward(layer_norm(z, blk.ln1_gamma, blk.ln1_beta, eps), blk, heads)
    zbar = z + attn_out
    h = layer_norm(zbar, blk.ln2_gamma, blk.ln2_beta, eps)
    mlp = matmul(gelu(matmul(h, blk.mlp_w1)), blk.mlp_w2)
    return zbar + mlp, attn


Hook = Callable[[int, Tensor, Tensor], Optional[Tensor]]


def prefix_forward(
    params: BackboneParams,
    images,
    upto_block: int,
    cfg: BackboneConfig,
    hook: Hook | None = None,
) -> list[Tensor]:
    """Run tokenize then blocks 1..upto_block.

    After each block the hook is invoked as hook(l, tokens, attention) and
    may return replacement tokens (e.g. with the class-token row swapped)
    that feed the next block; the returned activations are the raw block
    outputs, index 0 holding the tokenized input.
    """
    depth = len(params.blocks)
    if not 1 <= upto_block <= depth:
        raise BudgetError(f"block budget {upto_block} outside [1, {depth}]")
    z = tokenize(images, params, cfg)
    activations = [z]
    for l in range(1, upto_block + 1):
        z, attn = block_forward(z, params.blocks[l - 1], cfg.heads)
        activations.append(z)
        if hook is not None:
            replacement = hook(l, z, attn)
            if replacement is not None:
                z = replacement
    return activations


def named_backbone_tensors(params: BackboneParams) -> dict[str, Tensor]:
    """Flat name -> tensor view; block names are 1-indexed to match budgets."""
    out = {
        "patch_embed": params.patch_embed,
        "pos_embed": params.pos_embed,
        "class_token": params.class_token,
    }
    for l, blk in enumerate(params.blocks, start=1):
        for fname in (
            "ln1_gamma", "ln1_beta", "wq", "wk", "wv", "wo",
            "ln2_gamma", "ln2_beta", "mlp_w1", "mlp_w2",
        ):
            out[f"block{l}.{fname}"] = getattr(blk, fname)
    return out
