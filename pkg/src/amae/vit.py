"""Tiny ViT encoder, lightweight MAE decoder and the 3-layer MLP head.

Parameters live in a flat ``dict`` of named :class:`~amae.autodiff.Tensor`
leaves with ``encoder.``, ``decoder.`` and ``head.`` prefixes, which keeps
checkpointing, copying and freezing trivial. All forward functions take a
batch of images ``[B, H, W]``; a single image is a batch of one.
"""

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import IndexOutOfRange, ShapeMismatch


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    encoder_depth: int = 4
    decoder_depth: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    decoder_dim: int = 32

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        for name in ("embed_dim", "decoder_dim"):
            dim = getattr(self, name)
            if dim % self.num_heads:
                raise ValueError(f"{name} {dim} not divisible by num_heads {self.num_heads}")
            if dim % 4:
                raise ValueError(f"{name} {dim} must be divisible by 4 for 2-D sin-cos positions")

    @property
    def grid_size(self):
        return self.image_size // self.patch_size

    @property
    def num_tokens(self):
        return self.grid_size ** 2

    @property
    def patch_dim(self):
        return self.patch_size ** 2

    def to_dict(self):
        return asdict(self)


# geometry

def patchify(images, patch_size):
    """``[B, H, W]`` (or ``[H, W]``) -> ``[B, T, p*p]`` in raster order."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 2
    if single:
        images = images[None]
    if images.ndim != 3:
        raise ShapeMismatch(f"expected [B, H, W] images, got shape {images.shape}")
    B, H, W = images.shape
    p = patch_size
    if H % p or W % p:
        raise ShapeMismatch(f"image {H}x{W} is not divisible into {p}x{p} patches")
    out = images.reshape(B, H // p, p, W // p, p).transpose(0, 1, 3, 2, 4).reshape(B, (H // p) * (W // p), p * p)
    return out[0] if single else out


def unpatchify(patches, patch_size, height=None):
    """Exact inverse of :func:`patchify` for square (or ``height``-given) images."""
    patches = np.asarray(patches, dtype=np.float64)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    B, T, pp = patches.shape
    p = patch_size
    if pp != p * p:
        raise ShapeMismatch(f"patch length {pp} != {p}*{p}")
    gh = (height // p) if height is not None else int(round(T ** 0.5))
    if T % gh:
        raise ShapeMismatch(f"{T} tokens do not tile a grid with {gh} rows")
    gw = T // gh
    out = patches.reshape(B, gh, gw, p, p).transpose(0, 1, 3, 2, 4).reshape(B, gh * p, gw * p)
    return out[0] if single else out


@lru_cache(maxsize=None)
def sincos_positions(grid_size, dim):
    """Fixed 2-D sine-cosine position table ``[grid_size**2, dim]``."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(np.arange(grid_size), np.arange(grid_size), indexing="ij")

    def encode_axis(pos):
        angle = pos.reshape(-1, 1).astype(np.float64) * omega
        return np.concatenate([np.sin(angle), np.cos(angle)], axis=1)

    table = np.concatenate([encode_axis(rows), encode_axis(cols)], axis=1)
    table.setflags(write=False)
    return table


# parameters

def _trunc_normal(rng, shape, std=0.02, cutoff=2.0):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > cutoff
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > cutoff
    return out * std


def _linear(params, name, rng, fan_in, fan_out):
    params[f"{name}.w"] = _trunc_normal(rng, (fan_in, fan_out))
    params[f"{name}.b"] = np.zeros(fan_out)


def _layernorm(params, name, dim):
    params[f"{name}.gamma"] = np.ones(dim)
    params[f"{name}.beta"] = np.zeros(dim)


def _block(params, name, rng, dim, mlp_ratio):
    _layernorm(params, f"{name}.ln1", dim)
    for proj in ("q", "k", "v", "proj"):
        _linear(params, f"{name}.attn.{proj}", rng, dim, dim)
    _layernorm(params, f"{name}.ln2", dim)
    _linear(params, f"{name}.mlp.fc1", rng, dim, dim * mlp_ratio)
    _linear(params, f"{name}.mlp.fc2", rng, dim * mlp_ratio, dim)


def init_params(config, rng):
    """Fresh encoder, decoder and head parameters.

    Weights (and the mask token) are truncated-normal with std 0.02 cut at
    two standard deviations; biases and layernorm shifts are zero and
    layernorm scales are one.
    """
    d, dd, pd = config.embed_dim, config.decoder_dim, config.patch_dim
    raw = {}
    _linear(raw, "encoder.patch_embed", rng, pd, d)
    for i in range(config.encoder_depth):
        _block(raw, f"encoder.blocks.{i}", rng, d, config.mlp_ratio)
    _layernorm(raw, "encoder.norm", d)

    _linear(raw, "decoder.embed", rng, d, dd)
    raw["decoder.mask_token"] = _trunc_normal(rng, (dd,))
    for i in range(config.decoder_depth):
        _block(raw, f"decoder.blocks.{i}", rng, dd, config.mlp_ratio)
    _layernorm(raw, "decoder.norm", dd)
    _linear(raw, "decoder.pred", rng, dd, pd)

    _linear(raw, "head.fc1", rng, d, d)
    _linear(raw, "head.fc2", rng, d, d)
    _linear(raw, "head.fc3", rng, d, 2)
    return {name: Tensor(value, requires_grad=True) for name, value in raw.items()}


def subset(params, prefix):
    return {k: v for k, v in params.items() if k.startswith(prefix + ".")}


def clone(params, requires_grad=True):
    """Deep copy sharing no storage with ``params``."""
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in params.items()}


def count_parameters(params, prefix=None):
    items = params.values() if prefix is None else subset(params, prefix).values()
    return int(sum(t.data.size for t in items))


# layers

def linear(x, params, name):
    return ad.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def attention(x, params, name, num_heads, return_weights=False):
    B, N, D = x.shape
    hd = D // num_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, N, num_heads, hd)), (0, 2, 1, 3))

    q = heads(linear(x, params, f"{name}.q"))
    k = heads(linear(x, params, f"{name}.k"))
    v = heads(linear(x, params, f"{name}.v"))
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (hd ** -0.5)
    weights = ad.softmax(scores, axis=-1)
    out = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (B, N, D))
    out = linear(out, params, f"{name}.proj")
    return (out, weights) if return_weights else out


def block(x, params, name, num_heads):
    h = ad.layernorm(x, params[f"{name}.ln1.gamma"], params[f"{name}.ln1.beta"])
    x = x + attention(h, params, f"{name}.attn", num_heads)
    h = ad.layernorm(x, params[f"{name}.ln2.gamma"], params[f"{name}.ln2.beta"])
    h = linear(ad.gelu(linear(h, params, f"{name}.mlp.fc1")), params, f"{name}.mlp.fc2")
    return x + h


def _check_indices(visible_idx, batch, num_tokens):
    idx = np.asarray(visible_idx, dtype=np.intp)
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, (batch, idx.shape[0]))
    if idx.ndim != 2 or idx.shape[0] != batch:
        raise ShapeMismatch(f"visible_idx must be [k] or [B, k], got {idx.shape} for batch {batch}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_tokens):
        raise IndexOutOfRange(f"visible index outside [0, {num_tokens})")
    if idx.shape[1] > 1 and not (np.diff(idx, axis=1) > 0).all():
        raise ValueError("visible_idx must be strictly increasing")
    return idx


# model

def encode(params, images, visible_idx, config):
    """Encode only the visible patches of each image.

    ``visible_idx`` is ``[B, k]`` (or ``[k]``, shared) ascending token
    indices; ``None`` encodes the full sequence. Each token carries the
    positional embedding of its original grid position. Returns ``[B, k, d]``.
    """
    patches = patchify(images, config.patch_size)
    if patches.ndim == 2:
        patches = patches[None]
    B, T, _ = patches.shape
    if T != config.num_tokens:
        raise ShapeMismatch(f"images give {T} tokens, config expects {config.num_tokens}")
    pos = sincos_positions(config.grid_size, config.embed_dim)
    if visible_idx is None:
        tokens, pos_vis = patches, pos
    else:
        idx = _check_indices(visible_idx, B, T)
        tokens = np.take_along_axis(patches, idx[..., None], axis=1)
        pos_vis = pos[idx]
    x = linear(Tensor(tokens), params, "encoder.patch_embed") + Tensor(pos_vis)
    for i in range(config.encoder_depth):
        x = block(x, params, f"encoder.blocks.{i}", config.num_heads)
    return ad.layernorm(x, params["encoder.norm.gamma"], params["encoder.norm.beta"])


def decode(params, latent, visible_idx, config):
    """Predict raw pixels ``[B, T, p*p]`` for every patch.

    Visible embeddings are bridged to the decoder width, the shared mask
    token fills every hidden position and decoder positions are added to all
    tokens before the decoder blocks.
    """
    B = latent.shape[0]
    T = config.num_tokens
    idx = np.broadcast_to(np.arange(T), (B, T)) if visible_idx is None else _check_indices(visible_idx, B, T)
    x = linear(latent, params, "decoder.embed")
    x = ad.scatter_tokens(x, idx, T, params["decoder.mask_token"])
    x = x + Tensor(sincos_positions(config.grid_size, config.decoder_dim))
    for i in range(config.decoder_depth):
        x = block(x, params, f"decoder.blocks.{i}", config.num_heads)
    x = ad.layernorm(x, params["decoder.norm.gamma"], params["decoder.norm.beta"])
    return linear(x, params, "decoder.pred")


def classify(params, pooled):
    """3-layer MLP head: ``[B, d]`` pooled embeddings -> ``[B, 2]`` logits."""
    pooled = ad.as_tensor(pooled)
    h = ad.gelu(linear(pooled, params, "head.fc1"))
    h = ad.gelu(linear(h, params, "head.fc2"))
    return linear(h, params, "head.fc3")


def embed(params, images, config):
    """Average-pooled full-sequence encoder embedding ``[B, d]``."""
    return ad.mean_pool(encode(params, images, None, config), axis=-2)
