"""Random token masks for masked reconstruction.

A mask is a boolean vector over the ``T`` patch tokens where ``True`` means
the token is hidden from the encoder.
"""

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import InfeasibleSet, InvalidRatio


def masked_count(num_tokens, ratio):
    """``round(ratio * T)`` with ties rounded half up."""
    return int(math.floor(ratio * num_tokens + 0.5))


@dataclass(frozen=True)
class MaskSet:
    masks: np.ndarray  # [L, T] bool
    ratio: float
    seed: object = None

    @property
    def num_masks(self):
        return self.masks.shape[0]

    @property
    def num_tokens(self):
        return self.masks.shape[1]


def _validate(num_tokens, ratio, num_masks):
    if not 0.0 < ratio < 1.0:
        raise InvalidRatio(f"masking ratio must lie in (0, 1), got {ratio}")
    if num_masks < 1:
        raise ValueError(f"need at least one mask, got L={num_masks}")
    k = masked_count(num_tokens, ratio)
    if math.comb(num_tokens, k) < num_masks:
        raise InfeasibleSet(f"only C({num_tokens},{k}) = {math.comb(num_tokens, k)} distinct masks exist, {num_masks} requested")
    return k


def _draw(rng, shape, num_tokens, k):
    order = np.argsort(rng.random(shape + (num_tokens,)), axis=-1)
    masks = np.zeros(shape + (num_tokens,), dtype=bool)
    np.put_along_axis(masks, order[..., :k], True, axis=-1)
    return masks


def _resample_collisions(masks, rng, k):
    # masks: [n, L, T]; redraw any mask equal to an earlier one of its set
    n, L, T = masks.shape
    for i in range(n):
        for j in range(1, L):
            while any(np.array_equal(masks[i, j], masks[i, q]) for q in range(j)):
                masks[i, j] = _draw(rng, (), T, k)
    return masks


def generate_masks(num_tokens, ratio, num_masks, rng):
    """Draw ``num_masks`` pairwise-distinct masks hiding ``round(ratio*T)`` tokens each."""
    k = _validate(num_tokens, ratio, num_masks)
    masks = _resample_collisions(_draw(rng, (1, num_masks), num_tokens, k), rng, k)[0]
    return MaskSet(masks=masks, ratio=ratio, seed=getattr(rng.bit_generator, "seed_seq", None))


def generate_mask_batch(num_images, num_tokens, ratio, num_masks, rng):
    """An independent :class:`MaskSet` per image, stacked as ``[n, L, T]``."""
    k = _validate(num_tokens, ratio, num_masks)
    masks = _draw(rng, (num_images, num_masks), num_tokens, k)
    if num_masks > 1:
        masks = _resample_collisions(masks, rng, k)
    return masks


def visible_indices(mask):
    """Ascending positions where ``mask`` is False; works row-wise on ``[..., T]``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        return np.flatnonzero(~mask)
    n_visible = mask.shape[-1] - mask.sum(axis=-1)
    if not (n_visible == n_visible.flat[0]).all():
        raise ValueError("batched masks must share a visible count")
    return np.argsort(mask, axis=-1, kind="stable")[..., : int(n_visible.flat[0])]


def masked_pixel_mask(mask, patch_size, grid_size=None):
    """Expand a token mask ``[..., T]`` to pixel resolution ``[..., H, W]``."""
    mask = np.asarray(mask, dtype=bool)
    T = mask.shape[-1]
    g = grid_size if grid_size is not None else int(round(T ** 0.5))
    grid = mask.reshape(mask.shape[:-1] + (g, T // g))
    return np.repeat(np.repeat(grid, patch_size, axis=-2), patch_size, axis=-1)
