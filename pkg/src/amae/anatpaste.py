"""Anatomy-constrained cut-and-paste synthetic anomalies.

The lung region is found without supervision (Otsu's threshold, dark class,
3x3 opening, two largest 4-connected components). A square patch centred on
one region pixel is then alpha-blended onto a square of the same size
centred on another region pixel:

    out = img * (1 - alpha * m) + shifted * (alpha * m)

where ``m`` is the indicator of the target square.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .exceptions import RegionTooSmall, SegmentationEmpty


@dataclass(frozen=True)
class PastePlan:
    source: tuple  # (top, left, side)
    target: tuple
    alpha: float


def otsu_threshold(image, bins=256):
    """Threshold maximising between-class variance; ``None`` for flat input."""
    values = np.asarray(image, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return None
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    p = counts / counts.sum()
    w0 = np.cumsum(p)
    w1 = 1.0 - w0
    mu0_num = np.cumsum(p * centers)
    mu_total = mu0_num[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_total * w0 - mu0_num) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1.0
    return edges[int(np.argmax(between)) + 1]


def segment_region(image, min_fraction=0.01, keep=2):
    """Boolean lung mask of ``image``.

    Raises :class:`SegmentationEmpty` when the histogram is degenerate or no
    dark component covers more than ``min_fraction`` of the image.
    """
    image = np.asarray(image, dtype=np.float64)
    thr = otsu_threshold(image)
    if thr is None:
        raise SegmentationEmpty("image is constant; Otsu threshold undefined")
    dark = image < thr
    dark = ndimage.binary_opening(dark, structure=np.ones((3, 3), dtype=bool), iterations=1)
    labels, n = ndimage.label(dark)  # default structure is 4-connectivity
    if n == 0:
        raise SegmentationEmpty("no dark component after opening")
    sizes = np.bincount(labels.ravel())[1:]
    order = np.argsort(-sizes, kind="stable")
    min_area = min_fraction * image.size
    chosen = [i + 1 for i in order[:keep] if sizes[i] > min_area]
    if not chosen:
        raise SegmentationEmpty(f"no component exceeds {min_fraction:.0%} of the image")
    return np.isin(labels, chosen)


def _valid_centers(region, side):
    h, w = region.shape
    half = side // 2
    cy, cx = np.nonzero(region)
    ok = (cy - half >= 0) & (cy - half + side <= h) & (cx - half >= 0) & (cx - half + side <= w)
    return np.stack([cy[ok], cx[ok]], axis=1)


def plan_paste(region, rng, side_range=(0.10, 0.25), alpha_range=(0.6, 1.0)):
    size = region.shape[0]
    lo = max(1, int(np.ceil(side_range[0] * size)))
    hi = max(lo, int(np.floor(side_range[1] * size)))
    side = int(rng.integers(lo, hi + 1))
    centers = _valid_centers(region, side)
    if len(centers) < 2:
        raise RegionTooSmall(f"region admits {len(centers)} centres for a {side}px patch")
    src = centers[rng.integers(len(centers))]
    others = centers[(centers != src).any(axis=1)]
    dst = others[rng.integers(len(others))]
    half = side // 2
    return PastePlan(
        source=(int(src[0] - half), int(src[1] - half), side),
        target=(int(dst[0] - half), int(dst[1] - half), side),
        alpha=float(rng.uniform(*alpha_range)),
    )


def apply_paste(image, plan):
    """Blend the source square onto the target square; returns ``(out, blend_mask)``."""
    image = np.asarray(image, dtype=np.float64)
    sy, sx, side = plan.source
    ty, tx, _ = plan.target
    shifted = np.zeros_like(image)
    shifted[ty : ty + side, tx : tx + side] = image[sy : sy + side, sx : sx + side]
    blend = np.zeros_like(image)
    blend[ty : ty + side, tx : tx + side] = plan.alpha
    return composite(image, shifted, blend), blend


def composite(image, pasted, blend):
    """``image * (1 - blend) + pasted * blend``, exact where ``blend == 0``."""
    out = image * (1.0 - blend) + pasted * blend
    return np.where(blend == 0, image, out)


def synthesize_anomaly(image, region, rng):
    """One synthetic anomaly; returns ``(augmented, blend_mask)``."""
    return apply_paste(image, plan_paste(region, rng))


def augment(image, rng):
    """Segment then paste: the full augmentation for one normal image."""
    return synthesize_anomaly(image, segment_region(image), rng)[0]
