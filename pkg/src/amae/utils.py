"""Input validation and small numeric helpers."""

import hashlib
import math

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import EmptyDataset, ShapeMismatch


def round_half_up(x):
    return int(math.floor(x + 0.5))


def check_images(X, image_size=None, name="X", allow_empty=False):
    """Validate a stack of grayscale images and return it as float64 ``[n, H, W]``.

    A single ``[H, W]`` image is promoted to a batch of one. Pixel values must
    be finite and lie in [0, 1].
    """
    X = np.asarray(X)
    if X.ndim == 2 and image_size is not None and X.shape == (image_size, image_size):
        X = X[None]
    if X.ndim == 3 and X.shape[0] == 0:
        if allow_empty:
            return X.astype(np.float64)
        raise EmptyDataset(f"{name} contains no images")
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True, ensure_min_samples=1)
    if X.ndim != 3:
        raise ShapeMismatch(f"{name} must be a stack of 2-d images, got shape {X.shape}")
    if image_size is not None and X.shape[1:] != (image_size, image_size):
        raise ShapeMismatch(f"{name} images are {X.shape[1]}x{X.shape[2]}, expected {image_size}x{image_size}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} pixel values must lie in [0, 1]")
    return X


def param_hash(params):
    """SHA-256 over sorted parameter names and their float64 bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        value = params[name]
        data = getattr(value, "data", value)
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return h.hexdigest()


def batches(n, batch_size, rng=None):
    """Index batches over ``range(n)``, shuffled when ``rng`` is given."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
