"""Shared test utilities: finite differences and tiny configurations."""

import numpy as np

from amae.config import RunConfig

FD_STEP = 1e-5


def numeric_grad(f, x, step=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = f()
        x[i] = orig - step
        lo = f()
        x[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(build, tensors, seed=0):
    """Compare backprop with central differences for every tensor in ``tensors``.

    ``build()`` returns an output Tensor, contracted with a fixed random
    cotangent so every Jacobian row contributes. Returns the worst relative error.
    """
    proj = np.random.default_rng(seed).standard_normal(build().shape)

    def loss_value():
        return float((build().data * proj).sum())

    for t in tensors:
        t.grad = None
    build().backward(proj)
    worst = 0.0
    for t in tensors:
        num = numeric_grad(loss_value, t.data)
        worst = max(worst, relative_error(t.grad, num))
    return worst


def tiny_config(**changes):
    """A model small enough for exhaustive gradient checks and quick training."""
    base = RunConfig(
        image_size=8,
        patch_size=4,
        embed_dim=8,
        encoder_depth=1,
        decoder_depth=1,
        num_heads=2,
        mlp_ratio=2,
        decoder_dim=8,
        warmup_epochs=1,
        pretrain_epochs=2,
        stage1_epochs=2,
        adapt_epochs=2,
        batch_size=4,
        n=8,
        m=8,
        s=8,
    )
    return base.replace(**changes)


def fast_config(**changes):
    """Full 32x32 geometry with a shortened schedule and small splits."""
    base = RunConfig(
        embed_dim=32,
        encoder_depth=1,
        decoder_depth=1,
        decoder_dim=16,
        mlp_ratio=2,
        warmup_epochs=1,
        pretrain_epochs=4,
        stage1_epochs=6,
        adapt_epochs=2,
        stage1_augmentations=2,
        n=24,
        m=24,
        s=16,
    )
    return base.replace(**changes)
