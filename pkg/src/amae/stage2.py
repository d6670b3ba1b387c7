"""Pseudo-labeling, dual-module adaptation and inter-discrepancy scoring."""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import vit
from .exceptions import EmptyDataset, InsufficientPseudoAbnormal
from .masking import generate_mask_batch, visible_indices
from .stage1 import stage1_probabilities, train_reconstruction
from .utils import param_hash

logger = logging.getLogger(__name__)


@dataclass
class PseudoLabelResult:
    normal: np.ndarray  # indices into T_u pseudo-labeled normal
    abnormal: np.ndarray  # indices into T_u pseudo-labeled abnormal
    thresholds: dict  # class -> t_c (absent for an empty group)
    predicted: np.ndarray
    confidence: np.ndarray


def top_k_rank(k_percent, group_size):
    """1-indexed rank ``ceil(K/100 * n)`` computed exactly."""
    return max(1, math.ceil(Fraction(k_percent) * group_size / 100))


def select_by_confidence(probabilities, k_percent=50):
    """Group by predicted class and keep each group's top ``K`` percent.

    Within a group sorted by descending confidence the threshold ``t_c`` is
    the confidence at rank ``ceil(K/100 * n)``; every member at or above it
    is selected.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if probabilities.ndim != 2 or probabilities.shape[1] != 2:
        raise ValueError(f"expected [M, 2] class probabilities, got {probabilities.shape}")
    if not 0 < k_percent <= 100:
        raise ValueError(f"K must lie in (0, 100], got {k_percent}")
    if len(probabilities) == 0:
        raise EmptyDataset("no unlabeled images to pseudo-label")
    predicted = probabilities.argmax(axis=1)
    confidence = probabilities.max(axis=1)
    selected, thresholds = {}, {}
    for c in (0, 1):
        members = np.flatnonzero(predicted == c)
        if len(members) == 0:
            selected[c] = members
            continue
        ranked = np.sort(confidence[members])[::-1]
        t_c = ranked[top_k_rank(k_percent, len(members)) - 1]
        thresholds[c] = float(t_c)
        selected[c] = members[confidence[members] >= t_c]
    return PseudoLabelResult(selected[0], selected[1], thresholds, predicted, confidence)


def pseudo_label(encoder, head, unlabeled, config, k_percent=None):
    """Pseudo-label ``unlabeled`` with the stage-1 classifier.

    Raises :class:`InsufficientPseudoAbnormal` when no image is kept as abnormal.
    """
    probs = stage1_probabilities(encoder, head, unlabeled, config)
    result = select_by_confidence(probs, config.k if k_percent is None else k_percent)
    if len(result.abnormal) == 0:
        raise InsufficientPseudoAbnormal(
            "pseudo-labeling kept no abnormal image, so Module B has nothing to train on; "
            "the unlabeled set may contain no anomalies (use Stage-1 scores instead)"
        )
    return result


@dataclass
class AdaptedModule:
    params: dict
    start_hash: str
    loss_curve: list = field(default_factory=list)
    train_size: int = 0


def adaptation_steps(n_images, config):
    """Updates per epoch shared by both modules: one pass over Module A's set."""
    return math.ceil(n_images / config.batch_size)


def adapt_module(pretrained, images, config, rng, num_masks=None, steps_per_epoch=None):
    """Fresh copy of (f0, g0) trained on ``images`` with ``L`` masks per image.

    ``steps_per_epoch`` pins the update budget so a small training set is
    revisited rather than trained for fewer updates.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise EmptyDataset("cannot adapt a module on an empty image set")
    params = pretrained.fresh_copy()
    start = param_hash(params)
    L = config.l_train if num_masks is None else num_masks
    curve = train_reconstruction(params, images, config, rng, config.adapt_epochs, L, steps_per_epoch)
    return AdaptedModule(params, start, curve, len(images))


def compose_reconstructions(pred_patches, target_patches, masks, mode="composite"):
    """Per-mask reconstructed patches: predictions where hidden, input where visible."""
    if mode == "decoder":
        return pred_patches
    return np.where(masks[..., None], pred_patches, target_patches)


def reconstruct_mean(params, images, num_masks, rng, config, masks=None, chunk=32, predictor=None):
    """Pixelwise mean of ``L`` masked reconstructions per image, ``[n, H, W]``.

    ``masks`` (``[n, L, T]``) overrides the random draw. ``predictor`` replaces
    the encoder/decoder with ``f(images, visible_idx) -> [B, T, p*p]`` (used by
    test rigs).
    """
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    cfg = config.vit
    if masks is None:
        masks = generate_mask_batch(n, cfg.num_tokens, config.mask_ratio, num_masks, rng)
    L = masks.shape[1]
    out = np.empty_like(images)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        m = masks[sl].reshape(-1, cfg.num_tokens)
        reps = np.repeat(images[sl], L, axis=0)
        vis = visible_indices(m)
        if predictor is None:
            pred = vit.decode(params, vit.encode(params, reps, vis, cfg), vis, cfg).data
        else:
            pred = predictor(reps, vis)
        target = vit.patchify(reps, cfg.patch_size)
        comp = compose_reconstructions(pred, target, m, config.reconstruction)
        recon = vit.unpatchify(comp, cfg.patch_size).reshape(-1, L, *images.shape[1:])
        out[sl] = recon.mean(axis=1)
    return out


@dataclass
class AnomalyScoreMap:
    pixel_scores: np.ndarray  # [n, H, W]
    image_scores: np.ndarray  # [n]


def inter_discrepancy(mean_a, mean_b):
    pixel = np.abs(np.asarray(mean_a) - np.asarray(mean_b))
    return AnomalyScoreMap(pixel, pixel.reshape(len(pixel), -1).mean(axis=1))


def score_inter(module_a, module_b, images, num_masks, rng_a, rng_b, config, masks_a=None, masks_b=None):
    """``|mean_A - mean_B|`` per pixel and its image mean.

    The modules draw masks independently unless ``config.shared_test_masks``
    (or explicit shared ``masks_a``/``masks_b``) says otherwise.
    """
    images = np.asarray(images, dtype=np.float64)
    if masks_a is None and config.shared_test_masks:
        masks_a = generate_mask_batch(len(images), config.vit.num_tokens, config.mask_ratio, num_masks, rng_a)
        masks_b = masks_a
    mu_a = reconstruct_mean(_params(module_a), images, num_masks, rng_a, config, masks=masks_a)
    mu_b = reconstruct_mean(_params(module_b), images, num_masks, rng_b, config, masks=masks_b)
    return inter_discrepancy(mu_a, mu_b)


def score_reconstruction(module, images, num_masks, rng, config):
    """Single-module baseline: mean ``|mean_A - x|`` per image."""
    images = np.asarray(images, dtype=np.float64)
    mu = reconstruct_mean(_params(module), images, num_masks, rng, config)
    err = np.abs(mu - images)
    return AnomalyScoreMap(err, err.reshape(len(err), -1).mean(axis=1))


def _params(module):
    return module.params if isinstance(module, AdaptedModule) else module


@dataclass
class DualModules:
    module_a: AdaptedModule
    module_b: AdaptedModule
    pseudo: PseudoLabelResult


@dataclass
class Stage2Result:
    module_a: AdaptedModule
    module_b: AdaptedModule
    pseudo: PseudoLabelResult
    scores: AnomalyScoreMap


def fit_dual_modules(normal, unlabeled, pretrained, stage1, config, rng_root, module_b_source="pseudo"):
    """Pseudo-label ``unlabeled``, then adapt Module A on T_n + T_un and Module B on T_ua.

    Both modules receive the same number of updates, one pass over Module A's
    set per epoch. ``rng_root`` is a callable ``name -> Generator`` giving each
    sub-task its own stream. ``module_b_source="all"`` trains Module B on all
    of ``unlabeled`` (the no-pseudo-label ablation).
    """
    normal = np.asarray(normal, dtype=np.float64)
    unlabeled = np.asarray(unlabeled, dtype=np.float64)
    pseudo = pseudo_label(pretrained.encoder, stage1.head, unlabeled, config)
    a_images = np.concatenate([normal, unlabeled[pseudo.normal]])
    budget = adaptation_steps(len(a_images), config)
    module_a = adapt_module(pretrained, a_images, config, rng_root("moduleA"), steps_per_epoch=budget)
    if module_b_source == "pseudo":
        b_images = unlabeled[pseudo.abnormal]
    elif module_b_source == "all":
        b_images = unlabeled
    else:
        raise ValueError(f"unknown module_b_source {module_b_source!r}")
    module_b = adapt_module(pretrained, b_images, config, rng_root("moduleB"), steps_per_epoch=budget)
    for module in (module_a, module_b):
        if module.start_hash != pretrained.hash:
            raise AssertionError("module did not start from the pre-trained weights")
    logger.info(
        "stage2: |T_un|=%d |T_ua|=%d |A|=%d |B|=%d",
        len(pseudo.normal), len(pseudo.abnormal), module_a.train_size, module_b.train_size,
    )
    return DualModules(module_a, module_b, pseudo)


def score_dual(dual, images, config, rng_root):
    """Inter-discrepancy maps of ``images`` under fitted modules."""
    return score_inter(
        dual.module_a, dual.module_b, images, config.l_test, rng_root("score-A"), rng_root("score-B"), config
    )


def run_stage2(split, pretrained, stage1, config, rng_root, module_b_source="pseudo"):
    """Fit both modules on the split's training sets and score its test set."""
    dual = fit_dual_modules(
        split.normal_train, split.unlabeled_train, pretrained, stage1, config, rng_root, module_b_source
    )
    scores = score_dual(dual, split.test, config, rng_root)
    return Stage2Result(dual.module_a, dual.module_b, dual.pseudo, scores)
