"""MAE pre-training and the synthetic-anomaly proxy task on frozen features."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import vit
from .anatpaste import augment
from .autodiff import Tensor
from .exceptions import EmptyDataset, SegmentationEmpty
from .masking import generate_mask_batch, visible_indices
from .rng import stream
from .utils import batches, param_hash

logger = logging.getLogger(__name__)


def masked_reconstruction_loss(params, images, masks, config):
    """Average over images and masks of the masked-pixel MSE.

    ``masks`` is ``[B, T]`` or ``[B, L, T]`` (True = hidden). Every mask hides
    the same number of tokens, so one mean over all masked pixels equals the
    mean of the per-image, per-mask terms.
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim == 2:
        masks = masks[:, None]
    B, L, T = masks.shape
    flat_masks = masks.reshape(B * L, T)
    reps = np.repeat(images, L, axis=0)
    vis = visible_indices(flat_masks)
    latent = vit.encode(params, reps, vis, config.vit)
    pred = vit.decode(params, latent, vis, config.vit)
    target = vit.patchify(reps, config.patch_size)
    element_mask = np.broadcast_to(flat_masks[..., None], target.shape)
    return ad.mse(pred, target, element_mask)


def _cycled_batches(n, batch_size, rng):
    while True:
        yield from batches(n, batch_size, rng)


def train_reconstruction(params, images, config, rng, epochs, num_masks, steps_per_epoch=None):
    """Optimise encoder+decoder ``params`` in place; returns per-epoch mean losses.

    An epoch is one shuffled pass over ``images`` unless ``steps_per_epoch``
    fixes the number of updates, in which case reshuffled passes are chained
    to fill it.
    """
    n = len(images)
    if n == 0:
        raise EmptyDataset("reconstruction training needs at least one image")
    opt = ad.AdamW(params, betas=(config.beta1, config.beta2), weight_decay=config.weight_decay)
    if steps_per_epoch is None:
        steps_per_epoch = math.ceil(n / config.batch_size)
    warmup = min(config.warmup_epochs, max(epochs - 1, 0))
    feed = _cycled_batches(n, config.batch_size, rng)
    curve, step = [], 0
    for epoch in range(epochs):
        total, seen = 0.0, 0
        for _ in range(steps_per_epoch):
            idx = next(feed)
            masks = generate_mask_batch(len(idx), config.vit.num_tokens, config.mask_ratio, num_masks, rng)
            loss = masked_reconstruction_loss(params, images[idx], masks, config)
            opt.zero_grad()
            loss.backward()
            step += 1
            opt.step(ad.lr_schedule(step, warmup, epochs, steps_per_epoch, config.lr))
            total += float(loss.data) * len(idx)
            seen += len(idx)
        curve.append(total / seen)
        logger.debug("reconstruction epoch %d loss %.5f", epoch, curve[-1])
    return curve


def encoder_decoder(params):
    return {k: v for k, v in params.items() if not k.startswith("head.")}


@dataclass
class PretrainedState:
    """Frozen encoder/decoder snapshot every later stage starts from."""

    params: dict
    loss_curve: list = field(default_factory=list)

    def __post_init__(self):
        self.params = vit.clone(encoder_decoder(self.params), requires_grad=False)
        for t in self.params.values():
            t.data.setflags(write=False)

    @property
    def hash(self):
        return param_hash(self.params)

    @property
    def encoder(self):
        return vit.subset(self.params, "encoder")

    def fresh_copy(self):
        """Trainable copy of (f0, g0) sharing no storage with the snapshot."""
        return vit.clone(self.params, requires_grad=True)


def pretrain_mae(images, config, rng):
    """Masked-reconstruction pre-training on ``images`` (T_n followed by T_u)."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise EmptyDataset("pre-training needs a non-empty training set")
    params = encoder_decoder(vit.init_params(config.vit, rng))
    curve = train_reconstruction(params, images, config, rng, config.pretrain_epochs, config.l_pretrain)
    return PretrainedState(params, curve)


# stage 1

def embed(encoder, images, config, chunk=64):
    """Pooled full-sequence embeddings ``[n, d]``; no graph is recorded."""
    images = np.asarray(images, dtype=np.float64)
    out = [vit.embed(encoder, images[i : i + chunk], config.vit).data for i in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.zeros((0, config.embed_dim))


def head_init(config, rng, embeddings, zero_last=True):
    """Fresh head with a fixed feature standardiser fitted on ``embeddings``."""
    full = vit.init_params(config.vit, rng)
    head = {k: v for k, v in full.items() if k.startswith("head.")}
    if zero_last:
        head["head.fc3.w"] = Tensor(np.zeros_like(head["head.fc3.w"].data), requires_grad=True)
    mean = embeddings.mean(axis=0)
    std = embeddings.std(axis=0) + 1e-6
    head["head.norm.mean"] = Tensor(mean)
    head["head.norm.scale"] = Tensor(1.0 / std)
    return head


def head_logits(head, embeddings):
    z = (Tensor(embeddings) - head["head.norm.mean"]) * head["head.norm.scale"]
    return vit.classify(head, z)


def predict_proba_embeddings(head, embeddings):
    return ad.softmax(head_logits(head, embeddings), axis=-1).data


def _augment_all(images, seed, key, ids):
    """One AnatPaste draw per image from the stream ``(seed, "anatpaste", *key, id)``."""
    out = np.empty_like(images)
    for j, (img, image_id) in enumerate(zip(images, ids)):
        try:
            out[j] = augment(img, stream(seed, "anatpaste", *key, int(image_id)))
        except SegmentationEmpty as exc:
            raise SegmentationEmpty(f"image {image_id}: {exc}") from exc
    return out


@dataclass
class Stage1Result:
    head: dict
    loss_curve: list
    train_accuracy: float
    val_accuracy: float
    val_auc: float = None
    encoder_hash: str = None


def train_stage1(encoder, normal_images, config, rng):
    """Train only the MLP head to tell normals (0) from AnatPaste anomalies (1).

    Every epoch redraws ``stage1_augmentations`` synthetic anomalies per
    normal image, each paired with its source; a batch holds equal numbers of
    both labels.
    """
    from .metrics import auroc

    normal_images = np.asarray(normal_images, dtype=np.float64)
    n = len(normal_images)
    if n == 0:
        raise EmptyDataset("stage 1 needs normal training images")
    if any(t.requires_grad for t in encoder.values()):
        raise ValueError("stage 1 expects a frozen encoder (requires_grad=False)")
    before = param_hash(encoder)
    seed = int(rng.integers(2 ** 31))
    order = rng.permutation(n)
    n_val = int(round(config.stage1_val_fraction * n)) if n >= 10 else 0
    val_ids, train_ids = order[:n_val], order[n_val:]
    train_imgs = normal_images[train_ids]
    z_normal = embed(encoder, train_imgs, config)
    head = head_init(config, rng, z_normal)
    trainable = {k: v for k, v in head.items() if v.requires_grad}
    opt = ad.AdamW(trainable, betas=(config.beta1, config.beta2), weight_decay=config.weight_decay)
    pairs_per_batch = max(1, config.batch_size // 2)
    draws = config.stage1_augmentations
    n_pairs = draws * len(train_ids)
    steps_per_epoch = math.ceil(n_pairs / pairs_per_batch)
    epochs = config.stage1_epochs
    warmup = min(config.warmup_epochs, max(epochs - 1, 0))
    pair_normal = np.tile(np.arange(len(train_ids)), draws)
    curve, step = [], 0
    for epoch in range(epochs):
        z_aug = np.concatenate(
            [embed(encoder, _augment_all(train_imgs, seed, (epoch, r), train_ids), config) for r in range(draws)]
        )
        total = 0.0
        for idx in batches(n_pairs, pairs_per_batch, rng):
            z = np.concatenate([z_normal[pair_normal[idx]], z_aug[idx]])
            labels = np.concatenate([np.zeros(len(idx), int), np.ones(len(idx), int)])
            loss = ad.cross_entropy(head_logits(head, z), labels)
            opt.zero_grad()
            loss.backward()
            step += 1
            opt.step(ad.lr_schedule(step, warmup, epochs, steps_per_epoch, config.head_lr))
            total += float(loss.data) * len(idx)
        curve.append(total / n_pairs)
        logger.debug("stage1 epoch %d loss %.5f", epoch, curve[-1])

    def accuracy_and_auc(images, ids, tag):
        if len(images) == 0:
            return float("nan"), None
        z = np.concatenate([embed(encoder, images, config), embed(encoder, _augment_all(images, seed, (tag,), ids), config)])
        labels = np.concatenate([np.zeros(len(images), int), np.ones(len(images), int)])
        proba = predict_proba_embeddings(head, z)
        acc = float(np.mean(proba.argmax(axis=1) == labels))
        return acc, auroc(proba[:, 1], labels)

    train_acc, _ = accuracy_and_auc(train_imgs, train_ids, "eval-train")
    val_acc, val_auc = accuracy_and_auc(normal_images[val_ids], val_ids, "eval-val")
    if param_hash(encoder) != before:
        raise AssertionError("encoder parameters changed during stage 1")
    return Stage1Result(head, curve, train_acc, val_acc, val_auc, before)


def score_stage1(encoder, head, images, config):
    """Probability of the abnormal class for each image."""
    return predict_proba_embeddings(head, embed(encoder, images, config))[:, 1]


def stage1_probabilities(encoder, head, images, config):
    return predict_proba_embeddings(head, embed(encoder, images, config))
