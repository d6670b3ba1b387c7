"""End-to-end runs and the experiment sweeps built from them."""

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import metrics
from .exceptions import InsufficientPseudoAbnormal
from .rng import stream
from .stage1 import pretrain_mae, score_stage1, train_stage1
from .stage2 import run_stage2
from .synth import build_split

logger = logging.getLogger(__name__)

SWEEP_AXES = ("ar", "mask_ratio", "l_masks")


def stage2_streams(seed):
    return lambda name: stream(seed, "stage2", name)


@dataclass
class PipelineResult:
    seed: int
    pretrained: object
    stage1: object
    stage2: object  # Stage2Result, or None after a fallback
    scores: np.ndarray  # test image scores
    fallback: bool = False

    @property
    def pixel_scores(self):
        return None if self.stage2 is None else self.stage2.scores.pixel_scores


def run_pipeline(split, config, seed, fallback=True, pretrained=None, stage1=None, module_b_source="pseudo"):
    """Pre-train, train the proxy head, adapt both modules and score ``split.test``.

    When pseudo-labeling finds no abnormal image, ``fallback=True`` scores the
    test set with the stage-1 abnormal probability; otherwise the
    :class:`InsufficientPseudoAbnormal` error propagates.
    """
    if pretrained is None:
        pretrained = pretrain_mae(split.train, config, stream(seed, "pretrain"))
    if stage1 is None:
        stage1 = train_stage1(pretrained.encoder, split.normal_train, config, stream(seed, "stage1"))
    try:
        result = run_stage2(split, pretrained, stage1, config, stage2_streams(seed), module_b_source)
    except InsufficientPseudoAbnormal:
        if not fallback:
            raise
        logger.warning("no pseudo-abnormal images; falling back to stage-1 scores")
        scores = score_stage1(pretrained.encoder, stage1.head, split.test, config)
        return PipelineResult(seed, pretrained, stage1, None, scores, fallback=True)
    return PipelineResult(seed, pretrained, stage1, result, result.scores.image_scores)


# sweeps

def sweep_point(axis, value, seed, config):
    """One (axis value, seed) run on a freshly generated split; returns ``(auc, ap)``."""
    ar = config.anomaly_ratio
    if axis == "ar":
        ar = float(value)
    elif axis == "mask_ratio":
        config = config.replace(mask_ratio=float(value))
    elif axis == "l_masks":
        config = config.replace(l_train=int(value))
    else:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    split = build_split(config.n, config.m, config.s, ar, seed)
    result = run_pipeline(split, config, seed)
    return (
        metrics.auroc(result.scores, split.test_labels),
        metrics.average_precision(result.scores, split.test_labels),
    )


def _sweep_task(args):
    return sweep_point(*args)


def worker_count():
    raw = os.environ.get("AMAE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"AMAE_THREADS must be an integer, got {raw!r}") from None


@dataclass
class SweepResult:
    axis: str
    rows: list  # (axis_value, seed, auc, ap)
    aggregate: list  # (axis_value, mean_auc, halfwidth)
    welch: list  # (value_a, value_b, WelchResult or None)


def run_sweep(axis, values, seeds, config, workers=None):
    """Run every (value, seed) pair; results do not depend on the worker count."""
    if not values or not seeds:
        raise ValueError("a sweep needs at least one value and one seed")
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    tasks = [(axis, v, s, config) for v in values for s in seeds]
    workers = worker_count() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_task, tasks))
    else:
        outcomes = [_sweep_task(t) for t in tasks]
    rows = [(v, s, auc, ap) for (_, v, s, _), (auc, ap) in zip(tasks, outcomes)]
    aucs = {v: [r[2] for r in rows if r[0] == v] for v in values}
    aggregate = [(v, *metrics.mean_halfwidth(aucs[v])) for v in values]
    welch = []
    for a, b in zip(values, values[1:]):
        try:
            welch.append((a, b, metrics.welch_ttest(aucs[a], aucs[b])))
        except (ValueError, metrics.DegenerateVariance):
            welch.append((a, b, None))
    return SweepResult(axis, rows, aggregate, welch)


def write_sweep(result, directory):
    """Write ``runs.csv``, ``aggregate.csv`` and ``welch.csv``; returns their paths."""
    os.makedirs(directory, exist_ok=True)
    paths = {name: os.path.join(directory, f"{name}.csv") for name in ("runs", "aggregate", "welch")}
    with open(paths["runs"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis_value", "seed", "auc", "ap"])
        w.writerows((v, s, repr(auc), repr(ap)) for v, s, auc, ap in result.rows)
    with open(paths["aggregate"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis_value", "mean_auc", "halfwidth_1.96std"])
        w.writerows((v, repr(m), repr(h)) for v, m, h in result.aggregate)
    with open(paths["welch"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value_a", "value_b", "t", "df", "p", "tag"])
        for a, b, res in result.welch:
            if res is None:
                w.writerow([a, b, "", "", "", "na"])
            else:
                w.writerow([a, b, repr(res.t), repr(res.df), repr(res.p), res.tag])
    return paths
