"""End-to-end acceptance checks, one test per criterion.

The pipeline criteria share module-scoped runs at the default configuration
(four seeds at anomaly ratios 0.8 and 0.0), so the whole file takes a while.
A summary line per criterion is printed at the end of the session.
"""

import math
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import pytest

from amae import autodiff as ad
from amae import metrics, vit
from amae.anatpaste import apply_paste, plan_paste, segment_region, synthesize_anomaly
from amae.autodiff import Tensor
from amae.checkpoint import decode_checkpoint, encode_checkpoint
from amae.cli import write_scores
from amae.config import RunConfig
from amae.exceptions import CheckpointError
from amae.masking import generate_mask_batch, generate_masks, masked_count
from amae.pipeline import run_pipeline, stage2_streams
from amae.rng import stream
from amae.stage1 import pretrain_mae, score_stage1, train_stage1
from amae.stage2 import (
    DualModules,
    adapt_module,
    adaptation_steps,
    score_dual,
    score_reconstruction,
    select_by_confidence,
)
from amae.synth import build_split, generate_image
from amae.utils import param_hash
from helpers import check_gradients, tiny_config
from oracles import ap_enumerate, auc_pairs, top_k_select, welch_quad

CONFIG = RunConfig()
SEEDS = CONFIG.seeds


def detail(record_property, text):
    record_property("detail", text)


# shared pipeline runs

@dataclass
class SeedRun:
    seed: int
    split: object
    result: object
    pretrain_seconds: float
    stage1_seconds: float
    heldout_auc: float
    hash_checks: dict
    baseline: np.ndarray = None
    inter_all: np.ndarray = None

    @property
    def labels(self):
        return self.split.test_labels

    @property
    def auc(self):
        return metrics.auroc(self.result.scores, self.labels)


def heldout_synthetic_auc(pretrained, stage1, split, seed):
    """Stage-1 AUC on unseen test normals against AnatPaste versions of them."""
    normals = split.test[split.test_labels == 0]
    pasted = np.stack([synthesize_anomaly(x, segment_region(x), stream(seed, "heldout", i))[0]
                       for i, x in enumerate(normals)])
    scores = score_stage1(pretrained.encoder, stage1.head, np.concatenate([normals, pasted]), CONFIG)
    return metrics.auroc(scores, np.r_[np.zeros(len(normals)), np.ones(len(pasted))])


def run_seed(seed, ar, ablations):
    split = build_split(CONFIG.n, CONFIG.m, CONFIG.s, ar, seed)
    t0 = time.perf_counter()
    pretrained = pretrain_mae(split.train, CONFIG, stream(seed, "pretrain"))
    t1 = time.perf_counter()
    f0 = pretrained.hash
    encoder_hash = param_hash(pretrained.encoder)
    stage1 = train_stage1(pretrained.encoder, split.normal_train, CONFIG, stream(seed, "stage1"))
    t2 = time.perf_counter()
    checks = {"f0 unchanged by stage 1": param_hash(pretrained.encoder) == encoder_hash == stage1.encoder_hash}
    result = run_pipeline(split, CONFIG, seed, pretrained=pretrained, stage1=stage1)
    run = SeedRun(seed, split, result, t1 - t0, t2 - t1, heldout_synthetic_auc(pretrained, stage1, split, seed), checks)
    if result.stage2 is not None:
        a, b = result.stage2.module_a, result.stage2.module_b
        checks["A starts from f0,g0"] = a.start_hash == f0
        checks["B starts from f0,g0"] = b.start_hash == f0
        if ablations:
            run.baseline = score_reconstruction(a, split.test, CONFIG.l_test, stream(seed, "baseline"), CONFIG).image_scores
            # Module A is trained from its own stream, so reusing it matches a fresh fit with B on all of T_u
            streams = stage2_streams(seed)
            b_all = adapt_module(pretrained, split.unlabeled_train, CONFIG, streams("moduleB"),
                                 steps_per_epoch=adaptation_steps(a.train_size, CONFIG))
            checks["B(all) starts from f0,g0"] = b_all.start_hash == f0
            run.inter_all = score_dual(DualModules(a, b_all, result.stage2.pseudo), split.test, CONFIG, streams).image_scores
    checks["f0,g0 unchanged after stage 2"] = pretrained.hash == f0
    return run


@pytest.fixture(scope="module")
def runs_ar08():
    return [run_seed(seed, 0.8, ablations=True) for seed in SEEDS]


@pytest.fixture(scope="module")
def runs_ar00():
    return [run_seed(seed, 0.0, ablations=False) for seed in SEEDS]


# property criteria

def gradient_cases(rng):
    def leaf(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    a, b, v = leaf(2, 3, 4), leaf(2, 3, 4), leaf(4)
    w, x2 = leaf(4, 5), leaf(3, 4)
    g, beta = leaf(4), leaf(4)
    tok, fill = leaf(2, 5, 4), leaf(4)
    idx = np.array([[0, 2, 4], [1, 2, 3]])
    logits = leaf(5, 2)
    mask = rng.random((2, 3, 4)) < 0.5
    mask[0, 0, 0] = True
    yield "add", lambda: ad.add(a, v), [a, v]
    yield "sub", lambda: ad.sub(a, b), [a, b]
    yield "mul", lambda: ad.mul(a, v), [a, v]
    yield "matmul", lambda: ad.matmul(a, w), [a, w]
    yield "matmul-batched", lambda: ad.matmul(a, ad.transpose(b, (0, 2, 1))), [a, b]
    yield "reshape", lambda: ad.reshape(a, (4, 6)), [a]
    yield "transpose", lambda: ad.transpose(a, (2, 0, 1)), [a]
    yield "softmax", lambda: ad.softmax(a, axis=-1), [a]
    yield "layernorm", lambda: ad.layernorm(a, g, beta), [a, g, beta]
    yield "gelu", lambda: ad.gelu(x2), [x2]
    yield "gather", lambda: ad.gather_tokens(tok, idx), [tok]
    yield "scatter", lambda: ad.scatter_tokens(ad.gather_tokens(tok, idx), idx, 5, fill), [tok, fill]
    yield "mean_pool", lambda: ad.mean_pool(tok), [tok]
    yield "mse", lambda: ad.mse(a, b, mask), [a, b]
    yield "cross_entropy", lambda: ad.cross_entropy(logits, [0, 1, 1, 0, 1]), [logits]


def micro_vit_case():
    cfg = tiny_config()
    params = vit.init_params(cfg.vit, np.random.default_rng(7))
    # fan-in scaled weights keep every gradient well above finite-difference round-off
    rng = np.random.default_rng(9)
    for name, t in params.items():
        if t.data.ndim == 2 or name.endswith("mask_token"):
            t.data[...] = 0.5 * rng.standard_normal(t.data.shape) / math.sqrt(t.data.shape[0])
        elif name.endswith((".b", ".beta")):
            t.data[...] = 0.1 * rng.standard_normal(t.data.shape)
        else:
            t.data[...] = 1.0 + 0.1 * rng.standard_normal(t.data.shape)
    images = np.random.default_rng(8).random((2, 8, 8))
    idx = np.array([[0, 3], [1, 2]])
    target = Tensor(vit.patchify(images, cfg.patch_size))
    mask = np.ones(target.shape, dtype=bool)

    def loss():
        latent = vit.encode(params, images, idx, cfg.vit)
        recon = ad.mse(vit.decode(params, latent, idx, cfg.vit), target, mask)
        logits = vit.classify(params, vit.embed(params, images, cfg.vit))
        return recon + ad.cross_entropy(logits, [0, 1])

    return loss, [params[k] for k in sorted(params)]


@pytest.mark.criterion(1, "gradient correctness")
def test_gradients(record_property):
    start = time.perf_counter()
    errors = {name: check_gradients(build, leaves) for name, build, leaves in gradient_cases(np.random.default_rng(0))}
    loss, leaves = micro_vit_case()
    errors["micro-vit"] = check_gradients(loss, leaves)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    detail(record_property, f"{len(errors)} checks, worst {worst} {errors[worst]:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")
    assert errors[worst] < 1e-4
    assert elapsed < 60


@pytest.mark.criterion(2, "metric oracles")
def test_metric_oracles(record_property):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 13))
        labels = rng.integers(0, 2, n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        scores = rng.integers(0, int(rng.integers(2, 8)), n) / 4.0
        mismatches += metrics.auroc(scores, labels) != float(auc_pairs(scores, labels))
        mismatches += metrics.average_precision(scores, labels) != float(ap_enumerate(scores, labels))
    auc = metrics.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ap = metrics.average_precision([0.9, 0.8, 0.7], [1, 0, 1])
    detail(record_property, f"{mismatches} mismatches in 1000 instances; worked AUC {auc}, AP {ap:.4f}")
    assert mismatches == 0
    assert auc == 0.75
    assert ap == float(Fraction(5, 6))


@pytest.mark.criterion(3, "pseudo-label thresholding")
def test_pseudo_label_oracle(record_property):
    rng = np.random.default_rng(3)
    bad = overlap = 0
    for _ in range(500):
        n = int(rng.integers(1, 40))
        predicted = rng.integers(0, 2, n)
        conf = np.where(rng.random(n) < 0.5, 0.5 + rng.integers(1, 10, n) / 20.0, rng.uniform(0.5, 1.0, n))
        k = float(rng.choice([5, 10, 20, 25, 33.3, 50, 66.7, 75, 90, 100]))
        p1 = np.where(predicted == 1, conf, 1 - conf)
        res = select_by_confidence(np.stack([1 - p1, p1], axis=1), k)
        for c, got in ((0, res.normal), (1, res.abnormal)):
            members = np.flatnonzero(res.predicted == c)
            want = {int(members[i]) for i in top_k_select(list(res.confidence[members]), k)}
            bad += set(got.tolist()) != want
        overlap += bool(set(res.normal.tolist()) & set(res.abnormal.tolist()))
    example = select_by_confidence(np.array([[0.4, 0.6], [0.3, 0.7], [0.2, 0.8], [0.1, 0.9]]), 50)
    picked = sorted(example.confidence[example.abnormal].tolist())
    detail(record_property, f"{bad} oracle mismatches, {overlap} overlaps in 500 sets; example kept {picked}")
    assert bad == 0 and overlap == 0
    assert picked == [0.8, 0.9]


@pytest.mark.criterion(4, "masking invariants")
def test_masking_invariants(record_property):
    T, L, sets = 64, 4, 2500
    masks = generate_mask_batch(sets, T, 0.75, L, stream(0, "acceptance", "masks"))
    counts_ok = masked_count(T, 0.75) == 48 and bool((masks.sum(axis=-1) == 48).all())
    distinct = all(len({m.tobytes() for m in group}) == L for group in masks)
    distinct &= all(
        len({m.tobytes() for m in generate_masks(T, 0.75, L, stream(0, "acceptance", "set", i)).masks}) == L
        for i in range(200)
    )
    draws = sets * L
    freq = masks.reshape(draws, T).sum(axis=0)
    mean, sigma = draws * 0.75, math.sqrt(draws * 0.75 * 0.25)
    worst = float(np.abs(freq - mean).max() / sigma)
    detail(record_property, f"48 hidden in all {draws} masks: {counts_ok}; sets distinct: {distinct}; "
                            f"worst token deviation {worst:.2f} sigma (<= 3)")
    assert counts_ok and distinct
    assert worst <= 3.0


@pytest.mark.criterion(5, "compositing identities")
def test_compositing(record_property):
    outside_ok = range_ok = hard_ok = True
    for i in range(200):
        image = generate_image(5, i, abnormal=False)
        region = segment_region(image)
        plan = plan_paste(region, stream(5, "paste", i))
        out, blend = apply_paste(image, plan)
        outside_ok &= np.array_equal(out[blend == 0], image[blend == 0])
        range_ok &= bool(0.0 <= out.min() and out.max() <= 1.0)
        hard = type(plan)(plan.source, plan.target, 1.0)
        hard_out, _ = apply_paste(image, hard)
        (sy, sx, s), (ty, tx, _) = plan.source, plan.target
        expected = image.copy()
        expected[ty : ty + s, tx : tx + s] = image[sy : sy + s, sx : sx + s]
        hard_ok &= np.array_equal(hard_out, expected)
    detail(record_property, f"200 pastes: outside bit-exact {outside_ok}, in [0,1] {range_ok}, alpha=1 hard paste {hard_ok}")
    assert outside_ok and range_ok and hard_ok


@pytest.mark.criterion(10, "Welch t-test")
def test_welch(record_property):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        a = rng.normal(rng.uniform(-1, 1), rng.uniform(0.05, 2), rng.integers(2, 12))
        b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.05, 2), rng.integers(2, 12))
        worst = max(worst, abs(metrics.welch_ttest(a, b).p - welch_quad(a, b)[2]))
    brackets = [(0.2, "ns"), (0.05000001, "ns"), (0.05, "**"), (0.03, "**"), (0.01000001, "**"), (0.01, "***"), (1e-6, "***")]
    tags_ok = all(metrics.significance_tag(p) == tag for p, tag in brackets)
    detail(record_property, f"max |p - quad| {worst:.1e} over 100 pairs (< 1e-6); tags {'ok' if tags_ok else 'wrong'}")
    assert worst < 1e-6
    assert tags_ok


# pipeline criteria

@pytest.mark.criterion(6, "stage-1 learnability")
def test_stage1_learnability(record_property, runs_ar08):
    aucs = [r.heldout_auc for r in runs_ar08]
    slowest = max(r.pretrain_seconds + r.stage1_seconds for r in runs_ar08)
    detail(record_property, f"held-out AUC {np.mean(aucs):.4f} (>= 0.85) per seed {np.round(aucs, 4).tolist()}; "
                            f"slowest pretrain+stage1 {slowest:.0f}s (< 600s)")
    assert np.mean(aucs) >= 0.85
    assert slowest < 600


@pytest.mark.criterion(7, "dual-distribution direction of effect")
def test_direction_of_effect(record_property, runs_ar08, runs_ar00):
    inter = [r.auc for r in runs_ar08]
    base = [metrics.auroc(r.baseline, r.labels) for r in runs_ar08]
    zero = [r.auc for r in runs_ar00]
    fallbacks = sum(r.result.fallback for r in runs_ar00)
    welch = metrics.welch_ttest(inter, base)
    detail(record_property, f"A_inter@0.8 {np.mean(inter):.4f} vs AR0 {np.mean(zero):.4f} ({fallbacks}/4 fell back) "
                            f"vs baseline@0.8 {np.mean(base):.4f}; Welch t={welch.t:.2f} p={welch.p:.3g} [{welch.tag}]")
    assert np.mean(inter) > np.mean(zero)
    assert np.mean(inter) > np.mean(base)


@pytest.mark.criterion(8, "pseudo-labeling benefit")
def test_pseudo_label_benefit(record_property, runs_ar08):
    def chi2(scores, labels):
        return metrics.chi2_distance(scores[labels == 0], scores[labels == 1])

    with_pl = [chi2(r.result.scores, r.labels) for r in runs_ar08]
    all_tu = [chi2(r.inter_all, r.labels) for r in runs_ar08]
    detail(record_property, f"chi2 pseudo-labeled B {np.mean(with_pl):.3f} vs B on all of T_u {np.mean(all_tu):.3f}")
    assert np.mean(with_pl) > np.mean(all_tu)


@pytest.mark.criterion(9, "reset and freeze contracts")
def test_reset_and_freeze(record_property, runs_ar08, runs_ar00):
    every = [(r.seed, name, ok) for r in runs_ar08 + runs_ar00 for name, ok in r.hash_checks.items()]
    failed = [(s, n) for s, n, ok in every if not ok]
    detail(record_property, f"{len(every) - len(failed)}/{len(every)} hash checks hold over {len(runs_ar08) + len(runs_ar00)} runs")
    assert not failed


@pytest.mark.criterion(11, "determinism and persistence")
def test_determinism_and_persistence(record_property, runs_ar08, tmp_path):
    first = runs_ar08[0]
    split = build_split(CONFIG.n, CONFIG.m, CONFIG.s, 0.8, first.seed)
    again = run_pipeline(split, CONFIG, first.seed)
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    write_scores(a, first.split.names["test"], first.result.scores)
    write_scores(b, split.names["test"], again.scores)
    identical = a.read_bytes() == b.read_bytes()

    blobs = {
        "mae": first.result.pretrained.params,
        "stage1": first.result.stage1.head,
        "moduleA": first.result.stage2.module_a.params,
        "moduleB": first.result.stage2.module_b.params,
    }
    round_trip = True
    truncations_clean = True
    for stage, params in blobs.items():
        blob = encode_checkpoint(params, CONFIG, stage)
        back = decode_checkpoint(blob, CONFIG)
        round_trip &= param_hash(back.params) == param_hash(params) and back.stage == stage
        cuts = sorted(set(range(0, 512)) | set(np.linspace(0, len(blob) - 1, 300).astype(int).tolist()))
        for cut in cuts:
            try:
                decode_checkpoint(blob[:cut])
                truncations_clean = False
            except CheckpointError:
                pass
    detail(record_property, f"scores.tsv byte-identical {identical}; 4 checkpoint round-trips bit-exact {round_trip}; "
                            f"truncations rejected {truncations_clean}")
    assert identical and round_trip and truncations_clean
