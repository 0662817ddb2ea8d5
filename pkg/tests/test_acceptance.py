"""Acceptance gate: the nine binding criteria, each with its stated tolerance.

Reports for criteria 1-7 are built by pure functions of the seed and
serialized to JSON; wall-clock timings are kept outside the reports so the
determinism criterion can compare the report bytes directly. Every test
prints a PASS line with the measured numbers so the suite output doubles as
the acceptance report.
"""

import itertools
import json
import time

import numpy as np
import pytest
import torch

from setseg import codec as codec_mod
from setseg import refine, verify
from setseg.matching import (CostWeights, GroundTruthSet, PredictionSet,
                             build_cost_matrix, hungarian)
from setseg.shapes import ShapesConfig, gen_shapes, mask_corpus

torch.set_num_threads(1)

SEED = 0


# ---------------------------------------------------------------------------
# Report builders (pure functions of the seed; everything JSON-serializable)
# ---------------------------------------------------------------------------

def report_matching(seed):
    rng = np.random.default_rng(seed)
    exact = 0
    worst_gap = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 7))          # n <= 6
        k = int(rng.integers(n, 9))          # k <= 8
        cost = rng.standard_normal((n, k))
        a = hungarian(cost)
        brute = min(sum(cost[i, j] for i, j in enumerate(perm))
                    for perm in itertools.permutations(range(k), n))
        gap = abs(a.total_cost - brute)
        worst_gap = max(worst_gap, gap)
        exact += int(gap <= 1e-12)
    return {"instances": 200, "exact": exact, "worst_gap": worst_gap}


def _large_mask_corpus(seed, count=500):
    doc, _ = gen_shapes(ShapesConfig(seed=seed + 70), 260)
    masks = mask_corpus(doc, 28)
    assert len(masks) >= count
    return masks[:count]


def report_codec(seed):
    masks = _large_mask_corpus(seed)
    codec = codec_mod.fit(masks, dim=20, center=True)
    err = codec_mod.reconstruction_error(codec, masks)
    X = masks.reshape(len(masks), -1)
    sv = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    oracle = float((sv[20:] ** 2).sum())
    rel = abs(err - oracle) / max(oracle, 1.0)
    rng = np.random.default_rng(seed + 1)
    Xc = X - codec.mean
    beaten = 0
    for _ in range(20):
        q, _ = np.linalg.qr(rng.standard_normal((X.shape[1], 20)))
        resid = Xc - (Xc @ q) @ q.T
        beaten += int((resid ** 2).sum() >= err - 1e-9)
    return {"masks": len(masks), "fitted_error": err, "svd_oracle": oracle,
            "relative_gap": rel, "random_bases_beaten": beaten}


def report_spectrum(seed):
    masks = _large_mask_corpus(seed)
    rows = codec_mod.energy_spectrum(masks)
    ratios = rows[:, 1]
    cumulative = np.cumsum(ratios)
    return {
        "components": len(ratios),
        "monotone_nonincreasing": bool((np.diff(ratios) <= 1e-12).all()),
        "cumulative_at_rank_60": float(cumulative[min(59, len(ratios) - 1)]),
        "cumulative_total": float(cumulative[-1]),
    }


def report_recon_sweep(seed):
    masks = _large_mask_corpus(seed)
    dims = [10, 20, 40, 60, 80, 28 * 28]
    means = []
    for dim in dims:
        codec = codec_mod.fit(masks, dim=dim, center=True)
        means.append(float(np.mean([codec_mod.reconstruction_iou(codec, m)
                                    for m in masks])))
    return {"dims": dims, "mean_iou": means}


def report_cost_identities(seed):
    doc, _ = gen_shapes(ShapesConfig(seed=seed + 71), 8)
    masks = mask_corpus(doc, 28)
    codec = codec_mod.fit(masks, dim=12, center=True)
    w = CostWeights()  # (l1, giou, cls, mask) = (5, 2, 2, 2)
    m = masks[0]
    box = np.array([0.1, 0.2, 0.6, 0.8])
    g = codec_mod.encode(codec, m)
    gt = GroundTruthSet(boxes=box[None], classes=[1], masks=m[None])
    perfect = PredictionSet(boxes=box[None], probs=[[0.0, 1.0, 0.0, 0.0]],
                            embeddings=(3.0 * g)[None])
    cell = build_cost_matrix(gt, perfect, codec, w)[0, 0]
    anti = PredictionSet(boxes=box[None], probs=[[0.0, 1.0, 0.0, 0.0]],
                         embeddings=(-g)[None])
    anti_cell = build_cost_matrix(gt, anti, codec, w)[0, 0]
    return {
        "weights": [w.l1, w.giou, w.cls, w.mask],
        "perfect_cell": float(cell),            # box 0, class -2, mask -2
        "perfect_expected": -(w.cls + w.mask),
        "anti_cell": float(anti_cell),          # box 0, class -2, mask 0
        "anti_expected": -w.cls,
    }


def report_gradients(seed):
    return verify.run_suite("all", n_points=50, seed=seed)


def toy_fixture():
    """The frozen criterion-7 configuration: 20 images, k=10, N=2."""
    doc, images = gen_shapes(ShapesConfig(seed=7), 20)
    masks = mask_corpus(doc, 28)
    codec = codec_mod.fit(masks, dim=20, center=True)
    cfg = refine.toy_overfit_config()
    return doc, images, codec, cfg


def report_overfit(seed, keep_model=None):
    doc, images, codec, cfg = toy_fixture()
    model, metrics = refine.train_toy(doc, images, codec, cfg, max_steps=2000)
    quality = refine.evaluate_toy(model, doc, images, codec)
    if keep_model is not None:
        keep_model.append(model)
    return {
        "config": cfg.to_dict(),
        "steps": len(metrics),
        "initial_loss": metrics[0]["loss"],
        "final_loss": metrics[-1]["loss"],
        "loss_reduction": 1.0 - metrics[-1]["loss"] / metrics[0]["loss"],
        **quality,
    }


_BUILDERS = {
    "criterion_1_matching": report_matching,
    "criterion_2_codec": report_codec,
    "criterion_3_spectrum": report_spectrum,
    "criterion_4_recon_sweep": report_recon_sweep,
    "criterion_5_cost_identities": report_cost_identities,
    "criterion_6_gradients": report_gradients,
    "criterion_7_overfit": report_overfit,
}


def build_reports(seed, keep_model=None):
    reports, timings = {}, {}
    for name, builder in _BUILDERS.items():
        start = time.perf_counter()
        if name == "criterion_7_overfit":
            reports[name] = builder(seed, keep_model=keep_model)
        else:
            reports[name] = builder(seed)
        timings[name] = time.perf_counter() - start
    return reports, timings


@pytest.fixture(scope="module")
def runs():
    models = []
    first, timings = build_reports(SEED, keep_model=models)
    second, _ = build_reports(SEED)
    return first, second, timings, models[0]


class TestAcceptance:
    def test_criterion_1_matching_optimality(self, runs):
        rep = runs[0]["criterion_1_matching"]
        seconds = runs[2]["criterion_1_matching"]
        assert rep["exact"] == rep["instances"]
        assert rep["worst_gap"] <= 1e-12
        assert seconds < 5.0
        print(f"\ncriterion 1 PASS: 200/200 exact, worst gap "
              f"{rep['worst_gap']:.2e}, {seconds:.2f}s")

    def test_criterion_2_codec_optimality(self, runs):
        rep = runs[0]["criterion_2_codec"]
        seconds = runs[2]["criterion_2_codec"]
        assert rep["relative_gap"] <= 1e-8
        assert rep["random_bases_beaten"] == 20
        assert seconds < 30.0
        print(f"\ncriterion 2 PASS: SVD gap {rep['relative_gap']:.2e}, "
              f"20/20 random bases beaten, {seconds:.2f}s")

    def test_criterion_3_spectrum_trend(self, runs):
        rep = runs[0]["criterion_3_spectrum"]
        assert rep["monotone_nonincreasing"]
        assert rep["cumulative_total"] <= 1.0 + 1e-6
        assert 0.0 < rep["cumulative_at_rank_60"] <= 1.0 + 1e-6
        print(f"\ncriterion 3 PASS: monotone spectrum, cumulative@60 = "
              f"{rep['cumulative_at_rank_60']:.4f}")

    def test_criterion_4_recon_monotone(self, runs):
        rep = runs[0]["criterion_4_recon_sweep"]
        means = rep["mean_iou"]
        assert all(a <= b + 1e-9 for a, b in zip(means, means[1:]))
        assert means[-1] == 1.0
        print(f"\ncriterion 4 PASS: mean IoU over l={rep['dims']}: "
              + ", ".join(f"{m:.4f}" for m in means))

    def test_criterion_5_cost_identities(self, runs):
        rep = runs[0]["criterion_5_cost_identities"]
        assert abs(rep["perfect_cell"] - rep["perfect_expected"]) <= 1e-9
        assert abs(rep["anti_cell"] - rep["anti_expected"]) <= 1e-9
        print(f"\ncriterion 5 PASS: perfect pair cost {rep['perfect_cell']:.12f}"
              f" (expected {rep['perfect_expected']}), anti-aligned "
              f"{rep['anti_cell']:.12f} (expected {rep['anti_expected']})")

    def test_criterion_6_gradient_correctness(self, runs):
        rep = runs[0]["criterion_6_gradients"]
        seconds = runs[2]["criterion_6_gradients"]
        assert rep["pass"]
        assert seconds < 120.0
        worst = max(s["max_rel_error"] for s in rep["scopes"].values())
        assert worst <= 1e-4
        print(f"\ncriterion 6 PASS: worst relative error {worst:.2e} over "
              f"{len(rep['scopes'])} scopes x 50 points, {seconds:.1f}s")

    def test_criterion_7_toy_overfit(self, runs):
        rep = runs[0]["criterion_7_overfit"]
        seconds = runs[2]["criterion_7_overfit"]
        assert rep["steps"] <= 2000
        assert rep["loss_reduction"] >= 0.90
        assert rep["mean_best_mask_iou"] >= 0.70
        assert rep["mean_best_box_iou"] >= 0.80
        stages = rep["stage_mean_box_iou"]
        assert stages[-1] >= stages[0]
        assert seconds < 900.0
        print(f"\ncriterion 7 PASS: loss {rep['initial_loss']:.1f} -> "
              f"{rep['final_loss']:.3f} ({100 * rep['loss_reduction']:.1f}%), "
              f"box IoU {rep['mean_best_box_iou']:.3f}, mask IoU "
              f"{rep['mean_best_mask_iou']:.3f}, stage box IoU "
              f"{stages[0]:.3f} -> {stages[-1]:.3f}, {seconds:.0f}s")

    def test_criterion_8_set_prediction_contract(self, runs):
        doc, images, codec, cfg = toy_fixture()
        model = runs[3]
        counts = []
        for im in doc.images:
            final, scores, _ = refine.run_inference(
                model, model.pyramid_for(images[im.id]))
            counts.append(final.count)
        assert all(c == cfg.k for c in counts)
        # No suppression anywhere: the inference path exposes no NMS/merge
        # hook, asserted structurally on the module surface.
        assert not any("nms" in name.lower() or "suppress" in name.lower()
                       for name in dir(refine))
        hs = runs[0]["criterion_7_overfit"]["high_score_per_gt"]
        assert hs <= 2.0
        print(f"\ncriterion 8 PASS: exactly k={cfg.k} predictions on all "
              f"{len(counts)} images, {hs:.2f} high-score predictions per "
              f"ground truth (threshold 2)")

    def test_criterion_9_determinism(self, runs):
        first, second = runs[0], runs[1]
        a = json.dumps(first, sort_keys=True).encode()
        b = json.dumps(second, sort_keys=True).encode()
        assert a == b
        print("\ncriterion 9 PASS: two same-seed single-threaded runs of "
              "criteria 1-7 produced byte-identical reports "
              f"({len(a)} bytes)")
