"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``. The phantom
experiments (criteria 5 and 6) take about 45 minutes on one CPU core.
"""

import itertools
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

import oracles
from acceptance_log import report
from fusionseg import metrics
from fusionseg.data import PhantomSpec, consensus_mask, fold_dissimilarity, generate_phantom, make_folds
from fusionseg.io import prepare_study
from fusionseg.networks import (BackboneConfig, FusionConfig, build_fused, forward, load_checkpoint,
                                model_digest, save_checkpoint)
from fusionseg.training import TrainConfig, evaluate_dsc, evaluate_model, loss, seed_everything, train
from fusionseg.volume import BinaryMask
from test_data import Entry, random_manifest
from test_networks import directional_check

STRATEGIES = ("single:bmode", "early", "intermediate", "late")

# Phantom experiment settings (criteria 5 and 6).
EXP_GRID = 32
EXP_BACKBONE = dict(kind="unet", base_filters=8, depth=3)
EXP_LR = 1e-3
EXP_SEEDS = (0, 1, 2)


# -- 1. metric oracles -----------------------------------------------------------

def hand_cases():
    one = np.zeros((3, 3, 3), bool)
    one[1, 1, 1] = True
    corner = np.zeros((3, 3, 3), bool)
    corner[0, 0, 2] = True
    full = np.ones((4, 3, 2), bool)
    left = np.zeros((6, 4, 4), bool)
    left[:2] = True
    right = np.zeros((6, 4, 4), bool)
    right[4:] = True
    return [
        (one, one, (1.0, 1.0, 1.0)),
        (one, corner, (0.5, 2.0, 1.5)),
        (full, full, (1.0, 2.0, 3.0)),
        (left, right, (1.0, 1.0, 1.0)),
        (left, left | right, (2.0, 1.0, 0.7)),
    ]


def test_1_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    pairs = hand_cases() + [oracles.random_pair(rng) for _ in range(200)]
    worst_dist = worst_identity = 0.0
    overlap_ok = True
    checked = 0
    for a, b, sp in pairs:
        d, j = metrics.dice(a, b), metrics.jaccard(a, b)
        overlap_ok &= d == oracles.dice(a, b) and j == oracles.jaccard(a, b)
        worst_identity = max(worst_identity, abs(j - d / (2 - d)))
        if a.any() and b.any():
            checked += 1
            worst_dist = max(worst_dist,
                             abs(metrics.hd95(a, b, sp) - oracles.hd95(a, b, sp)),
                             abs(metrics.msd(a, b, sp) - oracles.msd(a, b, sp)))
    elapsed = time.perf_counter() - t0
    ok = overlap_ok and worst_dist <= 1e-9 and worst_identity <= 1e-12 and elapsed < 60
    report(1, "metric oracle suite", ok,
           f"{len(pairs)} pairs ({checked} with surfaces), overlap exact={overlap_ok}, "
           f"max distance err {worst_dist:.1e} mm, max identity err {worst_identity:.1e}, {elapsed:.1f}s")


# -- 2. architecture contract ---------------------------------------------------

def contract_errors(kind, fusion, side, base, seed):
    """Max deviations of the deep-supervision and late-fusion identities plus range flags."""
    torch.manual_seed(seed)
    m = build_fused(BackboneConfig(kind, base_filters=base), FusionConfig.parse(fusion)).eval()
    x = torch.randn(1, m.in_channels, side, side, side)
    with torch.no_grad():
        out = m(x)
        groups = m.branch_outputs(x)
        shape_ok = tuple(out.shape) == (1, 1, side, side, side)
        range_ok = bool(((out > 0) & (out < 1)).all())
        ds_err = late_err = 0.0
        if kind == "unetpp":
            shape_ok &= all(len(g) == 4 for g in groups)
            if fusion != "late":
                ds_err = float((out - torch.stack(groups[0]).mean(0)).abs().max())
        if fusion == "late":
            # each submodel run on its own channel, outside the fused forward
            subs = [torch.stack(b(x[:, k:k + 1])).mean(0) for k, b in enumerate(m.branches)]
            late_err = float((out - (subs[0] + subs[1]) / 2).abs().max())
    return shape_ok, range_ok, ds_err, late_err


def zero_grad_params(kind, fusion, side, base, seed):
    torch.manual_seed(seed)
    m = build_fused(BackboneConfig(kind, base_filters=base), FusionConfig.parse(fusion)).train()
    x = torch.randn(2, m.in_channels, side, side, side)
    gt = (torch.rand(2, 1, side, side, side) > 0.5).float()
    torch.stack([loss(h, gt) for h in m.head_outputs(x)]).mean().backward()
    return [n for n, p in m.named_parameters() if p.grad is None or float(p.grad.norm()) == 0]


def test_2_architecture_contract():
    t0 = time.perf_counter()
    problems = []
    worst_ds = worst_late = 0.0
    for (side, base), kind, fusion in itertools.product(((64, None), (16, 4)), ("unet", "unetpp"), STRATEGIES):
        shape_ok, range_ok, ds_err, late_err = contract_errors(kind, fusion, side, base, seed=side)
        worst_ds, worst_late = max(worst_ds, ds_err), max(worst_late, late_err)
        if not (shape_ok and range_ok):
            problems.append(f"{kind}/{fusion}@{side}: shape {shape_ok} range {range_ok}")
        if side == 16:
            dead = zero_grad_params(kind, fusion, side, base, seed=1)
            if dead:
                problems.append(f"{kind}/{fusion}@{side}: no gradient for {dead[:3]}")
    elapsed = time.perf_counter() - t0
    ok = not problems and worst_ds <= 1e-6 and worst_late <= 1e-7 and elapsed < 300
    report(2, "architecture contract suite", ok,
           f"16 configs, deep-supervision err {worst_ds:.1e}, late-fusion err {worst_late:.1e}, "
           f"{elapsed:.0f}s" + (f"; {problems}" if problems else ""))


# -- 3. gradient check ------------------------------------------------------------
# An 8^3 grid allows at most three poolings, so depth is 3 here.

def test_3_gradient_check():
    t0 = time.perf_counter()
    rel = {}
    for kind in ("unet", "unetpp"):
        torch.manual_seed(7)
        m = build_fused(BackboneConfig(kind, base_filters=2, depth=3), FusionConfig.parse("early")).double()
        # batch of two: batch norm on a 1^3 bottleneck needs more than one value
        x = torch.randn(2, 2, 8, 8, 8, dtype=torch.float64)
        gt = (torch.rand(2, 1, 8, 8, 8) > 0.5).double()
        a, n = directional_check(m, x, gt)
        rel[kind] = abs(a - n) / max(abs(a), abs(n))
    elapsed = time.perf_counter() - t0
    ok = max(rel.values()) <= 1e-3 and elapsed < 120
    report(3, "finite-difference gradient check", ok,
           ", ".join(f"{k} rel err {v:.1e}" for k, v in rel.items()) + f", {elapsed:.1f}s")


# -- 4 and 8. overfit smoke test and determinism ---------------------------------

OVERFIT_GRID = 16
OVERFIT_CFG = TrainConfig(epochs=200, initial_lr=3e-3, lr_step=1000, batch_size=1, augment=False, seed=11)


def overfit_run():
    study = prepare_study(generate_phantom(PhantomSpec(shape=(OVERFIT_GRID,) * 3, seed=5), "p0"),
                          (OVERFIT_GRID,) * 3)
    seed_everything(OVERFIT_CFG.seed)
    m = build_fused(BackboneConfig("unet", base_filters=8, depth=3), FusionConfig.parse("early"))
    m, hist = train(m, [study], [study], OVERFIT_CFG)
    return study, m, hist


@pytest.fixture(scope="module")
def overfit_pair():
    t0 = time.perf_counter()
    first = overfit_run()
    elapsed = time.perf_counter() - t0
    return first, overfit_run(), elapsed


def test_4_overfit(overfit_pair):
    (study, m, hist), _, elapsed = overfit_pair
    dsc = evaluate_dsc(m, [study], 0.5)
    ok = dsc >= 0.95 and elapsed < 600
    report(4, "overfit smoke test", ok,
           f"train DSC {dsc:.4f} after {OVERFIT_CFG.epochs} steps at {OVERFIT_GRID}^3, {elapsed:.0f}s")


def test_8_determinism(overfit_pair, tmp_path):
    (study, m1, h1), (_, m2, h2), _ = overfit_pair
    same_history = h1 == h2
    same_digest = model_digest(m1) == model_digest(m2)
    save_checkpoint(m1, tmp_path / "m.pt")
    back = load_checkpoint(tmp_path / "m.pt")
    x = m1.prepare_input(study).numpy()
    err = float(np.abs(forward(back, x) - forward(m1, x)).max())
    ok = same_history and same_digest and err <= 1e-6 and model_digest(back) == model_digest(m1)
    report(8, "determinism and provenance", ok,
           f"history equal={same_history}, digest equal={same_digest}, round-trip err {err:.1e}")


# -- 5 and 6. phantom experiments -------------------------------------------------

def experiment_studies(seed):
    spec = PhantomSpec(shape=(EXP_GRID,) * 3)
    grid = (EXP_GRID,) * 3
    studies = [prepare_study(generate_phantom(replace(spec, seed=seed * 1000 + k), f"s{k:02d}"), grid)
               for k in range(60)]
    return studies[:36], studies[36:48], studies[48:]


def experiment_config(seed, augment):
    # translation and shear are in voxels, so scale them with the grid
    scale = EXP_GRID / 64
    return TrainConfig(epochs=20, initial_lr=EXP_LR, lr_step=10, batch_size=2, augment=augment,
                       aug_translation=10 * scale, aug_shear=15 * scale, seed=seed)


def heldout_dsc(fusion, train_set, val_set, test_set, cfg):
    seed_everything(cfg.seed)
    m = build_fused(BackboneConfig(**EXP_BACKBONE), FusionConfig.parse(fusion))
    m, _ = train(m, train_set, val_set, cfg)
    return metrics.aggregate(evaluate_model(m, test_set)).mean["dsc"]


@pytest.mark.slow
def test_5_fusion_benefit():
    t0 = time.perf_counter()
    # intermediate and late fusion are reported, not gated
    scores = {f: [] for f in ("early", "single:bmode", "single:doppler", "intermediate", "late")}
    for seed in EXP_SEEDS:
        tr, va, te = experiment_studies(seed)
        for fusion in scores:
            scores[fusion].append(heldout_dsc(fusion, tr, va, te, experiment_config(seed, False)))
    mean = {f: float(np.mean(v)) for f, v in scores.items()}
    gap = min(mean["early"] - mean["single:bmode"], mean["early"] - mean["single:doppler"])
    elapsed = time.perf_counter() - t0
    ok = gap >= 0.02 and elapsed <= 3600
    report(5, "phantom fusion experiment", ok,
           ", ".join(f"{f} {v:.3f}" for f, v in mean.items()) + f"; min gap {gap:+.3f}, {elapsed:.0f}s")


@pytest.mark.slow
def test_6_augmentation_direction():
    t0 = time.perf_counter()
    gaps = []
    for seed in EXP_SEEDS:
        tr, va, te = experiment_studies(seed)
        tr = tr[:12]
        on = heldout_dsc("early", tr, va, te, experiment_config(seed, True))
        off = heldout_dsc("early", tr, va, te, experiment_config(seed, False))
        gaps.append(on - off)
    gap = float(np.mean(gaps))
    elapsed = time.perf_counter() - t0
    report(6, "augmentation non-inferiority", gap >= -0.01,
           f"augmented minus plain DSC {gap:+.3f} (per seed {', '.join(f'{g:+.3f}' for g in gaps)}), "
           f"{elapsed:.0f}s")


# -- 7. experiment protocol ----------------------------------------------------

def plan_problems(plan, entries):
    ids = {e.study_id for e in entries}
    patient = {e.study_id: e.patient_id for e in entries}
    n = len(entries)
    for fold in plan.folds:
        subsets = [set(fold[k]) for k in ("train", "val", "test")]
        if sum(map(len, subsets)) != n or set().union(*subsets) != ids:
            return "subsets do not partition the manifest"
        for sub, frac in zip(subsets, (0.6, 0.2, 0.2)):
            if abs(len(sub) - frac * n) > 1:
                return f"subset size {len(sub)} of {n}"
        pats = [{patient[s] for s in sub} for sub in subsets]
        if pats[0] & pats[1] or pats[0] & pats[2] or pats[1] & pats[2]:
            return "patient leakage"
    diss = fold_dissimilarity(plan)
    if np.any(diss[np.arange(5), np.arange(5)] != 0) or diss.min() < 0 or diss.max() > 100:
        return "dissimilarity out of range"
    return None


def vote(bits):
    return sum(bits) >= 2 if len(bits) == 3 else all(bits)


def test_7_protocol():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    problems = []
    multi = 0
    for trial in range(100):
        entries = random_manifest(rng, int(rng.integers(25, 150)))
        multi += len({e.patient_id for e in entries}) < len(entries)
        bad = plan_problems(make_folds(entries, seed=trial), entries)
        if bad:
            problems.append(f"manifest {trial}: {bad}")

    # Every triple (and pair) of 2x2x2 masks. The first mask is fixed per call
    # and the others are tiled along the leading axes.
    patterns = np.array(list(itertools.product((0, 1), repeat=8)), np.uint8).reshape(256, 2, 2, 2)
    sp = (1.0, 1.0, 1.0)
    pair_b = patterns.reshape(256, 1, 2, 2, 2)
    tri_b = np.broadcast_to(patterns[:, None], (256, 256, 2, 2, 2)).reshape(256 * 256, 2, 2, 2)
    tri_c = np.broadcast_to(patterns[None, :], (256, 256, 2, 2, 2)).reshape(256 * 256, 2, 2, 2)
    table3 = np.zeros((2, 2, 2), np.uint8)
    for bits in itertools.product((0, 1), repeat=3):
        table3[bits] = vote(bits)
    table2 = np.array([[vote((a, b)) for b in (0, 1)] for a in (0, 1)], np.uint8)

    def as_mask(arr):
        return BinaryMask(np.ascontiguousarray(arr).reshape(-1, 2, 4), sp)

    consensus_ok = True
    for a in patterns:
        one = consensus_mask([BinaryMask(a, sp)]).data
        consensus_ok &= np.array_equal(one, a)
        a2 = np.broadcast_to(a, pair_b.shape)
        two = consensus_mask([as_mask(a2), as_mask(pair_b)]).data
        consensus_ok &= np.array_equal(two.ravel(), table2[a2.ravel(), pair_b.ravel()])
        a3 = np.broadcast_to(a, tri_b.shape)
        three = consensus_mask([as_mask(a3), as_mask(tri_b), as_mask(tri_c)]).data
        consensus_ok &= np.array_equal(three.ravel(), table3[a3.ravel(), tri_b.ravel(), tri_c.ravel()])
    if not consensus_ok:
        problems.append("consensus mismatch")
    elapsed = time.perf_counter() - t0
    report(7, "experiment-protocol suite", not problems and elapsed < 60,
           f"100 manifests ({multi} with multi-study patients), 256^3 mask triples, {elapsed:.1f}s"
           + (f"; {problems[:3]}" if problems else ""))
