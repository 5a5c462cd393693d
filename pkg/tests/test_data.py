import itertools
from collections import namedtuple
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusionseg.data import (AffineConfig, AffineParams, FoldPlan, PhantomSpec, apply_affine,
                            consensus_mask, fold_dissimilarity, format_dissimilarity, generate_phantom,
                            make_folds, sample_affine)
from fusionseg.errors import ConfigError, DataIntegrityError
from fusionseg.metrics import dice
from fusionseg.volume import BinaryMask, Study, Volume, binarize

Entry = namedtuple("Entry", "study_id patient_id")


def random_manifest(rng, n_studies, max_per_patient=3):
    entries, p = [], 0
    while len(entries) < n_studies:
        k = min(int(rng.integers(1, max_per_patient + 1)), n_studies - len(entries))
        entries += [Entry(f"s{len(entries) + i:04d}", f"p{p:04d}") for i in range(k)]
        p += 1
    order = rng.permutation(len(entries))
    return [entries[i] for i in order]


# -- consensus -----------------------------------------------------------------

def test_consensus_identity_and_and(rng):
    m = BinaryMask(rng.random((4, 4, 4)) > 0.5)
    assert np.array_equal(consensus_mask([m]).data, m.data)
    assert np.array_equal(consensus_mask([m, m]).data, m.data)


def test_consensus_majority_voxel():
    one, zero = BinaryMask(np.ones((1, 1, 1))), BinaryMask(np.zeros((1, 1, 1)))
    assert consensus_mask([one, zero, one]).data.item() == 1
    assert consensus_mask([one, zero, zero]).data.item() == 0


def test_consensus_matches_voxel_vote(rng):
    for _ in range(20):
        ms = [BinaryMask(rng.random((4, 4, 4)) > 0.5) for _ in range(3)]
        out = consensus_mask(ms).data
        for idx in itertools.product(range(4), repeat=3):
            votes = sum(int(m.data[idx]) for m in ms)
            assert out[idx] == (1 if votes >= 2 else 0)


def test_consensus_permutation_invariant_and_and_subset(rng):
    ms = [BinaryMask(rng.random((5, 5, 5)) > 0.4) for _ in range(3)]
    ref = consensus_mask(ms).data
    for perm in itertools.permutations(ms):
        assert np.array_equal(consensus_mask(list(perm)).data, ref)
    both = consensus_mask(ms[:2]).data
    assert np.all(both <= ms[0].data) and np.all(both <= ms[1].data)


def test_consensus_errors():
    m = BinaryMask(np.zeros((2, 2, 2)))
    with pytest.raises(DataIntegrityError):
        consensus_mask([])
    with pytest.raises(DataIntegrityError):
        consensus_mask([m] * 4)
    with pytest.raises(DataIntegrityError):
        consensus_mask([m, BinaryMask(np.zeros((2, 2, 3)))])


# -- folds ---------------------------------------------------------------------

def check_plan(plan, entries):
    ids = {e.study_id for e in entries}
    patient = {e.study_id: e.patient_id for e in entries}
    n = len(entries)
    assert len(plan.folds) == 5
    for fold in plan.folds:
        tr, va, te = (set(fold[k]) for k in ("train", "val", "test"))
        assert not (tr & va) and not (tr & te) and not (va & te)
        assert tr | va | te == ids
        for subset, frac in ((tr, 0.6), (va, 0.2), (te, 0.2)):
            assert abs(len(subset) - frac * n) <= 1
        pats = [{patient[s] for s in sub} for sub in (tr, va, te)]
        assert not (pats[0] & pats[1]) and not (pats[0] & pats[2]) and not (pats[1] & pats[2])


def test_make_folds_paper_sizes():
    entries = [Entry(f"s{i}", f"p{i}") for i in range(400)]
    plan = make_folds(entries, seed=3)
    for fold in plan.folds:
        assert (len(fold["train"]), len(fold["val"]), len(fold["test"])) == (240, 80, 80)


def test_make_folds_keeps_patients_together(rng):
    entries = random_manifest(rng, 60)
    plan = make_folds(entries, seed=1)
    check_plan(plan, entries)
    entries = [Entry("a1", "shared"), Entry("a2", "shared")] + [Entry(f"s{i}", f"p{i}") for i in range(20)]
    for seed in range(10):
        for fold in make_folds(entries, seed).folds:
            assert any({"a1", "a2"} <= set(fold[k]) for k in ("train", "val", "test"))


def test_make_folds_deterministic(rng):
    entries = random_manifest(rng, 50)
    assert make_folds(entries, 7).folds == make_folds(entries, 7).folds
    assert make_folds(entries, 7).folds != make_folds(entries, 8).folds


def test_make_folds_too_few_patients():
    with pytest.raises(ConfigError, match="at least 5 patients"):
        make_folds([Entry(f"s{i}", f"p{i % 4}") for i in range(20)], 0)


def test_fold_plan_file_roundtrip(tmp_path, rng):
    plan = make_folds(random_manifest(rng, 30), 11)
    plan.save(tmp_path / "folds.txt")
    back = FoldPlan.load(tmp_path / "folds.txt")
    assert back.folds == plan.folds and back.seed == 11


def brute_dissimilarity(plan):
    k = len(plan.folds)
    out = np.zeros((k, k, 3))
    for i in range(k):
        for j in range(k):
            for s, name in enumerate(("train", "val", "test")):
                a, b = plan.folds[i][name], plan.folds[j][name]
                shared = sum(1 for x in a if x in b)
                out[i, j, s] = 100.0 * (len(a) - shared) / len(a)
    return out


def test_fold_dissimilarity_against_bruteforce(rng):
    for seed in range(5):
        plan = make_folds(random_manifest(rng, 25), seed)
        d = fold_dissimilarity(plan)
        np.testing.assert_allclose(d, brute_dissimilarity(plan), atol=1e-12)
        assert np.all(d[np.arange(5), np.arange(5)] == 0)
        assert d.min() >= 0 and d.max() <= 100


def test_fold_dissimilarity_disjoint_test_sets():
    folds = [{"train": ["a", "b"], "val": ["c"], "test": [f"t{i}"]} for i in range(5)]
    d = fold_dissimilarity(FoldPlan(folds, 0))
    assert d[0, 1, 2] == 100.0 and d[0, 1, 0] == 0.0
    assert format_dissimilarity(d).splitlines()[1].startswith("1\t(0,0,0)")


# -- augmentation --------------------------------------------------------------

def small_study(rng, shape=(12, 12, 12)):
    mask = np.zeros(shape, np.uint8)
    mask[4:8, 3:9, 5:7] = 1
    return Study("s", "p", Volume(rng.random(shape)), Volume(rng.random(shape)), BinaryMask(mask))


def test_sample_affine_within_ranges_and_deterministic():
    cfg = AffineConfig()
    a = sample_affine(cfg, np.random.default_rng(5))
    assert a == sample_affine(cfg, np.random.default_rng(5))
    for _ in range(200):
        p = sample_affine(cfg, np.random.default_rng(_))
        assert all(abs(t) <= 10 for t in p.translation)
        assert all(abs(r) <= 10 for r in p.rotation)
        assert all(0.9 <= s <= 1.1 for s in p.scale)
        assert all(abs(s) <= 15 for s in p.shear)


def test_identity_affine_leaves_study_unchanged(rng):
    s = small_study(rng)
    out = apply_affine(s, AffineParams())
    assert np.array_equal(out.mask.data, s.mask.data)
    np.testing.assert_allclose(out.bmode.data, s.bmode.data, atol=1e-6)


def test_unit_translation_moves_single_voxel(rng):
    shape = (7, 7, 7)
    mask = np.zeros(shape, np.uint8)
    mask[2, 3, 4] = 1
    s = Study("s", "p", Volume(np.zeros(shape)), Volume(np.zeros(shape)), BinaryMask(mask))
    out = apply_affine(s, AffineParams(translation=(1.0, 0.0, 0.0)))
    assert np.argwhere(out.mask.data).tolist() == [[3, 3, 4]]


@pytest.mark.parametrize("t", [(2.0, -1.0, 3.0), (-3.0, 0.0, 1.0), (0.0, 4.0, -2.0)])
def test_translated_markers_coincide(t):
    shape = (10, 10, 10)
    marker = (4, 5, 3)
    mask = np.zeros(shape, np.uint8)
    mask[marker] = 1
    b = np.zeros(shape)
    b[marker] = 1.0
    s = Study("s", "p", Volume(b), Volume(np.zeros(shape)), BinaryMask(mask))
    out = apply_affine(s, AffineParams(translation=t))
    # independent tracking: the marker's coordinates shifted by t
    expected = tuple(int(m + d) for m, d in zip(marker, t))
    assert np.argwhere(out.mask.data).tolist() == [list(expected)]
    assert np.unravel_index(np.argmax(out.bmode.data), shape) == expected
    assert out.bmode.data[expected] == pytest.approx(1.0, abs=1e-9)


def test_out_of_field_is_zero(rng):
    s = small_study(rng)
    out = apply_affine(s, AffineParams(translation=(5.0, 0.0, 0.0)))
    assert not out.bmode.data[:5].any()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 20))
def test_random_affine_preserves_invariants(seed):
    r = np.random.default_rng(seed)
    s = small_study(r)
    out = apply_affine(s, sample_affine(AffineConfig(3, 10, (0.9, 1.1), 3), r))
    assert out.shape == s.shape and out.spacing == s.spacing
    assert set(np.unique(out.mask.data)) <= {0, 1}


# -- phantoms ------------------------------------------------------------------

def test_noise_free_phantom_thresholds_to_mask():
    spec = PhantomSpec(shape=(24, 24, 24), noise=0, split_shell=False, confounders=0, seed=4)
    s = generate_phantom(spec)
    thresh = (s.bmode.data.min() + s.bmode.data.max()) / 2
    assert np.array_equal((s.bmode.data > thresh).astype(np.uint8), s.mask.data)


def test_phantom_deterministic():
    spec = PhantomSpec(shape=(16, 16, 16), seed=9, confounders=1)
    a, b = generate_phantom(spec), generate_phantom(spec)
    for name in ("bmode", "doppler", "mask"):
        assert np.array_equal(getattr(a, name).data, getattr(b, name).data)
    c = generate_phantom(replace(spec, seed=10))
    assert not np.array_equal(a.bmode.data, c.bmode.data)


def test_phantom_rejects_oversized_shell():
    with pytest.raises(ConfigError):
        PhantomSpec(radii=(0.6, 0.2, 0.2))
    with pytest.raises(ConfigError):
        PhantomSpec(noise=-1)


@pytest.mark.parametrize("tilt", [0.0, 20.0, 35.0])
def test_phantom_volume_fraction_within_analytic_bounds(tilt):
    spec = PhantomSpec(shape=(32, 32, 32), tilt=tilt)
    lo, hi = spec.shell_fraction_bounds()
    fracs = [generate_phantom(replace(spec, seed=s)).mask.data.mean() for s in range(100)]
    # voxelisation of a ~4-voxel-thick shell; allow 20% discretisation slack
    assert min(fracs) >= 0.8 * lo
    assert max(fracs) <= 1.2 * hi


def test_phantom_tilt_rotates_shell():
    flat = generate_phantom(PhantomSpec(shape=(32, 32, 32), seed=4, split_shell=False, tilt=0))
    tilted = generate_phantom(PhantomSpec(shape=(32, 32, 32), seed=4, split_shell=False, tilt=30))
    assert abs(int(flat.mask.count()) - int(tilted.mask.count())) < 0.1 * flat.mask.count()
    assert dice(flat.mask, tilted.mask) < 0.9
    with pytest.raises(ConfigError):
        PhantomSpec(tilt=120)


def test_phantom_doppler_concentrated_in_mask():
    s = generate_phantom(PhantomSpec(shape=(32, 32, 32), seed=2))
    m = s.mask.data.astype(bool)
    assert s.doppler.data[m].mean() > 2 * s.doppler.data[~m].mean()
