import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import ndtr

from mrsl.data import Dataset, SubjectImage
from mrsl.learners import LearnerSpec, fit_learner, predict_proba
from mrsl.multires import (
    cell_bounds,
    fit_multiresolution,
    multires_from_dict,
    multires_to_dict,
    pool_training_arrays,
    predict_multiresolution,
    region_index,
)
from mrsl.rng import derive_seed

# ------------------------------------------------------------ region_index


def test_region_index_worked_examples():
    assert region_index(np.array([0.5, -0.2]), 2) == 3  # (0,1)x(-1,0)
    assert region_index(np.array([0.7, 0.7]), 1) == 1
    assert region_index(np.array([-0.9, 0.9]), 3) == 3  # ix=0, iy=2


def test_region_index_half_open_edges():
    # interior shared edge goes to the higher cell
    assert region_index(np.array([0.0, -0.5]), 2) == 3
    assert region_index(np.array([-0.5, 0.0]), 2) == 2


def test_region_index_rejects_out_of_support():
    with pytest.raises(ValueError):
        region_index(np.array([1.0, 0.0]), 2)
    with pytest.raises(ValueError):
        region_index(np.array([0.0, -1.0]), 2)
    with pytest.raises(ValueError):
        region_index(np.array([0.0, 0.0]), 0)


@given(st.integers(1, 6), st.floats(-0.999, 0.999), st.floats(-0.999, 0.999))
def test_region_index_matches_cell_bounds(k, sx, sy):
    l = region_index(np.array([sx, sy]), k)
    assert 1 <= l <= k * k
    (xlo, xhi), (ylo, yhi) = cell_bounds(k, l)
    # the index formula computes (s+1)k/2 in floats, so a coordinate within
    # rounding distance below an edge may land in the higher cell; check
    # ideal half-open membership only away from the edges
    def away(v):
        return min(abs(v - (-1.0 + 2.0 * i / k)) for i in range(k + 1)) > 1e-9

    if away(sx):
        assert xlo <= sx and (sx < xhi or xhi == 1.0)
    if away(sy):
        assert ylo <= sy and (sy < yhi or yhi == 1.0)


@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_region_index_partitions(k, seed):
    g = np.random.default_rng(seed)
    s = g.uniform(-0.999, 0.999, size=(200, 2))
    l = region_index(s, k)
    assert np.all((l >= 1) & (l <= k * k))
    counts = np.bincount(l, minlength=k * k + 1)[1:]
    assert counts.sum() == 200


# ----------------------------------------------------------------- fitting


def _toy_dataset(seed=0, n_subj=4, n=40, d=2, ordinal=False):
    g = np.random.default_rng(seed)
    subjects = []
    for i in range(n_subj):
        coords = g.uniform(-0.98, 0.98, size=(n, 2))
        X = g.normal(size=(n, d))
        latent = X[:, 0] + coords[:, 0] + g.normal(0, 0.8, n)
        if ordinal:
            G = 1 + (latent > -0.3).astype(int) + (latent > 0.7).astype(int)
            c = (G >= 2).astype(int)
            subjects.append(SubjectImage(f"s{i}", coords, g.integers(0, 2, n),
                                         X, c=c, G=G))
        else:
            c = (latent > 0).astype(int)
            subjects.append(SubjectImage(f"s{i}", coords, g.integers(0, 2, n),
                                         X, c=c))
    return Dataset(subjects, [f"f{j}" for j in range(d)], Z=3 if ordinal else 2)


def test_fit_multires_has_all_cells():
    ds = _toy_dataset()
    model = fit_multiresolution(ds, LearnerSpec("ProbitGLM"), K=3, seed=1)
    assert set(model.learners) == {(k, l) for k in (1, 2, 3)
                                   for l in range(1, k * k + 1)}
    assert len(model.learners) == 14


def test_k1_is_the_whole_gland_baseline_bitwise():
    ds = _toy_dataset(seed=3)
    model = fit_multiresolution(ds, LearnerSpec("RandomForest", {"T": 10}),
                                K=2, seed=7, target="binary")
    coords, X, y, _ = pool_training_arrays(ds, "binary")
    direct = fit_learner(LearnerSpec("RandomForest", {"T": 10}), X, y,
                         classes=(0, 1), seed=derive_seed(7, 1, 1))
    q = np.random.default_rng(0).normal(size=(9, 2))
    np.testing.assert_array_equal(
        predict_proba(model.learner(1, 1), q), predict_proba(direct, q))


def test_single_class_cell_constant():
    g = np.random.default_rng(5)
    coords = np.vstack([g.uniform(-0.9, -0.1, (20, 2)),
                        g.uniform(0.1, 0.9, (20, 2))])
    X = g.normal(size=(40, 1))
    c = np.array([0] * 20 + [1] * 20)  # all-cancer in the (0,1)^2 corner
    ds = Dataset([SubjectImage("a", coords, np.ones(40, int), X, c=c)], ["f"])
    model = fit_multiresolution(ds, LearnerSpec("ProbitGLM"), K=2, seed=0)
    lrn = model.learner(2, 4)  # cell (0,1)x(0,1)
    assert lrn.constant_class == 1
    subj = ds.subjects[0]
    x = predict_multiresolution(model, subj)
    in_cell = (subj.coords > 0).all(axis=1)
    np.testing.assert_array_equal(x[in_cell, 1], 1.0)


def test_empty_cell_prevalence_fallback():
    g = np.random.default_rng(6)
    # all voxels confined to x<0, y<0: cells 2..4 of k=2 are empty
    coords = g.uniform(-0.9, -0.1, size=(30, 2))
    X = g.normal(size=(30, 1))
    c = (g.uniform(size=30) < 0.25).astype(int)
    c[0] = 1 - c[0] if c.min() == c.max() else c[0]
    ds = Dataset([SubjectImage("a", coords, np.ones(30, int), X, c=c)], ["f"])
    model = fit_multiresolution(ds, LearnerSpec("ProbitGLM"), K=2, seed=0)
    for l in (2, 3, 4):
        lrn = model.learner(2, l)
        p = predict_proba(lrn, np.array([0.0]))
        np.testing.assert_allclose(p, [1 - c.mean(), c.mean()], atol=1e-15)


def test_predict_multires_hand_probit_evaluation():
    ds = _toy_dataset(seed=9, n_subj=3, n=60, d=1)
    model = fit_multiresolution(ds, LearnerSpec("ProbitGLM"), K=2, seed=2)
    subj = ds.subjects[0]
    x = predict_multiresolution(model, subj)
    assert x.shape == (subj.n, 2)
    cell_of = region_index(subj.coords, 2)
    for j in (0, 7, 23):
        lrn = model.learner(2, int(cell_of[j]))
        if lrn.constant_class is None and "probs" not in lrn.params:
            expect = ndtr(lrn.params["beta0"]
                          + subj.features[j] @ lrn.params["beta"])
            assert x[j, 1] == expect


def test_predict_multires_permutation_equivariance():
    ds = _toy_dataset(seed=12)
    model = fit_multiresolution(ds, LearnerSpec("QDA"), K=3, seed=0)
    subj = ds.subjects[1]
    x = predict_multiresolution(model, subj)
    perm = np.random.default_rng(1).permutation(subj.n)
    subj_p = SubjectImage("p", subj.coords[perm], subj.zones[perm],
                          subj.features[perm], c=subj.c[perm])
    np.testing.assert_array_equal(predict_multiresolution(model, subj_p), x[perm])


def test_ordinal_target_shapes_and_normalization():
    ds = _toy_dataset(seed=15, ordinal=True)
    model = fit_multiresolution(ds, LearnerSpec("OrderedProbit"), K=2,
                                target="ordinal", seed=0)
    x = predict_multiresolution(model, ds.subjects[0])
    assert x.shape == (ds.subjects[0].n, 2, 3)
    np.testing.assert_allclose(x.sum(axis=2), 1.0, atol=1e-9)


def test_feature_width_mismatch_rejected():
    ds = _toy_dataset(seed=1, d=2)
    model = fit_multiresolution(ds, LearnerSpec("ProbitGLM"), K=1, seed=0)
    bad = _toy_dataset(seed=2, d=3).subjects[0]
    with pytest.raises(ValueError):
        predict_multiresolution(model, bad)


def test_multires_serialization_round_trip():
    ds = _toy_dataset(seed=21)
    for spec in (LearnerSpec("ProbitGLM"), LearnerSpec("RandomForest", {"T": 5})):
        model = fit_multiresolution(ds, spec, K=2, seed=4)
        doc = json.loads(json.dumps(multires_to_dict(model)))
        model2 = multires_from_dict(doc)
        subj = ds.subjects[2]
        np.testing.assert_array_equal(
            predict_multiresolution(model, subj),
            predict_multiresolution(model2, subj))
        assert model2.K == model.K and model2.classes == model.classes
