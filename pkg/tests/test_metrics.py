import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opengda import model as gm
from opengda.metrics import (
    EvalReport,
    evaluate,
    evaluate_predictions,
    export_embeddings,
    group_mmd,
    h_score,
    load_embeddings,
    mmd2_unbiased,
    mmd_diagnostic,
    predict,
)

unit = st.floats(0.0, 1.0)


def test_h_score_examples():
    assert h_score(0.6, 0.6) == pytest.approx(0.6)
    assert h_score(1.0, 0.0) == 0.0
    assert abs(h_score(0.8, 0.4) - 0.5333333333) < 1e-4
    assert h_score(0.0, 0.0) == 0.0


@given(unit, unit)
@settings(max_examples=200, deadline=None)
def test_h_score_bounds(a, b):
    h = h_score(a, b)
    assert h == h_score(b, a)
    assert h <= 2 * min(a, b) + 1e-15
    assert h <= max(a, b) + 1e-15
    assert 0.0 <= h <= 1.0


@given(unit)
def test_h_score_diagonal(a):
    assert h_score(a, a) == a


def test_oracle_predictor():
    labels = np.array([0, 1, 2, 3, 3, 1])
    r = evaluate_predictions(labels, labels, 3)
    assert (r.acc, r.acc_tk, r.acc_tu, r.h_score) == (1.0, 1.0, 1.0, 1.0)


def test_constant_unknown_predictor():
    labels = np.array([0, 1, 2, 3, 3, 1])
    r = evaluate_predictions(np.full(6, 3), labels, 3)
    assert (r.acc_tk, r.acc_tu, r.h_score) == (0.0, 1.0, 0.0)


def test_uniform_random_predictor_expectation():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, 100)
    tk, tu = [], []
    for _ in range(10_000):
        r = evaluate_predictions(rng.integers(0, 4, 100), labels, 3)
        tk.append(r.acc_tk)
        tu.append(r.acc_tu)
    for vals in (np.array(tk), np.array(tu)):
        sigma = vals.std() / math.sqrt(len(vals))
        assert abs(vals.mean() - 0.25) < 3 * sigma


def test_missing_labels_rejected():
    with pytest.raises(ValueError):
        evaluate_predictions(np.zeros(3), np.array([0, -1, 1]), 2)


def test_report_json_round_trip():
    r = evaluate_predictions(np.array([0, 2, 1]), np.array([0, 2, 2]), 2)
    assert json.loads(r.to_json())["h_score"] == r.h_score
    assert isinstance(r, EvalReport)


def test_mmd_self_near_zero():
    x = np.random.default_rng(1).normal(size=(50, 4))
    assert abs(mmd2_unbiased(x, x)) <= 1e-8


def test_mmd_separated_clouds_exceed_random_split():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(100, 3))
    b = rng.normal(size=(100, 3)) + np.array([1.0, 0.0, 0.0])
    cloud = rng.normal(size=(200, 3))
    perm = rng.permutation(200)
    assert mmd2_unbiased(a, b) > mmd2_unbiased(cloud[perm[:100]], cloud[perm[100:]])


def test_group_mmd_empty_group_absent():
    emb = np.random.default_rng(3).normal(size=(5, 2))
    assert group_mmd(emb, np.array([0, 0, 0, 0, 1], bool)) is None
    before, after = mmd_diagnostic(emb, emb, np.array([0, 0, 1, 1, 1], bool))
    assert before == after


def test_mmd_unequal_sizes():
    rng = np.random.default_rng(4)
    assert mmd2_unbiased(rng.normal(size=(30, 2)), rng.normal(size=(40, 2)) + 3) > 0.1


@pytest.fixture
def trained_like(tiny_pair):
    m = gm.init_params([3, 4, 4], 2, seed=0)
    return m, tiny_pair.target


def test_embedding_export_round_trip(tmp_path, trained_like):
    m, tgt = trained_like
    emb = gm.embed(m, tgt.adjacency, tgt.features)
    pred = predict(m, tgt.adjacency, tgt.features)
    path = tmp_path / "emb.txt"
    export_embeddings(path, emb, tgt.labels, pred)
    labels, p2, e2 = load_embeddings(path)
    assert len(e2) == tgt.n
    assert np.array_equal(e2, emb)
    assert np.array_equal(labels, tgt.labels)
    assert np.array_equal(p2, pred)


def test_evaluate_pure(trained_like):
    m, tgt = trained_like
    before = {k: v.copy() for k, v in m.params().items()}
    r1, r2 = evaluate(m, tgt), evaluate(m, tgt)
    assert r1.to_json() == r2.to_json()
    assert all(np.array_equal(before[k], v) for k, v in m.params().items())


def test_evaluate_missing_labels(trained_like):
    m, tgt = trained_like
    with pytest.raises(ValueError):
        evaluate(m, tgt, labels=np.array([0, 1]))


def test_threshold_prediction_marks_high_entropy_unknown(trained_like):
    m, tgt = trained_like
    assert (predict(m, tgt.adjacency, tgt.features, threshold=0.0) == 2).all()
    assert (predict(m, tgt.adjacency, tgt.features, threshold=1.0) < 2).all()
