import json

import numpy as np
import pytest

from opengda.synthetic import GeneratorSpec, generate_raw, generate_synthetic_pair


def test_zero_shift_same_distribution():
    spec = GeneratorSpec(n_source=300, n_target=300, class_count=3, known_count=2, feature_dim=4, feature_noise=0.5)
    src, tgt = generate_raw(spec, 11)
    for c in range(2):
        a = src.features[src.labels == c].mean(axis=0)
        b = tgt.features[tgt.labels == c].mean(axis=0)
        # 150 source and 100 target draws per class at noise 0.5
        assert np.abs(a - b).max() < 4 * 0.5 * np.sqrt(1 / 150 + 1 / 100)


def test_shift_moves_target_means():
    base = GeneratorSpec(n_source=40, n_target=40, class_count=3, known_count=2, feature_dim=6, feature_noise=0.0)
    shifted = GeneratorSpec(**{**base.to_dict(), "mean_shift": 2.0})
    _, t0 = generate_raw(base, 4)
    _, t1 = generate_raw(shifted, 4)
    assert np.allclose(np.linalg.norm(t1.features - t0.features, axis=1), 2.0)


def test_target_labels_after_relabel():
    pair = generate_synthetic_pair(GeneratorSpec(n_source=50, n_target=50), 0)
    assert set(pair.target.labels.tolist()) <= {0, 1, 2, 3}
    assert set(pair.source.labels.tolist()) <= {0, 1, 2}
    assert pair.known_count == 3


def test_raw_target_has_all_classes():
    src, tgt = generate_raw(GeneratorSpec(n_source=50, n_target=50), 0)
    assert set(tgt.labels.tolist()) == {0, 1, 2, 3, 4}
    assert set(src.labels.tolist()) == {0, 1, 2}


def test_mean_degree_matches_expectation():
    spec = GeneratorSpec(n_source=200, n_target=200, class_count=5, known_count=3, p_intra=0.1, p_inter=0.01)
    _, tgt = generate_raw(spec, 2)
    n, per = 200, 40
    expected = (per - 1) * 0.1 + (n - per) * 0.01
    var = (per - 1) * 0.1 * 0.9 + (n - per) * 0.01 * 0.99
    # mean of n degrees; each edge counted twice, so allow the correlated bound
    sigma = np.sqrt(2 * var / n)
    mean_degree = tgt.adjacency.degrees().mean() - 1
    assert abs(mean_degree - expected) < 3 * sigma


def test_same_seed_identical():
    spec = GeneratorSpec(n_source=30, n_target=30)
    a, b = generate_synthetic_pair(spec, 9), generate_synthetic_pair(spec, 9)
    assert a.target.adjacency.same_structure(b.target.adjacency)
    assert np.array_equal(a.source.features, b.source.features)


@pytest.mark.parametrize("field,value", [("known_count", 5), ("p_intra", 1.5), ("p_inter", -0.1)])
def test_invalid_spec(field, value):
    with pytest.raises(ValueError):
        GeneratorSpec(**{field: value}).validate()


def test_spec_round_trip(tmp_path):
    spec = GeneratorSpec(rotation=0.2, mean_shift=0.4)
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(spec.to_dict()))
    assert GeneratorSpec.from_json(p) == spec
