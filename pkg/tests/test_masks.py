import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import four_node_pair, numeric_grad, rel_err
from opengda import model as gm
from opengda.masks import apply_masks, build_masks, score_importance
from opengda.tensor import StateError, Tape

score_arrays = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                      elements=st.floats(0, 10, allow_nan=False))


def mask_grad_setup():
    pair = four_node_pair()
    model = gm.init_params([3, 5, 4], 2, seed=2)
    x, adj = pair.target.features, pair.target.adjacency

    def loss(tape, nodes):
        z = gm.forward_extractor(tape, adj, tape.const(x), nodes, model)
        return tape.sum_all(tape.exp(gm.classify(tape, z, nodes)))

    return model, loss


def test_scores_match_finite_differences_on_masks():
    model, loss = mask_grad_setup()
    t = Tape()
    nodes = gm.bind(model, t, trainable=False, masks_trainable=True)
    t.backward(loss(t, nodes))
    scores = score_importance([nodes["M0"], nodes["M1"]])

    def value():
        t2 = Tape()
        return float(loss(t2, gm.bind(model, t2, trainable=False)).value[0, 0])

    for i in range(2):
        fd = numeric_grad(value, model.masks[i])
        assert rel_err(nodes[f"M{i}"].grad, fd) < 1e-4
        assert np.all(scores[i] >= 0)


def test_mask_gradient_is_weight_times_effective_gradient():
    model, loss = mask_grad_setup()
    t = Tape()
    nodes = gm.bind(model, t, masks_trainable=True)
    t.backward(loss(t, nodes))
    # dL/dW = dL/dW_eff * M and dL/dM = dL/dW_eff * W with all-ones masks
    np.testing.assert_allclose(nodes["M0"].grad, nodes["W0"].grad * model.weights[0], rtol=1e-12, atol=1e-15)


def test_unused_layer_scores_zero():
    t = Tape()
    w = t.const(np.ones((2, 2)))
    m_used, m_unused = t.param(np.ones((2, 2))), t.param(np.ones((2, 2)))
    t.backward(t.sum_all(t.mul(w, m_used)))
    scores = score_importance([m_used, m_unused])
    assert scores[0].all() and not scores[1].any()


def test_untracked_mask_rejected():
    t = Tape()
    with pytest.raises(StateError):
        score_importance([t.const(np.ones((2, 2)))])


def test_rho_zero_all_ones():
    ms = build_masks([np.array([[3.0, 1.0], [2.0, 0.5]])], 0.0)
    assert np.all(ms.masks[0] == 1)


def test_order_statistics_example():
    ms = build_masks([np.array([1.0, 2.0, 3.0, 4.0])], 0.5)
    np.testing.assert_array_equal(ms.masks[0], [0, 0, 1, 1])


def test_ties_break_by_flat_index():
    ms = build_masks([np.full((2, 4), 0.3)], 0.25)
    flat = ms.masks[0].ravel()
    assert flat.sum() == 6 and flat[0] == 0 and flat[1] == 0


def test_rho_out_of_range():
    with pytest.raises(ValueError):
        build_masks([np.ones(3)], 1.5)


@given(score_arrays, st.floats(0, 1))
@settings(max_examples=80, deadline=None)
def test_zero_count_is_floor(scores, rho):
    ms = build_masks([scores], rho)
    assert int((ms.masks[0] == 0).sum()) == math.floor(rho * scores.size)


@given(score_arrays, st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=80, deadline=None)
def test_zero_sets_nested(scores, r1, r2):
    lo, hi = sorted((r1, r2))
    a = build_masks([scores], lo).masks[0] == 0
    b = build_masks([scores], hi).masks[0] == 0
    assert not (a & ~b).any()


def test_apply_and_forward_match_manual():
    pair = four_node_pair()
    model = gm.init_params([3, 5, 4], 2, seed=2)
    rng = np.random.default_rng(0)
    ms = build_masks([rng.random(w.shape) for w in model.weights], 0.5)
    apply_masks(model, ms)
    apply_masks(model, ms)
    assert [int((m == 0).sum()) for m in model.masks] == [7, 10]
    t = Tape()
    nodes = gm.bind(model, t)
    z = gm.forward_extractor(t, pair.target.adjacency, t.const(pair.target.features), nodes, model).value
    op = pair.target.adjacency.operator()
    h = np.maximum(op @ (pair.target.features @ (model.weights[0] * ms.masks[0])), 0)
    np.testing.assert_array_equal(z, op @ (h @ (model.weights[1] * ms.masks[1])))


def test_apply_shape_mismatch():
    model = gm.init_params([3, 5, 4], 2, seed=2)
    with pytest.raises(ValueError):
        apply_masks(model, build_masks([np.ones((3, 5))], 0.1))
