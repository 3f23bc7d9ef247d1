import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tppt import autodiff as ad
from tppt.autodiff import Graph, Tensor, grad_check
from tppt.errors import ContractError
from tppt.objectives import (PrototypeSet, ce_loss, class_probabilities, composite_loss, div_loss,
                             tpcl_loss)

import oracles


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def vectors_with_cosines(cos):
    """Unit z_i and orthonormal w_c with z_i . w_c = cos[i][c] exactly (up to fp)."""
    cos = np.asarray(cos, dtype=np.float64)
    N, C = cos.shape
    D = C + N
    W = np.eye(D)[:C]
    Z = np.zeros((N, D))
    Z[:, :C] = cos
    rest = 1.0 - (cos ** 2).sum(axis=1)
    assert (rest > 0).all()
    Z[np.arange(N), C + np.arange(N)] = np.sqrt(rest)
    return Z, W


# class_probabilities ---------------------------------------------------------

def test_single_prototype_gives_probability_one():
    rng = np.random.default_rng(0)
    p = class_probabilities(Tensor(unit_rows(rng, 5, 4)), Tensor(unit_rows(rng, 1, 4)), 0.07).data
    np.testing.assert_array_equal(p, np.ones((5, 1)))


def test_equidistant_sample_is_uniform():
    Z, W = vectors_with_cosines([[0.3, 0.3, 0.3]])
    p = class_probabilities(Tensor(Z), Tensor(W), 0.07).data
    np.testing.assert_allclose(p, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-12)


def test_probabilities_match_scalar_oracle_given_cosines():
    cos = [[0.9, 0.1, -0.2], [0.05, 0.4, 0.45]]
    Z, W = vectors_with_cosines(cos)
    p = class_probabilities(Tensor(Z), Tensor(W), 0.07).data
    ref = [oracles.softmax_row([c / 0.07 for c in row]) for row in cos]
    np.testing.assert_allclose(p, ref, rtol=0, atol=1e-12)


def test_empty_prototype_set_rejected():
    with pytest.raises(ContractError):
        class_probabilities(Tensor(np.eye(2)), Tensor(np.zeros((0, 2))), 0.07)


def test_rows_sum_to_one_and_argmax_permutation_invariant():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n, c, d = rng.integers(1, 6), rng.integers(1, 7), rng.integers(2, 6)
        Z, W = unit_rows(rng, n, d), unit_rows(rng, c, d)
        p = class_probabilities(Tensor(Z), Tensor(W), 0.07).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        perm = rng.permutation(c)
        pp = class_probabilities(Tensor(Z), Tensor(W[perm]), 0.07).data
        np.testing.assert_array_equal(perm[pp.argmax(axis=1)], p.argmax(axis=1))


# cross-entropy -----------------------------------------------------------------

def test_ce_perfect_and_uniform():
    assert ce_loss(Tensor(np.eye(3)), [0, 1, 2]).item() == 0.0
    assert ce_loss(Tensor(np.full((4, 5), 0.2)), [0, 1, 2, 3]).item() == pytest.approx(math.log(5), abs=1e-12)


def test_ce_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    probs = rng.random((3, 4))
    probs /= probs.sum(axis=1, keepdims=True)
    labels = [3, 0, 2]
    assert ce_loss(Tensor(probs), labels).item() == pytest.approx(oracles.ce(probs.tolist(), labels), abs=1e-12)


def test_ce_label_outside_prototypes():
    with pytest.raises(ContractError):
        ce_loss(Tensor(np.full((1, 2), 0.5)), [2])


# TPCL ------------------------------------------------------------------------

def test_tpcl_single_sample_single_class_is_zero():
    z = unit_rows(np.random.default_rng(3), 1, 4)
    w = unit_rows(np.random.default_rng(4), 1, 4)
    assert tpcl_loss(Tensor(z), Tensor(w), [0], 0.07).item() == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("n", [2, 3, 7])
def test_tpcl_equal_cosines_one_class(n):
    Z, W = vectors_with_cosines([[0.4]] * n)
    value = tpcl_loss(Tensor(Z), Tensor(W), [0] * n, 0.07).item()
    assert value == pytest.approx(n * math.log(n), abs=1e-12)


def test_tpcl_hand_configuration():
    cos = [[0.9, 0.1], [0.2, 0.8], [0.7, 0.3]]
    labels = [0, 1, 0]
    Z, W = vectors_with_cosines(cos)
    ref = oracles.tpcl_from_cosines(cos, labels, 1.0)
    assert tpcl_loss(Tensor(Z), Tensor(W), labels, 1.0).item() == pytest.approx(ref, abs=1e-12)


def test_tpcl_absent_class_contributes_zero_but_counts_in_normaliser():
    rng = np.random.default_rng(5)
    Z, W = unit_rows(rng, 4, 3), unit_rows(rng, 3, 3)
    labels = [0, 0, 1, 1]
    two = tpcl_loss(Tensor(Z), Tensor(W[:2]), labels, 0.5).item()
    three = tpcl_loss(Tensor(Z), Tensor(W), labels, 0.5).item()
    assert three == pytest.approx(two * 2 / 3, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_tpcl_non_negative(seed):
    rng = np.random.default_rng(seed)
    N, C = rng.integers(1, 8), rng.integers(1, 5)
    Z, W = unit_rows(rng, N, 4), unit_rows(rng, C, 4)
    labels = rng.integers(0, C, size=N)
    assert tpcl_loss(Tensor(Z), Tensor(W), labels, 0.07).item() >= 0.0


# diversity -------------------------------------------------------------------

def test_div_identical_pair():
    w = np.array([[0.6, 0.8], [0.6, 0.8]])
    assert abs(div_loss(Tensor(w)).item() - math.log(2)) <= 1e-12


def test_div_orthogonal_pair():
    assert abs(div_loss(Tensor(np.eye(2))).item() - (math.log(2) - 2)) <= 1e-12


def test_div_matches_pair_enumeration():
    W = unit_rows(np.random.default_rng(6), 4, 5)
    assert div_loss(Tensor(W)).item() == pytest.approx(oracles.div(W.tolist()), abs=1e-12)


def test_div_needs_two_prototypes():
    with pytest.raises(ContractError):
        div_loss(Tensor(np.ones((1, 3)) / math.sqrt(3)))


def test_div_permutation_invariant_and_monotone_in_distance():
    rng = np.random.default_rng(7)
    W = unit_rows(rng, 5, 4)
    base = div_loss(Tensor(W)).item()
    assert div_loss(Tensor(W[rng.permutation(5)])).item() == pytest.approx(base, abs=1e-12)
    # push prototype 0 directly away from prototype 1 only: pair (0,1) grows,
    # and with 2 prototypes that is the only pair.
    a = np.array([[1.0, 0.0], [np.cos(1.0), np.sin(1.0)]])
    b = np.array([[1.0, 0.0], [np.cos(1.5), np.sin(1.5)]])
    assert div_loss(Tensor(b)).item() < div_loss(Tensor(a)).item()


def test_minimising_div_spreads_prototypes():
    rng = np.random.default_rng(8)
    W = unit_rows(rng, 8, 4) * 0.1 + np.array([1.0, 0, 0, 0])
    W /= np.linalg.norm(W, axis=1, keepdims=True)

    def mean_pairwise(x):
        i, j = np.triu_indices(len(x), 1)
        return np.linalg.norm(x[i] - x[j], axis=1).mean()

    start = mean_pairwise(W)
    for _ in range(500):
        t = Tensor(W, requires_grad=True)
        div_loss(t).backward()
        W = W - 0.1 * t.grad
        W /= np.linalg.norm(W, axis=1, keepdims=True)
    assert mean_pairwise(W) > start


# composite -------------------------------------------------------------------

def _batch(seed=9, N=6, C=3, D=5):
    rng = np.random.default_rng(seed)
    Z, W = unit_rows(rng, N, D), unit_rows(rng, C, D)
    classes = np.array([4, 9, 2])[:C]
    labels = classes[rng.integers(0, C, size=N)]
    return Tensor(Z), PrototypeSet(classes, Tensor(W)), labels


def test_composite_alpha_zero_equals_tppt_v():
    z, protos, labels = _batch()
    v = composite_loss("tppt-v", z, protos, labels, alpha=1.0)
    vt = composite_loss("tppt-vt", z, protos, labels, alpha=0.0)
    assert vt.total.item() == v.total.item()


def test_composite_alpha_one_adds_div():
    z, protos, labels = _batch()
    b = composite_loss("tppt-vt", z, protos, labels, alpha=1.0)
    assert b.total.item() == b.ce + b.tpcl + b.div


def test_composite_recomposes_from_independent_parts():
    z, protos, labels = _batch(seed=10)
    b = composite_loss("tppt-vt", z, protos, labels, alpha=0.7, tau=0.07)
    rows = protos.rows(labels)
    Zl, Wl = z.data.tolist(), protos.matrix.data.tolist()
    ce = oracles.ce(oracles.class_probabilities(Zl, Wl, 0.07), rows.tolist())
    tp = oracles.tpcl(Zl, Wl, rows.tolist(), 0.07)
    dv = oracles.div(Wl)
    assert b.total.item() == pytest.approx(ce + tp + 0.7 * dv, abs=1e-12)
    assert abs(b.total.item() - (b.ce + b.tpcl + 0.7 * b.div)) <= 1e-12


def test_composite_ce_only_has_no_tpcl():
    z, protos, labels = _batch()
    b = composite_loss("tppt-v", z, protos, labels, use_tpcl=False)
    assert b.tpcl == 0.0 and b.total.item() == b.ce


def test_composite_rejects_vt_without_text_prompts_and_unknown_label():
    z, protos, labels = _batch()
    with pytest.raises(ContractError):
        composite_loss("tppt-vt", z, protos, labels, text_prompted=False)
    with pytest.raises(ContractError):
        composite_loss("tppt-v", z, protos, np.array([4, 5, 9, 2, 2, 4]))


@pytest.mark.parametrize("which", ["ce", "tpcl", "div", "tppt-v", "tppt-vt"])
def test_loss_gradients_pass_grad_check(which):
    rng = np.random.default_rng(11)
    classes = np.array([0, 1, 2])
    labels = np.array([0, 2, 1, 1])

    def build(x):
        z = ad.l2_normalize(x["z"])
        w = ad.l2_normalize(x["w"])
        protos = PrototypeSet(classes, w)
        if which == "ce":
            loss = ce_loss(class_probabilities(z, protos, 0.07), labels)
        elif which == "tpcl":
            loss = tpcl_loss(z, protos, labels, 0.07)
        elif which == "div":
            loss = div_loss(w)
        else:
            loss = composite_loss(which, z, protos, labels, alpha=1.0).total
        return {"loss": loss}

    for _ in range(20):
        inputs = {"z": Tensor(rng.normal(size=(4, 5)), requires_grad=True),
                  "w": Tensor(rng.normal(size=(3, 5)), requires_grad=True)}
        report = grad_check(Graph(build), inputs, step=1e-4, tolerance=1e-4)
        assert report.passed, report.max_relative_error
