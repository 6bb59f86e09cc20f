import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fedx.losses import (
    RelationVector,
    global_contrastive,
    global_relationship_vectors,
    local_contrastive_byol,
    local_contrastive_simclr,
    relational_loss,
    relationship_vector,
    total_global_kd,
    total_kd,
    total_local_kd,
)
from fedx.numerics import Tensor, forward_backward

seeds = st.integers(0, 2**31 - 1)


def batch(seed, n=4, d=8, count=1):
    r = np.random.default_rng(seed)
    out = [r.normal(size=(n, d)) for _ in range(count)]
    return out[0] if count == 1 else out


# -- local contrastive -----------------------------------------------------------


def test_simclr_identical_embeddings_is_ln3():
    z = np.ones((2, 3))
    assert local_contrastive_simclr(z, z, tau=1.0).item() == pytest.approx(math.log(3), abs=1e-6)


def test_simclr_orthogonal_negatives():
    z = np.eye(2)
    assert local_contrastive_simclr(z, z.copy(), tau=1.0).item() == pytest.approx(
        0.5514447139320511, abs=1e-6)


@pytest.mark.parametrize("n", [0, 1])
def test_simclr_needs_negatives(n):
    with pytest.raises(ValueError):
        local_contrastive_simclr(np.ones((n, 3)), np.ones((n, 3)), 0.1)


def test_simclr_zero_norm_rejected():
    z = np.ones((2, 3))
    z[1] = 0
    with pytest.raises(ValueError):
        local_contrastive_simclr(z, np.ones((2, 3)), 0.1)


@settings(max_examples=25, deadline=None)
@given(seeds, st.floats(0.05, 2.0))
def test_simclr_matches_oracle(seed, tau):
    z, za = batch(seed, count=2)
    assert local_contrastive_simclr(z, za, tau).item() == pytest.approx(
        oracles.simclr(z.tolist(), za.tolist(), tau), abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(seeds, st.floats(0.01, 100))
def test_simclr_scale_invariant(seed, alpha):
    z, za = batch(seed, count=2)
    assert local_contrastive_simclr(alpha * z, alpha * za, 0.1).item() == pytest.approx(
        local_contrastive_simclr(z, za, 0.1).item(), abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(seeds, st.permutations(range(4)))
def test_simclr_permutation_invariant(seed, perm):
    z, za = batch(seed, count=2)
    perm = list(perm)
    assert local_contrastive_simclr(z[perm], za[perm], 0.1).item() == pytest.approx(
        local_contrastive_simclr(z, za, 0.1).item(), abs=1e-9)


def test_byol_examples():
    u = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert local_contrastive_byol(u, 3 * u).item() == pytest.approx(0.0, abs=1e-12)
    assert local_contrastive_byol(u, -u).item() == pytest.approx(4.0, abs=1e-12)
    assert local_contrastive_byol(u, u[::-1].copy()).item() == pytest.approx(2.0, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_byol_bounds_and_oracle(seed):
    p, t = batch(seed, count=2)
    value = local_contrastive_byol(p, t).item()
    assert 0.0 <= value <= 4.0
    assert value == pytest.approx(oracles.byol(p.tolist(), t.tolist()), abs=1e-9)


def test_byol_target_gets_no_gradient():
    p = Tensor(batch(1), requires_grad=True)
    t = Tensor(batch(2), requires_grad=True)
    forward_backward(local_contrastive_byol(p, t), {"p": p})
    assert not t.grad.any() and np.abs(p.grad).sum() > 0


# -- relationship vectors and relational loss ------------------------------------


def test_relation_uniform_when_equidistant():
    refs = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
    r = relationship_vector(np.array([0.0, 0.0, 1.0]), refs, 0.1)
    np.testing.assert_allclose(r.probs.data, [1 / 3] * 3, atol=1e-12)


def test_relation_single_reference():
    r = relationship_vector(np.array([0.3, -2.0]), np.array([[5.0, 1.0]]), 0.1)
    np.testing.assert_allclose(r.probs.data, [1.0])
    assert len(r) == 1


def test_relation_oracle_value():
    refs = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    r = relationship_vector(np.array([2.0, 0.0]), refs, 0.1)
    expected = [0.999954600070331, 4.5397868608866656e-05, 2.061060046209062e-09]
    np.testing.assert_allclose(r.probs.data, expected, rtol=1e-9)


def test_relation_rejects_zero_anchor():
    with pytest.raises(ValueError):
        relationship_vector(np.zeros(2), np.ones((3, 2)), 0.1)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 9), st.floats(0.05, 2.0))
def test_relation_vectors_are_distributions(seed, m, tau):
    r = np.random.default_rng(seed)
    rv = relationship_vector(r.normal(size=(5, 6)), r.normal(size=(m, 6)), tau)
    probs = rv.probs.data
    assert (probs > 0).all()
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(seeds, st.floats(0.05, 2.0))
def test_relation_matches_oracle(seed, tau):
    anchors, refs = batch(seed, count=2)
    probs = relationship_vector(anchors, refs, tau).probs.data
    for a, row in zip(anchors.tolist(), probs):
        np.testing.assert_allclose(row, oracles.relation(a, refs.tolist(), tau), atol=1e-9)


def test_relational_examples():
    p = np.array([0.2, 0.8])
    assert relational_loss(p, p).item() == pytest.approx(0.0, abs=1e-12)
    assert relational_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0])).item() == pytest.approx(
        math.log(2), abs=1e-12)
    assert relational_loss(np.array([0.7, 0.3]), np.array([0.4, 0.6])).item() == pytest.approx(
        0.04620082918151349, abs=1e-12)


def test_relational_length_mismatch():
    with pytest.raises(ValueError):
        relational_loss(np.array([0.5, 0.5]), np.array([0.2, 0.3, 0.5]))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 7).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0.001, 1), min_size=n, max_size=n),
    st.lists(st.floats(0.001, 1), min_size=n, max_size=n))))
def test_relational_symmetric_and_bounded(pq):
    p = np.array(pq[0]) / sum(pq[0])
    q = np.array(pq[1]) / sum(pq[1])
    a, b = relational_loss(p, q).item(), relational_loss(q, p).item()
    assert abs(a - b) <= 1e-9
    assert -1e-12 <= a <= math.log(2) + 1e-12
    assert a == pytest.approx(oracles.jsd(p.tolist(), q.tolist()), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seeds, st.floats(0.05, 2.0))
def test_local_relational_matches_oracle(seed, tau):
    z, za, refs = batch(seed, count=3)
    value = relational_loss(relationship_vector(z, refs, tau), relationship_vector(za, refs, tau))
    assert value.item() == pytest.approx(oracles.relational(z.tolist(), za.tolist(),
                                                            refs.tolist(), tau), abs=1e-6)


def test_relation_vector_type_accepted_directly():
    rv = RelationVector(Tensor(np.log([[0.25, 0.75]])), 0.1)
    assert relational_loss(rv, rv).item() == pytest.approx(0.0, abs=1e-12)


# -- global losses ---------------------------------------------------------------


def test_global_contrastive_identical_is_ln2():
    z = np.ones((2, 3))
    assert global_contrastive(z, z, z, tau=1.0).item() == pytest.approx(math.log(2), abs=1e-6)


def test_global_contrastive_with_positive_is_ln3():
    z = np.ones((2, 3))
    assert global_contrastive(z, z, z, tau=1.0, include_positive=True).item() == pytest.approx(
        math.log(3), abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(seeds, st.floats(0.05, 2.0), st.booleans())
def test_global_contrastive_matches_oracle(seed, tau, include_positive):
    zl, zga, zg = batch(seed, count=3)
    got = global_contrastive(zl, zga, zg, tau, include_positive).item()
    want = oracles.global_contrastive(zl.tolist(), zga.tolist(), zg.tolist(), tau, include_positive)
    assert got == pytest.approx(want, abs=1e-6)


def test_global_contrastive_needs_two():
    with pytest.raises(ValueError):
        global_contrastive(np.ones((1, 3)), np.ones((1, 3)), np.ones((1, 3)))


def test_no_gradient_reaches_global_side():
    zl = Tensor(batch(1), requires_grad=True)
    zl_aug = Tensor(batch(5), requires_grad=True)
    zg_aug = Tensor(batch(2), requires_grad=True)
    zg = Tensor(batch(3), requires_grad=True)
    refs = Tensor(batch(4), requires_grad=True)
    r, r_aug = global_relationship_vectors(zl, zl_aug, refs, 0.1)
    loss = total_global_kd(global_contrastive(zl, zg_aug, zg, 0.1), relational_loss(r, r_aug))
    forward_backward(loss, {"zl": zl, "zl_aug": zl_aug})
    assert not zg_aug.grad.any() and not zg.grad.any() and not refs.grad.any()
    assert np.abs(zl.grad).sum() > 0 and np.abs(zl_aug.grad).sum() > 0


def test_global_relation_examples():
    refs = np.ones((3, 4))
    r, r_aug = global_relationship_vectors(np.ones((2, 4)), np.ones((2, 4)), refs, 0.1)
    np.testing.assert_allclose(r.probs.data, 1 / 3, atol=1e-12)
    r, _ = global_relationship_vectors(batch(1), batch(2), batch(3)[:1], 0.1)
    np.testing.assert_allclose(r.probs.data, 1.0)


@settings(max_examples=25, deadline=None)
@given(seeds, st.floats(0.05, 2.0))
def test_global_relational_matches_oracle(seed, tau):
    zl, zla, refs = batch(seed, count=3)
    r, r_aug = global_relationship_vectors(zl, zla, refs, tau)
    assert relational_loss(r, r_aug).item() == pytest.approx(
        oracles.relational(zl.tolist(), zla.tolist(), refs.tolist(), tau), abs=1e-6)


# -- totals ----------------------------------------------------------------------


def test_totals_of_zero_are_zero():
    zero = Tensor(0.0)
    assert total_kd(total_local_kd(zero, zero), total_global_kd(zero, zero)).item() == 0.0


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_totals_are_additive(seed):
    z, za, refs, zl, zla, zg, zga, zgr = batch(seed, count=8)
    lc = local_contrastive_simclr(z, za, 0.1)
    lr = relational_loss(relationship_vector(z, refs, 0.1), relationship_vector(za, refs, 0.1))
    gc = global_contrastive(zl, zga, zg, 0.1)
    gr = relational_loss(*global_relationship_vectors(zl, zla, zgr, 0.1))
    total = total_kd(total_local_kd(lc, lr), total_global_kd(gc, gr)).item()
    assert total == pytest.approx(lc.item() + lr.item() + gc.item() + gr.item(), abs=1e-7)
