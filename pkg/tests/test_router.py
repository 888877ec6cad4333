import numpy as np
import pytest
from hypothesis import given, strategies as st

from saresdet import tensor as T
from saresdet.router import (Router, RouterVariant, descriptor_frequency, descriptor_spatial, gate, importance_penalty,
                             route, routing_entropy, top_k)
from saresdet.tensor import Tensor

from oracles import softmax_decimal
from test_tensor import check_grad

logit_rows = st.lists(st.floats(-20, 20), min_size=2, max_size=8)


def test_worked_case_against_decimal_oracle():
    dec = gate(Tensor(np.array([[2.0, 1.0, 0.0, -1.0]])), 1.0, 2)
    p = softmax_decimal([2, 1, 0, -1])
    assert dec.selected.tolist() == [[0, 1]]
    assert np.allclose(dec.renorm[0], [p[0] / (p[0] + p[1]), p[1] / (p[0] + p[1])], atol=1e-7)
    assert np.allclose(dec.renorm[0], [0.7311, 0.2689], atol=1e-4)


@given(logit_rows, st.floats(0.05, 5), st.data())
def test_gate_invariants(row, tau, data):
    z = np.array([row])
    k = data.draw(st.integers(1, len(row)))
    dec = gate(Tensor(z), tau, k)
    assert np.all(dec.probs > 0) or np.all(dec.probs >= 0)
    assert abs(dec.probs.sum() - 1) < 1e-6
    assert abs(dec.renorm.sum() - 1) < 1e-6
    # sort-based oracle: stable descending sort
    oracle = sorted(range(len(row)), key=lambda i: (-dec.probs[0, i], i))[:k]
    assert dec.selected[0].tolist() == oracle
    assert np.allclose(dec.renorm[0], dec.probs[0, oracle] / dec.probs[0, oracle].sum(), atol=1e-6)
    # shift invariance
    shifted = gate(Tensor(z + 3.7), tau, k)
    assert np.array_equal(shifted.selected, dec.selected)
    assert np.allclose(shifted.renorm, dec.renorm, atol=1e-6)


@given(logit_rows, st.floats(0.05, 5), st.floats(0.05, 5))
def test_argmax_invariant_to_tau(row, t1, t2):
    z = Tensor(np.array([row]))
    assert gate(z, t1, 1).selected[0, 0] == gate(z, t2, 1).selected[0, 0]


def test_k_equals_e_is_identity():
    z = Tensor(np.array([[0.3, -1.0, 2.0, 0.1]]))
    dec = gate(z, 0.8, 4)
    assert np.allclose(dec.weights.data, dec.probs, atol=1e-7)


def test_ties_pick_lowest_indices():
    assert top_k(np.full((1, 4), 0.25), 2).tolist() == [[0, 1]]
    assert gate(Tensor(np.zeros((1, 5))), 1.0, 3).selected.tolist() == [[0, 1, 2]]


def test_errors():
    with pytest.raises(ValueError):
        gate(Tensor(np.zeros((1, 4))), 1.0, 5)
    with pytest.raises(ValueError):
        gate(Tensor(np.zeros((1, 4))), 0.0, 2)
    with pytest.raises(ValueError):
        Router(8, 4, "dual_branch", k=0)


def test_uniform_variant():
    r = Router(8, 4, "uniform")
    dec = r(Tensor(np.random.default_rng(0).normal(size=(3, 8, 4, 4))))
    assert np.allclose(dec.renorm, 0.25) and dec.selected.tolist() == [[0, 1, 2, 3]] * 3
    assert r.parameters() == []


def test_variant_aliases():
    assert RouterVariant.parse("dual") is RouterVariant.DUAL_BRANCH
    assert RouterVariant.parse("freq") is RouterVariant.FREQUENCY_ONLY
    with pytest.raises(ValueError):
        RouterVariant.parse("bogus")


class TestDescriptors:
    def test_spatial_zero_and_shape(self, rng):
        w = Tensor(rng.normal(size=(4, 1, 7, 7)))
        assert np.all(descriptor_spatial(Tensor(np.zeros((1, 4, 8, 8))), w, Tensor(np.zeros(4))).data == 0)
        assert descriptor_spatial(Tensor(rng.normal(size=(1, 4, 8, 8))), w).shape == (1, 4)

    def test_spatial_gradient(self):
        check_grad(lambda x, w: descriptor_spatial(x, w), (2, 3, 8, 8), (3, 1, 7, 7), positive=False)

    def test_frequency_constant_input(self):
        d = descriptor_frequency(Tensor(np.full((1, 2, 8, 8), 4.0))).data
        assert np.all(d[0, 2:] == 0.0) and np.all(d[0, :2] > 0)

    def test_frequency_checkerboard(self):
        yy, xx = np.mgrid[:8, :8]
        board = ((-1.0) ** (yy + xx))[None, None]
        d = descriptor_frequency(Tensor(board)).data
        assert d[0, 0] == pytest.approx(0.0, abs=1e-6) and d[0, 1] > 0

    def test_frequency_channel_equivariance(self, rng):
        x = rng.normal(size=(1, 3, 8, 8))
        perm = [2, 0, 1]
        a = descriptor_frequency(Tensor(x)).data.reshape(2, 3)
        b = descriptor_frequency(Tensor(x[:, perm])).data.reshape(2, 3)
        assert np.allclose(b, a[:, perm], atol=1e-6)

    def test_frequency_gradient(self):
        check_grad(descriptor_frequency, (2, 2, 4, 4))


@pytest.mark.parametrize("variant", ["mlp", "frequency_only", "spatial_only", "dual_branch"])
def test_route_invariants_and_router_gradient(variant, rng):
    r = Router(8, 4, variant, k=2, rng=rng)
    x = Tensor(rng.normal(size=(5, 8, 8, 8)).astype(np.float32))
    dec = route(x, r, variant, 2, 1.0)
    assert np.allclose(dec.probs.sum(axis=1), 1, atol=1e-6)
    assert np.allclose(dec.renorm.sum(axis=1), 1, atol=1e-6)
    assert dec.mask.sum(axis=1).tolist() == [2] * 5
    with T.Tape() as tape:
        loss = T.total(T.square(r(x).weights))
    tape.backward(loss)
    assert np.linalg.norm(r.w_r.grad) > 0


def test_route_checks_variant(rng):
    r = Router(8, 4, "mlp", rng=rng)
    with pytest.raises(ValueError):
        route(Tensor(np.zeros((1, 8, 4, 4))), r, "dual_branch")


def test_renormalized_weights_gradient():
    check_grad(lambda z: gate(z, 0.7, 2).weights, (3, 4))


def test_importance_penalty():
    assert importance_penalty(Tensor(np.full((4, 4), 0.25))).item() == pytest.approx(0.0)
    check_grad(importance_penalty, (6, 4), positive=True)


def test_entropy_bounds():
    assert routing_entropy(np.full((3, 4), 0.25)) == pytest.approx(np.log(4))
    assert routing_entropy(np.eye(4)) == pytest.approx(0.0, abs=1e-12)
