import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amtpp import autodiff as ad
from amtpp.autodiff import Tensor, backward
from amtpp.data import pad_batch
from amtpp.encoder import (causal_attention, causal_mask, location_embedding, positional_encode,
                           prepend_start_state, time_embedding, trip_embedding)

from conftest import make_sequence, micro_model


def test_position_zero_alternates():
    np.testing.assert_array_equal(positional_encode(0, Tensor(10000.0), 8).data, [0, 1, 0, 1, 0, 1, 0, 1])


@given(st.integers(0, 23), st.floats(1.5, 1e5))
def test_two_dims_ignore_scale(pos, scale):
    out = positional_encode(pos, Tensor(scale), 2).data
    np.testing.assert_allclose(out, [math.sin(pos), math.cos(pos)], atol=1e-15)


def test_encoding_formula():
    pos, L, J = 13, 10000.0, 8
    out = positional_encode(pos, Tensor(L), J).data
    for i in range(J // 2):
        ang = pos / L ** (2 * i / J)
        assert out[2 * i] == pytest.approx(math.sin(ang), abs=1e-14)
        assert out[2 * i + 1] == pytest.approx(math.cos(ang), abs=1e-14)


def test_scale_gradient_matches_finite_differences():
    L = Tensor(10000.0, requires_grad=True)
    weights = np.linspace(-1, 1, 8)

    def loss():
        return ad.sum_(positional_encode(13, L, 8) * weights)

    report = ad.grad_check(loss, {"L": L}, tolerance=1e-6, step=1e-2)
    assert report.ok, report.flagged


def test_time_embedding_layout():
    out = time_embedding([5.0], [3], [2], Tensor(100.0), Tensor(100.0), 4, 4)
    assert out.shape == (1, 9)
    other = time_embedding([7.5], [3], [2], Tensor(100.0), Tensor(100.0), 4, 4)
    diff = out.data != other.data
    assert diff[0, -1] and not diff[0, :-1].any()
    np.testing.assert_array_equal(out.data[0, :4], positional_encode(2, Tensor(100.0), 4).data)


def test_hour_domain():
    with pytest.raises(ValueError):
        time_embedding([1.0], [24], [0], Tensor(1e4), Tensor(1e4), 4, 4)


def test_location_embedding():
    S, J = 4, 3
    zero = location_embedding([0, 2], Tensor(np.zeros((J, S + 1))), Tensor(np.zeros(J)))
    np.testing.assert_array_equal(zero.data, 0.0)
    W = np.arange(J * (S + 1), dtype=float).reshape(J, S + 1)
    feats = np.ones((22, S))
    out = location_embedding([1, 3], Tensor(W), Tensor(np.zeros(J)), feats)
    assert out.shape == (2, J + 22)
    np.testing.assert_array_equal(out.data[0, :J], W[:, 1])
    # equal feature columns: rows differ only where the id columns differ
    W2 = W.copy()
    W2[:, 3] = W2[:, 1]
    same = location_embedding([1, 3], Tensor(W2), Tensor(np.zeros(J)), feats)
    np.testing.assert_array_equal(same.data[0], same.data[1])


def test_trip_embedding_concat_and_rowwise():
    t = Tensor(np.random.default_rng(0).normal(size=(3, 129)))
    o = Tensor(np.random.default_rng(1).normal(size=(3, 64)))
    d = Tensor(np.random.default_rng(2).normal(size=(3, 64)))
    E = trip_embedding(t, o, d)
    assert E.shape == (3, 257)
    perm = [2, 0, 1]
    Ep = trip_embedding(Tensor(t.data[perm]), Tensor(o.data[perm]), Tensor(d.data[perm]))
    np.testing.assert_array_equal(Ep.data, E.data[perm])


def _weights(J, c_k, c_v, c_model, L, seed=0):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.normal(size=s) * 0.3, requires_grad=True)
            for s in ((J, L * c_k), (J, L * c_k), (J, L * c_v), (L * c_v, c_model))]


def test_single_step_attention():
    rng = np.random.default_rng(0)
    E = Tensor(rng.normal(size=(1, 5)))
    WQ, WK, WV, WO = _weights(5, 2, 3, 4, 2)
    h = causal_attention(E, WQ, WK, WV, WO, 2)
    expected = ad.gelu((E @ WV) @ WO).data
    np.testing.assert_allclose(h.data, expected, atol=1e-15)


def test_uniform_value_rows():
    # identical trip embeddings give identical value rows, so each output row equals that row
    J, c = 3, 2
    E = Tensor(np.tile([[0.4, -0.2, 1.0]], (3, 1)))
    WQ = Tensor(np.eye(J)[:, :c])
    WK = Tensor(np.eye(J)[:, 1:])
    WV = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    WO = Tensor(np.eye(c))
    h = causal_attention(E, WQ, WK, WV, WO, 1)
    v = E.data[0] @ WV.data
    expected = 0.5 * v * (1 + np.vectorize(math.erf)(v / math.sqrt(2)))
    np.testing.assert_allclose(h.data, np.tile(expected, (3, 1)), atol=1e-15)


def test_causal_mask_shape():
    np.testing.assert_array_equal(causal_mask(3), [[0, 1, 1], [0, 0, 1], [0, 0, 0]])


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 7), st.integers(0, 1000))
def test_future_perturbation_leaves_past_unchanged(n, seed):
    rng = np.random.default_rng(seed)
    E = rng.normal(size=(n, 6))
    W = _weights(6, 2, 2, 5, 2, seed)
    H = causal_attention(Tensor(E), *W, 2).data
    j = n - 1
    E2 = E.copy()
    E2[j] += rng.normal(size=6)
    H2 = causal_attention(Tensor(E2), *W, 2).data
    np.testing.assert_array_equal(H[:j], H2[:j])


def test_future_gradient_is_exactly_zero():
    rng = np.random.default_rng(3)
    n = 5
    E = Tensor(rng.normal(size=(2, n, 6)), requires_grad=True)
    W = _weights(6, 2, 2, 5, 2)
    for i in range(n):
        backward(ad.sum_(causal_attention(E, *W, 2)[:, i, :]))
        assert np.all(E.grad[:, i + 1:, :] == 0.0)
        assert np.any(E.grad[:, : i + 1, :] != 0.0)


def test_start_state_and_counts():
    model = micro_model()
    seq = make_sequence("a", [8, 17, 32], [(0, 1), (1, 0), (0, 1)])
    states = model.encode(pad_batch([seq], 5))
    assert states.shape[1] == 4
    np.testing.assert_array_equal(states.data[0, 0], model.params["h0"].data)
    h = Tensor(np.zeros((2, 3, 4)))
    assert prepend_start_state(h, Tensor(np.ones(4))).shape == (2, 4, 4)


def test_identical_users_identical_states():
    model = micro_model()
    a = make_sequence("a", [8, 17, 32], [(0, 1), (1, 0), (0, 1)])
    b = make_sequence("b", [8, 17, 32], [(0, 1), (1, 0), (0, 1)])
    states = model.encode(pad_batch([a, b], 5)).data
    np.testing.assert_array_equal(states[0], states[1])


def test_cold_start_uses_h0():
    model = micro_model()
    from amtpp.data import UserSequence
    heads = model.next_trip([UserSequence("new", [])])
    direct = model.heads(Tensor(model.params["h0"].data[None, :]))
    np.testing.assert_array_equal(heads.origin_probs.data, direct.origin_probs.data)


def test_padding_does_not_change_real_steps():
    model = micro_model()
    a = make_sequence("a", [8, 17, 32], [(0, 1), (1, 0), (0, 1)])
    longer = make_sequence("b", [1, 2, 3, 4, 5, 6], [(1, 2), (2, 1)] * 3)
    alone = model.encode(pad_batch([a], 5)).data[0]
    padded = model.encode(pad_batch([a, longer], 5)).data[0, :4]
    np.testing.assert_allclose(padded, alone, atol=1e-14)
