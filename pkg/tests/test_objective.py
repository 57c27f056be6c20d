import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vgse import tensor as T
from vgse.errors import ConfigError, DimensionError
from vgse.objective import LossConfig, cosine_matrix, hinge_loss
from vgse.tensor import Tensor

from conftest import gradcheck


def brute_force_hinge(S, margin):
    """Naive loop over every matched pair and every mismatched partner."""
    B = len(S)
    total = 0.0
    for i in range(B):
        for j in range(B):
            if i == j:
                continue
            total += max(0.0, S[i][j] - S[i][i] + margin)  # caption i, wrong image j
            total += max(0.0, S[j][i] - S[i][i] + margin)  # image i, wrong caption j
    return total


def test_cosine_matrix_identity():
    E = Tensor([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(cosine_matrix(E, E).data, np.eye(2))


def test_cosine_scale_invariance_and_angle():
    S = cosine_matrix(Tensor([[1.0, 2.0], [1.0, 0.0]]), Tensor([[2.0, 4.0], [1.0, 1.0]])).data
    assert S[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert S[1, 1] == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_cosine_matrix_mismatch():
    with pytest.raises(DimensionError):
        cosine_matrix(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_cosine_matrix_grad(rng):
    X, Y = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4))
    w = Tensor(rng.uniform(-1, 1, (3, 3)))
    assert gradcheck(lambda x, y: T.sum(T.mul(cosine_matrix(x, y), w)), [X, Y]) < 1e-6


def test_perfectly_separated_batch_has_zero_loss():
    assert hinge_loss(Tensor(np.eye(2)), LossConfig(0.2)).item() == 0.0


def test_all_ones_batch():
    assert hinge_loss(Tensor(np.ones((2, 2))), LossConfig(0.2)).item() == pytest.approx(0.8, abs=1e-15)


def test_single_pair_batch():
    assert hinge_loss(Tensor([[0.3]])).item() == 0.0


def test_non_square_rejected():
    with pytest.raises(DimensionError):
        hinge_loss(Tensor(np.zeros((2, 3))))


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(margin=0.0)
    with pytest.raises(ConfigError):
        LossConfig(reduction="max")


def test_matches_brute_force(rng):
    for _ in range(200):
        B = int(rng.integers(2, 6))
        S = rng.uniform(-1, 1, (B, B))
        assert abs(hinge_loss(Tensor(S)).item() - brute_force_hinge(S, 0.2)) < 1e-12


def test_mean_reduction(rng):
    S = rng.uniform(-1, 1, (4, 4))
    assert hinge_loss(Tensor(S), LossConfig(0.2, "mean")).item() == pytest.approx(brute_force_hinge(S, 0.2) / 24, abs=1e-14)


def test_hinge_grad(rng):
    S = rng.uniform(-1, 1, (4, 4))
    assert gradcheck(lambda s: hinge_loss(s), [S]) < 1e-6


def test_subgradient_at_kink_is_zero():
    # S[0,1] - S[0,0] + 0.2 == 0 exactly for the caption-side term
    S = Tensor([[0.5, 0.3], [-1.0, 1.0]], requires_grad=True)
    T.backward(hinge_loss(S))
    assert S.grad[0, 1] == 0.0


square = st.integers(2, 5).flatmap(lambda b: arrays(np.float64, (b, b), elements=st.floats(-1, 1)))


@settings(max_examples=100, deadline=None)
@given(square)
def test_loss_properties(S):
    L = hinge_loss(Tensor(S)).item()
    assert L >= 0
    assert abs(L - hinge_loss(Tensor(S.T.copy())).item()) < 1e-12
    B = len(S)
    separated = all(S[i, j] <= S[i, i] - 0.2 and S[j, i] <= S[i, i] - 0.2 for i in range(B) for j in range(B) if i != j)
    assert (L == 0) == separated


@settings(max_examples=100, deadline=None)
@given(square, st.floats(0, 0.5), st.data())
def test_loss_monotonicity(S, delta, data):
    B = len(S)
    i = data.draw(st.integers(0, B - 1))
    j = data.draw(st.integers(0, B - 1).filter(lambda k: k != i))
    L = hinge_loss(Tensor(S)).item()
    up_diag = S.copy()
    up_diag[i, i] += delta
    assert hinge_loss(Tensor(up_diag)).item() <= L + 1e-12
    up_off = S.copy()
    up_off[i, j] += delta
    assert hinge_loss(Tensor(up_off)).item() >= L - 1e-12
