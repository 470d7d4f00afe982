import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmunet.engine import Tensor, finite_diff_gradient, ops
from cmunet.errors import DimensionError, NumericError, ValidationError
from cmunet.gradsuite import LOSS_CHECKS
from cmunet.engine.gradcheck import check_once
from cmunet.losses import bce_loss, combined_loss, dice_loss
from cmunet.optim import AdamState, adam_step

from conftest import t64

ONES16 = np.ones((1, 1, 4, 4))


def test_bce_examples():
    rng = np.random.default_rng(3)
    target = (rng.random((2, 1, 4, 4)) < 0.5).astype(float)
    assert bce_loss(t64(np.zeros_like(target)), t64(target)).item() == pytest.approx(math.log(2), abs=1e-12)
    saturated = np.where(target == 1, 20.0, -20.0)
    assert bce_loss(t64(saturated), t64(target)).item() < 1e-8
    assert bce_loss(t64([[[[1.0]]]]), t64([[[[1.0]]]])).item() == pytest.approx(0.3132616875182228, abs=1e-12)


def test_bce_is_stable_for_huge_logits():
    z = t64([[[[1000.0, -1000.0]]]])
    assert bce_loss(z, t64([[[[0.0, 1.0]]]])).item() == pytest.approx(1000.0)


def test_dice_examples():
    assert dice_loss(t64(ONES16), t64(ONES16)).item() == 0.0
    assert dice_loss(t64(np.zeros_like(ONES16)), t64(ONES16)).item() == pytest.approx(1 - 1 / 17, abs=1e-12)
    assert dice_loss(t64(np.zeros_like(ONES16)), t64(np.zeros_like(ONES16))).item() == 0.0


def test_combined_examples():
    value = combined_loss(t64(np.zeros_like(ONES16)), t64(ONES16)).item()
    assert value == pytest.approx(0.5 * math.log(2) + (1 - 17 / 25), abs=1e-12)
    assert abs(value - 0.666574) < 1e-5
    saturated = combined_loss(t64(np.full_like(ONES16, 30.0)), t64(ONES16)).item()
    assert 0 <= saturated < 1e-6


def test_combined_is_weighted_sum(rng):
    z = t64(rng.normal(size=(2, 1, 5, 5)))
    y = t64((rng.random((2, 1, 5, 5)) < 0.5).astype(float))
    combined = combined_loss(z, y).item()
    dice = dice_loss(ops.sigmoid(z), y).item()
    assert combined - dice == pytest.approx(0.5 * bce_loss(z, y).item(), rel=1e-12)


def test_loss_validation():
    with pytest.raises(ValidationError):
        bce_loss(t64(np.zeros((1, 1, 2, 2))), t64(np.full((1, 1, 2, 2), 0.5)))
    with pytest.raises(ValidationError):
        dice_loss(t64(np.full((1, 1, 2, 2), 1.5)), t64(np.ones((1, 1, 2, 2))))
    with pytest.raises(DimensionError):
        bce_loss(t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 2, 3))))


@pytest.mark.parametrize("name", list(LOSS_CHECKS))
@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients(name, seed):
    assert check_once(LOSS_CHECKS[name], seed, eps=1e-3) <= 1e-4


def test_combined_gradient_at_eps_1e4(rng):
    for _ in range(5):
        z = rng.uniform(-3, 3, size=(2, 1, 8, 8))
        y = t64((rng.random(z.shape) < 0.5).astype(float))
        zt = t64(z, grad=True)
        combined_loss(zt, y).backward()
        numeric = finite_diff_gradient(lambda t: combined_loss(t, y), t64(z), eps=1e-4)
        assert np.abs(numeric - zt.grad).max() / np.abs(zt.grad).max() <= 1e-4


masks = arrays(np.float64, (1, 1, 4, 4), elements=st.sampled_from([0.0, 1.0]))
logits = arrays(np.float64, (1, 1, 4, 4), elements=st.floats(-8, 8))


@settings(max_examples=50, deadline=None)
@given(logits, masks, st.randoms(use_true_random=False))
def test_losses_permutation_invariant_and_nonnegative(z, y, rnd):
    perm = list(range(16))
    rnd.shuffle(perm)
    zp = z.reshape(-1)[perm].reshape(z.shape)
    yp = y.reshape(-1)[perm].reshape(y.shape)
    for fn in (bce_loss, combined_loss):
        assert fn(t64(z), t64(y)).item() == pytest.approx(fn(t64(zp), t64(yp)).item(), rel=1e-12, abs=1e-15)
    p = ops.sigmoid(t64(z))
    assert dice_loss(p, t64(y)).item() == pytest.approx(dice_loss(ops.sigmoid(t64(zp)), t64(yp)).item(), abs=1e-12)
    assert combined_loss(t64(z), t64(y)).item() >= 0


# --------------------------------------------------------------------------
# Adam

def _one_step(g, lr=1e-4):
    p = {"w": Tensor(np.array([0.5]), dtype=np.float64)}
    state = AdamState.for_params(p, lr=lr)
    adam_step(p, {"w": np.array([g])}, state)
    return p["w"].data[0] - 0.5, state


@pytest.mark.parametrize("g", [3.0, -0.2, 1e-3, -50.0])
def test_adam_first_step_is_sign_like(g):
    lr = 1e-4
    update, state = _one_step(g, lr)
    # m_hat = g, v_hat = g^2 after bias correction
    assert update == pytest.approx(-lr * g / (abs(g) + 1e-8), rel=1e-9)
    assert abs(update + lr * np.sign(g)) <= lr * 1e-4
    assert state.t == 1


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    state = AdamState.for_params(p)
    before = p["w"].data.copy()
    adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"].data, before)
    assert state.t == 1


def test_adam_odd_symmetry():
    p = {"a": Tensor(np.array([0.0]), dtype=np.float64), "b": Tensor(np.array([0.0]), dtype=np.float64)}
    state = AdamState.for_params(p)
    for g in (0.3, 0.1, -0.7):
        adam_step(p, {"a": np.array([g]), "b": np.array([-g])}, state)
    assert p["a"].data[0] == -p["b"].data[0]


def test_adam_matches_hand_rolled_two_steps():
    p = {"w": Tensor(np.array([1.0]), dtype=np.float64)}
    state = AdamState.for_params(p, lr=0.01)
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate((0.5, -0.25), start=1):
        adam_step(p, {"w": np.array([g])}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert p["w"].data[0] == pytest.approx(w, rel=1e-12)
    assert state.m["w"].shape == p["w"].shape


def test_adam_errors():
    p = {"w": Tensor(np.zeros(2))}
    state = AdamState.for_params(p)
    with pytest.raises(NumericError, match="'w'"):
        adam_step(p, {"w": np.array([1.0, np.nan])}, state)
    with pytest.raises(DimensionError):
        adam_step(p, {"w": np.zeros(3)}, state)
    assert state.t == 0
