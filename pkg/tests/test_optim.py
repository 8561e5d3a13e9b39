import numpy as np
import pytest

from ticketlab.config import TrainConfig
from ticketlab.errors import CongruenceError
from ticketlab.masking import Mask
from ticketlab.model import ParamEntry, ParamSet
from ticketlab.optim import VelocityState, lr_at, sgd_step


@pytest.mark.parametrize(
    "epoch, expected",
    [(0, 0.1), (79, 0.1), (80, 0.01), (119, 0.01), (120, 0.001), (149, 0.001)],
)
def test_step_schedule(epoch, expected):
    assert lr_at(epoch, TrainConfig()) == pytest.approx(expected)


def _params(w):
    return ParamSet([ParamEntry("layer0.weight", np.array(w, dtype=np.float64), True)])


def test_momentum_update():
    params = _params([1.0, 2.0])
    grads = _params([0.5, -1.0])
    velocity = VelocityState([np.array([1.0, 1.0])])
    new, v = sgd_step(params, grads, velocity, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(v.buffers[0], [1.4, -0.1])
    np.testing.assert_allclose(new["layer0.weight"], [0.86, 2.01])


def test_masked_coordinates_stay_exactly_zero():
    params = _params([0.0, 2.0, 0.0])
    grads = _params([5.0, 1.0, -3.0])
    mask = Mask([("layer0.weight", np.array([False, True, False]))])
    velocity = VelocityState([np.array([7.0, 0.0, 7.0])])
    for _ in range(3):
        params, velocity = sgd_step(params, grads, velocity, lr=0.1, momentum=0.9, mask=mask)
    assert params["layer0.weight"][0] == 0.0 and params["layer0.weight"][2] == 0.0
    np.testing.assert_array_equal(velocity.buffers[0][[0, 2]], 0.0)


def test_velocity_must_match():
    params = _params([1.0])
    with pytest.raises(CongruenceError):
        sgd_step(params, params, VelocityState([]), 0.1, 0.9)


def test_zero_lr_moves_only_the_velocity():
    params = _params([1.0, -2.0])
    grads = _params([0.5, 0.25])
    new, v = sgd_step(params, grads, VelocityState([np.array([1.0, 1.0])]), lr=0.0, momentum=0.9)
    np.testing.assert_array_equal(new["layer0.weight"], [1.0, -2.0])
    np.testing.assert_allclose(v.buffers[0], [1.4, 1.15])


def test_zero_momentum_is_plain_sgd():
    rng = np.random.default_rng(0)
    params = _params(rng.standard_normal(6))
    velocity = VelocityState.zeros_like(params)
    for _ in range(5):
        grads = _params(rng.standard_normal(6))
        expected = params["layer0.weight"] - 0.05 * grads["layer0.weight"]
        params, velocity = sgd_step(params, grads, velocity, lr=0.05, momentum=0.0)
        np.testing.assert_allclose(params["layer0.weight"], expected, rtol=1e-15)
        np.testing.assert_array_equal(velocity.buffers[0], grads["layer0.weight"])


def test_all_zero_mask_holds_for_a_hundred_steps():
    rng = np.random.default_rng(1)
    params = _params(np.zeros(5))
    mask = Mask([("layer0.weight", np.zeros(5, dtype=bool))])
    velocity = VelocityState.zeros_like(params)
    for _ in range(100):
        grads = _params(rng.standard_normal(5))
        params, velocity = sgd_step(params, grads, velocity, lr=0.1, momentum=0.9, mask=mask, weight_decay=1e-3)
    np.testing.assert_array_equal(params["layer0.weight"], 0.0)
    np.testing.assert_array_equal(velocity.buffers[0], 0.0)


def test_weight_decay_adds_to_the_gradient():
    params = _params([2.0, -4.0])
    grads = _params([0.0, 1.0])
    new, v = sgd_step(params, grads, VelocityState.zeros_like(params), lr=0.1, momentum=0.9, weight_decay=0.5)
    np.testing.assert_allclose(v.buffers[0], [1.0, -1.0])
    np.testing.assert_allclose(new["layer0.weight"], [1.9, -3.9])
