import math

import numpy as np
import pytest

from wsinr import numerics as nx
from wsinr.errors import ShapeError
from wsinr.numerics import Tape, Tensor
from wsinr.objectives import bce_loss, dice_coefficient, dice_loss, dice_metric, mse_loss, psnr


def probs(h, w, seed):
    p = np.random.default_rng(seed).uniform(0.05, 0.95, size=(h, w))
    return np.stack([1 - p, p], axis=-1)


def test_mse_value():
    assert mse_loss(Tensor(np.full((2, 2, 3), 0.5)), np.zeros((2, 2, 3))).value == pytest.approx(0.25, abs=0)


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse_loss(Tensor(np.zeros((2, 2, 3))), np.zeros((2, 3, 3)))


def test_bce_of_perfect_prediction_is_clamped():
    y = np.array([[0, 1]])
    pred = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    assert bce_loss(Tensor(pred), y).value == pytest.approx(-math.log(1 - 1e-7), rel=1e-12)


def test_bce_value():
    y = np.array([[1, 0]])
    pred = np.array([[[0.2, 0.8], [0.6, 0.4]]])
    assert bce_loss(Tensor(pred), y).value == pytest.approx(-(math.log(0.8) + math.log(0.6)) / 2, rel=1e-14)


def test_bce_rejects_non_binary_labels():
    with pytest.raises(ValueError):
        bce_loss(Tensor(probs(2, 2, 0)), np.array([[0, 2], [1, 0]]))


@pytest.mark.parametrize("squared", [False, True])
def test_dice_loss_perfect_and_disjoint(squared):
    g = np.array([[1, 0], [0, 1]])
    assert dice_loss(Tensor(g.astype(float)), g, squared).value == pytest.approx(0.0, abs=1e-12)
    assert dice_loss(Tensor(1.0 - g), g, squared).value == pytest.approx(1.0, abs=1e-6)


def test_dice_empty_against_empty_is_one():
    z = np.zeros((3, 3))
    assert dice_coefficient(z, z) == 1.0
    assert dice_metric(z, z).dice == 1.0


def test_dice_metric_counts():
    pred = np.array([[1, 1, 0, 0]])
    truth = np.array([[1, 0, 1, 0]])
    r = dice_metric(pred, truth, "base")
    assert (r.tp, r.fp, r.fn) == (1, 1, 1)
    assert r.dice == pytest.approx(0.5, abs=0)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("squared", [False, True])
def test_seg_loss_gradients(seed, squared):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((5, 4, 2)), True)
    labels = (rng.random((5, 4)) > 0.4).astype(np.uint8)

    def loss():
        p = nx.softmax(logits)
        lesion = nx.reshape(nx.slice_(p, 2, 1, 2), (5, 4))
        return nx.add(bce_loss(p, labels).total, dice_loss(lesion, labels, squared).total)

    rep = nx.finite_diff_check(loss, {"logits": {"x": logits}}, rng=rng)
    assert rep.passed, rep.lines()


@pytest.mark.parametrize("seed", range(5))
def test_mse_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((4, 4, 3)), True)
    target = rng.random((4, 4, 3))
    rep = nx.finite_diff_check(lambda: mse_loss(nx.sigmoid(x), target).total, {"x": {"x": x}}, rng=rng)
    assert rep.passed, rep.lines()


def test_loss_values_add():
    a = mse_loss(Tensor(np.ones((1, 1, 3))), np.zeros((1, 1, 3)))
    b = bce_loss(Tensor(probs(1, 1, 0)), np.array([[1]]))
    s = a + b
    assert s.value == pytest.approx(a.value + b.value, rel=1e-15)
    assert set(s.components) == {"mse", "bce"}


def test_psnr():
    assert psnr(np.zeros(4), np.zeros(4)) == math.inf
    assert psnr(np.full(4, 0.1), np.zeros(4)) == pytest.approx(20.0, abs=1e-12)


def test_seg_loss_backward_flows_to_logits():
    x = Tensor(np.zeros((2, 2, 2)), True)
    with Tape() as tape:
        loss = bce_loss(nx.softmax(x), np.array([[1, 0], [0, 1]])).total
    tape.backward(loss)
    assert np.abs(x.grad).max() > 0
