import numpy as np
import pytest

from featprobe import nn
from featprobe.nn import autodiff as ad
from featprobe.nn.gradcheck import max_relative_error, numeric_gradient


def as_batch(*channels):
    """Stack per-channel location rows into a [1, C, 1, L] batch."""
    arr = np.stack(channels, axis=0)[None, :, None, :]
    return np.ascontiguousarray(arr, dtype=np.float32)


def test_loss_zero_when_equal(rng):
    cfg = nn.TrainConfig()
    target = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    loss = nn.mapping_loss(ad.Var(target.copy()), target, cfg)
    assert float(loss.data) == 0.0


def test_loss_hand_values():
    # single location, target (1,0): orthogonal pred gives 0.3*1 + 0.7*1,
    # antiparallel pred gives 0.3*2 + 0.7*2
    cfg = nn.TrainConfig()  # lambda_mse=0.3, lambda_cos=0.7
    target = np.array([[[[1.0]], [[0.0]]]], dtype=np.float32)
    orthogonal = np.array([[[[0.0]], [[1.0]]]], dtype=np.float32)
    antiparallel = np.array([[[[-1.0]], [[0.0]]]], dtype=np.float32)
    assert abs(float(nn.mapping_loss(ad.Var(orthogonal), target, cfg).data) - 1.0) <= 1e-6
    assert abs(float(nn.mapping_loss(ad.Var(antiparallel), target, cfg).data) - 2.0) <= 1e-6


def test_loss_nonnegative_and_zero_iff_equal(rng):
    cfg = nn.TrainConfig()
    for _ in range(20):
        target = rng.standard_normal((2, 3, 2, 2)).astype(np.float32)
        pred = target + rng.standard_normal(target.shape).astype(np.float32) * 0.1
        value = float(nn.mapping_loss(ad.Var(pred), target, cfg).data)
        assert value > 0.0


def test_loss_median_is_per_sample_over_locations():
    cfg = nn.TrainConfig(lambda_mse=0.0, lambda_cos=1.0)
    # two locations with cosines 1 and 0 -> median 0.5 -> loss 0.5
    target = as_batch([1.0, 1.0], [0.0, 0.0])
    pred = as_batch([1.0, 0.0], [0.0, 1.0])
    loss = float(nn.mapping_loss(ad.Var(pred), target, cfg).data)
    assert abs(loss - 0.5) <= 1e-6


def test_loss_guards_zero_norm_locations():
    cfg = nn.TrainConfig()
    target = np.zeros((1, 2, 1, 1), dtype=np.float32)
    pred = np.ones((1, 2, 1, 1), dtype=np.float32)
    loss = nn.mapping_loss(ad.Var(pred), target, cfg)
    assert np.isfinite(float(loss.data))
    ad.backward(loss)  # and the gradient is finite too


def test_loss_shape_mismatch_raises(rng):
    cfg = nn.TrainConfig()
    with pytest.raises(ad.UsageError):
        nn.mapping_loss(ad.Var(np.zeros((1, 2, 2, 2), dtype=np.float32)),
                        np.zeros((1, 2, 2, 3), dtype=np.float32), cfg)
    with pytest.raises(ad.UsageError):
        nn.mapping_loss(ad.Var(np.zeros((2, 2), dtype=np.float32)),
                        np.zeros((2, 2), dtype=np.float32), cfg)


def test_loss_gradcheck_including_median(rng):
    cfg = nn.TrainConfig()
    target = rng.standard_normal((2, 3, 2, 3))
    pred = ad.Var(rng.standard_normal((2, 3, 2, 3)))
    loss = nn.mapping_loss(pred, target, cfg)
    ad.backward(loss)
    numeric = numeric_gradient(
        lambda: float(nn.mapping_loss(ad.Var(pred.data), target, cfg).data),
        pred.data)
    assert max_relative_error(pred.grad, numeric) <= 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        nn.TrainConfig(lambda_mse=-0.1)
    with pytest.raises(ValueError):
        nn.TrainConfig(lambda_mse=0.0, lambda_cos=0.0)
    with pytest.raises(ValueError):
        nn.TrainConfig(mode="predict")


def test_loss_terms_align_with_total(rng):
    cfg = nn.TrainConfig(lambda_mse=0.4, lambda_cos=0.6)
    target = rng.standard_normal((3, 2, 2, 2)).astype(np.float32)
    pred = ad.Var(rng.standard_normal((3, 2, 2, 2)).astype(np.float32))
    loss, mse, cosl = nn.mapping_loss_terms(pred, target, cfg)
    assert abs(float(loss.data)
               - (0.4 * float(mse.data) + 0.6 * float(cosl.data))) <= 1e-6
