import numpy as np
import pytest

from nfloc.neural import Architecture, init_model, model_backward, model_forward, parameter_count
from nfloc.neural.layers import mse_loss, mse_loss_grad

from gradcheck import REL_TOL, probe


def desk_model(n=8, k=1, seed=0):
    return init_model(Architecture.preset("desk", n, 3 * k), np.random.default_rng(seed))


def test_output_shape_k3():
    model = desk_model(n=6, k=3)
    x = np.random.default_rng(1).standard_normal((5, 2, 6, 6))
    out, _ = model_forward(model, x)
    assert out.shape == (5, 9)


@pytest.mark.parametrize("n", [4, 5, 7, 16])
def test_any_size_at_least_four(n):
    model = desk_model(n=n, k=2)
    out, _ = model_forward(model, np.ones((2, 2, n, n)), "train", np.random.default_rng(0))
    assert out.shape == (2, 6)
    with pytest.raises(ValueError):
        Architecture.preset("desk", 3, 3)


def test_wrong_input_shape():
    model = desk_model(n=8)
    with pytest.raises(ValueError):
        model_forward(model, np.zeros((1, 2, 7, 7)))
    with pytest.raises(ValueError):
        model_forward(model, np.zeros((2, 8, 8)))


def test_infer_is_deterministic():
    model = desk_model()
    x = np.random.default_rng(2).standard_normal((3, 2, 8, 8))
    a, _ = model_forward(model, x)
    b, _ = model_forward(model, x)
    assert a.tobytes() == b.tobytes()


def test_dropout_only_in_train_mode():
    model = desk_model()
    x = np.random.default_rng(3).standard_normal((4, 2, 8, 8))
    t1, _ = model_forward(model, x, "train", np.random.default_rng(1))
    t2, _ = model_forward(model, x, "train", np.random.default_rng(2))
    assert not np.array_equal(t1, t2)


def test_full_scale_preset_progression():
    arch = Architecture.preset("paper", 128, 9)
    assert arch.block_filters == (32, 64, 128, 256)
    assert arch.fc_widths == (1024, 512, 256)
    assert arch.dropout_rate == 0.3
    assert arch.flat_features == 4096
    assert Architecture.preset("paper", 128, 9, output_activation="softmax").output_activation == "softmax"


def test_full_scale_parameter_count_hand_summed():
    # conv units: weights + bias + BN gamma/beta
    conv = (32 * 2 * 9 + 32 + 64) + (32 * 32 * 9 + 32 + 64) \
        + (64 * 32 * 9 + 64 + 128) + (64 * 64 * 9 + 64 + 128) \
        + (128 * 64 * 9 + 128 + 256) + 2 * (128 * 128 * 9 + 128 + 256) \
        + (256 * 128 * 9 + 256 + 512) + 2 * (256 * 256 * 9 + 256 + 512)
    assert conv == 1_912_320
    fc = (4096 * 1024 + 1024 + 2048) + (1024 * 512 + 512 + 1024) + (512 * 256 + 256 + 512) + (256 * 9 + 9)
    assert fc == 4_857_353
    arch = Architecture.preset("paper", 128, 9)
    assert parameter_count(arch) == 6_769_673
    assert init_model(arch, np.random.default_rng(0), np.float32).num_parameters() == 6_769_673


def test_desk_parameter_count_matches_arrays():
    arch = Architecture.preset("desk", 16, 3)
    assert init_model(arch, np.random.default_rng(0)).num_parameters() == parameter_count(arch)


def test_zero_loss_zero_gradients():
    model = desk_model()
    x = np.random.default_rng(4).standard_normal((3, 2, 8, 8))
    pred, tape = model_forward(model, x, "train")
    grads = model_backward(model, tape, mse_loss_grad(pred, pred.copy()))
    assert set(grads) == set(model.named_parameters())
    assert all(not np.any(g) for g in grads.values())


def full_model_check(model, x, target, rng, probes=100, softmax=False):
    def loss():
        pred, _ = model_forward(model, x, "train", np.random.default_rng(123))
        return mse_loss(pred, target)

    pred, tape = model_forward(model, x, "train", np.random.default_rng(123))
    grads, dx = model_backward(model, tape, mse_loss_grad(pred, target), want_input_grad=True)
    arrays = dict(model.named_parameters())
    grads = dict(grads)
    arrays["input"], grads["input"] = x, dx
    return probe(loss, arrays, grads, probes, rng)


def test_full_desk_model_gradcheck():
    rng = np.random.default_rng(5)
    model = desk_model(n=8, k=1, seed=6)
    x = rng.standard_normal((4, 2, 8, 8))
    target = rng.standard_normal((4, 3))
    results = full_model_check(model, x, target, rng)
    assert len(results) >= 100
    worst = max(results, key=lambda r: r[-1])
    assert worst[-1] <= REL_TOL, worst


def test_softmax_head_gradcheck():
    rng = np.random.default_rng(7)
    arch = Architecture.preset("desk", 8, 6, output_activation="softmax")
    model = init_model(arch, np.random.default_rng(8))
    x = rng.standard_normal((3, 2, 8, 8))
    out, _ = model_forward(model, x)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    results = full_model_check(model, x, rng.random((3, 6)), rng)
    assert max(r[-1] for r in results) <= REL_TOL


def test_input_mode_validation_and_columns():
    assert Architecture.preset("desk", 8, 6).input_columns == 2
    assert Architecture.preset("desk", 8, 6, input_mode="full").input_columns is None
    with pytest.raises(ValueError):
        Architecture.preset("desk", 8, 6, input_mode="noise")
