import numpy as np
import pytest

from averis_lab.decomposition import decompose, r_ratio
from averis_lab.linalg import ContractError
from averis_lab.quantizer import QuantConfig
from averis_lab.trainer import (
    ToyModel,
    TrainConfig,
    final_loss,
    forward_pass,
    init_model,
    make_task,
    track_layer_means,
    train,
)


def small(**kw):
    base = dict(steps=30, batch=4, seq=16, hidden=32, depth=3, log_every=10)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(steps=0)
    with pytest.raises(ContractError):
        TrainConfig(lr=0.0)
    with pytest.raises(ContractError):
        TrainConfig(mode="bf16")
    assert TrainConfig(task="centered").task == "teacher_regression_centered"
    assert TrainConfig().tokens == 512


def test_model_shape_chaining():
    with pytest.raises(ContractError):
        ToyModel([np.zeros((4, 4)), np.zeros((5, 4))])
    m = init_model(hidden=8, depth=3, out_dim=2, seed=1)
    assert m.depth == 3 and m.hidden == 8 and m.weights[-1].shape == (8, 2)


def test_he_initialization_scale():
    w = init_model(hidden=256, depth=2, seed=0).weights[0]
    assert np.var(w) == pytest.approx(2 / 256, rel=0.05)


def test_centered_batches_have_small_mean():
    task = make_task(TrainConfig(task="centered"))
    x, _ = task.batch(0)
    l, m = x.shape
    assert np.linalg.norm(x.mean(axis=0)) < 3 * task.sigma * np.sqrt(m / l)


def test_biased_batches_are_mean_dominated():
    task = make_task(TrainConfig(task="biased", mean_ratio=8))
    for step in range(3):
        assert decompose(task.batch(step)[0]).mean_share > 0.8


def test_batches_are_reproducible():
    a = make_task(TrainConfig(seed=4)).batch(7)
    b = make_task(TrainConfig(seed=4)).batch(7)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert not np.array_equal(a[0], make_task(TrainConfig(seed=4)).batch(8)[0])


@pytest.mark.parametrize("task", ["biased", "centered"])
def test_fullprec_loss_decreases_early(task):
    log = train(init_model(seed=0), TrainConfig(mode="fullprec", task=task, steps=100, log_every=0))
    windows = np.asarray(log.losses).reshape(10, 10).mean(axis=1)
    assert np.all(np.diff(windows) < 0)


@pytest.mark.parametrize("mode", ["fp4_averis", "fp4_vanilla"])
def test_identity_quantizer_reproduces_fullprec(mode):
    ref = train(init_model(seed=2, hidden=32, depth=3), small(mode="fullprec", seed=2))
    got = train(init_model(seed=2, hidden=32, depth=3), small(mode=mode, seed=2, quant=QuantConfig(format="identity")))
    np.testing.assert_allclose(got.losses, ref.losses, rtol=1e-8, atol=0)


def test_quantized_run_is_deterministic():
    a = train(init_model(seed=1, hidden=32, depth=3), small(mode="fp4_averis", seed=1))
    b = train(init_model(seed=1, hidden=32, depth=3), small(mode="fp4_averis", seed=1))
    assert a.losses == b.losses


def test_quantized_forward_differs_from_fullprec():
    m = init_model(hidden=32, depth=2, seed=0)
    x = make_task(small()).batch(0)[0]
    ref, _ = forward_pass(m, x)
    out, cache = forward_pass(m, x, "fp4_vanilla", QuantConfig())
    assert not np.allclose(out, ref) and cache[0][2] is not None


def test_divergence_is_reported_not_raised():
    log = train(init_model(seed=0, hidden=32, depth=3), small(mode="fullprec", lr=1e6, steps=50))
    assert log.diverged and log.final_loss == float("inf")
    assert all(np.isfinite(log.losses))


def test_final_loss_window():
    assert final_loss(list(range(100))) == pytest.approx(97.0)
    assert final_loss([5.0]) == 5.0
    assert final_loss([]) == float("inf")


def test_run_log_records_layer_ratios():
    log = train(init_model(seed=0, hidden=32, depth=3), small(mode="fullprec"))
    assert [s for s, _ in log.layer_r] == [0, 10, 20]
    assert all(len(r) == 3 for _, r in log.layer_r)
    assert log.summary()["steps_run"] == 30


def test_relu_residual_stack_grows_mean_ratio():
    for seed in range(5):
        x = make_task(TrainConfig(task="centered"), seed=seed).batch(0)[0]
        r = track_layer_means(init_model(seed=seed), x)
        assert r[0] < r[1] < r[2]


def test_odd_nonlinearity_keeps_ratio_flat():
    x = make_task(TrainConfig(task="centered")).batch(0)[0]
    r = track_layer_means(init_model(seed=0, nonlinearity="tanh", residual=False), x)
    assert max(r) < 0.1 and max(r) - min(r) < 0.02


def test_depth_one_reports_input_ratio():
    x = make_task(TrainConfig(task="biased")).batch(0)[0]
    r = track_layer_means(init_model(depth=1, seed=0), x)
    assert r == [r_ratio(x)]
