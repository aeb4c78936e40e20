import math

import numpy as np
import pytest

from stresnet import model, trainer
from stresnet.dataset import SampleStore
from stresnet.errors import ConfigurationError, PreconditionError
from stresnet.model import StresNetWeights, forward
from stresnet.trainer import AdamState, HyperParams, adam_step, adam_update, backward, loss

from helpers import (
    finite_difference_gradient,
    gradient_mismatches,
    kink_free_weights,
    random_weights,
    relu_margin,
)
from oracles import stresnet_loop


def random_batch(rng, n=2, size=8):
    return rng.random((n, 3, size, size))


def offset_store(n=32, size=38, seed=0):
    """Targets are the current blocks brightened by 12 grey levels."""
    rng = np.random.default_rng(seed)
    base = rng.random((n, 1, size, size)) * 0.8
    smooth = (base + np.roll(base, 1, axis=2) + np.roll(base, 1, axis=3)) / 3
    current = smooth
    colocated = np.roll(smooth, 1, axis=3)
    target = current + 12 / 255
    return SampleStore(np.concatenate([colocated, current, target], axis=1), qp=32)


@pytest.mark.parametrize("qp,expected", [
    (22, (1e-6, 0.9, 0.999, 600_000)),
    (27, (1e-7, 0.9, 0.990, 600_000)),
    (32, (1e-8, 0.9, 0.988, 300_000)),
    (37, (1e-8, 0.9, 0.988, 300_000)),
])
def test_qp_defaults(qp, expected):
    hp = HyperParams.for_qp(qp)
    assert (hp.base_learning_rate, hp.momentum, hp.momentum2, hp.iterations) == expected
    assert hp.batch_size == 128 and hp.adam_epsilon == 1e-8


def test_qp_overrides():
    hp = HyperParams.for_qp(37, iterations=2000, base_learning_rate=None)
    assert hp.iterations == 2000 and hp.base_learning_rate == 1e-8
    with pytest.raises(ConfigurationError):
        HyperParams.for_qp(30)
    assert HyperParams.for_qp(30, base_learning_rate=1e-4).qp == 30


def test_hyperparams_validation():
    with pytest.raises(ConfigurationError):
        HyperParams(qp=22, base_learning_rate=0)
    with pytest.raises(ConfigurationError):
        HyperParams(qp=22, base_learning_rate=1e-3, momentum2=1.0)


def test_loss_zero_at_prediction(rng):
    w = random_weights(rng)
    batch = random_batch(rng, 3)
    out = forward(w, batch[:, 1, ..., None], batch[:, 0, ..., None])
    batch[:, 2] = out[..., 0]
    assert loss(w, batch) == 0.0
    assert not backward(w, batch).flatten().any()


def test_loss_constant_offset(rng):
    batch = rng.random((4, 3, 38, 38))
    batch[:, 2] = batch[:, 1] + 1.0
    assert loss(StresNetWeights.zeros(), batch) == pytest.approx(38 * 38, rel=1e-12)


def test_loss_matches_loop_oracle(rng):
    w = random_weights(rng)
    batch = random_batch(rng, 3, 6)
    layers = [(k.weights, k.bias) for k in w.layers()]
    total = 0.0
    for col, cur, tgt in batch:
        out = stresnet_loop(layers, cur[..., None], col[..., None])[..., 0]
        for r in range(6):
            for c in range(6):
                total += (out[r, c] - tgt[r, c]) ** 2
    assert loss(w, batch) == pytest.approx(total / 3, abs=1e-9)


def test_loss_accepts_sample_list(rng):
    from stresnet.dataset import TrainingSample
    batch = random_batch(rng, 2)
    samples = [TrainingSample(*b) for b in batch]
    w = random_weights(rng)
    assert loss(w, samples) == loss(w, batch)


def test_empty_and_ragged_batches():
    with pytest.raises(PreconditionError):
        loss(StresNetWeights.zeros(), [])
    from stresnet.dataset import TrainingSample
    a = TrainingSample(*np.zeros((3, 4, 4)))
    b = TrainingSample(*np.zeros((3, 5, 5)))
    with pytest.raises(PreconditionError):
        loss(StresNetWeights.zeros(), [a, b])


def test_gradient_scales_exactly(rng):
    w = random_weights(rng)
    batch = random_batch(rng)
    g1 = backward(w, batch).flatten()
    g2 = backward(w, batch, scale=2.0).flatten()
    assert np.array_equal(g2, 2 * g1)


def test_gradient_finite_differences_subset(rng):
    # the full 11,553-parameter sweep lives in the acceptance suite
    while True:
        w = kink_free_weights(rng)
        batch = random_batch(rng)
        if relu_margin(w, batch[:, 1, ..., None], batch[:, 0, ..., None]) > 0.01:
            break
    analytic = backward(w, batch).flatten()
    idx = rng.choice(analytic.size, 600, replace=False)
    numeric = finite_difference_gradient(lambda m: loss(m, batch), w, indices=idx)
    assert gradient_mismatches(analytic, numeric) == []


def test_gradient_agrees_wherever_relu_masks_are_stable(rng):
    # unrestricted weights: a difference quotient straddling a ReLU kink is not
    # a derivative, so only parameters whose perturbation keeps every mask are compared
    w = random_weights(rng, scale=0.3)
    batch = random_batch(rng)
    cur, col = batch[:, 1, ..., None], batch[:, 0, ..., None]

    def masks(m):
        a = model.forward_with_intermediates(m, cur, col)
        return np.concatenate([(x > 0).ravel() for x in (a.f1, a.f2, a.fused, a.f4)])

    base = masks(w)
    analytic = backward(w, batch).flatten()
    stable = {}
    flat = w.flatten()
    for i in rng.choice(flat.size, 300, replace=False):
        ok = True
        for sign in (1, -1):
            shifted = flat.copy()
            shifted[i] += sign * 1e-3
            ok &= np.array_equal(masks(StresNetWeights.from_flat(shifted)), base)
        if ok:
            stable[i] = None
    numeric = finite_difference_gradient(lambda m: loss(m, batch), w, indices=list(stable))
    assert len(numeric) > 200
    assert gradient_mismatches(analytic, numeric) == []


def test_residue_relu_gradient(rng):
    w = kink_free_weights(rng)
    w.conv5.bias[0] = 0.3
    batch = random_batch(rng)
    analytic = backward(w, batch, residue_relu=True).flatten()
    idx = rng.choice(analytic.size, 200, replace=False)
    numeric = finite_difference_gradient(lambda m: loss(m, batch, residue_relu=True), w, indices=idx)
    assert gradient_mismatches(analytic, numeric) == []


def test_adam_zero_gradient_keeps_weights(rng):
    w = random_weights(rng)
    hp = HyperParams(qp=22, base_learning_rate=1e-3)
    new, state = adam_step(w, StresNetWeights.zeros(), AdamState.zeros(), hp)
    assert np.array_equal(new.flatten(), w.flatten())
    assert state.step == 1 and new.qp == w.qp


def test_adam_first_step_is_signed_lr(rng):
    g = rng.normal(size=50)
    theta, state = adam_update(np.zeros(50), g, AdamState.zeros(50), 1e-3, 0.9, 0.999, 1e-8)
    np.testing.assert_allclose(theta, -1e-3 * np.sign(g), rtol=1e-6)
    assert (state.second_moment >= 0).all()


def _scalar_adam(theta, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    path = []
    for t in range(1, steps + 1):
        g = 2 * (theta - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        path.append(theta)
    return path


def test_adam_scalar_quadratic():
    expected = _scalar_adam(0.0, 100, 0.1)
    theta, state = np.zeros(1), AdamState.zeros(1)
    for t in range(100):
        theta, state = adam_update(theta, 2 * (theta - 3), state, 0.1, 0.9, 0.999, 1e-8)
        assert theta[0] == pytest.approx(expected[t], abs=1e-12)
    assert abs(theta[0] - 3) < 0.05
    assert state.step == 100


def test_adam_scale_invariance(rng):
    batch = rng.random((4, 3, 10, 10))
    hp = HyperParams(qp=32, base_learning_rate=1e-3, adam_epsilon=1e-12)
    start = random_weights(rng, scale=0.1)
    paths = []
    for scale in (1.0, 1000.0):
        w, state = start, AdamState.zeros()
        for _ in range(5):
            w, state = adam_step(w, backward(w, batch, scale=scale), state, hp)
        paths.append(w.flatten())
    np.testing.assert_allclose(paths[0], paths[1], atol=1e-6, rtol=0)


def test_train_config_errors():
    store = offset_store(4, 8)
    with pytest.raises(ConfigurationError):
        trainer.train(store, HyperParams(qp=32, base_learning_rate=1e-3, batch_size=5))
    with pytest.raises(ConfigurationError):
        trainer.train(store, HyperParams(qp=32, base_learning_rate=1e-3, batch_size=2), holdout=3)
    with pytest.raises(ConfigurationError):
        trainer.train(np.zeros((0, 3, 8, 8)), HyperParams(qp=32, base_learning_rate=1e-3))


def test_train_short_run_deterministic_with_checkpoints(tmp_path):
    store = offset_store(10, 12)
    hp = HyperParams(qp=27, base_learning_rate=1e-3, iterations=25, batch_size=4, seed=3)
    seen = []
    w1, rep1 = trainer.train(store, hp, checkpoint_sink=lambda it, w: seen.append(it),
                             log_every=10, checkpoint_every=10, holdout=2)
    w2, rep2 = trainer.train(store, hp, log_every=10, holdout=2)
    assert w1.flatten().tobytes() == w2.flatten().tobytes()
    assert seen == [10, 20, 25]
    assert [it for it, _ in rep1.log] == [10, 20, 25]
    assert rep1.log == rep2.log and rep1.evaluated_on == "holdout"
    assert all(v >= 0 and math.isfinite(v) for _, v in rep1.log)
    assert w1.qp == 27
    trainer.write_loss_log(rep1, tmp_path / "loss.tsv")
    lines = (tmp_path / "loss.tsv").read_text().splitlines()
    assert lines[0].split("\t")[0] == "10" and len(lines) == 3


def test_train_batches_wrap_sequentially(monkeypatch):
    store = offset_store(5, 8)
    seen = []
    real = trainer.loss_and_gradient

    def spy(w, batch, *a, **k):
        seen.append([int(np.argmax((store.data == b.astype(np.float32)).all(axis=(1, 2, 3)))) for b in batch])
        return real(w, batch, *a, **k)

    monkeypatch.setattr(trainer, "loss_and_gradient", spy)
    trainer.train(store, HyperParams(qp=32, base_learning_rate=1e-3, iterations=3, batch_size=2))
    assert seen == [[0, 1], [2, 3], [4, 0]]


def test_train_reduces_loss_quickly():
    store = offset_store(16, 16)
    hp = HyperParams(qp=32, base_learning_rate=1e-3, iterations=150, batch_size=4, seed=1)
    _, report = trainer.train(store, hp)
    assert report.final_loss < 0.5 * report.initial_loss
