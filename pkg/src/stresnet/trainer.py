"""Batch MSE training of the filter network with Adam.

The loss is the per-sample squared error summed over all pixels and averaged
over the batch only (not over pixels).  Gradients are propagated by hand
through the five layers; the trainer never builds a graph.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import model
from .errors import ConfigurationError, PreconditionError
from .model import StresNetWeights, forward_with_intermediates, init_weights
from .tensor import concat_channels, conv2d_same_backward, relu_backward

log = logging.getLogger(__name__)

# qp -> (base learning rate, momentum2, iterations)
QP_DEFAULTS = {
    22: (1e-6, 0.999, 600_000),
    27: (1e-7, 0.990, 600_000),
    32: (1e-8, 0.988, 300_000),
    37: (1e-8, 0.988, 300_000),
}
MOMENTUM = 0.9
BATCH_SIZE = 128
ADAM_EPSILON = 1e-8
LOG_EVERY = 100
CHECKPOINT_EVERY = 10_000


@dataclass(frozen=True)
class HyperParams:
    qp: int
    base_learning_rate: float
    momentum: float = MOMENTUM
    momentum2: float = 0.999
    iterations: int = 1
    batch_size: int = BATCH_SIZE
    adam_epsilon: float = ADAM_EPSILON
    seed: int = 0

    def __post_init__(self):
        if self.base_learning_rate <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.base_learning_rate}")
        for name in ("momentum", "momentum2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigurationError("iterations and batch_size must be positive")
        if self.adam_epsilon <= 0:
            raise ConfigurationError("adam_epsilon must be positive")

    @classmethod
    def for_qp(cls, qp, **overrides):
        """Per-QP defaults for 22/27/32/37; any field can be overridden."""
        if qp not in QP_DEFAULTS and "base_learning_rate" not in overrides:
            raise ConfigurationError(
                f"no default hyper-parameters for qp={qp}; known: {sorted(QP_DEFAULTS)}"
            )
        lr, beta2, iters = QP_DEFAULTS.get(qp, (None, 0.999, 1))
        values = dict(qp=qp, base_learning_rate=lr, momentum2=beta2, iterations=iters)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class AdamState:
    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray

    @classmethod
    def zeros(cls, size=model.WEIGHT_COUNT + model.BIAS_COUNT):
        return cls(0, np.zeros(size), np.zeros(size))


@dataclass
class TrainReport:
    log: List[Tuple[int, float]] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    evaluated_on: str = "train"


def _unpack(batch):
    """Batch of TrainingSample (or an (N, 3, B, B) array) -> three (N, B, B, 1) arrays."""
    if isinstance(batch, np.ndarray):
        data = np.asarray(batch, dtype=np.float64)
    else:
        batch = list(batch)
        if not batch:
            raise PreconditionError("batch is empty")
        shapes = {np.shape(s[1]) for s in batch}
        if len(shapes) != 1:
            raise PreconditionError(f"samples differ in shape: {sorted(shapes)}")
        data = np.array([[s[0], s[1], s[2]] for s in batch], dtype=np.float64)
    if data.ndim != 4 or data.shape[1] != 3 or len(data) == 0:
        raise PreconditionError(f"batch must be non-empty (N, 3, H, W), got {data.shape}")
    data = data[..., None]
    return data[:, 0], data[:, 1], data[:, 2]


def loss(weights: StresNetWeights, batch, residue_relu=None, scale=1.0) -> float:
    """Mean over the batch of the per-sample summed squared error, times ``scale``."""
    colocated, current, target = _unpack(batch)
    out = model.forward(weights, current, colocated, residue_relu)
    return float(scale * np.sum((out - target) ** 2) / len(current))


def loss_and_gradient(weights: StresNetWeights, batch, residue_relu=None, scale=1.0):
    colocated, current, target = _unpack(batch)
    if residue_relu is None:
        residue_relu = model.RESIDUE_RELU
    n = len(current)
    acts = forward_with_intermediates(weights, current, colocated, residue_relu)
    diff = acts.output - target
    value = float(scale * np.sum(diff * diff) / n)

    g_res = (2.0 * scale / n) * diff
    if residue_relu:
        g_res = relu_backward(acts.residue, g_res)
    g_f4, gw5, gb5 = conv2d_same_backward(acts.f4, weights.conv5, g_res)
    g_f4 = relu_backward(acts.f4, g_f4)
    g_fused, gw4, gb4 = conv2d_same_backward(acts.fused, weights.conv4, g_f4)
    g_fused = relu_backward(acts.fused, g_fused)
    g_cat, gw3, gb3 = conv2d_same_backward(concat_channels(acts.f1, acts.f2), weights.conv3, g_fused)
    c1 = weights.conv1.out_channels
    g_f1 = relu_backward(acts.f1, g_cat[..., :c1])
    g_f2 = relu_backward(acts.f2, g_cat[..., c1:])
    _, gw1, gb1 = conv2d_same_backward(current, weights.conv1, g_f1, need_input_grad=False)
    _, gw2, gb2 = conv2d_same_backward(colocated, weights.conv2, g_f2, need_input_grad=False)

    grads = [gw1, gb1, gw2, gb2, gw3, gb3, gw4, gb4, gw5, gb5]
    flat = np.concatenate([g.ravel() for g in grads])
    return value, StresNetWeights.from_flat(flat, qp=weights.qp)


def backward(weights: StresNetWeights, batch, residue_relu=None, scale=1.0) -> StresNetWeights:
    """Exact gradient of ``loss`` laid out like the weights themselves."""
    return loss_and_gradient(weights, batch, residue_relu, scale)[1]


def adam_update(theta, grad, state: AdamState, lr, beta1, beta2, eps):
    """Bias-corrected Adam on flat vectors; returns (new theta, new state)."""
    step = state.step + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * grad
    v = beta2 * state.second_moment + (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, AdamState(step, m, v)


def adam_step(weights: StresNetWeights, gradient: StresNetWeights, state: AdamState, hp: HyperParams):
    theta, state = adam_update(
        weights.flatten(), gradient.flatten(), state,
        hp.base_learning_rate, hp.momentum, hp.momentum2, hp.adam_epsilon,
    )
    return StresNetWeights.from_flat(theta, qp=weights.qp), state


def _mean_loss(weights, data, chunk=64, residue_relu=None):
    total = 0.0
    for start in range(0, len(data), chunk):
        part = data[start:start + chunk]
        total += loss(weights, part, residue_relu) * len(part)
    return total / len(data)


def train(store, hp: HyperParams, checkpoint_sink: Optional[Callable[[int, StresNetWeights], None]] = None,
          holdout=0, log_every=LOG_EVERY, checkpoint_every=CHECKPOINT_EVERY,
          residue_relu=None, initial=None):
    """Run ``hp.iterations`` Adam steps over the (already shuffled) store.

    Batches are read sequentially with wraparound from the first
    ``count - holdout`` samples; the last ``holdout`` samples are only used for
    the report's final loss.  ``checkpoint_sink(iteration, weights)`` is called
    every ``checkpoint_every`` iterations and once at the end.
    """
    data = store.data if hasattr(store, "data") else np.asarray(store)
    if len(data) == 0:
        raise ConfigurationError("dataset is empty")
    if holdout < 0 or holdout >= len(data):
        raise ConfigurationError(f"holdout {holdout} must be in [0, {len(data)})")
    train_data = data[:len(data) - holdout]
    if len(train_data) < hp.batch_size:
        raise ConfigurationError(
            f"{len(train_data)} training samples cannot fill one batch of {hp.batch_size}"
        )
    eval_data = data[len(data) - holdout:] if holdout else train_data

    weights = init_weights(hp.qp, hp.seed) if initial is None else initial.replace(qp=hp.qp)
    state = AdamState.zeros()
    report = TrainReport(evaluated_on="holdout" if holdout else "train")
    report.initial_loss = _mean_loss(weights, eval_data, residue_relu=residue_relu)

    pos, window = 0, []
    n = len(train_data)
    for it in range(1, hp.iterations + 1):
        idx = (pos + np.arange(hp.batch_size)) % n
        pos = (pos + hp.batch_size) % n
        batch_loss, grad = loss_and_gradient(weights, train_data[idx], residue_relu)
        weights, state = adam_step(weights, grad, state, hp)
        window.append(batch_loss)
        if it % log_every == 0 or it == hp.iterations:
            report.log.append((it, float(np.mean(window))))
            log.info("iteration %d loss %.6g", it, report.log[-1][1])
            window = []
        if checkpoint_sink is not None and (it % checkpoint_every == 0 or it == hp.iterations):
            checkpoint_sink(it, weights)

    report.final_loss = _mean_loss(weights, eval_data, residue_relu=residue_relu)
    return weights, report


def write_loss_log(report: TrainReport, path):
    with open(path, "w") as fh:
        for it, value in report.log:
            fh.write(f"{it}\t{value:.9g}\n")
