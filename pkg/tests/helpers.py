import numpy as np

from stresnet import model
from stresnet.model import LAYER_SHAPES, StresNetWeights


def random_weights(rng, scale=0.2, qp=32):
    return StresNetWeights.from_flat(rng.normal(0, scale, model.WEIGHT_COUNT + model.BIAS_COUNT), qp=qp)


def small_residue_weights(rng, residue_scale=0.02, qp=32):
    """Random weights whose residue stays within a few grey levels.

    Filtering with these helps some CTUs and hurts others, which exercises
    both flag outcomes.
    """
    parts = []
    for name, (out_c, in_c, k) in LAYER_SHAPES.items():
        std = 1.0 / np.sqrt(in_c * k * k)
        if name == "conv5":
            std *= residue_scale
        parts.append(rng.normal(0, std, out_c * in_c * k * k))
        # conv5 bias: a global shift of a few grey levels
        parts.append(rng.normal(0, 0.05 if name != "conv5" else 3.0 / 255, out_c))
    return StresNetWeights.from_flat(np.concatenate(parts), qp=qp)


def offset_weights(levels, qp=32):
    """Model whose residue is a constant shift of ``levels`` grey levels."""
    w = StresNetWeights.zeros(qp)
    w.conv5.bias[0] = levels / 255.0
    return w


def kink_free_weights(rng, fan_scale=0.1, bias_range=(0.25, 1.0)):
    """Weights for finite-difference checks.

    Each channel's sign is set by its bias and the fan-in scaled weights only
    wiggle it, so pre-activations sit far from the ReLU kink compared to the
    effect of a 1e-3 perturbation of any single parameter.
    """
    parts = []
    for name, (out_c, in_c, k) in LAYER_SHAPES.items():
        parts.append(rng.normal(0, fan_scale / np.sqrt(in_c * k * k), out_c * in_c * k * k))
        parts.append(rng.choice([-1.0, 1.0], out_c) * rng.uniform(*bias_range, out_c))
    return StresNetWeights.from_flat(np.concatenate(parts))


def relu_margin(weights, current, colocated):
    """Smallest |pre-activation| over every rectified layer."""
    from stresnet.tensor import concat_channels, conv2d_same

    acts = model.forward_with_intermediates(weights, current, colocated)
    pre = [
        conv2d_same(current, weights.conv1),
        conv2d_same(colocated, weights.conv2),
        conv2d_same(concat_channels(acts.f1, acts.f2), weights.conv3),
        conv2d_same(acts.fused, weights.conv4),
    ]
    return min(float(np.abs(p).min()) for p in pre)


def finite_difference_gradient(loss_fn, weights, h=1e-3, indices=None):
    """Central differences for every parameter (or the flat ``indices``), in place."""
    arrays = [a for k in weights.layers() for a in (k.weights, k.bias)]
    views = [a.reshape(-1) for a in arrays]
    offsets = np.cumsum([0] + [v.size for v in views])
    total = offsets[-1]
    wanted = range(total) if indices is None else indices
    out = {}
    for flat_index in wanted:
        which = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        view, j = views[which], flat_index - offsets[which]
        saved = view[j]
        view[j] = saved + h
        up = loss_fn(weights)
        view[j] = saved - h
        down = loss_fn(weights)
        view[j] = saved
        out[flat_index] = (up - down) / (2 * h)
    return out


def gradient_mismatches(analytic, numeric, rel_tol=1e-3, abs_tol=1e-8):
    bad = []
    for i, fd in numeric.items():
        a = analytic[i]
        diff = abs(a - fd)
        if diff >= abs_tol and diff / max(abs(a), abs(fd)) >= rel_tol:
            bad.append((i, a, fd))
    return bad
