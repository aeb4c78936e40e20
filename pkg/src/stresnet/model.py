"""The spatial-temporal residue network and its weight file.

Layer map (kernel, feature maps):

    current   -> conv1 5x5 -> 32 -> ReLU --+
                                           concat (current first) -> conv3 3x3 -> 16 -> ReLU
    colocated -> conv2 3x3 -> 32 -> ReLU --+
    -> conv4 3x3 -> 8 -> ReLU -> conv5 1x1 -> 1 (residue)
    output = current + residue

Inputs are luma normalized to [0, 1].  The residue is signed by default; set
``STRESNET_RESIDUE_RELU=1`` in the environment (or pass ``residue_relu=True``)
to also rectify conv5.
"""

import os
import struct
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import FormatError, PreconditionError
from .tensor import ConvKernel, concat_channels, conv2d_same, relu

# (out, in, kernel) per layer, in serialization order
LAYER_SHAPES = {
    "conv1": (32, 1, 5),
    "conv2": (32, 1, 3),
    "conv3": (16, 64, 3),
    "conv4": (8, 16, 3),
    "conv5": (1, 8, 1),
}
LAYER_NAMES = tuple(LAYER_SHAPES)
WEIGHT_COUNT = 11464
BIAS_COUNT = 89
INIT_STD = 0.001

MAGIC = b"STRN"
VERSION = 1
_HEADER = struct.Struct("<4sHh")

RESIDUE_RELU = os.environ.get("STRESNET_RESIDUE_RELU", "0") not in ("", "0", "false", "no")


@dataclass(frozen=True)
class StresNetWeights:
    conv1: ConvKernel
    conv2: ConvKernel
    conv3: ConvKernel
    conv4: ConvKernel
    conv5: ConvKernel
    qp: int = 0

    def __post_init__(self):
        for name, (out_c, in_c, k) in LAYER_SHAPES.items():
            kern = getattr(self, name)
            if kern.weights.shape != (out_c, in_c, k, k):
                raise PreconditionError(
                    f"{name} weights have shape {kern.weights.shape}, expected {(out_c, in_c, k, k)}"
                )
            if not (np.isfinite(kern.weights).all() and np.isfinite(kern.bias).all()):
                raise PreconditionError(f"{name} holds non-finite values")

    def layers(self):
        return [getattr(self, name) for name in LAYER_NAMES]

    @property
    def weight_count(self) -> int:
        return sum(k.weight_count for k in self.layers())

    @property
    def parameter_count(self) -> int:
        return sum(k.weight_count + k.bias.size for k in self.layers())

    def flatten(self) -> np.ndarray:
        """All parameters as one vector, in weight-file order."""
        parts = []
        for k in self.layers():
            parts.append(k.weights.ravel())
            parts.append(k.bias)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, vector, qp=0):
        vector = np.asarray(vector, dtype=np.float64)
        total = WEIGHT_COUNT + BIAS_COUNT
        if vector.shape != (total,):
            raise PreconditionError(f"expected {total} parameters, got shape {vector.shape}")
        kernels, pos = {}, 0
        for name, (out_c, in_c, k) in LAYER_SHAPES.items():
            n = out_c * in_c * k * k
            w = vector[pos:pos + n].reshape(out_c, in_c, k, k)
            pos += n
            b = vector[pos:pos + out_c]
            pos += out_c
            kernels[name] = ConvKernel(w.copy(), b.copy())
        return cls(qp=qp, **kernels)

    @classmethod
    def zeros(cls, qp=0):
        return cls.from_flat(np.zeros(WEIGHT_COUNT + BIAS_COUNT), qp)

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return type(self)(**values)


class Activations(NamedTuple):
    """Everything ``forward_with_intermediates`` computes on the way to ``output``.

    ``f1``/``f2``/``fused``/``f4`` are the post-ReLU maps (32, 32, 16, 8
    channels).  ``residue`` is the conv5 output before any rectification.
    """

    output: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    fused: np.ndarray
    f4: np.ndarray
    residue: np.ndarray


def init_weights(qp: int, seed: int) -> StresNetWeights:
    """Gaussian weights (std 0.001) from a seeded PCG64 stream, zero biases."""
    rng = np.random.default_rng(seed)
    kernels = {}
    for name, (out_c, in_c, k) in LAYER_SHAPES.items():
        kernels[name] = ConvKernel(rng.normal(0.0, INIT_STD, (out_c, in_c, k, k)), np.zeros(out_c))
    return StresNetWeights(qp=qp, **kernels)


def _check_inputs(current, colocated):
    current = np.asarray(current, dtype=np.float64)
    colocated = np.asarray(colocated, dtype=np.float64)
    if current.shape != colocated.shape:
        raise PreconditionError(f"current {current.shape} and colocated {colocated.shape} differ")
    if current.ndim not in (3, 4) or current.shape[-1] != 1:
        raise PreconditionError(f"expected single-channel (H, W, 1) blocks, got {current.shape}")
    return current, colocated


def forward_with_intermediates(weights: StresNetWeights, current, colocated, residue_relu=None):
    current, colocated = _check_inputs(current, colocated)
    if residue_relu is None:
        residue_relu = RESIDUE_RELU
    f1 = relu(conv2d_same(current, weights.conv1))
    f2 = relu(conv2d_same(colocated, weights.conv2))
    fused = relu(conv2d_same(concat_channels(f1, f2), weights.conv3))
    f4 = relu(conv2d_same(fused, weights.conv4))
    residue = conv2d_same(f4, weights.conv5)
    output = current + (relu(residue) if residue_relu else residue)
    return Activations(output, f1, f2, fused, f4, residue)


def forward(weights: StresNetWeights, current, colocated, residue_relu=None):
    """Restore ``current`` using its co-located reference block.

    Both inputs are ``(H, W, 1)`` (or batched ``(N, H, W, 1)``) arrays in the
    normalized pixel domain; the result has the same shape.
    """
    return forward_with_intermediates(weights, current, colocated, residue_relu).output


def save(weights: StresNetWeights, destination):
    """Write the binary model file (little-endian float32 payload)."""
    chunks = [_HEADER.pack(MAGIC, VERSION, int(weights.qp))]
    for k in weights.layers():
        chunks.append(k.weights.astype("<f4").tobytes())
        chunks.append(k.bias.astype("<f4").tobytes())
    payload = b"".join(chunks)
    if hasattr(destination, "write"):
        destination.write(payload)
    else:
        with open(destination, "wb") as fh:
            fh.write(payload)


def load(source) -> StresNetWeights:
    if hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError("header", f"need {_HEADER.size} bytes, file has {len(data)}")
    magic, version, qp = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}")
    expected = _HEADER.size + 4 * (WEIGHT_COUNT + BIAS_COUNT)
    if len(data) != expected:
        raise FormatError("length", f"expected {expected} bytes, file has {len(data)}")
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    return StresNetWeights.from_flat(flat, qp=qp)
