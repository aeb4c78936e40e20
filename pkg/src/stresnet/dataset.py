"""Training triplets cut from a pristine/degraded pair of luma sequences.

Raw video is headerless 8-bit 4:2:0 planar YUV; only the luma plane feeds the
network, chroma is carried along untouched when asked for.
"""

import logging
import os
import struct
import warnings
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np
from scipy.fft import dctn, idctn

from .errors import AlignmentError, FormatError, PreconditionError, TruncationError

log = logging.getLogger(__name__)

BLOCK = 38
OVERLAP = 10
DEFAULT_STRIDE = BLOCK - OVERLAP

STORE_MAGIC = b"STDS"
STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<4sHIHhQ")


@dataclass
class FrameSequence:
    """Luma planes plus, per frame, the index of its closest reference.

    ``reference_index[i]`` is ``None`` for frames coded without a temporal
    reference (always the case for frame 0).  ``chroma`` optionally keeps the
    raw U+V bytes of each frame so a filtered sequence can be written back.
    """

    frames: List[np.ndarray]
    reference_index: List[Optional[int]] = None
    chroma: Optional[List[bytes]] = field(default=None, repr=False)

    def __post_init__(self):
        self.frames = [np.ascontiguousarray(f, dtype=np.uint8) for f in self.frames]
        if not self.frames:
            raise PreconditionError("a sequence needs at least one frame")
        shape = self.frames[0].shape
        if len(shape) != 2:
            raise PreconditionError(f"frames must be 2-D luma planes, got shape {shape}")
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise PreconditionError(f"frame {i} has shape {f.shape}, frame 0 has {shape}")
        if self.reference_index is None:
            self.reference_index = [None] + list(range(len(self.frames) - 1))
        if len(self.reference_index) != len(self.frames):
            raise PreconditionError("reference_index must have one entry per frame")
        for i, ref in enumerate(self.reference_index):
            if ref is not None and not 0 <= ref < i:
                raise PreconditionError(f"frame {i} references frame {ref}; references must precede")

    @property
    def height(self) -> int:
        return self.frames[0].shape[0]

    @property
    def width(self) -> int:
        return self.frames[0].shape[1]

    def __len__(self):
        return len(self.frames)

    def with_frames(self, frames):
        """Same reference map and chroma, new luma; a different length resets both."""
        frames = list(frames)
        if len(frames) != len(self.frames):
            return FrameSequence(frames)
        return FrameSequence(frames, list(self.reference_index), self.chroma)


class TrainingSample(NamedTuple):
    """One (colocated, current, target) triplet, each ``(B, B)`` in [0, 1].

    ``frame``/``row``/``col`` record where the blocks were cut; they are not
    persisted in the store file.
    """

    colocated: np.ndarray
    current: np.ndarray
    target: np.ndarray
    frame: int = -1
    row: int = -1
    col: int = -1


@dataclass
class SampleStore:
    """Packed samples, ``data[i] = (colocated, current, target)`` as float32."""

    data: np.ndarray
    qp: int = 0
    seed: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[1] != 3 or self.data.shape[2] != self.data.shape[3]:
            raise PreconditionError(f"store data must be (N, 3, B, B), got {self.data.shape}")
        if len(self.data) < 1:
            raise PreconditionError("a sample store needs at least one sample")

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def block_size(self) -> int:
        return self.data.shape[2]

    def __len__(self):
        return self.count

    def sample(self, i) -> TrainingSample:
        col, cur, tgt = self.data[i]
        return TrainingSample(col, cur, tgt)


def normalize(plane):
    return np.asarray(plane, dtype=np.float64) / 255.0


def to_bytes(values):
    """Back to 8-bit: scale by 255, round half away from zero, clamp."""
    scaled = np.asarray(values, dtype=np.float64) * 255.0
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, 0, 255).astype(np.uint8)


def frame_bytes(width, height):
    if width % 2 or height % 2:
        raise PreconditionError(f"4:2:0 needs even dimensions, got {width}x{height}")
    return width * height * 3 // 2


def load_yuv(path, width, height, frame_count, keep_chroma=False, start=0) -> FrameSequence:
    """Read ``frame_count`` frames beginning at frame ``start`` of the file."""
    size = frame_bytes(width, height)
    needed = size * (start + frame_count)
    actual = os.path.getsize(path)
    if actual < needed:
        raise TruncationError(path, needed, actual)
    luma = width * height
    frames, chroma = [], []
    with open(path, "rb") as fh:
        fh.seek(start * size)
        for _ in range(frame_count):
            buf = fh.read(size)
            frames.append(np.frombuffer(buf, dtype=np.uint8, count=luma).reshape(height, width))
            if keep_chroma:
                chroma.append(buf[luma:])
    return FrameSequence(frames, chroma=chroma if keep_chroma else None)


def write_yuv(path, seq: FrameSequence):
    """Write luma planes, with the sequence's chroma or neutral grey (128)."""
    grey = bytes([128]) * (seq.width * seq.height // 2)
    with open(path, "wb") as fh:
        for i, f in enumerate(seq.frames):
            fh.write(f.tobytes())
            fh.write(seq.chroma[i] if seq.chroma is not None else grey)


def read_reference_index(path, frame_count):
    """One integer per line, -1 meaning "no reference"."""
    refs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                value = int(line)
                refs.append(None if value < 0 else value)
    if len(refs) != frame_count:
        raise FormatError("reference_index", f"{len(refs)} entries for {frame_count} frames")
    return refs


@dataclass(frozen=True)
class DegradeSpec:
    """Block-DCT + uniform quantization stand-in for a lossy codec."""

    step: float
    block: int = 8

    @classmethod
    def from_qp(cls, qp, block=8):
        # HEVC step-size law: doubles every 6 QP, step 1 at QP 4
        return cls(step=2.0 ** ((qp - 4) / 6.0), block=block)


def degrade_frame(plane, spec: DegradeSpec):
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    b = spec.block
    ph, pw = -h % b, -w % b
    padded = np.pad(plane, ((0, ph), (0, pw)), mode="edge") - 128.0
    blocks = padded.reshape(padded.shape[0] // b, b, padded.shape[1] // b, b).transpose(0, 2, 1, 3)
    coeffs = dctn(blocks, axes=(2, 3), norm="ortho")
    coeffs = np.round(coeffs / spec.step) * spec.step
    recon = idctn(coeffs, axes=(2, 3), norm="ortho").transpose(0, 2, 1, 3).reshape(padded.shape)
    recon = np.clip(np.round(recon + 128.0), 0, 255)
    return recon[:h, :w].astype(np.uint8)


def degrade(pristine: FrameSequence, spec: DegradeSpec) -> FrameSequence:
    """Quantize every frame independently; reference map and chroma carry over."""
    return pristine.with_frames(degrade_frame(f, spec) for f in pristine.frames)


def check_aligned(a: FrameSequence, b: FrameSequence):
    if len(a) != len(b):
        raise AlignmentError(f"frame counts differ: {len(a)} vs {len(b)}")
    if (a.height, a.width) != (b.height, b.width):
        raise AlignmentError(f"dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}")


def placements(height, width, block=BLOCK, stride=DEFAULT_STRIDE):
    """Top-left offsets of every full block on a stride grid, row-major."""
    if stride < 1:
        raise PreconditionError(f"stride must be >= 1, got {stride}")
    rows = range(0, height - block + 1, stride)
    cols = range(0, width - block + 1, stride)
    return [(r, c) for r in rows for c in cols]


def extract_samples(pristine: FrameSequence, degraded: FrameSequence, stride=DEFAULT_STRIDE,
                    block=BLOCK, frames=None) -> List[TrainingSample]:
    """Cut co-located triplets from every frame that has a reference.

    ``frames`` optionally restricts which current-frame indices contribute;
    their references may lie outside that set.
    """
    check_aligned(pristine, degraded)
    offsets = placements(degraded.height, degraded.width, block, stride)
    if not offsets:
        warnings.warn(
            f"frames of {degraded.width}x{degraded.height} are smaller than {block}x{block}; no samples"
        )
        return []
    wanted = range(len(degraded)) if frames is None else frames
    samples = []
    for i in wanted:
        ref = degraded.reference_index[i]
        if ref is None:
            continue
        reference = normalize(degraded.frames[ref])
        current = normalize(degraded.frames[i])
        target = normalize(pristine.frames[i])
        for r, c in offsets:
            window = (slice(r, r + block), slice(c, c + block))
            samples.append(TrainingSample(reference[window], current[window], target[window], i, r, c))
    log.debug("extracted %d samples from %d frames", len(samples), len(degraded))
    return samples


def shuffle_store(samples, seed, qp=0) -> SampleStore:
    """Seeded Fisher-Yates shuffle of the samples into a store."""
    if len(samples) == 0:
        raise PreconditionError("cannot build a store from zero samples")
    order = list(range(len(samples)))
    rng = np.random.default_rng(seed)
    for i in range(len(order) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    data = np.stack([np.stack(samples[k][:3]) for k in order]).astype(np.float32)
    return SampleStore(data, qp=qp, seed=seed)


def write_store(store: SampleStore, path):
    header = _STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, store.count, store.block_size,
                                store.qp, store.seed)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(store.data.astype("<f4").tobytes())


def read_store(path) -> SampleStore:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _STORE_HEADER.size:
        raise FormatError("header", f"need {_STORE_HEADER.size} bytes, file has {len(raw)}")
    magic, version, count, block, qp, seed = _STORE_HEADER.unpack_from(raw)
    if magic != STORE_MAGIC:
        raise FormatError("magic", f"expected {STORE_MAGIC!r}, found {magic!r}")
    if version != STORE_VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if count < 1:
        raise FormatError("count", "store holds no samples")
    expected = _STORE_HEADER.size + count * 3 * block * block * 4
    if len(raw) != expected:
        raise FormatError("length", f"expected {expected} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_STORE_HEADER.size).reshape(count, 3, block, block)
    return SampleStore(data.astype(np.float32), qp=qp, seed=seed)
