"""CTU-level filtering with rate-distortion on/off flags.

Each 64x64 CTU (smaller at the right/bottom edges) is filtered on its own with
zero padding at the CTU border, using the co-located CTU of the frame's
reference as the temporal input.  The filter is kept only where it lowers the
byte-domain MSE against the original: both choices cost the same bits, so the
RD comparison reduces to distortion, and ties keep the filter off.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple

import numpy as np

from .dataset import FrameSequence, check_aligned, normalize, to_bytes
from .errors import FormatError, PreconditionError
from .model import forward

CTU_SIZE = 64
IN_LOOP = "in_loop"
OUT_OF_LOOP = "out_of_loop"
MODES = (IN_LOOP, OUT_OF_LOOP)
_MAX_BATCH = 16


class CtuRect(NamedTuple):
    row: int     # CTU grid row
    col: int     # CTU grid column
    top: int     # pixels
    left: int
    height: int
    width: int

    @property
    def window(self):
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)


@dataclass(frozen=True)
class CtuGrid:
    width: int
    height: int
    ctu_size: int = CTU_SIZE

    @property
    def rows(self) -> int:
        return -(-self.height // self.ctu_size)

    @property
    def cols(self) -> int:
        return -(-self.width // self.ctu_size)

    def __len__(self):
        return self.rows * self.cols

    def rects(self) -> List[CtuRect]:
        s = self.ctu_size
        return [
            CtuRect(r, c, r * s, c * s, min(s, self.height - r * s), min(s, self.width - c * s))
            for r in range(self.rows)
            for c in range(self.cols)
        ]


class RdDecision(NamedTuple):
    frame: int
    ctu_row: int
    ctu_col: int
    d1: float     # MSE of the unfiltered CTU
    d2: float     # MSE of the filtered CTU
    flag: bool


@dataclass
class FilterResult:
    sequence: FrameSequence
    flags: List[List[bool]]
    trace: List[RdDecision] = field(default_factory=list)
    grid: CtuGrid = None


def _check_rect(frame, rect):
    h, w = frame.shape
    if rect.top < 0 or rect.left < 0 or rect.height < 1 or rect.width < 1 \
            or rect.top + rect.height > h or rect.left + rect.width > w:
        raise PreconditionError(f"CTU rect {tuple(rect)} lies outside a {w}x{h} frame")


def filter_ctu(weights, degraded_frame, reference_frame, rect: CtuRect, residue_relu=None):
    """Filter one CTU; returns the uint8 block."""
    degraded_frame = np.asarray(degraded_frame)
    reference_frame = np.asarray(reference_frame)
    if degraded_frame.shape != reference_frame.shape:
        raise PreconditionError(
            f"reference {reference_frame.shape} and frame {degraded_frame.shape} differ in size"
        )
    _check_rect(degraded_frame, rect)
    cur = normalize(degraded_frame[rect.window])[..., None]
    ref = normalize(reference_frame[rect.window])[..., None]
    return to_bytes(forward(weights, cur, ref, residue_relu)[..., 0])


def filter_frame(weights, degraded_frame, reference_frame, grid: CtuGrid, residue_relu=None):
    """Filter every CTU of a frame; same-sized CTUs share a batched forward pass."""
    rects = grid.rects()
    blocks = [None] * len(rects)
    groups = {}
    for i, rect in enumerate(rects):
        groups.setdefault((rect.height, rect.width), []).append(i)
    cur_all = normalize(degraded_frame)
    ref_all = normalize(reference_frame)
    for members in groups.values():
        for start in range(0, len(members), _MAX_BATCH):
            chunk = members[start:start + _MAX_BATCH]
            cur = np.stack([cur_all[rects[i].window] for i in chunk])[..., None]
            ref = np.stack([ref_all[rects[i].window] for i in chunk])[..., None]
            out = to_bytes(forward(weights, cur, ref, residue_relu)[..., 0])
            for k, i in enumerate(chunk):
                blocks[i] = out[k]
    return blocks


def block_mse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise PreconditionError(f"block shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def decide_flag(original_ctu, degraded_ctu, filtered_ctu, frame=-1, ctu_row=-1, ctu_col=-1):
    """Enable the filter iff it strictly lowers the MSE against the original."""
    if not (np.shape(original_ctu) == np.shape(degraded_ctu) == np.shape(filtered_ctu)):
        raise PreconditionError("original, degraded and filtered CTUs must share one shape")
    d1 = block_mse(degraded_ctu, original_ctu)
    d2 = block_mse(filtered_ctu, original_ctu)
    flag = d2 < d1
    return flag, RdDecision(frame, ctu_row, ctu_col, d1, d2, flag)


def apply_flags(degraded_frame, filtered_blocks, flags, grid: CtuGrid = None):
    """Rebuild a frame from signaled flags, as a decoder would."""
    degraded_frame = np.asarray(degraded_frame, dtype=np.uint8)
    if grid is None:
        grid = CtuGrid(degraded_frame.shape[1], degraded_frame.shape[0])
    flags = list(flags)
    if len(flags) != len(grid):
        raise FormatError("flags", f"{len(flags)} flags for a grid of {len(grid)} CTUs")
    out = degraded_frame.copy()
    for rect, flag, block in zip(grid.rects(), flags, filtered_blocks):
        if flag:
            out[rect.window] = block
    return out


def _encode_frame(weights, index, degraded, reference, original, grid, residue_relu):
    blocks = filter_frame(weights, degraded, reference, grid, residue_relu)
    flags, trace = [], []
    for rect, block in zip(grid.rects(), blocks):
        flag, entry = decide_flag(original[rect.window], degraded[rect.window], block,
                                  index, rect.row, rect.col)
        flags.append(flag)
        trace.append(entry)
    return apply_flags(degraded, blocks, flags, grid), flags, trace


def _passthrough(index, frame, grid):
    trace = [RdDecision(index, r.row, r.col, 0.0, 0.0, False) for r in grid.rects()]
    return frame.copy(), [False] * len(grid), trace


def filter_sequence(weights, degraded: FrameSequence, original: FrameSequence, mode=IN_LOOP,
                    threads=1, residue_relu=None, ctu_size=CTU_SIZE) -> FilterResult:
    """Encoder-side pass: filter, decide flags, reconstruct.

    In ``in_loop`` mode each frame's reference is the reconstructed (flag
    applied) version of the earlier frame; ``out_of_loop`` always references
    the degraded input.  Frames without a reference pass through unfiltered.
    Trace entries of passthrough frames report d1 = d2 = 0.
    """
    if mode not in MODES:
        raise PreconditionError(f"mode must be one of {MODES}, got {mode!r}")
    check_aligned(degraded, original)
    grid = CtuGrid(degraded.width, degraded.height, ctu_size)
    n = len(degraded)

    def encode(i, reference_frames):
        ref = degraded.reference_index[i]
        if ref is None:
            return _passthrough(i, degraded.frames[i], grid)
        return _encode_frame(weights, i, degraded.frames[i], reference_frames[ref],
                             original.frames[i], grid, residue_relu)

    if mode == OUT_OF_LOOP and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda i: encode(i, degraded.frames), range(n)))
    else:
        results, recon = [], []
        source = recon if mode == IN_LOOP else degraded.frames
        for i in range(n):
            results.append(encode(i, source))
            recon.append(results[-1][0])

    frames = [r[0] for r in results]
    flags = [r[1] for r in results]
    trace = [e for r in results for e in r[2]]
    return FilterResult(degraded.with_frames(frames), flags, trace, grid)


def replay_sequence(weights, degraded: FrameSequence, flags, mode=IN_LOOP, residue_relu=None,
                    ctu_size=CTU_SIZE) -> FrameSequence:
    """Decoder-side reconstruction from the degraded frames and signaled flags."""
    if mode not in MODES:
        raise PreconditionError(f"mode must be one of {MODES}, got {mode!r}")
    if len(flags) != len(degraded):
        raise FormatError("flags", f"{len(flags)} flag lines for {len(degraded)} frames")
    grid = CtuGrid(degraded.width, degraded.height, ctu_size)
    recon = []
    for i, frame in enumerate(degraded.frames):
        ref = degraded.reference_index[i]
        if ref is None or not any(flags[i]):
            if len(flags[i]) != len(grid):
                raise FormatError("flags", f"frame {i}: {len(flags[i])} flags for {len(grid)} CTUs")
            recon.append(frame.copy())
            continue
        reference = recon[ref] if mode == IN_LOOP else degraded.frames[ref]
        blocks = filter_frame(weights, frame, reference, grid, residue_relu)
        recon.append(apply_flags(frame, blocks, flags[i], grid))
    return degraded.with_frames(recon)


def write_flags(path, flags):
    """Sidecar: ``<frame index> <0/1 per CTU in raster order>`` per line."""
    with open(path, "w") as fh:
        for i, row in enumerate(flags):
            fh.write(f"{i} {''.join('1' if f else '0' for f in row)}\n")


def read_flags(path):
    flags = []
    with open(path) as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2 or not parts[0].isdigit() or set(parts[1]) - {"0", "1"}:
                raise FormatError(f"line {lineno + 1}", f"cannot parse {line!r}")
            if int(parts[0]) != len(flags):
                raise FormatError(f"line {lineno + 1}", f"expected frame {len(flags)}, got {parts[0]}")
            flags.append([c == "1" for c in parts[1]])
    return flags


TRACE_COLUMNS = ("frame", "ctu_row", "ctu_col", "d1", "d2", "flag")


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for e in trace:
            writer.writerow([e.frame, e.ctu_row, e.ctu_col, repr(e.d1), repr(e.d2), int(e.flag)])


def read_trace(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            RdDecision(int(r["frame"]), int(r["ctu_row"]), int(r["ctu_col"]),
                       float(r["d1"]), float(r["d2"]), r["flag"] == "1")
            for r in reader
        ]
