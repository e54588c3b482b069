"""Piece-wise RUL targets, sliding-window extraction, and split protocol.

Training windows are enumerated per engine with stride 6 while the target
sits at the cap and stride 1 in the linear degradation region. Validation
uses one randomly placed holdout segment per engine; training windows that
fall entirely inside their engine's segment are dropped, and the last five
windows of a validation engine's segment form its evaluation set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RUL_CAP = 125
CAPPED_STRIDE = 6
HOLDOUT_EXTRA = 5  # holdout segment length is window + this
EVAL_WINDOWS = 5


def piecewise_rul(n_cycles: int, cap: int = RUL_CAP) -> np.ndarray:
    """Capped linear RUL target for cycles 1..T of a run-to-failure engine."""
    if n_cycles < 1:
        raise ValueError(f"n_cycles must be >= 1, got {n_cycles}")
    remaining = n_cycles - np.arange(1, n_cycles + 1)
    return np.minimum(remaining, cap)


def rul_at_cycle(n_cycles: int, cycle: int, cap: int = RUL_CAP) -> int:
    if not 1 <= cycle <= n_cycles:
        raise ValueError(f"cycle {cycle} outside 1..{n_cycles}")
    return int(min(n_cycles - cycle, cap))


def window_ends(
    n_cycles: int,
    window: int,
    cap: int = RUL_CAP,
    capped_stride: int = CAPPED_STRIDE,
) -> np.ndarray:
    """End cycles of the training windows of one engine.

    A window ending at cycle e has target min(T - e, cap). Ends with the
    capped target (e <= T - cap) are taken every `capped_stride` cycles
    starting from the first full window; ends in the linear region are
    taken every cycle.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if n_cycles < window:
        return np.empty(0, dtype=int)
    boundary = n_cycles - cap  # last end with a capped target
    ends = []
    if boundary >= window:
        ends.extend(range(window, boundary + 1, capped_stride))
    ends.extend(range(max(window, boundary + 1), n_cycles + 1))
    return np.asarray(ends, dtype=int)


def count_windows(
    n_cycles: int,
    window: int,
    cap: int = RUL_CAP,
    capped_stride: int = CAPPED_STRIDE,
) -> int:
    """Closed-form count matching window_ends, without enumeration."""
    if n_cycles < window:
        return 0
    boundary = n_cycles - cap
    n_capped = (boundary - window) // capped_stride + 1 if boundary >= window else 0
    first_linear = max(window, boundary + 1)
    n_linear = n_cycles - first_linear + 1
    return n_capped + n_linear


def extract_window(mat: np.ndarray, end: int, window: int) -> np.ndarray:
    """Window of rows ending at cycle `end`, left-padded with the first row.

    Rows are 0-indexed while cycles are 1-indexed, so cycle c is mat[c - 1].
    """
    if not 1 <= end <= len(mat):
        raise ValueError(f"end cycle {end} outside 1..{len(mat)}")
    if end >= window:
        return mat[end - window : end]
    pad = np.repeat(mat[:1], window - end, axis=0)
    return np.concatenate([pad, mat[:end]], axis=0)


@dataclass
class HoldoutSegment:
    """One engine's validation stretch: cycles start..start+length-1."""

    engine: int  # index into the engine list
    start: int  # 1-based cycle
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length - 1


def sample_holdout_segments(
    lengths: list[int] | np.ndarray,
    window: int,
    rng: np.random.Generator,
) -> list[HoldoutSegment]:
    """One random segment of length window+5 per engine, start uniform."""
    seg_len = window + HOLDOUT_EXTRA
    segments = []
    for idx, n_cycles in enumerate(lengths):
        if n_cycles < seg_len:
            raise ValueError(
                f"engine {idx} has {n_cycles} cycles, shorter than the "
                f"holdout segment length {seg_len}"
            )
        start = int(rng.integers(1, n_cycles - seg_len + 2))
        segments.append(HoldoutSegment(engine=idx, start=start, length=seg_len))
    return segments


def window_contained(end: int, window: int, segment: HoldoutSegment) -> bool:
    """True when the window [end-window+1, end] lies entirely in the segment."""
    return end - window + 1 >= segment.start and end <= segment.end


def training_index(
    lengths: list[int] | np.ndarray,
    window: int,
    cap: int = RUL_CAP,
    capped_stride: int = CAPPED_STRIDE,
    segments: list[HoldoutSegment] | None = None,
    engines: list[int] | np.ndarray | None = None,
) -> list[tuple[int, int]]:
    """(engine index, end cycle) pairs for training, after holdout exclusion.

    `engines` restricts to a subset of engine indices (the CV training
    side); `segments` maps engine index -> holdout to exclude. Windows
    fully contained in their own engine's segment are dropped.
    """
    seg_by_engine = {s.engine: s for s in segments} if segments else {}
    if engines is None:
        engines = range(len(lengths))
    index = []
    for e in engines:
        seg = seg_by_engine.get(e)
        for end in window_ends(int(lengths[e]), window, cap, capped_stride):
            if seg is not None and window_contained(int(end), window, seg):
                continue
            index.append((int(e), int(end)))
    return index


def validation_ends(segment: HoldoutSegment, k: int = EVAL_WINDOWS) -> list[int]:
    """End cycles of the last k windows inside the segment, latest first."""
    return [segment.end - j for j in range(k)]


def assemble_windows(
    mats: list[np.ndarray],
    index: list[tuple[int, int]],
    window: int,
) -> np.ndarray:
    """Stack the indexed windows into an (N, window, channels) float32 array."""
    if not index:
        n_ch = mats[0].shape[1] if mats else 0
        return np.empty((0, window, n_ch), dtype=np.float32)
    out = np.stack([extract_window(mats[e], end, window) for e, end in index])
    return out.astype(np.float32)


def targets_for_index(
    lengths: list[int] | np.ndarray,
    index: list[tuple[int, int]],
    cap: int = RUL_CAP,
) -> np.ndarray:
    return np.asarray(
        [rul_at_cycle(int(lengths[e]), end, cap) for e, end in index],
        dtype=np.float32,
    )


def add_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian augmentation; sigma 0 returns the input untouched."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return x
    return (x + rng.normal(0.0, sigma, size=x.shape)).astype(x.dtype, copy=False)


def cv_engine_folds(
    n_engines: int,
    n_folds: int,
    rng: np.random.Generator,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle engines and split into n_folds (train_idx, val_idx) pairs.

    Validation sets partition the engines; sizes differ by at most one.
    """
    if not 2 <= n_folds <= n_engines:
        raise ValueError(f"need 2 <= n_folds <= n_engines, got {n_folds}/{n_engines}")
    perm = rng.permutation(n_engines)
    chunks = np.array_split(perm, n_folds)
    folds = []
    for i, chunk in enumerate(chunks):
        train = np.concatenate([c for j, c in enumerate(chunks) if j != i])
        folds.append((np.sort(train), np.sort(chunk)))
    return folds
