"""C-MAPSS turbofan data ingest.

Parses the space-separated train/test/RUL text files into per-engine
trajectories, validates row and engine counts against the published
dataset sizes, and handles min-max sensor normalization fitted on
training data only.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

N_SETTINGS = 3
N_SENSORS = 21
N_COLUMNS = 2 + N_SETTINGS + N_SENSORS

SETTING_NAMES = [f"setting_{i}" for i in range(1, N_SETTINGS + 1)]
SENSOR_NAMES = [f"s{i}" for i in range(1, N_SENSORS + 1)]
COLUMN_NAMES = ["engine_id", "cycle"] + SETTING_NAMES + SENSOR_NAMES

# Published per-subset sizes: (train engines, train rows, test engines, test rows).
EXPECTED_COUNTS = {
    "FD001": (100, 20631, 100, 13096),
    "FD002": (260, 53759, 259, 33991),
    "FD003": (100, 24720, 100, 16596),
    "FD004": (249, 61249, 248, 41214),
}

# Only the single-operating-condition subsets are in scope for the pipeline.
SUPPORTED_SUBSETS = ("FD001", "FD003")

DATA_DIR_ENV = "RULKIT_DATA_DIR"


class DataValidationError(ValueError):
    """Raised when a data file fails structural validation."""


@dataclass
class EngineTrajectory:
    """Full run-to-failure (train) or truncated (test) record of one engine."""

    engine_id: int
    cycles: np.ndarray  # (T,) int
    settings: np.ndarray  # (T, 3)
    sensors: np.ndarray  # (T, 21)

    @property
    def n_cycles(self) -> int:
        return len(self.cycles)


@dataclass
class SubsetData:
    subset: str
    train: list[EngineTrajectory]
    test: list[EngineTrajectory]
    test_rul: np.ndarray  # (n_test_engines,) true RUL at each test engine's last cycle

    def counts(self) -> tuple[int, int, int, int]:
        train_rows = sum(t.n_cycles for t in self.train)
        test_rows = sum(t.n_cycles for t in self.test)
        return (len(self.train), train_rows, len(self.test), test_rows)


@dataclass
class NormStats:
    """Per-sensor min/max fitted on training trajectories."""

    col_min: np.ndarray  # (21,)
    col_max: np.ndarray  # (21,)

    @property
    def constant_mask(self) -> np.ndarray:
        return self.col_max == self.col_min

    def apply(self, sensors: np.ndarray) -> np.ndarray:
        """Scale sensor columns to [-1, 1]; constant columns map to 0."""
        span = self.col_max - self.col_min
        safe = np.where(self.constant_mask, 1.0, span)
        out = 2.0 * (sensors - self.col_min) / safe - 1.0
        out[:, self.constant_mask] = 0.0
        return out

    def to_dict(self) -> dict:
        return {"col_min": self.col_min.tolist(), "col_max": self.col_max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["col_min"], float), np.asarray(d["col_max"], float))


def resolve_data_dir(data_dir: str | Path | None = None) -> Path | None:
    """Pick the dataset root: explicit argument, then env var, then ./data."""
    if data_dir is not None:
        return Path(data_dir)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    local = Path("data")
    if (local / "train_FD001.txt").exists():
        return local
    return None


def _first_bad_line(path: Path) -> tuple[int, str]:
    """Scan for the first line that is not exactly 26 numeric fields."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != N_COLUMNS:
                return lineno, f"{len(fields)} fields (expected {N_COLUMNS})"
            for tok in fields:
                try:
                    float(tok)
                except ValueError:
                    return lineno, f"non-numeric field {tok!r}"
    return 0, "unknown"


def _read_matrix(path: Path) -> np.ndarray:
    """Read one space-separated data file into an (n, 26) float array."""
    if not path.exists():
        raise DataValidationError(f"Data file not found: {path}")
    # round_trip parsing keeps serialize -> parse bit-exact
    df = pd.read_csv(path, sep=r"\s+", header=None, float_precision="round_trip")
    # Trailing spaces produce a final all-NaN column in some distributions.
    while df.shape[1] > N_COLUMNS and df.iloc[:, -1].isna().all():
        df = df.iloc[:, :-1]
    if df.shape[1] != N_COLUMNS or df.isna().any().any():
        lineno, why = _first_bad_line(path)
        raise DataValidationError(f"{path}:{lineno}: {why}")
    try:
        mat = df.to_numpy(dtype=float)
    except (TypeError, ValueError):
        lineno, why = _first_bad_line(path)
        raise DataValidationError(f"{path}:{lineno}: {why}") from None
    return mat


def _split_engines(mat: np.ndarray, path: Path) -> list[EngineTrajectory]:
    """Group rows by engine id and validate cycle numbering per engine."""
    trajectories = []
    ids = mat[:, 0].astype(int)
    for engine_id in np.unique(ids):
        rows = mat[ids == engine_id]
        order = np.argsort(rows[:, 1], kind="stable")
        rows = rows[order]
        cycles = rows[:, 1].astype(int)
        expected = np.arange(1, len(cycles) + 1)
        if not np.array_equal(cycles, expected):
            raise DataValidationError(
                f"{path}: engine {engine_id} cycles are not contiguous from 1 "
                f"(got {cycles[:5].tolist()}...)"
            )
        trajectories.append(
            EngineTrajectory(
                engine_id=int(engine_id),
                cycles=cycles,
                settings=rows[:, 2 : 2 + N_SETTINGS].copy(),
                sensors=rows[:, 2 + N_SETTINGS :].copy(),
            )
        )
    trajectories.sort(key=lambda t: t.engine_id)
    return trajectories


def subset_paths(root: Path, subset: str) -> tuple[Path, Path, Path]:
    root = Path(root)
    return (
        root / f"train_{subset}.txt",
        root / f"test_{subset}.txt",
        root / f"RUL_{subset}.txt",
    )


def parse_subset(root: str | Path, subset: str) -> SubsetData:
    """Parse one subset's train/test/RUL files into trajectories.

    Validates structure only (column count, numeric fields, contiguous
    cycle numbering, one RUL value per test engine). Use validate_counts
    for the published size check.
    """
    if subset not in EXPECTED_COUNTS:
        raise DataValidationError(
            f"Unknown subset {subset!r}; expected one of {sorted(EXPECTED_COUNTS)}"
        )
    train_path, test_path, rul_path = subset_paths(Path(root), subset)
    train = _split_engines(_read_matrix(train_path), train_path)
    test = _split_engines(_read_matrix(test_path), test_path)

    if not rul_path.exists():
        raise DataValidationError(f"Data file not found: {rul_path}")
    rul = np.loadtxt(rul_path, dtype=float).reshape(-1)
    if len(rul) != len(test):
        raise DataValidationError(
            f"{rul_path}: {len(rul)} RUL values for {len(test)} test engines"
        )
    if np.any(rul < 0) or np.any(rul != np.round(rul)):
        raise DataValidationError(f"{rul_path}: RUL values must be non-negative integers")
    return SubsetData(subset=subset, train=train, test=test, test_rul=rul.astype(int))


def validate_counts(data: SubsetData) -> None:
    """Check engine and row counts against the published table of sizes."""
    expected = EXPECTED_COUNTS[data.subset]
    got = data.counts()
    if got != expected:
        labels = ("train engines", "train rows", "test engines", "test rows")
        diffs = [
            f"{name}: expected {e}, got {g}"
            for name, e, g in zip(labels, expected, got)
            if e != g
        ]
        raise DataValidationError(f"{data.subset} count mismatch: " + "; ".join(diffs))


def fit_norm_stats(trajectories: list[EngineTrajectory]) -> NormStats:
    """Per-sensor min/max over all cycles of the given (training) engines."""
    stacked = np.concatenate([t.sensors for t in trajectories], axis=0)
    return NormStats(col_min=stacked.min(axis=0), col_max=stacked.max(axis=0))


def normalize_trajectories(
    trajectories: list[EngineTrajectory], stats: NormStats
) -> list[np.ndarray]:
    """Apply fitted scaling; returns one (T, 21) matrix per engine."""
    return [stats.apply(t.sensors) for t in trajectories]


def save_stats(stats: NormStats, path: str | Path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=2) + "\n")


def load_stats(path: str | Path) -> NormStats:
    return NormStats.from_dict(json.loads(Path(path).read_text()))


def serialize_trajectories(trajectories: list[EngineTrajectory], path: str | Path) -> None:
    """Write trajectories back to the 26-column text format (full precision)."""
    with open(path, "w") as fh:
        for t in trajectories:
            for i in range(t.n_cycles):
                fields = [str(t.engine_id), str(int(t.cycles[i]))]
                fields += [f"{v:.17g}" for v in t.settings[i]]
                fields += [f"{v:.17g}" for v in t.sensors[i]]
                fh.write(" ".join(fields) + "\n")


def dataset_hash(root: str | Path, subset: str) -> str:
    """sha256 over the subset's three raw files, for run manifests."""
    h = hashlib.sha256()
    for p in subset_paths(Path(root), subset):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def load_normalized_subset(
    root: str | Path, subset: str, check_counts: bool = True
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray, NormStats]:
    """Parse, validate counts, fit scaling on train, and normalize both splits.

    The pipeline entry point. Returns (train matrices, test matrices,
    test RUL, stats). Only single-condition subsets are accepted here.
    check_counts=False skips the published-size gate for reduced fixtures;
    structural validation always applies.
    """
    if subset not in SUPPORTED_SUBSETS:
        raise DataValidationError(
            f"Subset {subset!r} has multiple operating conditions and is not "
            f"supported; use one of {SUPPORTED_SUBSETS}"
        )
    data = parse_subset(root, subset)
    if check_counts:
        validate_counts(data)
    stats = fit_norm_stats(data.train)
    train_mats = normalize_trajectories(data.train, stats)
    test_mats = normalize_trajectories(data.test, stats)
    return train_mats, test_mats, data.test_rul, stats
