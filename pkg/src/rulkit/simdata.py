"""Synthetic turbofan-style data in the 26-column text format.

For smoke tests and demos when the real dataset is not on disk. Engines
follow a shared per-subset sensor model whose drift depends on remaining
life, so windows carry a learnable degradation signal; a few channels are
exactly constant to exercise the normalization edge case. File shapes can
be pinned to the published subset sizes.
"""

from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np

from .cmapss import EXPECTED_COUNTS, N_SENSORS, N_SETTINGS

CONSTANT_SENSORS = (0, 4, 9, 17)  # zero-based indices of flat channels


def _stable_tag(text: str) -> int:
    # hash() is salted per process; crc32 keeps the generator reproducible.
    return zlib.crc32(text.encode())


def _sensor_params(subset: str) -> dict:
    """Per-subset sensor bases, drift amplitudes, exponents, and noise."""
    rng = np.random.default_rng(_stable_tag(f"sensor-model:{subset}"))
    scale = 10.0 ** rng.uniform(-1.5, 2.5, size=N_SENSORS)
    base = scale * rng.uniform(0.5, 2.0, size=N_SENSORS)
    amp = scale * rng.uniform(0.08, 0.35, size=N_SENSORS) * rng.choice(
        [-1.0, 1.0], size=N_SENSORS
    )
    power = rng.uniform(0.8, 2.5, size=N_SENSORS)
    noise = scale * rng.uniform(0.01, 0.03, size=N_SENSORS)
    return {"base": base, "amp": amp, "power": power, "noise": noise}


def _engine_rows(
    rng: np.random.Generator,
    params: dict,
    life: int,
    observed: int,
) -> np.ndarray:
    """Observed cycles of one engine with life-dependent sensor drift."""
    t = np.arange(1, observed + 1, dtype=float)
    wear = (t / life) ** params["power"][:, None]  # (S, T)
    sensors = (
        params["base"][:, None]
        + params["amp"][:, None] * wear
        + rng.normal(0.0, 1.0, size=(N_SENSORS, observed)) * params["noise"][:, None]
    )
    for s in CONSTANT_SENSORS:
        sensors[s, :] = params["base"][s]
    settings = rng.normal(0.0, 0.001, size=(observed, N_SETTINGS))
    return np.concatenate([settings, sensors.T], axis=1)


def _lengths_with_total(
    rng: np.random.Generator,
    n_engines: int,
    total: int | None,
    lo: int,
    hi: int,
) -> np.ndarray:
    """Engine lengths in [lo, hi]; adjusted to hit an exact row total."""
    if total is not None and not n_engines * lo <= total <= n_engines * hi:
        raise ValueError(
            f"total {total} unreachable with {n_engines} engines in [{lo}, {hi}]"
        )
    mean = (total / n_engines) if total is not None else (lo + hi) / 2
    lengths = np.clip(
        np.round(rng.normal(mean, (hi - lo) / 6, size=n_engines)), lo, hi
    ).astype(int)
    if total is None:
        return lengths
    diff = total - int(lengths.sum())
    order = rng.permutation(n_engines)
    i = 0
    while diff != 0:
        e = order[i % n_engines]
        step = 1 if diff > 0 else -1
        if lo <= lengths[e] + step <= hi:
            lengths[e] += step
            diff -= step
        i += 1
    return lengths


def _write_rows(path: Path, blocks: list[np.ndarray]) -> None:
    with open(path, "w") as fh:
        for engine_id, rows in enumerate(blocks, start=1):
            for cycle, row in enumerate(rows, start=1):
                vals = " ".join(f"{v:.4f}" for v in row)
                fh.write(f"{engine_id} {cycle} {vals}\n")


def make_synthetic_subset(
    out_dir: str | Path,
    subset: str = "FD001",
    n_train: int | None = None,
    n_test: int | None = None,
    train_rows: int | None = None,
    test_rows: int | None = None,
    seed: int = 0,
    min_len: int = 128,
    max_len: int = 356,
    test_min_len: int = 31,
    max_rul: int = 145,
) -> Path:
    """Write train/test/RUL files for one subset; returns the directory.

    With no explicit counts, engine and row totals match the published
    sizes for `subset` exactly. Pass small n_train/n_test (and lower
    min_len) for fast fixtures.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    exact = n_train is None and n_test is None
    if exact:
        n_train, t_rows, n_test, s_rows = EXPECTED_COUNTS[subset]
        train_rows = train_rows if train_rows is not None else t_rows
        test_rows = test_rows if test_rows is not None else s_rows
    rng = np.random.default_rng([seed, _stable_tag(subset)])
    params = _sensor_params(subset)

    lengths = _lengths_with_total(rng, n_train, train_rows, min_len, max_len)
    train_blocks = [
        _engine_rows(rng, params, life=int(n), observed=int(n)) for n in lengths
    ]
    _write_rows(out_dir / f"train_{subset}.txt", train_blocks)

    observed = _lengths_with_total(rng, n_test, test_rows, test_min_len, max_len)
    ruls = rng.integers(10, max_rul + 1, size=n_test)
    test_blocks = [
        _engine_rows(rng, params, life=int(n + r), observed=int(n))
        for n, r in zip(observed, ruls)
    ]
    _write_rows(out_dir / f"test_{subset}.txt", test_blocks)
    (out_dir / f"RUL_{subset}.txt").write_text("".join(f"{r}\n" for r in ruls))
    return out_dir
