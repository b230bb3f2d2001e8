"""
Two-channel coincidence histogramming (the HBT measurement).

Binning convention: bin b covers the signed delay t_stop - t_start in
[b*w, (b+1)*w) for b = -K .. K-1 with K = ceil(tau_max/w); only delays with
-tau_max <= d < tau_max are counted. No bin straddles zero.

The sweep is a two-pointer pass over the sorted streams, compiled with numba
when it is installed. Without numba a vectorised numpy pass
(searchsorted + bincount) gives identical counts. Normalisation divides by
the accidental rate n_start*n_stop*w/T with no finite-window edge correction,
which is negligible for T >> tau_max.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .core import TimeTagStream
from .errors import ContractError, NormalizationError

logger = logging.getLogger(__name__)

try:
    import numba

    has_numba = True
except ImportError:
    has_numba = False

# Start tags handled per numpy pass; bounds the pair buffer.
NUMPY_CHUNK = 1 << 16

CSV_COLUMNS = ["bin_lo_ps", "bin_hi_ps", "counts", "normalized_value"]


@dataclass(frozen=True, eq=False)
class CorrelationHistogram:
    tau_max_ps: int
    bin_width_ps: int
    counts: np.ndarray
    n_start: int
    n_stop: int
    duration_ps: int
    normalized: bool = False
    values: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.counts.shape != (2 * half_bins(self.tau_max_ps, self.bin_width_ps),):
            raise ContractError("counts do not match the bin layout")
        if np.any(self.counts < 0):
            raise ContractError("counts must be non-negative")
        if self.normalized and self.values is None:
            raise ContractError("normalized histogram needs values")
        self.counts.setflags(write=False)
        if self.values is not None:
            self.values.setflags(write=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CorrelationHistogram):
            return NotImplemented
        same_values = (
            (self.values is None and other.values is None)
            or (
                self.values is not None
                and other.values is not None
                and np.array_equal(self.values, other.values)
            )
        )
        return (
            self.tau_max_ps == other.tau_max_ps
            and self.bin_width_ps == other.bin_width_ps
            and self.n_start == other.n_start
            and self.n_stop == other.n_stop
            and self.duration_ps == other.duration_ps
            and self.normalized == other.normalized
            and np.array_equal(self.counts, other.counts)
            and same_values
        )

    @property
    def n_bins(self) -> int:
        return int(self.counts.size)

    @property
    def bin_lo_ps(self) -> np.ndarray:
        k = self.n_bins // 2
        return (np.arange(self.n_bins, dtype=np.int64) - k) * self.bin_width_ps

    @property
    def bin_hi_ps(self) -> np.ndarray:
        return self.bin_lo_ps + self.bin_width_ps

    @property
    def centers_ps(self) -> np.ndarray:
        return self.bin_lo_ps + self.bin_width_ps / 2.0

    @property
    def accidentals_per_bin(self) -> float:
        """Expected coincidences per bin for independent Poisson streams."""
        if self.duration_ps == 0:
            return 0.0
        return self.n_start * self.n_stop * self.bin_width_ps / self.duration_ps

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "CorrelationHistogram") -> "CorrelationHistogram":
        """Merge histograms of disjoint start chunks of one acquisition."""
        if (self.tau_max_ps, self.bin_width_ps, self.duration_ps) != (
            other.tau_max_ps, other.bin_width_ps, other.duration_ps,
        ):
            raise ContractError("histograms have different layouts")
        if self.normalized or other.normalized:
            raise ContractError("only raw histograms can be merged")
        return CorrelationHistogram(
            self.tau_max_ps,
            self.bin_width_ps,
            self.counts + other.counts,
            self.n_start + other.n_start,
            self.n_stop,
            self.duration_ps,
        )


def half_bins(tau_max_ps: int, bin_width_ps: int) -> int:
    return math.ceil(tau_max_ps / bin_width_ps)


def _check_window(tau_max_ps: int, bin_width_ps: int) -> None:
    if int(bin_width_ps) != bin_width_ps or int(tau_max_ps) != tau_max_ps:
        raise ContractError("tau_max and bin width must be integers (ps)")
    if bin_width_ps < 1:
        raise ContractError(f"bin width must be at least 1 ps, got {bin_width_ps}")
    if tau_max_ps < bin_width_ps:
        raise ContractError(
            f"tau_max ({tau_max_ps} ps) must not be smaller than the bin width ({bin_width_ps} ps)"
        )


def _check_streams(ch0: TimeTagStream, ch1: TimeTagStream) -> None:
    if ch0.duration_ps != ch1.duration_ps:
        raise ContractError(
            f"streams have different durations ({ch0.duration_ps} != {ch1.duration_ps})"
        )


def _sweep_loop(starts, stops, tau_max, width, n_half, lo, counts):
    n_stop = stops.shape[0]
    for i in range(starts.shape[0]):
        s = starts[i]
        while lo < n_stop and stops[lo] < s - tau_max:
            lo += 1
        j = lo
        while j < n_stop and stops[j] < s + tau_max:
            d = stops[j] - s
            if d >= 0:
                b = d // width
            else:
                b = -((-d - 1) // width) - 1
            counts[b + n_half] += 1
            j += 1
    return counts


if has_numba:
    _sweep_jit = numba.njit(nogil=True, cache=False)(_sweep_loop)
else:
    _sweep_jit = None


def _sweep_numba(starts, stops, tau_max, width, n_half):
    counts = np.zeros(2 * n_half, dtype=np.int64)
    if starts.size == 0 or stops.size == 0:
        return counts
    lo = int(np.searchsorted(stops, starts[0] - tau_max, side="left"))
    return _sweep_jit(starts, stops, np.int64(tau_max), np.int64(width), np.int64(n_half),
                      np.int64(lo), counts)


def _sweep_numpy(starts, stops, tau_max, width, n_half):
    counts = np.zeros(2 * n_half, dtype=np.int64)
    if starts.size == 0 or stops.size == 0:
        return counts
    for begin in range(0, starts.size, NUMPY_CHUNK):
        s = starts[begin:begin + NUMPY_CHUNK]
        lo = np.searchsorted(stops, s - tau_max, side="left")
        hi = np.searchsorted(stops, s + tau_max, side="left")
        per_start = hi - lo
        total = int(per_start.sum())
        if total == 0:
            continue
        first = np.cumsum(per_start) - per_start
        j = np.repeat(lo, per_start) + (np.arange(total) - np.repeat(first, per_start))
        delays = stops[j] - np.repeat(s, per_start)
        counts += np.bincount(np.floor_divide(delays, width) + n_half, minlength=2 * n_half)
    return counts


def _sweep(starts, stops, tau_max, width, n_half, engine):
    if engine == "numba":
        return _sweep_numba(starts, stops, tau_max, width, n_half)
    return _sweep_numpy(starts, stops, tau_max, width, n_half)


def correlate(
    ch0: TimeTagStream,
    ch1: TimeTagStream,
    tau_max_ps: int,
    bin_width_ps: int,
    *,
    n_jobs: int = 1,
    engine: str = "auto",
) -> CorrelationHistogram:
    """
    Raw start-stop coincidence histogram, start = ch0, stop = ch1.

    With n_jobs > 1 the start stream is cut into contiguous chunks swept in
    threads; per-chunk integer histograms are summed, so the result is the
    same as the sequential sweep.
    """
    _check_window(tau_max_ps, bin_width_ps)
    _check_streams(ch0, ch1)
    if engine == "auto":
        engine = "numba" if has_numba else "numpy"
    elif engine == "numba" and not has_numba:
        raise ContractError("numba engine requested but numba is not installed")
    elif engine not in ("numba", "numpy"):
        raise ContractError(f"unknown correlation engine {engine!r}")

    tau_max_ps, bin_width_ps = int(tau_max_ps), int(bin_width_ps)
    n_half = half_bins(tau_max_ps, bin_width_ps)
    starts = ch0.timestamps.view(np.int64)
    stops = ch1.timestamps.view(np.int64)

    if n_jobs == 1 or starts.size < 2:
        counts = _sweep(starts, stops, tau_max_ps, bin_width_ps, n_half, engine)
    else:
        workers = os.cpu_count() if n_jobs < 0 else n_jobs
        chunks = np.array_split(starts, max(1, min(workers, starts.size)))
        parts = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_sweep)(chunk, stops, tau_max_ps, bin_width_ps, n_half, engine)
            for chunk in chunks
        )
        counts = np.sum(parts, axis=0, dtype=np.int64)

    logger.info(
        "correlated %d x %d tags: %d coincidences in +/-%d ps (%s)",
        starts.size, stops.size, int(counts.sum()), tau_max_ps, engine,
    )
    return CorrelationHistogram(
        tau_max_ps, bin_width_ps, counts, len(ch0), len(ch1), ch0.duration_ps
    )


def brute_force_correlate(
    ch0: TimeTagStream,
    ch1: TimeTagStream,
    tau_max_ps: int,
    bin_width_ps: int,
) -> CorrelationHistogram:
    """All-pairs reference histogram, O(n0*n1); meant for n up to ~1e4."""
    _check_window(tau_max_ps, bin_width_ps)
    _check_streams(ch0, ch1)
    tau_max_ps, bin_width_ps = int(tau_max_ps), int(bin_width_ps)
    n_half = half_bins(tau_max_ps, bin_width_ps)
    starts = ch0.timestamps.astype(np.int64)
    stops = ch1.timestamps.astype(np.int64)

    counts = np.zeros(2 * n_half, dtype=np.int64)
    rows = max(1, (1 << 22) // max(1, stops.size))
    for begin in range(0, starts.size, rows):
        delays = stops[None, :] - starts[begin:begin + rows, None]
        delays = delays[(delays >= -tau_max_ps) & (delays < tau_max_ps)]
        counts += np.bincount(
            np.floor_divide(delays, bin_width_ps) + n_half, minlength=2 * n_half
        )
    return CorrelationHistogram(
        tau_max_ps, bin_width_ps, counts, len(ch0), len(ch1), ch0.duration_ps
    )


def normalize(h: CorrelationHistogram) -> CorrelationHistogram:
    """C(tau): counts divided by the accidental coincidences per bin."""
    if h.normalized:
        raise ContractError("histogram is already normalized")
    if h.n_start == 0 or h.n_stop == 0:
        raise NormalizationError(
            f"cannot normalize: channel counts are {h.n_start} (start) and {h.n_stop} (stop)"
        )
    if h.duration_ps == 0:
        raise NormalizationError("cannot normalize a zero-duration acquisition")
    values = h.counts / h.accidentals_per_bin
    return replace(h, normalized=True, values=values)


def poisson_sigmas(h: CorrelationHistogram) -> np.ndarray:
    """sqrt(max(N, 1)) in the units of the normalized values."""
    return np.sqrt(np.maximum(h.counts, 1)) / h.accidentals_per_bin


def to_frame(h: CorrelationHistogram) -> pd.DataFrame:
    return pd.DataFrame({
        "bin_lo_ps": h.bin_lo_ps,
        "bin_hi_ps": h.bin_hi_ps,
        "counts": h.counts,
        "normalized_value": h.values if h.values is not None else np.full(h.n_bins, np.nan),
    }, columns=CSV_COLUMNS)


_META_KEYS = ("tau_max_ps", "bin_width_ps", "n_start", "n_stop", "duration_ps")


def write_histogram_csv(path: str | os.PathLike, h: CorrelationHistogram) -> Path:
    """CSV with one '# key=value' metadata line so the histogram can be reloaded."""
    path = Path(path)
    meta = " ".join(f"{key}={getattr(h, key)}" for key in _META_KEYS)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# {meta}\n")
        to_frame(h).to_csv(f, index=False, float_format="%.17g")
    return path


def read_histogram_csv(path: str | os.PathLike) -> CorrelationHistogram:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    if not first.startswith("#"):
        raise ContractError(f"{path}: missing histogram metadata line")
    try:
        meta = dict(item.split("=", 1) for item in first[1:].split())
        layout = {key: int(meta[key]) for key in _META_KEYS}
    except (KeyError, ValueError) as exc:
        raise ContractError(f"{path}: bad histogram metadata: {first.strip()}") from exc

    frame = pd.read_csv(path, comment="#")
    counts = frame["counts"].to_numpy(dtype=np.int64)
    raw = CorrelationHistogram(counts=counts, **layout)
    if frame["normalized_value"].notna().all():
        return replace(raw, normalized=True, values=frame["normalized_value"].to_numpy(dtype=float))
    return raw
