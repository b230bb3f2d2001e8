"""
Shared domain types and unit conversions.

Time is kept as integer picoseconds since acquisition start. Tags are stored
column-wise (one uint64 timestamp array, one uint8 channel array) and the
arrays are frozen on construction, so a TimeTagStream can be shared between
threads without copying.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ContractError, DomainError

logger = logging.getLogger(__name__)

# CODATA-rounded hc in eV*nm. Pinned by tests.
HC_EV_NM = 1239.84198

PS_PER_SECOND = 10**12
CHANNELS = (0, 1)


@dataclass(frozen=True)
class TimeTag:
    """One detection event."""

    channel: int
    timestamp: int

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ContractError(f"channel must be 0 or 1, got {self.channel}")
        if self.timestamp < 0:
            raise ContractError(f"timestamp must be non-negative, got {self.timestamp}")


@dataclass(frozen=True)
class PhotonEnergy:
    value_meV: float

    def __post_init__(self):
        if not self.value_meV > 0:
            raise DomainError(f"photon energy must be positive, got {self.value_meV} meV")


@dataclass(frozen=True)
class CountRate:
    cps: float

    def __post_init__(self):
        if not self.cps >= 0:
            raise DomainError(f"count rate must be non-negative, got {self.cps} cps")

    def __float__(self) -> float:
        return float(self.cps)


def _frozen(array: np.ndarray) -> np.ndarray:
    if array.flags.writeable:
        array = array.copy()
        array.setflags(write=False)
    return array


class TimeTagStream:
    """
    Channel-labelled, time-ordered detection timestamps over [0, duration_ps].

    Ordering is by timestamp, ties broken by channel (0 before 1). The
    constructor checks the ordering and raises ContractError on violation.
    """

    __slots__ = ("timestamps", "channels", "duration_ps", "resolution_ps")

    def __init__(
        self,
        timestamps,
        channels,
        duration_ps: int,
        resolution_ps: int = 1,
    ):
        ts = np.ascontiguousarray(timestamps, dtype=np.uint64)
        ch = np.ascontiguousarray(channels, dtype=np.uint8)
        if ts.ndim != 1 or ts.shape != ch.shape:
            raise ContractError("timestamps and channels must be 1-d arrays of equal length")
        if duration_ps < 0:
            raise ContractError(f"duration must be non-negative, got {duration_ps}")
        if resolution_ps != 1:
            raise ContractError(f"only 1 ps resolution is supported, got {resolution_ps}")
        if ch.size and ch.max() > 1:
            raise ContractError("channel must be 0 or 1")
        if ts.size:
            if int(ts[-1]) > duration_ps:
                raise ContractError(
                    f"timestamp {int(ts[-1])} exceeds duration {duration_ps}"
                )
            dt = np.diff(ts.view(np.int64))
            dc = np.diff(ch.astype(np.int8))
            if np.any((dt < 0) | ((dt == 0) & (dc < 0))):
                raise ContractError("tags are not sorted by (timestamp, channel)")

        object.__setattr__(self, "timestamps", _frozen(ts))
        object.__setattr__(self, "channels", _frozen(ch))
        object.__setattr__(self, "duration_ps", int(duration_ps))
        object.__setattr__(self, "resolution_ps", int(resolution_ps))

    def __setattr__(self, name, value):
        raise AttributeError("TimeTagStream is immutable")

    @classmethod
    def empty(cls, duration_ps: int) -> "TimeTagStream":
        return cls(np.empty(0, np.uint64), np.empty(0, np.uint8), duration_ps)

    @classmethod
    def from_tags(cls, tags, duration_ps: int) -> "TimeTagStream":
        tags = list(tags)
        return cls(
            [t.timestamp for t in tags],
            [t.channel for t in tags],
            duration_ps,
        )

    @classmethod
    def single_channel(cls, timestamps, channel: int, duration_ps: int) -> "TimeTagStream":
        ts = np.asarray(timestamps, dtype=np.uint64)
        return cls(ts, np.full(ts.size, channel, dtype=np.uint8), duration_ps)

    def __len__(self) -> int:
        return int(self.timestamps.size)

    def __iter__(self) -> Iterator[TimeTag]:
        for t, c in zip(self.timestamps.tolist(), self.channels.tolist()):
            yield TimeTag(c, t)

    @property
    def tags(self) -> tuple[TimeTag, ...]:
        return tuple(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimeTagStream):
            return NotImplemented
        return (
            self.duration_ps == other.duration_ps
            and self.resolution_ps == other.resolution_ps
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.channels, other.channels)
        )

    def __hash__(self):
        return hash((self.duration_ps, len(self), self.timestamps[:8].tobytes()))

    def __repr__(self) -> str:
        return f"TimeTagStream(n={len(self)}, duration_ps={self.duration_ps})"

    @property
    def duration_s(self) -> float:
        return self.duration_ps / PS_PER_SECOND

    @property
    def rate_cps(self) -> float:
        """Mean count rate over the acquisition."""
        if self.duration_ps == 0:
            return 0.0
        return len(self) / self.duration_s

    def channel_set(self) -> set[int]:
        return set(np.unique(self.channels).tolist())

    def count(self, channel: int | None = None) -> int:
        if channel is None:
            return len(self)
        return int(np.count_nonzero(self.channels == channel))

    def select(self, channel: int) -> "TimeTagStream":
        mask = self.channels == channel
        return TimeTagStream(self.timestamps[mask], self.channels[mask], self.duration_ps)


def sort_tags(timestamps: np.ndarray, channels: np.ndarray, duration_ps: int) -> TimeTagStream:
    """Build a stream from unordered columns using the (timestamp, channel) order."""
    order = np.lexsort((channels, timestamps))
    return TimeTagStream(timestamps[order], channels[order], duration_ps)


def merge_streams(a: TimeTagStream, b: TimeTagStream) -> TimeTagStream:
    """Union of two streams over the same acquisition, re-sorted."""
    if a.duration_ps != b.duration_ps:
        raise ContractError(
            f"cannot merge streams of different durations ({a.duration_ps} != {b.duration_ps})"
        )
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    return sort_tags(
        np.concatenate([a.timestamps, b.timestamps]),
        np.concatenate([a.channels, b.channels]),
        a.duration_ps,
    )


def _energy_meV(e: PhotonEnergy | float) -> float:
    value = e.value_meV if isinstance(e, PhotonEnergy) else float(e)
    if not value > 0:
        raise DomainError(f"photon energy must be positive, got {value} meV")
    return value


def energy_to_wavelength(e: PhotonEnergy | float) -> float:
    """Vacuum wavelength in nm for a photon energy in meV."""
    return HC_EV_NM * 1e3 / _energy_meV(e)


def wavelength_to_energy(wavelength_nm: float) -> PhotonEnergy:
    if not wavelength_nm > 0:
        raise DomainError(f"wavelength must be positive, got {wavelength_nm} nm")
    return PhotonEnergy(HC_EV_NM * 1e3 / wavelength_nm)


def bandwidth_nm_to_meV(center_nm: float, bandwidth_nm: float) -> float:
    """Energy width of a narrow spectral window, hc*dl/l^2."""
    if not center_nm > 0:
        raise DomainError(f"center wavelength must be positive, got {center_nm} nm")
    if bandwidth_nm < 0 or math.isnan(bandwidth_nm):
        raise DomainError(f"bandwidth must be non-negative, got {bandwidth_nm} nm")
    return HC_EV_NM * 1e3 * bandwidth_nm / center_nm**2
