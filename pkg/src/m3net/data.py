"""Raw sensor containers, normalisation and sliding-window sample sets."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

RAW_MAGIC = b"M3RAW1\n"
_RAW_HEADER = struct.Struct("<IIIHB")
DAYS_PER_WEEK = 7


class DataError(ValueError):
    """Bad or inconsistent input data."""


@dataclass(frozen=True)
class DatasetCard:
    name: str
    nodes: int
    frames: int
    interval_minutes: int = 5
    start_weekday: int = 0

    @classmethod
    def parse(cls, text: str) -> "DatasetCard":
        fields = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError(f"dataset card line without '=': {line!r}")
            fields[key.strip()] = value.strip()
        try:
            return cls(name=fields["name"], nodes=int(fields["nodes"]),
                       frames=int(fields["frames"]),
                       interval_minutes=int(fields.get("interval_minutes", 5)),
                       start_weekday=int(fields.get("start_weekday", 0)))
        except KeyError as exc:
            raise DataError(f"dataset card missing field {exc.args[0]!r}") from None

    @classmethod
    def read(cls, path) -> "DatasetCard":
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        return (f"name={self.name}\nnodes={self.nodes}\nframes={self.frames}\n"
                f"interval_minutes={self.interval_minutes}\nstart_weekday={self.start_weekday}\n")


# start weekdays: 2018-09-01 Sat, 2018-01-01 Mon, 2017-05-01 Mon, 2016-07-01 Fri
CARDS = {
    "PEMS03": DatasetCard("PEMS03", 358, 26208, 5, 5),
    "PEMS04": DatasetCard("PEMS04", 307, 16992, 5, 0),
    "PEMS07": DatasetCard("PEMS07", 883, 28224, 5, 0),
    "PEMS08": DatasetCard("PEMS08", 170, 17856, 5, 4),
}


@dataclass
class RawSeries:
    data: np.ndarray            # T x N x C, channel 0 is flow
    interval_minutes: int = 5
    start_weekday: int = 0
    name: str = "series"
    start_offset: int = 0       # frames past midnight at t=0

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def nodes(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def steps_per_day(self) -> int:
        return 1440 // self.interval_minutes

    def tod_index(self, t):
        return (np.asarray(t) + self.start_offset) % self.steps_per_day

    def dow_index(self, t):
        days = (np.asarray(t) + self.start_offset) // self.steps_per_day
        return (self.start_weekday + days) % DAYS_PER_WEEK


def write_raw(path, series: RawSeries) -> None:
    data = np.ascontiguousarray(series.data, dtype="<f4")
    if data.ndim != 3:
        raise DataError(f"raw series must be T x N x C, got shape {data.shape}")
    T, N, C = data.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(_RAW_HEADER.pack(T, N, C, series.interval_minutes, series.start_weekday))
        fh.write(data.tobytes())


def load_raw(path, card: DatasetCard | None = None) -> RawSeries:
    """Read a raw container, validating it against ``card`` when given."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(RAW_MAGIC):
        raise DataError(f"{path}: not an M3RAW1 container")
    off = len(RAW_MAGIC)
    if len(blob) < off + _RAW_HEADER.size:
        raise DataError(f"{path}: truncated header")
    T, N, C, interval, weekday = _RAW_HEADER.unpack_from(blob, off)
    off += _RAW_HEADER.size
    expected = T * N * C * 4
    if len(blob) - off != expected:
        raise DataError(f"{path}: payload holds {len(blob) - off} bytes, header implies {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=off).reshape(T, N, C).astype(np.float32)
    bad = ~np.isfinite(data)
    if bad.any():
        frame = int(np.argwhere(bad)[0, 0])
        raise DataError(f"{path}: non-finite value at frame {frame}")
    if card is not None:
        if (N, T) != (card.nodes, card.frames):
            raise DataError(f"{path}: expected {card.nodes} nodes x {card.frames} frames "
                            f"for {card.name}, found {N} x {T}")
        if interval != card.interval_minutes:
            raise DataError(f"{path}: interval {interval} min, card says {card.interval_minutes}")
    if (data[..., 0] < 0).any():
        raise DataError(f"{path}: negative flow values")
    name = card.name if card is not None else path.stem
    return RawSeries(data, interval, weekday, name)


def convert_npz(src, dst, card: DatasetCard | None = None, key: str = "data",
                channels: int = 1, interval_minutes: int = 5, start_weekday: int = 0) -> RawSeries:
    """Convert a public ``.npz`` dump (array ``T x N x C'``) into a raw container."""
    with np.load(src) as npz:
        if key not in npz:
            raise DataError(f"{src}: no array named {key!r} (has {sorted(npz.files)})")
        arr = np.asarray(npz[key], dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    arr = arr[..., :channels]
    if card is not None:
        interval_minutes, start_weekday = card.interval_minutes, card.start_weekday
    series = RawSeries(arr, interval_minutes, start_weekday, card.name if card else Path(src).stem)
    write_raw(dst, series)
    return series


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray   # per channel
    std: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.std) <= 0):
            raise DataError("normalisation std must be positive for every channel")

    @classmethod
    def fit(cls, data: np.ndarray) -> "NormStats":
        flat = np.asarray(data, dtype=np.float64).reshape(-1, data.shape[-1])
        std = flat.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(flat.mean(axis=0), std)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.std).astype(np.float32)

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def denormalize_flow(self, z):
        return z * self.std[0] + self.mean[0]


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9 or min(self.train_frac, self.val_frac, self.test_frac) < 0:
            raise DataError(f"split fractions must be non-negative and sum to 1, got {total}")

    def bounds(self, frames: int) -> list[tuple[int, int]]:
        """Chronological ``[start, stop)`` frame ranges for train, val, test."""
        a = int(round(frames * self.train_frac))
        b = int(round(frames * (self.train_frac + self.val_frac)))
        return [(0, a), (a, b), (b, frames)]


class WindowedSample(NamedTuple):
    x: np.ndarray      # L x N x C, normalised
    y: np.ndarray      # F x N, raw flow
    tod_idx: int
    dow_idx: int


class Batch(NamedTuple):
    x: np.ndarray      # B x L x N x C
    y: np.ndarray      # B x F x N
    tod_idx: np.ndarray
    dow_idx: np.ndarray


class WindowSet:
    """Windows over one split, stored as last-history-frame indices into the series."""

    def __init__(self, normalized: np.ndarray, flow: np.ndarray, ends: np.ndarray,
                 tod: np.ndarray, dow: np.ndarray, L: int, F: int, name: str = ""):
        self.normalized = normalized
        self.flow = flow
        self.ends = ends
        self.tod = tod
        self.dow = dow
        self.L, self.F = L, F
        self.name = name

    def __len__(self) -> int:
        return len(self.ends)

    def __getitem__(self, i: int) -> WindowedSample:
        t = int(self.ends[i])
        return WindowedSample(self.normalized[t - self.L + 1:t + 1],
                              self.flow[t + 1:t + 1 + self.F],
                              int(self.tod[i]), int(self.dow[i]))

    def gather(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        ends = self.ends[idx]
        hist = ends[:, None] + np.arange(-self.L + 1, 1)
        fut = ends[:, None] + np.arange(1, self.F + 1)
        return Batch(self.normalized[hist], self.flow[fut], self.tod[idx], self.dow[idx])

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(self.normalized, self.flow, self.ends[idx], self.tod[idx],
                         self.dow[idx], self.L, self.F, self.name)


class Splits(NamedTuple):
    train: WindowSet
    val: WindowSet
    test: WindowSet
    stats: NormStats


def fit_stats(series: RawSeries, split: SplitSpec) -> NormStats:
    a, b = split.bounds(series.frames)[0]
    return NormStats.fit(series.data[a:b])


def make_windows(series: RawSeries, L: int = 12, F: int = 12, stats: NormStats | None = None,
                 split: SplitSpec | None = None) -> Splits:
    """Build train/val/test windows; no window crosses a split boundary."""
    split = split or SplitSpec()
    if L + F > series.frames:
        raise DataError(f"L+F={L + F} exceeds series length {series.frames}")
    if stats is None:
        stats = fit_stats(series, split)
    normalized = stats.normalize(series.data)
    flow = series.data[..., 0].astype(np.float32)
    sets = []
    for label, (start, stop) in zip(("train", "val", "test"), split.bounds(series.frames)):
        length = stop - start
        if length == 0:
            ends = np.zeros(0, dtype=np.int64)
        elif length < L + F:
            raise DataError(f"{label} split has {length} frames, fewer than L+F={L + F}")
        else:
            ends = np.arange(start + L - 1, stop - F, dtype=np.int64)
        sets.append(WindowSet(normalized, flow, ends, series.tod_index(ends).astype(np.int64),
                              series.dow_index(ends).astype(np.int64), L, F, label))
    return Splits(*sets, stats)


def batches(samples: WindowSet, batch_size: int, shuffle_seed: int | None = None,
            epoch: int = 0) -> Iterator[Batch]:
    """Yield batches; ``shuffle_seed=None`` keeps chronological order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(samples)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield samples.gather(order[start:start + batch_size])


def synthetic_series(T: int, N: int, C: int = 1, seed: int = 0, interval_minutes: int = 5,
                     base: float = 200.0, amplitude: float = 80.0, noise: float = 5.0,
                     name: str = "synthetic") -> RawSeries:
    """Daily-periodic non-negative flow with per-node phase and scale."""
    rng = np.random.default_rng(seed)
    per_day = 1440 // interval_minutes
    t = np.arange(T)[:, None]
    phase = rng.uniform(0, 2 * np.pi, N)[None, :]
    gain = rng.uniform(0.5, 1.5, N)[None, :]
    flow = base * gain + amplitude * gain * np.sin(2 * np.pi * t / per_day + phase)
    flow = flow + rng.normal(0.0, noise, flow.shape)
    data = np.repeat(np.clip(flow, 0, None)[..., None], C, axis=-1).astype(np.float32)
    return RawSeries(data, interval_minutes, 0, name)
