"""Signal containers and the APSS segment store.

APSS layout (all little-endian)::

    offset  size  field
    0       4     magic b"APSS"
    4       4     version (u32)
    8       4     modality (u32, 0=PPG 1=ECG)
    12      4     sample_rate_hz (f32)
    16      4     segment_length (u32)
    20      4     segment_count (u32)
    24      ...   segment_count * segment_length float32 samples, row-major
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"APSS"
VERSION = 1
_HEADER = struct.Struct("<4sIIfII")
HEADER_SIZE = _HEADER.size
_F32 = np.dtype("<f4")


class Modality(enum.IntEnum):
    PPG = 0
    ECG = 1


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: float
    modality: Modality
    start_time_s: float = 0.0
    source_id: str = ""

    def __post_init__(self):
        x = np.asarray(self.samples)
        # float32 stays float32 so store round trips are bit-exact
        x = np.array(x, dtype=np.float32 if x.dtype == np.float32 else np.float64)
        if x.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {x.shape}")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))
        object.__setattr__(self, "modality", Modality(self.modality))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def with_samples(self, samples, sample_rate_hz: float | None = None) -> "Waveform":
        return Waveform(
            samples,
            self.sample_rate_hz if sample_rate_hz is None else sample_rate_hz,
            self.modality,
            self.start_time_s,
            self.source_id,
        )

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.samples).all())


@dataclass(frozen=True)
class SegmentPair:
    ppg: Waveform
    ecg: Waveform
    pair_id: int = 0

    def __post_init__(self):
        if self.ppg.modality is not Modality.PPG:
            raise ValueError("ppg waveform has modality " + self.ppg.modality.name)
        if self.ecg.modality is not Modality.ECG:
            raise ValueError("ecg waveform has modality " + self.ecg.modality.name)

    def check_preprocessed(self, rate_hz: float = 125.0, length: int = 1250) -> None:
        """Raise ValueError unless the pair satisfies the model-input contract."""
        for w in (self.ppg, self.ecg):
            if w.sample_rate_hz != rate_hz:
                raise ValueError(f"{w.modality.name}: rate {w.sample_rate_hz} != {rate_hz}")
            if len(w) != length:
                raise ValueError(f"{w.modality.name}: length {len(w)} != {length}")
            if not w.is_finite():
                raise ValueError(f"{w.modality.name}: non-finite samples")
        if self.ppg.start_time_s != self.ecg.start_time_s:
            raise ValueError("ppg and ecg start times differ")


class StoreError(Exception):
    """Base class for APSS read/write failures."""


class BadMagicError(StoreError):
    pass


class VersionMismatchError(StoreError):
    pass


class TruncatedStoreError(StoreError):
    pass


class HeterogeneousSegmentsError(StoreError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"segment {index}: {reason}")
        self.index = index


class StoreIOError(StoreError):
    def __init__(self, path, cause: OSError):
        super().__init__(f"{path}: {cause.strerror or cause}")
        self.path = Path(path)


@dataclass(frozen=True)
class StoreHeader:
    modality: Modality
    sample_rate_hz: float
    segment_length: int
    segment_count: int
    version: int = VERSION

    @property
    def payload_bytes(self) -> int:
        return self.segment_count * self.segment_length * 4

    def pack(self) -> bytes:
        return _HEADER.pack(
            MAGIC, self.version, int(self.modality), self.sample_rate_hz,
            self.segment_length, self.segment_count,
        )


@dataclass
class SegmentStore:
    path: Path
    header: StoreHeader
    data: np.ndarray = field(repr=False)  # segment_count x segment_length, float32

    def __len__(self) -> int:
        return self.header.segment_count

    def waveforms(self) -> list[Waveform]:
        h = self.header
        return [
            Waveform(row, h.sample_rate_hz, h.modality, 0.0, f"{self.path.name}#{i}")
            for i, row in enumerate(self.data)
        ]


def write_store(
    segments: Sequence[Waveform],
    path,
    *,
    modality: Modality | None = None,
    sample_rate_hz: float | None = None,
    segment_length: int | None = None,
) -> SegmentStore:
    """Write same-shaped segments to an APSS file.

    The keyword arguments only matter for an empty list, where there is no
    first segment to take the header fields from.
    """
    path = Path(path)
    if segments:
        first = segments[0]
        modality, sample_rate_hz, segment_length = first.modality, first.sample_rate_hz, len(first)
        for i, s in enumerate(segments[1:], start=1):
            if s.modality != modality:
                raise HeterogeneousSegmentsError(i, f"modality {s.modality.name} != {modality.name}")
            if s.sample_rate_hz != sample_rate_hz:
                raise HeterogeneousSegmentsError(i, f"rate {s.sample_rate_hz} != {sample_rate_hz}")
            if len(s) != segment_length:
                raise HeterogeneousSegmentsError(i, f"length {len(s)} != {segment_length}")
        data = np.stack([np.asarray(s.samples, dtype=_F32) for s in segments])
    else:
        modality = Modality(modality if modality is not None else Modality.PPG)
        sample_rate_hz = float(sample_rate_hz or 125.0)
        segment_length = int(segment_length or 0)
        data = np.zeros((0, segment_length), dtype=_F32)
    return write_array_store(data, path, modality, sample_rate_hz)


def write_array_store(data, path, modality: Modality, sample_rate_hz: float) -> SegmentStore:
    """Write an N x L matrix directly as an APSS store."""
    path = Path(path)
    data = np.ascontiguousarray(data, dtype=_F32)
    if data.ndim != 2:
        raise ValueError(f"expected a 2-D segment matrix, got shape {data.shape}")
    header = StoreHeader(Modality(modality), float(np.float32(sample_rate_hz)), data.shape[1], data.shape[0])
    try:
        with open(path, "wb") as fh:
            fh.write(header.pack())
            fh.write(data.tobytes())
    except OSError as e:
        raise StoreIOError(path, e) from e
    return SegmentStore(path, header, data)


def read_header(buf: bytes, path="<bytes>") -> StoreHeader:
    if len(buf) < HEADER_SIZE:
        raise TruncatedStoreError(f"{path}: header needs {HEADER_SIZE} bytes, file has {len(buf)}")
    magic, version, modality, rate, length, count = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: store version {version}, reader supports {VERSION}")
    try:
        modality = Modality(modality)
    except ValueError:
        raise StoreError(f"{path}: unknown modality code {modality}") from None
    return StoreHeader(modality, float(rate), length, count, version)


def open_store(path) -> SegmentStore:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise StoreIOError(path, e) from e
    header = read_header(buf, path)
    expected = HEADER_SIZE + header.payload_bytes
    if len(buf) != expected:
        kind = "truncated" if len(buf) < expected else "oversized"
        raise TruncatedStoreError(
            f"{path}: {kind} payload, expected {expected} bytes, got {len(buf)}"
        )
    data = np.frombuffer(buf, dtype=_F32, offset=HEADER_SIZE).reshape(
        header.segment_count, header.segment_length
    )
    return SegmentStore(path, header, data)


def read_store(path) -> list[Waveform]:
    return open_store(path).waveforms()


def stack_samples(segments: Iterable[Waveform]) -> np.ndarray:
    return np.stack([np.asarray(s.samples, dtype=np.float32) for s in segments])
