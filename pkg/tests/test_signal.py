import struct

import numpy as np
import pytest

from ppgalign.signal import (
    HEADER_SIZE, BadMagicError, HeterogeneousSegmentsError, Modality, SegmentPair,
    StoreIOError, TruncatedStoreError, VersionMismatchError, Waveform, open_store,
    read_store, write_array_store, write_store,
)


def _segments(rng, n, length=1250, modality=Modality.PPG):
    data = rng.normal(size=(n, length)).astype(np.float32)
    return [Waveform(row, 125.0, modality) for row in data]


def test_round_trip_is_bit_exact(tmp_path, rng):
    segs = _segments(rng, 100)
    write_store(segs, tmp_path / "a.apss")
    back = read_store(tmp_path / "a.apss")
    assert len(back) == 100
    for a, b in zip(segs, back):
        assert a.samples.tobytes() == b.samples.tobytes()
        assert b.sample_rate_hz == 125.0 and b.modality is Modality.PPG


def test_payload_size_matches_format(tmp_path, rng):
    write_store(_segments(rng, 3), tmp_path / "s.apss")
    size = (tmp_path / "s.apss").stat().st_size
    # 3 x 1250 float32 samples
    assert size - HEADER_SIZE == 3 * 1250 * 4 == 15000


def test_empty_store(tmp_path):
    store = write_store([], tmp_path / "e.apss", modality=Modality.ECG, segment_length=1250)
    back = open_store(tmp_path / "e.apss")
    assert back.header.segment_count == 0 and back.header.segment_length == 1250
    assert back.header.modality is Modality.ECG
    assert read_store(tmp_path / "e.apss") == []
    assert len(store) == 0


def test_header_layout(tmp_path, rng):
    write_store(_segments(rng, 2, 10, Modality.ECG), tmp_path / "h.apss")
    raw = (tmp_path / "h.apss").read_bytes()
    assert raw[:4] == b"APSS"
    assert struct.unpack("<IIfII", raw[4:24]) == (1, 1, 125.0, 10, 2)


def test_heterogeneous_segments_name_offender(tmp_path, rng):
    segs = _segments(rng, 3)
    segs[2] = Waveform(np.zeros(1000, np.float32), 125.0, Modality.PPG)
    with pytest.raises(HeterogeneousSegmentsError) as e:
        write_store(segs, tmp_path / "x.apss")
    assert e.value.index == 2
    segs = _segments(rng, 2)
    segs[1] = Waveform(segs[1].samples, 250.0, Modality.PPG)
    with pytest.raises(HeterogeneousSegmentsError):
        write_store(segs, tmp_path / "x.apss")
    segs = _segments(rng, 2)
    segs[1] = Waveform(segs[1].samples, 125.0, Modality.ECG)
    with pytest.raises(HeterogeneousSegmentsError):
        write_store(segs, tmp_path / "x.apss")


def test_bad_magic(tmp_path, rng):
    p = tmp_path / "m.apss"
    write_store(_segments(rng, 1), p)
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(BadMagicError):
        read_store(p)


def test_version_mismatch(tmp_path, rng):
    p = tmp_path / "v.apss"
    write_store(_segments(rng, 1), p)
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 7)
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        read_store(p)


def test_truncated_payload_reports_lengths(tmp_path, rng):
    p = tmp_path / "t.apss"
    write_store(_segments(rng, 2), p)
    full = p.stat().st_size
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(TruncatedStoreError) as e:
        read_store(p)
    assert str(full) in str(e.value) and str(full - 4) in str(e.value)


def test_truncated_header(tmp_path):
    p = tmp_path / "short.apss"
    p.write_bytes(b"APSS\x01")
    with pytest.raises(TruncatedStoreError):
        read_store(p)


def test_io_errors_carry_path(tmp_path):
    missing = tmp_path / "nope" / "x.apss"
    with pytest.raises(StoreIOError) as e:
        read_store(missing)
    assert "nope" in str(e.value)
    with pytest.raises(StoreIOError):
        write_array_store(np.zeros((1, 4)), missing, Modality.PPG, 125.0)


def test_waveform_is_immutable():
    w = Waveform([1.0, 2.0, 3.0], 125.0, Modality.PPG)
    with pytest.raises(ValueError):
        w.samples[0] = 5.0
    with pytest.raises(AttributeError):
        w.sample_rate_hz = 10.0


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.zeros(4), 0.0, Modality.PPG)
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 2)), 125.0, Modality.PPG)
    assert Waveform(np.zeros(250), 125.0, Modality.ECG).duration_s == 2.0
    assert not Waveform([1.0, np.nan], 125.0, Modality.ECG).is_finite()


def test_segment_pair_contract():
    p = Waveform(np.zeros(1250), 125.0, Modality.PPG)
    e = Waveform(np.zeros(1250), 125.0, Modality.ECG)
    SegmentPair(p, e).check_preprocessed()
    with pytest.raises(ValueError):
        SegmentPair(e, p)
    with pytest.raises(ValueError):
        SegmentPair(p, e.with_samples(np.zeros(1000))).check_preprocessed()
    with pytest.raises(ValueError):
        SegmentPair(p, Waveform(np.zeros(1250), 125.0, Modality.ECG, start_time_s=1.0)).check_preprocessed()
