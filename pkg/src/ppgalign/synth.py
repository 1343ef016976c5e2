"""Paired PPG/ECG generator driven by a shared cardiac latent.

Both channels are rendered from one beat-time sequence: the ECG as a
sum-of-Gaussians PQRST complex centred on each beat, the PPG as a log-normal
pulse (plus a smaller dicrotic wave) peaking ``pulse_transit_delay_s`` after
the beat. Everything is analytic so the ground truth is known exactly.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signal import Modality, SegmentPair, Waveform, write_array_store


class Rhythm(enum.Enum):
    REGULAR = "regular"
    IRREGULAR = "irregular"


@dataclass(frozen=True)
class CardiacLatent:
    heart_rate_bpm: float = 60.0
    rhythm: Rhythm = Rhythm.REGULAR
    hrv_jitter_s: float = 0.0
    pulse_transit_delay_s: float = 0.2
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rhythm", Rhythm(self.rhythm))
        if not 40.0 <= self.heart_rate_bpm <= 180.0:
            raise ValueError(f"heart_rate_bpm {self.heart_rate_bpm} outside [40, 180]")
        if self.hrv_jitter_s < 0:
            raise ValueError("hrv_jitter_s must be >= 0")
        if not 0.1 <= self.pulse_transit_delay_s <= 0.4:
            raise ValueError(f"pulse_transit_delay_s {self.pulse_transit_delay_s} outside [0.1, 0.4]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def period_s(self) -> float:
        return 60.0 / self.heart_rate_bpm


# (offset from R in s, amplitude, width in s); T offset scales with sqrt(RR).
_ECG_WAVES = (
    ("P", -0.17, 0.12, 0.022),
    ("Q", -0.028, -0.14, 0.009),
    ("R", 0.0, 1.0, 0.011),
    ("S", 0.03, -0.22, 0.010),
    ("T", 0.26, 0.30, 0.045),
)
_MIN_RR = 0.3
_MAX_RR = 2.0


def beat_times(latent: CardiacLatent, duration_s: float) -> np.ndarray:
    """Beat (R-peak) times covering [-2 s, duration + 2 s], so edges are stationary."""
    rng = np.random.default_rng([latent.seed, 0])
    period = latent.period_s
    # First in-window beat sits in the central 80% of a period.
    phase = rng.uniform(0.1, 0.9) * period
    t = phase - np.ceil(2.0 / period) * period
    beats = []
    while t <= duration_s + 2.0:
        beats.append(t)
        rr = period
        if latent.hrv_jitter_s > 0:
            rr += rng.normal(0.0, latent.hrv_jitter_s)
        if latent.rhythm is Rhythm.IRREGULAR:
            rr += 0.12 * period * rng.standard_t(3)
        t += float(np.clip(rr, _MIN_RR, _MAX_RR))
    return np.asarray(beats)


def _ecg(t: np.ndarray, beats: np.ndarray, irregular: bool) -> np.ndarray:
    x = np.zeros_like(t)
    rr = np.diff(beats, append=beats[-1] + np.median(np.diff(beats)))
    for b, r in zip(beats, rr):
        near = np.abs(t - b) < 1.0
        tt = t[near] - b
        for name, off, amp, width in _ECG_WAVES:
            if name == "P" and irregular:
                continue  # no organised atrial activity
            if name == "T":
                off = off * np.sqrt(min(r, 1.5))
            x[near] += amp * np.exp(-0.5 * ((tt - off) / width) ** 2)
    return x


def _lognormal_pulse(u: np.ndarray, mode: float, shape: float) -> np.ndarray:
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-np.log(u[pos] / mode) ** 2 / (2 * shape**2))
    return out


def _ppg(t: np.ndarray, beats: np.ndarray, delay: float) -> np.ndarray:
    x = np.zeros_like(t)
    mode = 0.12
    rr = np.diff(beats, append=beats[-1] + np.median(np.diff(beats)))
    for b, r in zip(beats, rr):
        onset = b + delay - mode
        u = t - onset
        x += _lognormal_pulse(u, mode, 0.45)
        x += 0.3 * _lognormal_pulse(u - 0.3 * np.sqrt(min(r, 1.5)), mode, 0.4)
    return x


def synth_pair(
    latent: CardiacLatent, duration_s: float = 10.0, rate_hz: float = 125.0, pair_id: int = 0
) -> SegmentPair:
    """Render a raw (unnormalised) PPG/ECG pair from one latent."""
    if duration_s < latent.period_s:
        raise ValueError(f"duration {duration_s} s shorter than one beat period {latent.period_s:.3f} s")
    n = int(round(duration_s * rate_hz))
    t = np.arange(n) / rate_hz
    beats = beat_times(latent, duration_s)
    ecg = _ecg(t, beats, latent.rhythm is Rhythm.IRREGULAR)
    ppg = _ppg(t, beats, latent.pulse_transit_delay_s)
    if latent.noise_std > 0:
        rng = np.random.default_rng([latent.seed, 1])
        ecg = ecg + rng.normal(0.0, latent.noise_std, n)
        ppg = ppg + rng.normal(0.0, latent.noise_std, n)
    src = f"synth-{latent.seed}"
    return SegmentPair(
        Waveform(ppg, rate_hz, Modality.PPG, 0.0, src),
        Waveform(ecg, rate_hz, Modality.ECG, 0.0, src),
        pair_id,
    )


@dataclass(frozen=True)
class LatentDistribution:
    hr_range: tuple[float, float] = (50.0, 150.0)
    irregular_prob: float = 0.3
    jitter_range: tuple[float, float] = (0.0, 0.03)
    delay_range: tuple[float, float] = (0.15, 0.3)
    noise_range: tuple[float, float] = (0.0, 0.05)

    def sample(self, rng: np.random.Generator, seed: int) -> CardiacLatent:
        return CardiacLatent(
            heart_rate_bpm=float(rng.uniform(*self.hr_range)),
            rhythm=Rhythm.IRREGULAR if rng.random() < self.irregular_prob else Rhythm.REGULAR,
            hrv_jitter_s=float(rng.uniform(*self.jitter_range)),
            pulse_transit_delay_s=float(rng.uniform(*self.delay_range)),
            noise_std=float(rng.uniform(*self.noise_range)),
            seed=seed,
        )


@dataclass
class SynthDataset:
    ppg: np.ndarray
    ecg: np.ndarray
    latents: list[CardiacLatent]
    rate_hz: float
    paths: dict[str, Path] = field(default_factory=dict)

    @property
    def heart_rates(self) -> np.ndarray:
        return np.array([lat.heart_rate_bpm for lat in self.latents])

    @property
    def irregular(self) -> np.ndarray:
        return np.array([lat.rhythm is Rhythm.IRREGULAR for lat in self.latents])


def latent_for_index(i: int, seed: int = 0, dist: LatentDistribution | None = None) -> CardiacLatent:
    """The latent of pair ``i``, derived only from (seed, i)."""
    rng = np.random.default_rng([seed, i])
    return (dist or LatentDistribution()).sample(rng, seed=int(rng.integers(2**31)))


def synth_dataset(
    n_pairs: int,
    latent_distribution: LatentDistribution | None = None,
    duration_s: float = 10.0,
    rate_hz: float = 125.0,
    seed: int = 0,
    out_dir=None,
) -> SynthDataset:
    """Generate ``n_pairs`` index-aligned pairs; optionally write stores and a label CSV.

    Each pair draws its latent from a per-index generator, so any index range
    can be regenerated independently of the others.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    dist = latent_distribution or LatentDistribution()
    latents, ppg, ecg = [], [], []
    for i in range(n_pairs):
        lat = latent_for_index(i, seed, dist)
        pair = synth_pair(lat, duration_s, rate_hz, pair_id=i)
        latents.append(lat)
        ppg.append(pair.ppg.samples)
        ecg.append(pair.ecg.samples)
    ds = SynthDataset(np.stack(ppg), np.stack(ecg), latents, rate_hz)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_array_store(ds.ppg, out / "ppg.apss", Modality.PPG, rate_hz)
        write_array_store(ds.ecg, out / "ecg.apss", Modality.ECG, rate_hz)
        write_labels(ds.latents, out / "labels.csv")
        ds.paths = {"ppg": out / "ppg.apss", "ecg": out / "ecg.apss", "labels": out / "labels.csv"}
    return ds


LABEL_COLUMNS = (
    "segment_index", "heart_rate_bpm", "rhythm", "hrv_jitter_s",
    "pulse_transit_delay_s", "noise_std", "seed", "irregular", "hr_above_80",
)


def write_labels(latents, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LABEL_COLUMNS)
        for i, lat in enumerate(latents):
            w.writerow([
                i, f"{lat.heart_rate_bpm:.6f}", lat.rhythm.value, f"{lat.hrv_jitter_s:.6f}",
                f"{lat.pulse_transit_delay_s:.6f}", f"{lat.noise_std:.6f}", lat.seed,
                int(lat.rhythm is Rhythm.IRREGULAR), int(lat.heart_rate_bpm > 80.0),
            ])


def read_labels(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
