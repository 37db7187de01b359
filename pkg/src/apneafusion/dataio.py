"""Study bundles on disk, synthetic PSG generation, and fold splitting.

A study bundle is a directory: ``manifest.json`` describing the channels, one
little-endian float32 raw file per channel, and ``labels.csv`` with per-epoch
binary apnea labels. A dataset is a directory of such bundles. Round trips
are bit-exact.

The synthetic generator stands in for clinical PSG corpora: six channels at
heterogeneous native rates with modality-typical baselines, plus correlated
apnea signatures (respiratory amplitude drop, SpO2 desaturation, CO2 rise,
heart-rate slowdown) whose strength scales with ``separability``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import make_rng
from .sigprep import (
    EPOCH_SAMPLES,
    EPOCH_SECONDS,
    MODALITIES,
    TARGET_HZ,
    ChannelSeries,
    bandpass_ecg,
    hamilton_rpeaks,
    amplitude_step_series,
    resample,
    rr_step_series,
)

MANIFEST_NAME = "manifest.json"
LABELS_NAME = "labels.csv"

NATIVE_RATES = {"ECG": 256.0, "EEG": 128.0, "EOG": 64.0,
                "SPO2": 1.0, "CO2": 64.0, "RESP": 64.0}

DERIVED_RR = "ECG_RR"
DERIVED_AMP = "ECG_AMP"


class BundleError(Exception):
    """Base class for malformed study bundles."""


class MissingFileError(BundleError):
    """A file named by the manifest (or the manifest itself) is absent."""


class LengthMismatchError(BundleError):
    """A raw channel file does not match its declared num_samples."""


class UnknownModalityError(BundleError):
    """A manifest channel name is not one of the six modality tags."""


@dataclass
class StudyBundle:
    """One sleep study: per-modality channels plus per-epoch apnea labels."""

    study_id: str
    channels: dict
    labels: np.ndarray
    derived: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not np.isin(self.labels, (0, 1)).all():
            raise BundleError(f"{self.study_id}: labels must be 0/1")

    @property
    def epoch_capacity(self) -> int:
        """Whole 30 s epochs available in the shortest channel."""
        return int(min(ch.duration_s for ch in self.channels.values()) // EPOCH_SECONDS)

    def epoch(self, modality: str, j: int) -> np.ndarray:
        """Epoch j of one modality; channel must be prepared (128 Hz)."""
        ch = self.channels[modality]
        if ch.sampling_rate_hz != TARGET_HZ:
            raise BundleError(f"{self.study_id}/{modality}: not resampled to 128 Hz")
        return ch.samples[j * EPOCH_SAMPLES:(j + 1) * EPOCH_SAMPLES]


def save_bundle(bundle: StudyBundle, bundle_dir) -> None:
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)

    def channel_entries(channels):
        entries = []
        for name in sorted(channels):
            ch = channels[name]
            fname = f"{name}.f32"
            raw = np.asarray(ch.samples, dtype="<f4").tobytes()
            (bundle_dir / fname).write_bytes(raw)
            entries.append({"name": name, "sampling_rate_hz": ch.sampling_rate_hz,
                            "num_samples": len(ch.samples), "file": fname})
        return entries

    manifest = {"study_id": bundle.study_id,
                "channels": channel_entries(bundle.channels)}
    if bundle.derived:
        manifest["derived"] = channel_entries(bundle.derived)
    (bundle_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))

    with open(bundle_dir / LABELS_NAME, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch_index", "label"])
        for j, y in enumerate(bundle.labels):
            writer.writerow([j, int(y)])


def _read_channel(bundle_dir: Path, entry: dict, study_id: str) -> ChannelSeries:
    path = bundle_dir / entry["file"]
    if not path.exists():
        raise MissingFileError(f"{study_id}: channel file {entry['file']} missing")
    raw = path.read_bytes()
    if len(raw) != 4 * entry["num_samples"]:
        raise LengthMismatchError(
            f"{study_id}: channel {entry['name']} has {len(raw) // 4} samples on disk, "
            f"manifest says {entry['num_samples']}")
    samples = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if not np.isfinite(samples).all():
        raise BundleError(f"{study_id}: channel {entry['name']} contains NaN/Inf")
    return ChannelSeries(samples, float(entry["sampling_rate_hz"]), entry["name"])


def load_bundle(bundle_dir) -> StudyBundle:
    bundle_dir = Path(bundle_dir)
    manifest_path = bundle_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise MissingFileError(f"no {MANIFEST_NAME} in {bundle_dir}")
    manifest = json.loads(manifest_path.read_text())
    study_id = manifest["study_id"]

    channels = {}
    for entry in manifest["channels"]:
        if entry["name"] not in MODALITIES:
            raise UnknownModalityError(
                f"{study_id}: unknown modality tag {entry['name']!r}")
        channels[entry["name"]] = _read_channel(bundle_dir, entry, study_id)

    derived = {}
    for entry in manifest.get("derived", []):
        derived[entry["name"]] = _read_channel(bundle_dir, entry, study_id)

    labels_path = bundle_dir / LABELS_NAME
    if not labels_path.exists():
        raise MissingFileError(f"{study_id}: no {LABELS_NAME}")
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["epoch_index", "label"]:
            raise BundleError(f"{study_id}: bad labels header {header}")
        rows = [(int(a), int(b)) for a, b in reader]
    labels = np.zeros(len(rows), dtype=np.int64)
    for j, y in rows:
        if y not in (0, 1):
            raise BundleError(f"{study_id}: label {y} not in {{0,1}}")
        if not 0 <= j < len(rows):
            raise BundleError(f"{study_id}: epoch index {j} out of range")
        labels[j] = y

    bundle = StudyBundle(study_id, channels, labels, derived)
    capacity = bundle.epoch_capacity
    if len(labels) > capacity:
        raise BundleError(
            f"{study_id}: {len(labels)} labels but only {capacity} whole epochs")
    return bundle


def dataset_dirs(root) -> list:
    root = Path(root)
    return sorted(p for p in root.iterdir() if (p / MANIFEST_NAME).exists())


def load_dataset(root) -> list:
    dirs = dataset_dirs(root)
    if not dirs:
        raise MissingFileError(f"no study bundles under {root}")
    return [load_bundle(d) for d in dirs]


def save_dataset(bundles, root) -> None:
    root = Path(root)
    for b in bundles:
        save_bundle(b, root / b.study_id)


# ---------------------------------------------------------------------------
# synthetic PSG generation
# ---------------------------------------------------------------------------

def _lowpass_kernel(cutoff_hz: float, fs: float, taps: int = 33) -> np.ndarray:
    t = np.arange(taps) - (taps - 1) / 2
    h = np.sinc(2 * cutoff_hz / fs * t) * np.hamming(taps)
    return h / h.sum()

_EEG_KERNEL = _lowpass_kernel(30.0, 128.0)
_EOG_KERNEL = _lowpass_kernel(5.0, 64.0)


def _ecg_epoch(rng, hr_bpm: float, secs: int, fs: float) -> np.ndarray:
    t = np.arange(int(secs * fs)) / fs
    period = 60.0 / hr_bpm
    x = np.zeros_like(t)
    start = rng.uniform(0, period)
    for pk in np.arange(start, secs, period):
        amp = rng.uniform(0.9, 1.1)
        x += amp * np.exp(-0.5 * ((t - pk) / 0.012) ** 2)
    return x + rng.normal(0, 0.05, len(t))


def synth_study(study_id: str, epochs_per_study: int, apnea_rate: float,
                separability: float, rng: np.random.Generator) -> StudyBundle:
    s = float(separability)
    hr_base = rng.uniform(50, 90)
    resp_hz = rng.uniform(0.2, 0.4)
    resp_amp = rng.uniform(0.8, 1.2)
    resp_phase = rng.uniform(0, 2 * np.pi)
    spo2_base = rng.uniform(96.5, 97.5)
    co2_base = rng.uniform(36, 40)
    desat = rng.uniform(3.0, 6.0)
    eeg_amp = rng.uniform(0.8, 1.2)
    eog_amp = rng.uniform(0.8, 1.2)

    labels = (rng.random(epochs_per_study) < apnea_rate).astype(np.int64)

    parts = {m: [] for m in MODALITIES}
    for j, y in enumerate(labels):
        t0 = j * EPOCH_SECONDS

        hr = hr_base * (1.0 - 0.2 * s * y) + rng.normal(0, 1.0)
        parts["ECG"].append(_ecg_epoch(rng, max(hr, 30.0), EPOCH_SECONDS, 256.0))

        t64 = t0 + np.arange(EPOCH_SECONDS * 64) / 64.0
        resp_scale = resp_amp * (1.0 - 0.7 * s * y)
        parts["RESP"].append(resp_scale * np.sin(2 * np.pi * resp_hz * t64 + resp_phase)
                             + rng.normal(0, 0.05 * resp_amp, len(t64)))

        co2_osc = 4.0 * (1.0 - 0.7 * s * y)
        co2 = (co2_base + 4.0 * s * y
               + co2_osc * 0.5 * (1 + np.tanh(3 * np.sin(2 * np.pi * resp_hz * t64 + resp_phase)))
               + rng.normal(0, 0.3, len(t64)))
        parts["CO2"].append(co2)

        k = np.arange(EPOCH_SECONDS)
        spo2 = spo2_base + rng.normal(0, 0.15, EPOCH_SECONDS)
        if y:
            spo2 -= desat * s * np.sin(np.pi * k / EPOCH_SECONDS) ** 2
        parts["SPO2"].append(spo2)

        white = rng.normal(0, eeg_amp, EPOCH_SECONDS * 128 + len(_EEG_KERNEL) - 1)
        parts["EEG"].append(np.convolve(white, _EEG_KERNEL, mode="valid"))

        white = rng.normal(0, eog_amp, EPOCH_SECONDS * 64 + len(_EOG_KERNEL) - 1)
        parts["EOG"].append(np.convolve(white, _EOG_KERNEL, mode="valid"))

    channels = {m: ChannelSeries(np.concatenate(parts[m]), NATIVE_RATES[m], m)
                for m in MODALITIES}
    return StudyBundle(study_id, channels, labels)


def synth_dataset(num_studies: int, epochs_per_study: int, apnea_rate: float,
                  seed: int, separability: float = 1.0) -> list:
    """Generate synthetic studies; a pure function of (parameters, seed)."""
    if not 0.0 < apnea_rate < 1.0:
        raise ValueError("apnea_rate must be in (0, 1)")
    bundles = []
    for i in range(num_studies):
        rng = make_rng(seed, "synth", i)
        bundles.append(synth_study(f"study_{i:04d}", epochs_per_study,
                                   apnea_rate, separability, rng))
    return bundles


# ---------------------------------------------------------------------------
# preparation (raw bundle -> model-ready 128 Hz bundle)
# ---------------------------------------------------------------------------

def prepare_bundle(bundle: StudyBundle) -> StudyBundle:
    """Resample everything to 128 Hz, band-pass ECG, trim to whole epochs.

    R peaks are extracted from the band-passed ECG and stored as RR-interval
    and R-amplitude step series under ``derived``; the model consumes the
    waveform unless configured otherwise.
    """
    channels = {}
    for name, ch in bundle.channels.items():
        rs = resample(ch, TARGET_HZ)
        if name == "ECG":
            rs = bandpass_ecg(rs)
        channels[name] = rs

    n_epochs = min(min(len(c.samples) // EPOCH_SAMPLES for c in channels.values()),
                   len(bundle.labels))
    keep = n_epochs * EPOCH_SAMPLES
    for name, ch in channels.items():
        channels[name] = ch.replace_samples(ch.samples[:keep].copy())

    peaks = hamilton_rpeaks(channels["ECG"]) if "ECG" in channels else None
    derived = {}
    if peaks is not None:
        derived[DERIVED_RR] = ChannelSeries(rr_step_series(peaks, keep), TARGET_HZ, "ECG")
        derived[DERIVED_AMP] = ChannelSeries(amplitude_step_series(peaks, keep), TARGET_HZ, "ECG")
    return StudyBundle(bundle.study_id, channels, bundle.labels[:n_epochs].copy(), derived)


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

@dataclass
class FoldPlan:
    """Study-level fold assignment; epochs never straddle folds."""

    k: int
    assignment: dict

    def fold_of(self, study_id: str) -> int:
        return self.assignment[study_id]

    def test_ids(self, fold: int) -> list:
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def train_ids(self, fold: int) -> list:
        return sorted(s for s, f in self.assignment.items() if f != fold)

    def to_dict(self) -> dict:
        return {"k": self.k, "assignment": self.assignment}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        return cls(int(d["k"]), dict(d["assignment"]))


def make_folds(study_ids, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffled round-robin assignment; fold sizes differ by at most one."""
    ids = sorted(study_ids)
    if len(ids) < k:
        raise ValueError(f"need at least {k} studies for {k} folds, got {len(ids)}")
    rng = make_rng(seed, "folds")
    perm = [ids[i] for i in rng.permutation(len(ids))]
    return FoldPlan(k, {sid: i % k for i, sid in enumerate(perm)})
