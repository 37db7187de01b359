"""Controlled degradation: epoch-channel omission and SNR-targeted noise.

Omission zeroes whole (study, epoch, modality) triples independently with the
given probability. Noise injection computes each epoch's average power,
converts to dB, subtracts the target SNR, converts back (10^(dB/10); the
sqrt(power) draw and the 10-50 dB operating range force the standard
conversion), and adds i.i.d. Gaussian samples at that power with probability
``noise_occurrence_chance``. Zero-power epochs skip noise (log10(0)) and are
logged.

Every random draw is keyed on (seed, stage, study, epoch, modality), so
results are byte-reproducible regardless of processing order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataio import StudyBundle
from .rng import make_rng
from .sigprep import EPOCH_SAMPLES, TARGET_HZ

MODES = ("omit", "noise", "both")


@dataclass
class CorruptionSpec:
    mode: str = "omit"
    omission_ratio: float = 0.0
    target_snr_db: float = 30.0
    noise_occurrence_chance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.omission_ratio <= 1.0:
            raise ValueError("omission_ratio must be in [0, 1]")
        if not 0.0 <= self.noise_occurrence_chance <= 1.0:
            raise ValueError("noise_occurrence_chance must be in [0, 1]")


def _check_prepared(bundle: StudyBundle) -> int:
    for name, ch in bundle.channels.items():
        if ch.sampling_rate_hz != TARGET_HZ or len(ch.samples) % EPOCH_SAMPLES:
            raise ValueError(
                f"{bundle.study_id}/{name}: corruption needs prepared 128 Hz epochs")
    return len(bundle.labels)


def _open_unit(rng) -> float:
    # uniform on (0, 1]: ratio 0 never trips `rnd <= ratio`, ratio 1 always does
    return 1.0 - rng.random()


def add_awgn(epoch: np.ndarray, target_snr_db: float,
             noise_occurrence_chance: float, rng: np.random.Generator):
    """Add white Gaussian noise hitting ``target_snr_db``; maybe a no-op.

    Returns (epoch, action) with action in {"noise", "skip-zero-power", None}.
    """
    epoch = np.asarray(epoch, dtype=np.float64)
    if epoch.size == 0:
        raise ValueError("empty epoch")
    power = float(np.mean(epoch ** 2))
    if power == 0.0:
        return epoch.copy(), "skip-zero-power"
    power_db = 10.0 * np.log10(power)
    noise_db = power_db - target_snr_db
    noise_power = 10.0 ** (noise_db / 10.0)
    noise = rng.normal(0.0, np.sqrt(noise_power), epoch.shape)
    if _open_unit(rng) <= noise_occurrence_chance:
        return epoch + noise, "noise"
    return epoch.copy(), None


def omit_epoch_channels(bundle: StudyBundle, omission_ratio: float, seed: int):
    """Zero each (epoch, modality) independently with probability ``ratio``.

    Returns (new bundle, log records).
    """
    if not 0.0 <= omission_ratio <= 1.0:
        raise ValueError("omission_ratio must be in [0, 1]")
    n_epochs = _check_prepared(bundle)
    log = []
    channels = {}
    for name, ch in bundle.channels.items():
        samples = ch.samples.copy()
        for j in range(n_epochs):
            rng = make_rng(seed, "omit", bundle.study_id, j, name)
            if _open_unit(rng) <= omission_ratio:
                samples[j * EPOCH_SAMPLES:(j + 1) * EPOCH_SAMPLES] = 0.0
                log.append({"study_id": bundle.study_id, "epoch_index": j,
                            "modality": name, "action": "omit"})
        channels[name] = ch.replace_samples(samples)
    out = StudyBundle(bundle.study_id, channels, bundle.labels.copy(),
                      dict(bundle.derived))
    return out, log


def noise_epoch_channels(bundle: StudyBundle, target_snr_db: float,
                         noise_occurrence_chance: float, seed: int):
    """Per-epoch-channel AWGN at the target SNR; returns (bundle, log)."""
    n_epochs = _check_prepared(bundle)
    log = []
    channels = {}
    for name, ch in bundle.channels.items():
        samples = ch.samples.copy()
        for j in range(n_epochs):
            rng = make_rng(seed, "noise", bundle.study_id, j, name)
            sl = slice(j * EPOCH_SAMPLES, (j + 1) * EPOCH_SAMPLES)
            noised, action = add_awgn(samples[sl], target_snr_db,
                                      noise_occurrence_chance, rng)
            samples[sl] = noised
            if action is not None:
                record = {"study_id": bundle.study_id, "epoch_index": j,
                          "modality": name, "action": action}
                if action == "noise":
                    record["snr_db"] = target_snr_db
                log.append(record)
        channels[name] = ch.replace_samples(samples)
    out = StudyBundle(bundle.study_id, channels, bundle.labels.copy(),
                      dict(bundle.derived))
    return out, log


def corrupt_bundle(bundle: StudyBundle, spec: CorruptionSpec):
    """Apply the spec'd degradation; noise first, then omission dominates."""
    log = []
    out = bundle
    if spec.mode in ("noise", "both"):
        out, noise_log = noise_epoch_channels(out, spec.target_snr_db,
                                              spec.noise_occurrence_chance, spec.seed)
        log.extend(noise_log)
    if spec.mode in ("omit", "both"):
        out, omit_log = omit_epoch_channels(out, spec.omission_ratio, spec.seed)
        log.extend(omit_log)
    return out, log


def corrupt_dataset(bundles, spec: CorruptionSpec):
    out, log = [], []
    for b in bundles:
        cb, l = corrupt_bundle(b, spec)
        out.append(cb)
        log.extend(l)
    return out, log


def ablate_modalities(bundle: StudyBundle, modalities):
    """Zero whole channels (Q5-style total modality loss); returns (bundle, log)."""
    unknown = set(modalities) - set(bundle.channels)
    if unknown:
        raise ValueError(f"cannot ablate unknown modalities {sorted(unknown)}")
    channels = {}
    log = []
    for name, ch in bundle.channels.items():
        if name in modalities:
            channels[name] = ch.replace_samples(np.zeros_like(ch.samples))
            log.append({"study_id": bundle.study_id, "epoch_index": -1,
                        "modality": name, "action": "ablate"})
        else:
            channels[name] = ch
    return StudyBundle(bundle.study_id, channels, bundle.labels.copy(),
                       dict(bundle.derived)), log


def write_corruption_log(records, path) -> None:
    """JSON-lines log, one record per affected triple."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
