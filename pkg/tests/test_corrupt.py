"""Corruption algorithms: omission statistics, SNR calibration, determinism."""

import json

import numpy as np
import pytest

from apneafusion.corrupt import (
    CorruptionSpec,
    ablate_modalities,
    add_awgn,
    corrupt_bundle,
    corrupt_dataset,
    noise_epoch_channels,
    omit_epoch_channels,
    write_corruption_log,
)
from apneafusion.dataio import prepare_bundle, synth_dataset
from apneafusion.rng import make_rng
from apneafusion.sigprep import EPOCH_SAMPLES, MODALITIES


@pytest.fixture(scope="module")
def prepared():
    return [prepare_bundle(b) for b in synth_dataset(3, 6, 0.5, seed=0)]


def _epochs(bundle, modality):
    x = bundle.channels[modality].samples
    return x.reshape(-1, EPOCH_SAMPLES)


class TestOmission:
    def test_ratio_zero_is_identity(self, prepared):
        out, log = omit_epoch_channels(prepared[0], 0.0, seed=1)
        assert log == []
        for m in MODALITIES:
            np.testing.assert_array_equal(out.channels[m].samples,
                                          prepared[0].channels[m].samples)

    def test_ratio_one_zeroes_everything(self, prepared):
        out, log = omit_epoch_channels(prepared[0], 1.0, seed=1)
        for m in MODALITIES:
            np.testing.assert_array_equal(out.channels[m].samples, 0.0)
        assert len(log) == len(prepared[0].labels) * len(MODALITIES)

    def test_fraction_within_binomial_bounds(self):
        bundles = [prepare_bundle(b) for b in synth_dataset(4, 70, 0.5, seed=2)]
        ratio = 0.3
        out, log = corrupt_dataset(bundles, CorruptionSpec("omit", omission_ratio=ratio, seed=3))
        n_triples = sum(len(b.labels) for b in bundles) * len(MODALITIES)
        frac = len(log) / n_triples
        sigma = np.sqrt(ratio * (1 - ratio) / n_triples)
        assert abs(frac - ratio) < 3 * sigma
        # the log matches what was actually zeroed
        zeroed = sum(int(not ep.any()) for b in out for m in MODALITIES
                     for ep in _epochs(b, m))
        assert zeroed == len(log)

    def test_ratio_validated(self, prepared):
        with pytest.raises(ValueError):
            omit_epoch_channels(prepared[0], 1.5, seed=0)


class TestAWGN:
    def test_zero_chance_is_identity(self):
        x = np.random.default_rng(0).standard_normal(EPOCH_SAMPLES)
        out, action = add_awgn(x, 20.0, 0.0, np.random.default_rng(1))
        np.testing.assert_array_equal(out, x)
        assert action is None

    def test_constant_signal_20db_noise_std(self):
        """x == 1 has 0 dB power; 20 dB target means noise std 0.1."""
        x = np.ones(200_000)
        out, action = add_awgn(x, 20.0, 1.0, np.random.default_rng(2))
        assert action == "noise"
        noise = out - x
        assert abs(noise.std() - 0.1) < 0.001

    def test_zero_power_epoch_skipped(self):
        out, action = add_awgn(np.zeros(64), 20.0, 1.0, np.random.default_rng(3))
        np.testing.assert_array_equal(out, 0.0)
        assert action == "skip-zero-power"

    def test_empirical_noise_power_at_0db(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(EPOCH_SAMPLES)
        x /= np.sqrt(np.mean(x ** 2))  # unit power
        out, _ = add_awgn(x, 0.0, 1.0, np.random.default_rng(5))
        p_noise = np.mean((out - x) ** 2)
        assert abs(p_noise - 1.0) < 0.1

    @pytest.mark.parametrize("target", [10.0, 20.0, 30.0, 40.0, 50.0])
    def test_measured_snr_within_half_db(self, target):
        """Mean measured SNR over 200 synthetic epochs within +-0.5 dB."""
        rng = np.random.default_rng(6)
        snrs = []
        for i in range(200):
            x = rng.standard_normal(EPOCH_SAMPLES) * rng.uniform(0.5, 2.0)
            out, _ = add_awgn(x, target, 1.0, make_rng(7, "cal", i))
            p_sig = np.mean(x ** 2)
            p_noise = np.mean((out - x) ** 2)
            snrs.append(10 * np.log10(p_sig / p_noise))
        assert abs(np.mean(snrs) - target) < 0.5


class TestCombined:
    def test_omission_dominates(self, prepared):
        spec = CorruptionSpec("both", omission_ratio=1.0, target_snr_db=0.0, seed=8)
        out, _ = corrupt_bundle(prepared[0], spec)
        for m in MODALITIES:
            np.testing.assert_array_equal(out.channels[m].samples, 0.0)

    def test_all_off_is_identity(self, prepared):
        spec = CorruptionSpec("both", omission_ratio=0.0,
                              noise_occurrence_chance=0.0, seed=9)
        out, log = corrupt_bundle(prepared[0], spec)
        assert log == []
        for m in MODALITIES:
            np.testing.assert_array_equal(out.channels[m].samples,
                                          prepared[0].channels[m].samples)

    def test_fixed_seed_reproducible_bytes(self, prepared):
        spec = CorruptionSpec("both", omission_ratio=0.1, target_snr_db=30.0, seed=10)
        a, log_a = corrupt_bundle(prepared[1], spec)
        b, log_b = corrupt_bundle(prepared[1], spec)
        assert log_a == log_b
        for m in MODALITIES:
            assert a.channels[m].samples.tobytes() == b.channels[m].samples.tobytes()

    def test_seeds_decorrelate_noise(self, prepared):
        clean = prepared[2]
        n1, _ = noise_epoch_channels(clean, 10.0, 1.0, seed=11)
        n2, _ = noise_epoch_channels(clean, 10.0, 1.0, seed=12)
        a = (n1.channels["EEG"].samples - clean.channels["EEG"].samples)[:EPOCH_SAMPLES]
        b = (n2.channels["EEG"].samples - clean.channels["EEG"].samples)[:EPOCH_SAMPLES]
        corr = np.corrcoef(a, b)[0, 1]
        assert abs(corr) < 0.05

    def test_labels_and_derived_preserved(self, prepared):
        spec = CorruptionSpec("both", omission_ratio=0.2, seed=13)
        out, _ = corrupt_bundle(prepared[0], spec)
        np.testing.assert_array_equal(out.labels, prepared[0].labels)
        assert set(out.derived) == set(prepared[0].derived)


class TestAblate:
    def test_zeroes_whole_channels(self, prepared):
        out, log = ablate_modalities(prepared[0], {"EEG", "EOG"})
        np.testing.assert_array_equal(out.channels["EEG"].samples, 0.0)
        np.testing.assert_array_equal(out.channels["EOG"].samples, 0.0)
        np.testing.assert_array_equal(out.channels["ECG"].samples,
                                      prepared[0].channels["ECG"].samples)
        assert {r["modality"] for r in log} == {"EEG", "EOG"}

    def test_unknown_modality_rejected(self, prepared):
        with pytest.raises(ValueError):
            ablate_modalities(prepared[0], {"EMG"})


def test_corruption_log_jsonl(tmp_path, prepared):
    spec = CorruptionSpec("omit", omission_ratio=0.5, seed=14)
    _, log = corrupt_bundle(prepared[0], spec)
    path = tmp_path / "log.jsonl"
    write_corruption_log(log, path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == len(log)
    rec = json.loads(lines[0])
    assert set(rec) == {"study_id", "epoch_index", "modality", "action"}


def test_spec_validation():
    with pytest.raises(ValueError):
        CorruptionSpec(mode="scramble")
    with pytest.raises(ValueError):
        CorruptionSpec(omission_ratio=-0.1)
