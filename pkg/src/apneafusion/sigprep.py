"""Signal conditioning: resampling, epoching, filtering, R-peak extraction.

All model inputs are uniform 128 Hz series cut into 30-second epochs of 3840
samples. ECG is band-passed 3-45 Hz before feature extraction; optional notch
and high-pass ops cover powerline interference and baseline wander. Filters
run forward-backward (zero phase).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

MODALITIES = ("ECG", "EEG", "EOG", "SPO2", "CO2", "RESP")

TARGET_HZ = 128.0
EPOCH_SECONDS = 30
EPOCH_SAMPLES = int(TARGET_HZ) * EPOCH_SECONDS  # 3840


@dataclass
class ChannelSeries:
    """One raw channel: samples at a fixed sampling rate, tagged by modality."""

    samples: np.ndarray
    sampling_rate_hz: float
    modality: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sampling_rate_hz <= 0:
            raise ValueError("sampling rate must be positive")
        if self.samples.ndim != 1:
            raise ValueError("channel samples must be 1-d")
        if not np.isfinite(self.samples).all():
            raise ValueError(f"non-finite samples in channel {self.modality}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sampling_rate_hz

    def replace_samples(self, samples, rate=None) -> "ChannelSeries":
        return ChannelSeries(samples, rate or self.sampling_rate_hz, self.modality)


@dataclass
class RPeakSet:
    """Detected R peaks: strictly increasing sample indices plus amplitudes."""

    indices: np.ndarray
    amplitudes: np.ndarray
    sampling_rate_hz: float = TARGET_HZ

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64)
        if len(self.indices) != len(self.amplitudes):
            raise ValueError("indices and amplitudes differ in length")
        if len(self.indices) > 1 and not (np.diff(self.indices) > 0).all():
            raise ValueError("peak indices must be strictly increasing")

    @property
    def rr_intervals_s(self) -> np.ndarray:
        return np.diff(self.indices) / self.sampling_rate_hz


def resample(series: ChannelSeries, target_hz: float = TARGET_HZ) -> ChannelSeries:
    """Linear interpolation onto a uniform grid spanning the same duration.

    The tail beyond the last source sample (at most one source period) is
    linearly extrapolated from the final segment.
    """
    x = series.samples
    if len(x) == 0:
        raise ValueError("cannot resample an empty channel")
    if series.sampling_rate_hz == target_hz:
        return series.replace_samples(x.copy(), target_hz)
    n_out = int(round(len(x) * target_hz / series.sampling_rate_hz))
    t_src = np.arange(len(x)) / series.sampling_rate_hz
    t_new = np.arange(n_out) / target_hz
    out = np.interp(t_new, t_src, x)
    if len(x) >= 2:
        tail = t_new > t_src[-1]
        if tail.any():
            slope = (x[-1] - x[-2]) * series.sampling_rate_hz
            out[tail] = x[-1] + slope * (t_new[tail] - t_src[-1])
    return series.replace_samples(out, target_hz)


def segment_epochs(series: ChannelSeries, epoch_seconds: int = EPOCH_SECONDS) -> np.ndarray:
    """Split a 128 Hz channel into (n, 3840) epochs; partial tail is dropped."""
    if series.sampling_rate_hz != TARGET_HZ:
        raise ValueError(f"segment_epochs expects {TARGET_HZ:g} Hz input")
    width = int(epoch_seconds * TARGET_HZ)
    n = len(series.samples) // width
    return series.samples[:n * width].reshape(n, width).copy()


def _zero_phase(sos, x: np.ndarray) -> np.ndarray:
    return sps.sosfiltfilt(sos, x)


def bandpass_ecg(series: ChannelSeries, low_hz: float = 3.0,
                 high_hz: float = 45.0, order: int = 4) -> ChannelSeries:
    """Butterworth band-pass, applied forward-backward (zero phase)."""
    nyq = series.sampling_rate_hz / 2.0
    if not 0 < low_hz < high_hz < nyq:
        raise ValueError(f"invalid band ({low_hz}, {high_hz}) for fs={series.sampling_rate_hz}")
    sos = sps.butter(order, [low_hz / nyq, high_hz / nyq], btype="bandpass", output="sos")
    return series.replace_samples(_zero_phase(sos, series.samples))


def notch_filter(series: ChannelSeries, f0_hz: float = 60.0, q: float = 30.0) -> ChannelSeries:
    """Biquad notch at ``f0_hz`` (zero phase); neighbors +-5 Hz pass within 3 dB."""
    nyq = series.sampling_rate_hz / 2.0
    if not 0 < f0_hz < nyq:
        raise ValueError(f"notch frequency {f0_hz} outside (0, {nyq})")
    b, a = sps.iirnotch(f0_hz, q, fs=series.sampling_rate_hz)
    return series.replace_samples(sps.filtfilt(b, a, series.samples))


def highpass_filter(series: ChannelSeries, cutoff_hz: float = 0.5,
                    order: int = 2) -> ChannelSeries:
    """Butterworth high-pass for baseline wander (zero phase)."""
    nyq = series.sampling_rate_hz / 2.0
    if not 0 < cutoff_hz < nyq:
        raise ValueError(f"cutoff {cutoff_hz} outside (0, {nyq})")
    sos = sps.butter(order, cutoff_hz / nyq, btype="highpass", output="sos")
    return series.replace_samples(_zero_phase(sos, series.samples))


# ---------------------------------------------------------------------------
# Hamilton R-peak detection
# ---------------------------------------------------------------------------

_THRESHOLD_COEF = 0.3125   # noise + coef * (peak - noise)
_BUFFER_LEN = 8
_REFRACTORY_S = 0.200
_REFINE_S = 0.025
_ENVELOPE_S = 0.080


def _envelope(x: np.ndarray, fs: float) -> np.ndarray:
    """Rectified derivative smoothed by a centered ~80 ms moving average."""
    deriv = np.gradient(x)
    rect = np.abs(deriv)
    win = max(1, int(round(_ENVELOPE_S * fs)))
    if win % 2 == 0:
        win += 1
    kernel = np.ones(win) / win
    return np.convolve(rect, kernel, mode="same")


def hamilton_rpeaks(series: ChannelSeries) -> RPeakSet:
    """Detect R peaks in a band-passed ECG channel.

    Differentiate, rectify, smooth into an envelope, then accept envelope
    peaks above an adaptive threshold (noise + 0.3125 * (peak - noise) from
    running 8-peak buffers) outside a 200 ms refractory period. Accepted
    peaks are refined to the local signal maximum within +-25 ms. Thresholds
    are built only from envelope statistics, so the detector is invariant to
    amplitude scaling. Signals shorter than 2 s yield an empty set.
    """
    fs = series.sampling_rate_hz
    x = series.samples
    if len(x) < int(2 * fs):
        return RPeakSet(np.array([], dtype=np.int64), np.array([]), fs)

    env = _envelope(x, fs)
    init = env[:int(2 * fs)]
    peak_levels = [float(init.max())]
    noise_levels = [float(init.mean())]
    refractory = int(round(_REFRACTORY_S * fs))
    refine = int(round(_REFINE_S * fs))

    # candidate maxima, de-rippled: one candidate per envelope-window width
    win = max(1, int(round(_ENVELOPE_S * fs)) | 1)
    candidates, _ = sps.find_peaks(env, distance=win)

    accepted: list[int] = []
    last_accept = -refractory
    for i in candidates:
        peak_est = float(np.mean(peak_levels[-_BUFFER_LEN:]))
        noise_est = float(np.mean(noise_levels[-_BUFFER_LEN:]))
        threshold = noise_est + _THRESHOLD_COEF * (peak_est - noise_est)
        if env[i] > threshold and i - last_accept >= refractory:
            lo = max(0, i - refine)
            hi = min(len(x), i + refine + 1)
            idx = lo + int(np.argmax(x[lo:hi]))
            if accepted and idx <= accepted[-1]:
                continue
            accepted.append(idx)
            last_accept = i
            peak_levels.append(float(env[i]))
        else:
            noise_levels.append(float(env[i]))

    idx = np.array(accepted, dtype=np.int64)
    return RPeakSet(idx, x[idx] if len(idx) else np.array([]), fs)


def rr_step_series(peaks: RPeakSet, num_samples: int) -> np.ndarray:
    """Piecewise-constant R-R interval series (seconds) at the peak set's rate.

    Sample t holds the interval of the beat window containing t; the stretch
    before the second peak carries the first interval, the tail carries the
    last. All zeros when fewer than two peaks exist.
    """
    out = np.zeros(num_samples)
    if len(peaks.indices) < 2:
        return out
    rr = peaks.rr_intervals_s
    bounds = peaks.indices[1:]
    start = 0
    for k, b in enumerate(bounds):
        out[start:min(b, num_samples)] = rr[k]
        start = min(b, num_samples)
    out[start:] = rr[-1]
    return out


def amplitude_step_series(peaks: RPeakSet, num_samples: int) -> np.ndarray:
    """Piecewise-constant R amplitude series aligned like ``rr_step_series``."""
    out = np.zeros(num_samples)
    if len(peaks.indices) == 0:
        return out
    start = 0
    for k, b in enumerate(peaks.indices):
        out[start:min(int(b), num_samples)] = peaks.amplitudes[max(k - 1, 0)]
        start = min(int(b), num_samples)
    out[start:] = peaks.amplitudes[-1]
    return out
