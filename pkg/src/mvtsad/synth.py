"""Synthetic EEG-like corpus for desk-scale verification.

Normal segments mix 2-3 alpha-band (8-14 Hz) sinusoids with slowly drifting
per-channel phase plus Gaussian noise. Anomalous segments superimpose a
3-5 Hz spike-wave train (one sharp spike riding a slow wave per cycle) at
2-4x amplitude over a normal background, with the burst span recorded exactly
as the anomaly interval. Each segment yields exactly one window of the
requested length.
"""

from __future__ import annotations

import numpy as np

from .dataprep import Recording
from .errors import ParameterError

NOISE_SIGMA = 0.3


def _normal_signal(n_samples, n_channels, rate_hz, rng):
    t = np.arange(n_samples) / rate_hz
    x = np.zeros((n_samples, n_channels))
    n_tones = int(rng.integers(2, 4))  # 2-3 sinusoids
    freqs = rng.uniform(8.0, 14.0, size=n_tones)
    amps = rng.uniform(0.8, 1.2, size=n_tones)
    for ch in range(n_channels):
        drift_amp = rng.uniform(0.2, 0.6)
        drift_freq = rng.uniform(0.05, 0.3)
        drift_phase = rng.uniform(0.0, 2.0 * np.pi)
        drift = drift_amp * np.sin(2.0 * np.pi * drift_freq * t + drift_phase)
        for f, a in zip(freqs, amps):
            phase0 = rng.uniform(0.0, 2.0 * np.pi)
            x[:, ch] += a * np.sin(2.0 * np.pi * f * t + phase0 + drift)
        x[:, ch] += rng.normal(0.0, NOISE_SIGMA, size=n_samples)
    return x


def _spike_wave(t, freq, phase0):
    """One period: a narrow Gaussian spike riding a full slow-wave cycle."""
    phase = (freq * t + phase0) % 1.0
    spike = np.exp(-0.5 * ((phase - 0.25) / 0.04) ** 2)
    wave = np.sin(2.0 * np.pi * phase)
    return spike + wave


def _anomalous_signal(n_samples, n_channels, rate_hz, rng):
    x = _normal_signal(n_samples, n_channels, rate_hz, rng)
    duration = n_samples / rate_hz
    frac = rng.uniform(0.6, 1.0)
    burst_dur = frac * duration
    start_s = rng.uniform(0.0, duration - burst_dur)
    end_s = start_s + burst_dur

    t = np.arange(n_samples) / rate_hz
    freq = rng.uniform(3.0, 5.0)
    amp = rng.uniform(2.0, 4.0)
    phase0 = rng.uniform(0.0, 1.0)
    train = _spike_wave(t, freq, phase0)
    envelope = np.zeros(n_samples)
    in_burst = (t >= start_s) & (t < end_s)
    envelope[in_burst] = 1.0
    # soften onset/offset over half a cycle to avoid synthetic edge clicks
    ramp = max(1, int(rate_hz / (2.0 * freq)))
    envelope = np.convolve(envelope, np.ones(ramp) / ramp, mode="same")
    for ch in range(n_channels):
        jitter = rng.uniform(0.9, 1.1)
        x[:, ch] += amp * jitter * train * envelope
    return x, (float(start_s), float(end_s))


def synth_generate(n_normal, n_anomalous, window_len, n_channels, rate_hz, seed):
    """Generate labelled recordings, one window's worth of samples each."""
    if n_normal < 0 or n_anomalous < 0:
        raise ParameterError("segment counts must be >= 0")
    if window_len < 2 or n_channels < 1 or rate_hz <= 0:
        raise ParameterError(
            f"invalid synth geometry: window_len={window_len}, channels={n_channels}, rate={rate_hz}"
        )
    rng = np.random.default_rng(seed)
    names = [f"ch{i}" for i in range(n_channels)]
    recordings = []
    for i in range(n_normal):
        recordings.append(
            Recording(
                recording_id=f"normal_{i:05d}",
                samples=_normal_signal(window_len, n_channels, rate_hz, rng),
                sampling_rate_hz=float(rate_hz),
                channel_names=list(names),
            )
        )
    for i in range(n_anomalous):
        samples, interval = _anomalous_signal(window_len, n_channels, rate_hz, rng)
        recordings.append(
            Recording(
                recording_id=f"anomalous_{i:05d}",
                samples=samples,
                sampling_rate_hz=float(rate_hz),
                channel_names=list(names),
                anomaly_intervals=[interval],
            )
        )
    return recordings


def spectral_peak_hz(samples, rate_hz, min_hz=1.0):
    """Periodogram argmax (mean over channels), ignoring near-DC bins."""
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    spectrum = np.abs(np.fft.rfft(samples - samples.mean(axis=0), axis=0)) ** 2
    power = spectrum.mean(axis=1)
    freqs = np.fft.rfftfreq(n, d=1.0 / rate_hz)
    power[freqs < min_hz] = 0.0
    return float(freqs[int(np.argmax(power))])
