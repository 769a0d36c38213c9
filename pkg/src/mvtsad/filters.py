"""Bandpass filtering and sample-rate reduction for raw recordings.

The bandpass is a total-order-4 Butterworth: a 2nd-order high-pass cascaded
with a 2nd-order low-pass, each designed by bilinear transform with cutoff
prewarping (scipy). Zero-phase mode runs the cascade forward and backward,
cancelling phase and squaring the magnitude response.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import signal

from .errors import ParameterError


@dataclass(frozen=True)
class FilterSpec:
    order: int = 4  # total order; fixed at 4 (2 + 2 cascade)
    low_hz: float = 0.5
    high_hz: float = 50.0
    zero_phase: bool = True

    def validate(self, rate_hz):
        if self.order != 4:
            raise ParameterError(f"only total filter order 4 is supported, got {self.order}")
        nyquist = rate_hz / 2.0
        if not 0.0 < self.low_hz < self.high_hz:
            raise ParameterError(
                f"need 0 < low_hz < high_hz, got low={self.low_hz}, high={self.high_hz}"
            )
        if self.high_hz >= nyquist:
            raise ParameterError(
                f"high_hz {self.high_hz} must stay below the Nyquist frequency {nyquist}"
            )


def bandpass_sos(spec, rate_hz):
    """Second-order sections of the high-pass/low-pass cascade."""
    spec.validate(rate_hz)
    half = spec.order // 2
    hp = signal.butter(half, spec.low_hz, btype="highpass", output="sos", fs=rate_hz)
    lp = signal.butter(half, spec.high_hz, btype="lowpass", output="sos", fs=rate_hz)
    return np.vstack([hp, lp])


def bandpass_array(samples, spec, rate_hz):
    """Filter each column (channel) of a (time, channels) array; length preserved."""
    sos = bandpass_sos(spec, rate_hz)
    samples = np.asarray(samples, dtype=np.float64)
    if spec.zero_phase:
        return signal.sosfiltfilt(sos, samples, axis=0)
    return signal.sosfilt(sos, samples, axis=0)


def butterworth_bandpass(rec, spec):
    """Bandpass a Recording per channel, preserving rate, length, and intervals."""
    filtered = bandpass_array(rec.samples, spec, rec.sampling_rate_hz)
    return replace(rec, samples=filtered)


def resample(rec, target_hz):
    """Reduce the sampling rate; no upsampling.

    Integer ratios decimate directly (the preceding bandpass bounds spectral
    content, acting as the anti-alias filter for targets down to twice its
    upper cutoff); non-integer ratios use linear interpolation on the filtered
    signal. Anomaly intervals are in seconds and stay unchanged.
    """
    rate = rec.sampling_rate_hz
    if target_hz > rate * (1.0 + 1e-9):
        raise ParameterError(f"cannot upsample from {rate} Hz to {target_hz} Hz")
    if target_hz <= 0:
        raise ParameterError(f"target rate must be positive, got {target_hz}")
    if abs(target_hz - rate) <= 1e-9 * rate:
        return replace(rec, samples=rec.samples.copy())
    ratio = rate / target_hz
    if abs(ratio - round(ratio)) < 1e-9:
        out = rec.samples[:: int(round(ratio))]
    else:
        n_in = rec.samples.shape[0]
        last_t = (n_in - 1) / rate
        n_out = int(np.floor(last_t * target_hz)) + 1
        t_out = np.arange(n_out) / target_hz
        t_in = np.arange(n_in) / rate
        out = np.column_stack(
            [np.interp(t_out, t_in, rec.samples[:, ch]) for ch in range(rec.samples.shape[1])]
        )
    return replace(rec, samples=out, sampling_rate_hz=float(target_hz))
