"""Input-corruption masks for masked-reconstruction training.

Two strategies: per-channel alternating masked/unmasked runs with geometric
lengths (mean ``mean_masked_len`` while masked, ``(1-ratio)/ratio *
mean_masked_len`` while unmasked, the M/M/1 occupancy pattern), and the
Bernoulli per-cell baseline. Masks are boolean time x channel matrices,
True = masked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

_MAX_REDRAWS = 8

# Stream tags keep per-purpose RNGs independent for one run seed.
_TRAIN_MASK_TAG = 0xA5
_VAL_MASK_TAG = 0x5A


@dataclass(frozen=True)
class MaskSpec:
    strategy: str = "geometric"  # "geometric" | "bernoulli"
    ratio: float = 0.15
    mean_masked_len: float = 3.0  # geometric strategy only
    seed: int = 0

    def validate(self):
        if self.strategy not in ("geometric", "bernoulli"):
            raise ParameterError(f"unknown masking strategy {self.strategy!r}")
        if not 0.0 < self.ratio < 1.0:
            raise ParameterError(f"masking ratio must lie in (0, 1), got {self.ratio}")
        if self.strategy == "geometric":
            if self.mean_masked_len < 1.0:
                raise ParameterError(f"mean masked run length must be >= 1, got {self.mean_masked_len}")
            if self.mean_unmasked_len < 1.0:
                raise ParameterError(
                    f"derived mean unmasked run length {self.mean_unmasked_len:.3f} < 1; "
                    f"requires ratio <= mean_len/(mean_len+1)"
                )

    @property
    def mean_unmasked_len(self):
        return (1.0 - self.ratio) / self.ratio * self.mean_masked_len


def _force_nonempty(bits, rng, redraw):
    """Redraw rule: an all-unmasked mask would make the loss denominator zero."""
    for _ in range(_MAX_REDRAWS):
        if bits.any():
            return bits
        bits = redraw()
    if not bits.any():
        t = int(rng.integers(bits.shape[0]))
        m = int(rng.integers(bits.shape[1]))
        bits[t, m] = True
    return bits


def _alternating_runs(n_time, start_masked, p_masked, p_unmasked, rng):
    """One channel: masked/unmasked run lengths drawn geometrically (support >= 1)."""
    mean_pair = 1.0 / p_masked + 1.0 / p_unmasked
    lengths = []
    total = 0
    while total < n_time:
        k = max(4, int((n_time - total) / mean_pair) + 4)
        pair = np.empty(2 * k, dtype=np.int64)
        first, second = (p_masked, p_unmasked) if start_masked else (p_unmasked, p_masked)
        pair[0::2] = rng.geometric(first, size=k)
        pair[1::2] = rng.geometric(second, size=k)
        lengths.append(pair)
        total += int(pair.sum())
        # an even run count returns to the starting state, so no flip needed
    lengths = np.concatenate(lengths)
    states = np.arange(lengths.size) % 2 == (0 if start_masked else 1)
    return np.repeat(states, lengths)[:n_time]


def geometric_mask(n_time, n_channels, spec, rng):
    """Alternating masked/unmasked runs, drawn independently per channel.

    The initial state is masked with probability ``spec.ratio`` so the
    expected masked fraction equals the ratio from the first cell; run lengths
    are geometric with support >= 1 and success probability 1/mean, truncating
    the final run at the window edge.
    """
    spec.validate()
    if n_time < 1 or n_channels < 1:
        raise ParameterError(f"mask shape must be positive, got {n_time}x{n_channels}")

    p_masked = 1.0 / spec.mean_masked_len
    p_unmasked = 1.0 / spec.mean_unmasked_len

    def draw():
        bits = np.zeros((n_time, n_channels), dtype=bool)
        for ch in range(n_channels):
            start_masked = bool(rng.random() < spec.ratio)
            bits[:, ch] = _alternating_runs(n_time, start_masked, p_masked, p_unmasked, rng)
        return bits

    return _force_nonempty(draw(), rng, draw)


def bernoulli_mask(n_time, n_channels, ratio, rng):
    """Each cell masked independently with probability ``ratio``."""
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"masking ratio must lie in (0, 1), got {ratio}")
    if n_time < 1 or n_channels < 1:
        raise ParameterError(f"mask shape must be positive, got {n_time}x{n_channels}")

    def draw():
        return rng.random((n_time, n_channels)) < ratio

    return _force_nonempty(draw(), rng, draw)


def make_mask(n_time, n_channels, spec, rng):
    if spec.strategy == "geometric":
        return geometric_mask(n_time, n_channels, spec, rng)
    if spec.strategy == "bernoulli":
        spec.validate()
        return bernoulli_mask(n_time, n_channels, spec.ratio, rng)
    raise ParameterError(f"unknown masking strategy {spec.strategy!r}")


def apply_mask(x, mask):
    """Zero the masked cells; the input array is left untouched."""
    x = np.asarray(x)
    if x.shape != mask.shape:
        raise ParameterError(f"mask shape {mask.shape} does not match input shape {x.shape}")
    out = x.copy()
    out[mask] = 0
    return out


def train_mask_rng(seed, epoch, window_index):
    """Per-window generator for dynamic masking, stable across runs."""
    return np.random.default_rng(np.random.SeedSequence([seed, _TRAIN_MASK_TAG, epoch, window_index]))


def val_mask_rng(seed, window_index):
    """Epoch-independent, so validation losses are comparable across epochs."""
    return np.random.default_rng(np.random.SeedSequence([seed, _VAL_MASK_TAG, window_index]))


def run_lengths(bits):
    """All run lengths in a mask, split by state (masked, unmasked)."""
    bits = np.asarray(bits, dtype=bool)
    masked_runs = []
    unmasked_runs = []
    for ch in range(bits.shape[1]):
        col = bits[:, ch]
        changes = np.flatnonzero(col[1:] != col[:-1])
        bounds = np.concatenate(([0], changes + 1, [col.size]))
        lengths = np.diff(bounds)
        states = col[bounds[:-1]]
        masked_runs.append(lengths[states])
        unmasked_runs.append(lengths[~states])
    return np.concatenate(masked_runs), np.concatenate(unmasked_runs)


def mask_stats(bits):
    """Masked fraction and mean run lengths (masked / unmasked)."""
    bits = np.asarray(bits, dtype=bool)
    masked_runs, unmasked_runs = run_lengths(bits)
    fraction = float(bits.mean())
    mean_masked = float(masked_runs.mean()) if masked_runs.size else 0.0
    mean_unmasked = float(unmasked_runs.mean()) if unmasked_runs.size else 0.0
    return fraction, mean_masked, mean_unmasked
