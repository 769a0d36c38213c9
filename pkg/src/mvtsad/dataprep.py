"""Recordings, windowing, splits, normalisation, and the dataset/window formats.

Dataset directories hold one CSV per recording (rows = time points, columns =
channels, header row = channel names) plus a ``<name>.meta.json`` sidecar with
``sampling_rate_hz`` and ``anomaly_intervals``. Windowed data moves through a
binary container (magic ``MVTW``) with a JSON manifest alongside it.

The preprocessing pipeline runs in a fixed order: resample-rate discovery ->
bandpass -> resample -> channel alignment -> windowing -> stratified split ->
normalisation with statistics from the training split only.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, IngestError, ParameterError
from .filters import FilterSpec, butterworth_bandpass, resample

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2
SPLIT_NAMES = {SPLIT_TRAIN: "train", SPLIT_VAL: "val", SPLIT_TEST: "test"}
SPLIT_CODES = {v: k for k, v in SPLIT_NAMES.items()}

WINDOWS_MAGIC = b"MVTW"
WINDOWS_VERSION = 1


@dataclass
class Recording:
    recording_id: str
    samples: np.ndarray  # (time, channels) float64
    sampling_rate_hz: float
    channel_names: list
    anomaly_intervals: list = field(default_factory=list)  # [(start_s, end_s)]

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ParameterError(f"samples must be 2-D (time, channels), got {self.samples.shape}")
        if self.sampling_rate_hz <= 0:
            raise ParameterError(f"sampling rate must be positive, got {self.sampling_rate_hz}")
        if len(self.channel_names) != self.samples.shape[1]:
            raise ParameterError(
                f"{len(self.channel_names)} channel names for {self.samples.shape[1]} channels"
            )
        for start, end in self.anomaly_intervals:
            if not (0.0 <= start < end <= self.duration_s + 1e-9):
                raise ParameterError(
                    f"anomaly interval ({start}, {end}) outside [0, {self.duration_s:.6g}]"
                )

    @property
    def duration_s(self):
        return self.samples.shape[0] / self.sampling_rate_hz


@dataclass
class WindowSet:
    windows: np.ndarray  # (n, time, channels) float32
    labels: np.ndarray  # uint8, 1 = anomalous
    split: np.ndarray  # uint8 split codes
    stats: dict | None = None  # {"mean", "std", "source"} once normalised
    provenance: list = field(default_factory=list)  # per window (recording_id, start index)
    channel_names: list | None = None

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.split = np.asarray(self.split, dtype=np.uint8)
        n = len(self.windows)
        if self.windows.ndim != 3:
            raise ParameterError(f"windows must be 3-D, got shape {self.windows.shape}")
        if len(self.labels) != n or len(self.split) != n:
            raise ParameterError("labels and split must match the window count")

    def subset(self, indices):
        return WindowSet(
            windows=self.windows[indices],
            labels=self.labels[indices],
            split=self.split[indices],
            stats=self.stats,
            provenance=[self.provenance[int(i)] for i in indices] if self.provenance else [],
            channel_names=self.channel_names,
        )


# ---------------------------------------------------------------------------
# windowing and channel alignment
# ---------------------------------------------------------------------------


def extract_windows(rec, window_len, overlap=0.5, label_overlap=0.5):
    """Slice a recording into fixed windows with fractional overlap.

    Returns (windows, labels, starts). A window is anomalous when its time
    span overlaps a single anomaly interval by more than ``label_overlap`` of
    the window duration (strict). The default 50% overlap requires an even
    window length.
    """
    if window_len < 1:
        raise ParameterError(f"window_len must be >= 1, got {window_len}")
    if not 0.0 <= overlap < 1.0:
        raise ParameterError(f"overlap must lie in [0, 1), got {overlap}")
    stride_f = window_len * (1.0 - overlap)
    stride = int(round(stride_f))
    if stride < 1 or abs(stride - stride_f) > 1e-9:
        raise ParameterError(
            f"window_len {window_len} with overlap {overlap} gives non-integer stride {stride_f}"
        )
    n_samples = rec.samples.shape[0]
    if n_samples < window_len:
        warnings.warn(
            f"recording {rec.recording_id} shorter than one window "
            f"({n_samples} < {window_len}); no windows extracted"
        )
        empty = np.empty((0, window_len, rec.samples.shape[1]), dtype=np.float64)
        return empty, np.empty(0, dtype=np.uint8), []

    rate = rec.sampling_rate_hz
    window_dur = window_len / rate
    starts = list(range(0, n_samples - window_len + 1, stride))
    windows = np.stack([rec.samples[s : s + window_len] for s in starts])
    labels = np.zeros(len(starts), dtype=np.uint8)
    for i, s in enumerate(starts):
        w_lo, w_hi = s / rate, (s + window_len) / rate
        for a_lo, a_hi in rec.anomaly_intervals:
            cover = min(w_hi, a_hi) - max(w_lo, a_lo)
            if cover > label_overlap * window_dur:
                labels[i] = 1
                break
    return windows, labels, starts


def align_channels(rec, n_target):
    """Cycle existing channels in order until ``n_target`` channels exist."""
    m = rec.samples.shape[1]
    if m > n_target:
        raise ParameterError(
            f"recording {rec.recording_id} has {m} channels, more than target {n_target}"
        )
    if m == n_target:
        return rec
    idx = [i % m for i in range(n_target)]
    names = [
        rec.channel_names[i % m] if i < m else f"{rec.channel_names[i % m]}#r{i // m}"
        for i in range(n_target)
    ]
    return replace(rec, samples=rec.samples[:, idx], channel_names=names)


# ---------------------------------------------------------------------------
# split and normalisation
# ---------------------------------------------------------------------------


def _apportion(total, shares):
    """Largest-remainder rounding of ``total`` into parts proportional to shares."""
    raw = [s * total for s in shares]
    base = [math.floor(x) for x in raw]
    short = total - sum(base)
    order = sorted(range(len(shares)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def stratified_split(labels, ratios=(0.6, 0.2, 0.2), seed=0, unsupervised=True):
    """Per-label shuffled train/val/test assignment.

    In unsupervised mode anomalous windows never reach the train split: their
    train share is redistributed evenly to val and test, keeping the training
    set normal-only.
    """
    labels = np.asarray(labels)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    split = np.empty(len(labels), dtype=np.uint8)
    for label in sorted(np.unique(labels)):
        idx = np.flatnonzero(labels == label)
        if len(idx) < 3:
            warnings.warn(f"class {label} has only {len(idx)} windows; best-effort assignment")
        idx = idx[rng.permutation(len(idx))]
        if unsupervised and label != 0:
            shares = (0.0, ratios[1] + ratios[0] / 2.0, ratios[2] + ratios[0] / 2.0)
        else:
            shares = tuple(ratios)
        n_train, n_val, n_test = _apportion(len(idx), shares)
        split[idx[:n_train]] = SPLIT_TRAIN
        split[idx[n_train : n_train + n_val]] = SPLIT_VAL
        split[idx[n_train + n_val :]] = SPLIT_TEST
    return split


def normalize(ws, stats_from="train"):
    """Scale the whole set by a scalar mean/std taken from the chosen windows.

    ``stats_from="train"`` (default) avoids leakage by using training-split
    windows only; ``"all"`` reproduces pooling over every window. The std is
    floored at 1e-8 so constant data maps to zeros. Returns a new WindowSet
    with the statistics recorded.
    """
    if stats_from not in ("train", "all"):
        raise ParameterError(f"stats_from must be 'train' or 'all', got {stats_from!r}")
    if stats_from == "train":
        source = ws.windows[ws.split == SPLIT_TRAIN]
    else:
        source = ws.windows
    if source.size == 0:
        raise ParameterError(f"no windows available for stats_from={stats_from!r}")
    mean = float(source.astype(np.float64).mean())
    std = float(source.astype(np.float64).std())
    std = max(std, 1e-8)
    scaled = ((ws.windows.astype(np.float64) - mean) / std).astype(np.float32)
    return WindowSet(
        windows=scaled,
        labels=ws.labels,
        split=ws.split,
        stats={"mean": mean, "std": std, "source": stats_from},
        provenance=ws.provenance,
        channel_names=ws.channel_names,
    )


# ---------------------------------------------------------------------------
# preprocessing pipeline
# ---------------------------------------------------------------------------


def preprocess(
    recordings,
    window_len,
    target_hz=None,
    low_hz=0.5,
    high_hz=50.0,
    order=4,
    zero_phase=True,
    overlap=0.5,
    label_overlap=0.5,
    ratios=(0.6, 0.2, 0.2),
    seed=0,
    unsupervised=True,
    stats_from="train",
):
    """Recordings -> normalised WindowSet, in the fixed pipeline order."""
    if not recordings:
        raise ParameterError("no recordings to preprocess")
    min_rate = min(rec.sampling_rate_hz for rec in recordings)
    target = float(target_hz) if target_hz is not None else min_rate
    n_target = max(rec.samples.shape[1] for rec in recordings)
    spec = FilterSpec(order=order, low_hz=low_hz, high_hz=high_hz, zero_phase=zero_phase)

    all_windows = []
    all_labels = []
    provenance = []
    channel_names = None
    for rec in recordings:
        filtered = butterworth_bandpass(rec, spec)
        res = resample(filtered, target)
        aligned = align_channels(res, n_target)
        if channel_names is None:
            channel_names = aligned.channel_names
        win, lab, starts = extract_windows(aligned, window_len, overlap, label_overlap)
        if len(win):
            all_windows.append(win)
            all_labels.append(lab)
            provenance.extend((rec.recording_id, s) for s in starts)
    if not all_windows:
        raise ParameterError("no recording produced any window")
    windows = np.concatenate(all_windows).astype(np.float32)
    labels = np.concatenate(all_labels)
    split = stratified_split(labels, ratios=ratios, seed=seed, unsupervised=unsupervised)
    ws = WindowSet(
        windows=windows,
        labels=labels,
        split=split,
        provenance=provenance,
        channel_names=channel_names,
    )
    return normalize(ws, stats_from=stats_from)


# ---------------------------------------------------------------------------
# dataset directory format (CSV + JSON sidecar)
# ---------------------------------------------------------------------------


def export_recording(rec, directory):
    """Write ``<id>.csv`` and ``<id>.meta.json``; 17 significant digits round-trip."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{rec.recording_id}.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(rec.channel_names) + "\n")
        for row in rec.samples:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")
    meta = {
        "sampling_rate_hz": rec.sampling_rate_hz,
        "anomaly_intervals": [[float(a), float(b)] for a, b in rec.anomaly_intervals],
    }
    with open(directory / f"{rec.recording_id}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    return csv_path


def _parse_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise IngestError(f"{path}: empty file")
    names = [c.strip() for c in lines[0].split(",")]
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(names):
            raise IngestError(f"{path}:{lineno}: expected {len(names)} columns, got {len(cells)}")
        try:
            row = [float(c) for c in cells]
        except ValueError:
            for col, cell in enumerate(cells, start=1):
                try:
                    float(cell)
                except ValueError:
                    raise IngestError(
                        f"{path}:{lineno}: column {col} ({names[col - 1]}) is not numeric: {cell!r}"
                    ) from None
            raise
        rows.append(row)
    if not rows:
        raise IngestError(f"{path}: no sample rows")
    samples = np.array(rows, dtype=np.float64)
    bad = np.argwhere(~np.isfinite(samples))
    if len(bad):
        r, c = bad[0]
        raise IngestError(
            f"{path}:{int(r) + 2}: column {int(c) + 1} ({names[int(c)]}) is not finite"
        )
    return names, samples


def ingest(directory):
    """Load every recording in a dataset directory, fully validated."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestError(f"{directory} is not a directory")
    csv_paths = sorted(directory.glob("*.csv"))
    if not csv_paths:
        raise IngestError(f"{directory} contains no recording CSVs")
    recordings = []
    for csv_path in csv_paths:
        meta_path = csv_path.with_name(csv_path.stem + ".meta.json")
        if not meta_path.exists():
            raise IngestError(f"missing sidecar {meta_path} for {csv_path}")
        names, samples = _parse_csv(csv_path)
        try:
            with open(meta_path, "r", encoding="utf-8") as fh:
                meta = json.load(fh)
        except ValueError as exc:
            raise IngestError(f"{meta_path}: invalid JSON: {exc}") from None
        rate = meta.get("sampling_rate_hz")
        if not isinstance(rate, (int, float)) or rate <= 0:
            raise IngestError(f"{meta_path}: sampling_rate_hz must be a positive number, got {rate!r}")
        intervals = meta.get("anomaly_intervals", [])
        parsed = []
        for iv in intervals:
            if (
                not isinstance(iv, (list, tuple))
                or len(iv) != 2
                or not all(isinstance(v, (int, float)) for v in iv)
            ):
                raise IngestError(f"{meta_path}: malformed anomaly interval {iv!r}")
            if iv[1] <= iv[0]:
                raise IngestError(f"{meta_path}: interval end {iv[1]} must exceed start {iv[0]}")
            parsed.append((float(iv[0]), float(iv[1])))
        try:
            rec = Recording(
                recording_id=csv_path.stem,
                samples=samples,
                sampling_rate_hz=float(rate),
                channel_names=names,
                anomaly_intervals=parsed,
            )
        except ParameterError as exc:
            raise IngestError(f"{csv_path}: {exc}") from None
        recordings.append(rec)
    return recordings


# ---------------------------------------------------------------------------
# windows container (binary + JSON manifest)
# ---------------------------------------------------------------------------


def _manifest_path(path):
    return Path(str(path) + ".manifest.json")


def save_windows(ws, path, extra_config=None):
    """Write the binary container and its JSON manifest sidecar."""
    n, t, m = ws.windows.shape
    blob = bytearray()
    blob += WINDOWS_MAGIC
    blob += struct.pack("<H", WINDOWS_VERSION)
    blob += struct.pack("<3Q", n, t, m)
    blob += ws.labels.astype(np.uint8).tobytes()
    blob += ws.split.astype(np.uint8).tobytes()
    blob += np.ascontiguousarray(ws.windows, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)
    manifest = {
        "n_windows": n,
        "window_len": t,
        "n_channels": m,
        "stats": ws.stats,
        "channel_names": ws.channel_names,
        "provenance": [[rid, int(s)] for rid, s in ws.provenance],
        "counts": split_class_counts(ws),
    }
    if extra_config is not None:
        manifest["effective_config"] = extra_config
    with open(_manifest_path(path), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_windows(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated windows container while reading {what}", offset=pos)
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != WINDOWS_MAGIC:
        raise FormatError(f"bad magic, expected {WINDOWS_MAGIC!r}", offset=0)
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != WINDOWS_VERSION:
        raise FormatError(f"unsupported windows container version {version}", offset=4)
    n, t, m = struct.unpack("<3Q", take(24, "dimensions"))
    labels = np.frombuffer(take(n, "labels"), dtype=np.uint8).copy()
    split = np.frombuffer(take(n, "split codes"), dtype=np.uint8).copy()
    data = np.frombuffer(take(4 * n * t * m, "window data"), dtype="<f4").reshape(n, t, m).copy()
    if pos != len(buf):
        raise FormatError(f"trailing bytes after window data", offset=pos)
    if not np.all(split <= SPLIT_TEST):
        raise FormatError("invalid split code in container")
    if not np.all(labels <= 1):
        raise FormatError("invalid label byte in container")

    stats = None
    provenance = []
    channel_names = None
    mpath = _manifest_path(path)
    if mpath.exists():
        with open(mpath, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        stats = manifest.get("stats")
        provenance = [(rid, int(s)) for rid, s in manifest.get("provenance", [])]
        channel_names = manifest.get("channel_names")
    else:
        warnings.warn(f"no manifest next to {path}; stats and provenance unavailable")
    return WindowSet(
        windows=data,
        labels=labels,
        split=split,
        stats=stats,
        provenance=provenance,
        channel_names=channel_names,
    )


def split_class_counts(ws):
    """Per-split per-class window counts, e.g. for preprocess output."""
    out = {}
    for code, name in SPLIT_NAMES.items():
        in_split = ws.split == code
        out[name] = {
            "normal": int(np.sum(in_split & (ws.labels == 0))),
            "anomalous": int(np.sum(in_split & (ws.labels == 1))),
        }
    return out
