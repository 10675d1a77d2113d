"""
Signal ingestion and preprocessing.

Recordings are (C, L) float matrices with a per-sample label stream. The
pipeline is: channel-wise z-score per recording, sliding windows (200
samples, 50 % overlap by default), then a seed-deterministic stratified
train/validation/test split over windows.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InputError, ParameterError, ParseError

ZSCORE_EPS = 1e-8


@dataclass
class Recording:
    """One continuous multi-channel recording.

    ``labels`` is either a single class id for the whole recording or a
    per-sample integer stream of length L.
    """

    samples: np.ndarray
    labels: np.ndarray | int
    subject: int = 0
    trial: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or 0 in self.samples.shape:
            raise InputError(f"recording must be a non-empty (C, L) matrix, got {self.samples.shape}")
        if np.ndim(self.labels) == 0:
            self.labels = np.full(self.length, int(self.labels), dtype=np.int64)
        else:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.length,):
                raise InputError(f"label stream length {self.labels.shape} != {self.length}")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def label(self) -> int:
        """Majority label (smallest id on ties)."""
        return int(np.bincount(self.labels).argmax())


@dataclass
class WindowBatch:
    data: np.ndarray      # (B, C, T)
    labels: np.ndarray    # (B,)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Windows:
    """All windows cut from a recording set, with provenance."""

    data: np.ndarray
    labels: np.ndarray
    recording: np.ndarray
    offset: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "Windows":
        return Windows(self.data[idx], self.labels[idx], self.recording[idx], self.offset[idx])

    def batch(self) -> WindowBatch:
        return WindowBatch(self.data, self.labels)


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def zscore_normalize(rec: Recording) -> Recording:
    """Channel-wise z-score with population std; zero-variance channels map to 0."""
    x = rec.samples
    if x.shape[1] < 2:
        raise InputError("z-score needs more than one sample per channel")
    mu = x.mean(axis=1, keepdims=True)
    sd = np.maximum(x.std(axis=1, keepdims=True), ZSCORE_EPS)
    return Recording((x - mu) / sd, rec.labels.copy(), rec.subject, rec.trial, dict(rec.meta))


def window_offsets(length: int, window: int = 200, overlap: float = 0.5) -> list[int]:
    """Start offsets of the windows cut from a signal of ``length`` samples.

    Windows start every ``window * (1 - overlap)`` samples. A trailing
    partial window is kept (and later zero-padded) only if at least half
    of it is real signal and it reaches samples no earlier window covered.
    """
    if window <= 0:
        raise ParameterError(f"window must be positive, got {window}")
    if not 0.0 <= overlap < 1.0:
        raise ParameterError(f"overlap must be in [0, 1), got {overlap}")
    stride = max(1, int(round(window * (1.0 - overlap))))
    offsets = []
    covered = 0
    start = 0
    while start < length:
        real = min(window, length - start)
        if 2 * real >= window and start + real > covered:
            offsets.append(start)
            covered = start + real
        start += stride
    return offsets


def segment(rec: Recording, window: int = 200, overlap: float = 0.5
            ) -> list[tuple[np.ndarray, int, int]]:
    """Cut ``rec`` into fixed-length windows.

    Returns ``(window_data, label, offset)`` triples; ``window_data`` is
    (C, window), zero-padded when the final window is partial. The label
    is the majority label over the real samples of the window.
    """
    out = []
    for off in window_offsets(rec.length, window, overlap):
        chunk = rec.samples[:, off:off + window]
        lab = rec.labels[off:off + window]
        if chunk.shape[1] < window:
            chunk = np.pad(chunk, ((0, 0), (0, window - chunk.shape[1])))
        out.append((chunk, int(np.bincount(lab).argmax()), off))
    return out


def fit_length(x: np.ndarray, T: int) -> np.ndarray:
    """Crop or zero-pad the last axis to exactly ``T`` samples."""
    L = x.shape[-1]
    if L == T:
        return x
    if L > T:
        return x[..., :T]
    widths = [(0, 0)] * (x.ndim - 1) + [(0, T - L)]
    return np.pad(x, widths)


def make_windows(recordings: Sequence[Recording], window: int = 200, overlap: float = 0.5,
                 normalize: bool = True, dtype=np.float32) -> Windows:
    """Normalize each recording and window the whole set, in recording order."""
    data, labels, rec_ids, offsets = [], [], [], []
    for i, rec in enumerate(recordings):
        r = zscore_normalize(rec) if normalize else rec
        for chunk, lab, off in segment(r, window, overlap):
            data.append(chunk)
            labels.append(lab)
            rec_ids.append(i)
            offsets.append(off)
    if not data:
        raise InputError("no windows could be cut from the recordings")
    return Windows(np.stack(data).astype(dtype), np.asarray(labels, dtype=np.int64),
                   np.asarray(rec_ids, dtype=np.int64), np.asarray(offsets, dtype=np.int64))


def split_indices(labels: np.ndarray, seed: int,
                  fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> DatasetSplit:
    """Stratified, seed-deterministic split of window indices."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        n_val = int(math.floor(n * fractions[1] + 0.5))
        n_test = int(math.floor(n * fractions[2] + 0.5))
        n_train = n - n_val - n_test
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train:n_train + n_val])
        parts[2].extend(idx[n_train + n_val:])
    return DatasetSplit(*(np.sort(np.asarray(p, dtype=np.int64)) for p in parts))


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None
                    ) -> Iterator[np.ndarray]:
    """Index batches over ``n`` items, shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# Synthetic gestures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic gesture generator.

    Class ``k`` bursts at frequency ``f_min * ratio**k`` (cycles/sample,
    kept below a quarter of the sampling rate) on ``active`` contiguous
    channels starting at channel ``k * channel_step``. With ``distractor``
    each recording also carries a burst at another class's frequency on
    channels that are neither its own nor that class's group, so the
    frequency content alone does not identify the class; where it sits does.
    """

    length: int = 200
    f_min: float = 0.04
    f_ratio: float = 1.12
    active: int = 2
    channel_step: int = 1
    distractor: bool = True
    burst_min: int = 120
    burst_max: int = 180
    snr_db: float = 10.0
    amplitude: float = 1.0


def class_frequencies(num_classes: int, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    f = cfg.f_min * cfg.f_ratio ** np.arange(num_classes)
    if f[-1] >= 0.25:
        raise ParameterError("class frequencies exceed a quarter of the sampling rate; "
                             "lower f_min or f_ratio")
    return f


def class_channels(k: int, channels: int, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    n = min(cfg.active, channels)
    return (k * cfg.channel_step + np.arange(n)) % channels


def distractor_starts(k: int, j: int, channels: int, cfg: SynthConfig = SynthConfig()
                      ) -> list[int]:
    """Group start channels allowed for a class-``j`` distractor in a class-``k`` recording."""
    own = set(class_channels(k, channels, cfg).tolist())
    home = int(class_channels(j, channels, cfg)[0])
    n = min(cfg.active, channels)
    return [s for s in range(channels) if s != home
            and own.isdisjoint(((s + np.arange(n)) % channels).tolist())]


def synth_gestures(num_classes: int = 6, channels: int = 8, per_class: int = 200, seed: int = 0,
                   noise: bool = True, cfg: SynthConfig = SynthConfig()) -> list[Recording]:
    """Generate ``per_class`` labelled recordings for each of ``num_classes`` gestures.

    Each recording carries a sinusoid burst (rectangular envelope, random
    phase and onset, per-channel random gain) on the class's active
    channels and, with ``cfg.distractor``, a second burst at another class's
    frequency elsewhere; white noise is added at ``cfg.snr_db`` relative to
    one burst's power. ``Recording.meta`` holds the class burst's parameters
    at top level and every burst under ``"bursts"``.
    """
    if num_classes < 2:
        raise ParameterError("need at least two classes")
    if channels < 1 or per_class < 1:
        raise ParameterError("channels and per_class must be positive")
    freqs = class_frequencies(num_classes, cfg)
    rng = np.random.default_rng(seed)
    sig_power = 0.5 * cfg.amplitude ** 2
    noise_sd = math.sqrt(sig_power / 10 ** (cfg.snr_db / 10.0))
    n = np.arange(cfg.length)
    recs = []
    for i in range(per_class):
        for k in range(num_classes):
            bursts = [(k, class_channels(k, channels, cfg))]
            if cfg.distractor:
                j = int(rng.choice([c for c in range(num_classes) if c != k]))
                starts = distractor_starts(k, j, channels, cfg)
                if starts:
                    s0 = int(rng.choice(starts))
                    n_act = min(cfg.active, channels)
                    bursts.append((j, (s0 + np.arange(n_act)) % channels))
            x = np.zeros((channels, cfg.length))
            meta_bursts = []
            for cls, active in bursts:
                dur = int(rng.integers(cfg.burst_min, cfg.burst_max + 1))
                onset = int(rng.integers(0, cfg.length - dur + 1))
                phase = rng.uniform(0.0, 2 * math.pi, size=len(active))
                gain = rng.uniform(0.7, 1.3, size=len(active))
                env = (n >= onset) & (n < onset + dur)
                for c, ph, a in zip(active, phase, gain):
                    x[c] += cfg.amplitude * a * np.sin(2 * math.pi * freqs[cls] * n + ph) * env
                meta_bursts.append({"cls": cls, "freq": float(freqs[cls]), "onset": onset,
                                    "duration": dur, "channels": active.tolist(),
                                    "phase": phase.tolist(),
                                    "gain": (cfg.amplitude * gain).tolist()})
            nz = rng.standard_normal((channels, cfg.length))
            if noise:
                x = x + noise_sd * nz
            meta = dict(meta_bursts[0], bursts=meta_bursts)
            recs.append(Recording(x, k, subject=0, trial=i * num_classes + k, meta=meta))
    return recs


def burst_energy(amplitude: float, freq: float, phase: float, onset: int, duration: int) -> float:
    """Closed-form energy of ``a sin(2 pi f n + phase)`` over ``n`` in [onset, onset + duration).

    Uses ``sin^2 = (1 - cos 2u) / 2`` and the geometric sum of ``e^{i 2u}``.
    """
    w = 4 * math.pi * freq
    if math.isclose(math.sin(w / 2), 0.0, abs_tol=1e-15):
        s = duration * math.cos(w * onset + 2 * phase)
    else:
        s = (math.sin(duration * w / 2) / math.sin(w / 2)
             * math.cos(w * onset + 2 * phase + (duration - 1) * w / 2))
    return amplitude ** 2 * 0.5 * (duration - s)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    """Expectations applied while loading a CSV recording file."""

    num_classes: int | None = None
    channels: int | None = None


_FIXED = ("subject", "trial", "label")


def save_csv(path: str | Path, recordings: Sequence[Recording]) -> None:
    """Write recordings as ``subject,trial,label,ch0..ch{C-1}``, one sample per row."""
    if not recordings:
        raise InputError("nothing to save")
    C = recordings[0].channels
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(_FIXED) + [f"ch{i}" for i in range(C)])
        for rec in recordings:
            if rec.channels != C:
                raise InputError("all recordings must share the channel count")
            for t in range(rec.length):
                w.writerow([rec.subject, rec.trial, int(rec.labels[t])]
                           + [repr(float(v)) for v in rec.samples[:, t]])


def load_csv(path: str | Path, schema: CsvSchema = CsvSchema()) -> list[Recording]:
    """Read a recording CSV; one :class:`Recording` per (subject, trial) group.

    Groups are returned sorted by (subject, trial). Errors carry the
    1-based line number of the offending row.
    """
    groups: dict[tuple[int, int], tuple[list, list]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        header = [h.strip() for h in header]
        for col in _FIXED:
            if col not in header:
                raise ParseError(f"missing column '{col}'", line=1)
        ch_cols = [h for h in header if h not in _FIXED]
        expected = [f"ch{i}" for i in range(len(ch_cols))]
        if ch_cols != expected or not ch_cols:
            raise ParseError(f"channel columns must be ch0..ch{{C-1}}, got {ch_cols}", line=1)
        if schema.channels is not None and len(ch_cols) != schema.channels:
            raise ParseError(f"expected {schema.channels} channels, found {len(ch_cols)}",
                             line=1)
        pos = {h: i for i, h in enumerate(header)}
        ch_idx = [pos[h] for h in ch_cols]
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", line=line)
            try:
                subject = int(row[pos["subject"]])
                trial = int(row[pos["trial"]])
                label = int(row[pos["label"]])
            except ValueError:
                raise ParseError("subject/trial/label must be integers", line=line) from None
            try:
                values = [float(row[i]) for i in ch_idx]
            except ValueError:
                raise ParseError("non-numeric sample value", line=line) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite sample value", line=line)
            if label < 0 or (schema.num_classes is not None and label >= schema.num_classes):
                raise ParseError(f"label {label} outside [0, {schema.num_classes})", line=line)
            samples, labels = groups.setdefault((subject, trial), ([], []))
            samples.append(values)
            labels.append(label)
    if not groups:
        raise ParseError("no data rows", line=None)
    recs = []
    for (subject, trial) in sorted(groups):
        samples, labels = groups[(subject, trial)]
        recs.append(Recording(np.asarray(samples).T, np.asarray(labels), subject, trial))
    return recs
