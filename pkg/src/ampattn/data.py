"""Manifests, fold assignment, synthetic burst corpus, and per-utterance features."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.signal import lfilter

from .dsp import (MfccConfig, Waveform, amplitude_peak_frame, compute_mfcc, frame_count, load_wav,
                  segment_mfcc, write_wav)

log = logging.getLogger(__name__)

PathLike = Union[str, Path]
MANIFEST_HEADER = ["utterance_id", "wav_path", "label", "fold"]


class ManifestError(ValueError):
    """Manifest problems, one message per offending row."""

    def __init__(self, problems: Sequence[str]):
        super().__init__("manifest errors:\n  " + "\n  ".join(problems))
        self.problems = list(problems)


@dataclass
class ManifestEntry:
    utterance_id: str
    wav_path: str
    label: str
    fold: Union[int, str] = "auto"


@dataclass
class Dataset:
    entries: list[ManifestEntry]
    vocabulary: list[str]
    root: Path = field(default_factory=Path)

    @property
    def class_ids(self) -> np.ndarray:
        index = {lab: i for i, lab in enumerate(self.vocabulary)}
        return np.array([index[e.label] for e in self.entries], dtype=int)

    @property
    def folds(self) -> np.ndarray:
        if any(e.fold == "auto" for e in self.entries):
            raise ValueError("dataset still has unassigned ('auto') folds")
        return np.array([int(e.fold) for e in self.entries], dtype=int)

    def wav_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.wav_path)
        return p if p.is_absolute() else self.root / p

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path: PathLike, label_remap: Optional[dict[str, str]] = None,
                  check_files: bool = True) -> Dataset:
    """Parse a ``utterance_id,wav_path,label,fold`` CSV; relative paths resolve against its folder."""
    path = Path(path)
    remap = dict(label_remap or {})
    problems: list[str] = []
    entries: list[ManifestEntry] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != MANIFEST_HEADER:
            raise ManifestError([f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}"])
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            uid = row["utterance_id"].strip()
            label = row["label"].strip()
            fold_raw = row["fold"].strip().lower()
            if uid in seen:
                problems.append(f"line {lineno}: duplicate utterance_id {uid!r}")
            seen.add(uid)
            label = remap.get(label, label)
            if fold_raw in ("", "auto"):
                fold: Union[int, str] = "auto"
            else:
                try:
                    fold = int(fold_raw)
                except ValueError:
                    problems.append(f"line {lineno}: fold {row['fold']!r} is neither an integer nor 'auto'")
                    continue
            entry = ManifestEntry(uid, row["wav_path"].strip(), label, fold)
            wav = Path(entry.wav_path)
            if check_files and not (wav if wav.is_absolute() else path.parent / wav).is_file():
                problems.append(f"line {lineno}: wav file not readable: {entry.wav_path}")
            entries.append(entry)
    labels = {e.label for e in entries}
    for src, dst in remap.items():
        if dst not in labels:
            problems.append(f"remap {src!r} -> {dst!r}: target label never occurs")
    if problems:
        raise ManifestError(problems)
    return Dataset(entries, sorted(labels), path.parent)


def write_manifest(path: PathLike, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(MANIFEST_HEADER)
        for e in entries:
            out.writerow([e.utterance_id, e.wav_path, e.label, e.fold])


def assign_folds(ds: Dataset, k: int, seed: int = 0) -> Dataset:
    """Fill ``auto`` folds by stratified shuffling; explicit folds are kept.

    Each class's auto entries, in seeded random order, go to the fold holding
    the fewest entries of that class (ties: fewest entries overall, then lowest
    fold id), so per-fold class counts differ by at most one.
    """
    if k < 3:
        raise ValueError(f"k={k}: need at least 3 folds for train/val/test")
    if k > len(ds.entries):
        raise ValueError(f"k={k} exceeds the {len(ds.entries)} utterances")
    rng = np.random.default_rng(seed)
    entries = [dataclasses.replace(e) for e in ds.entries]
    totals = np.zeros(k, dtype=int)
    for e in entries:
        if e.fold != "auto":
            totals[int(e.fold) % k] += 1
    for label in ds.vocabulary:
        auto = [i for i, e in enumerate(entries) if e.label == label and e.fold == "auto"]
        counts = np.zeros(k, dtype=int)
        for e in entries:
            if e.label == label and e.fold != "auto":
                counts[int(e.fold) % k] += 1
        for j in rng.permutation(len(auto)):
            target = min(range(k), key=lambda f: (counts[f], totals[f], f))
            entries[auto[j]].fold = target
            counts[target] += 1
            totals[target] += 1
    return Dataset(entries, list(ds.vocabulary), ds.root)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Noise bed plus one loud burst per utterance; class sets the burst gain and spectral tilt.

    ``class_gains`` are burst RMS / noise RMS ratios and ``class_tilts`` spectral
    slopes in dB per octave.  When omitted, classes are laid out on a grid of
    gains (6 to 16 times the noise floor) times tilts (-6 or +6 dB/oct).
    """

    n_classes: int = 4
    per_class: int = 25
    duration: float = 0.52
    sample_rate: int = 16000
    noise_floor: float = 0.01
    noise_color: float = 0.9
    burst_ms: float = 60.0
    class_gains: Optional[list[float]] = None
    class_tilts: Optional[list[float]] = None
    gain_jitter_db: float = 1.0
    seed: int = 0

    def resolved_classes(self) -> tuple[list[float], list[float]]:
        if self.class_gains is not None and self.class_tilts is not None:
            gains, tilts = list(self.class_gains), list(self.class_tilts)
        else:
            n_gain = max(1, math.ceil(self.n_classes / 2))
            levels = np.geomspace(6.0, 16.0, n_gain) if n_gain > 1 else np.array([10.0])
            gains = [float(levels[c // 2]) for c in range(self.n_classes)]
            tilts = [(-6.0 if c % 2 == 0 else 6.0) for c in range(self.n_classes)]
        if len(gains) != self.n_classes or len(tilts) != self.n_classes:
            raise ValueError("class_gains/class_tilts must list one value per class")
        pairs = list(zip(gains, tilts))
        if len(set(pairs)) != len(pairs):
            raise ValueError("class burst parameters must be pairwise distinct")
        return gains, tilts

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _shaped_noise(rng: np.random.Generator, n: int, sample_rate: int, tilt_db_oct: float) -> np.ndarray:
    spec = rng.normal(size=n // 2 + 1) + 1j * rng.normal(size=n // 2 + 1)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    ref = 1000.0
    shape = np.where(freqs > 0, (np.maximum(freqs, 1.0) / ref) ** (tilt_db_oct / (20 * math.log10(2))), 0.0)
    shape[(freqs < 100.0) | (freqs > 0.45 * sample_rate)] = 0.0
    x = np.fft.irfft(spec * shape, n=n)
    return x / (np.sqrt(np.mean(x * x)) + 1e-12)


def synth_utterance(cfg: SynthConfig, label: int, rng: np.random.Generator
                    ) -> tuple[Waveform, int]:
    """One utterance and its burst centre sample."""
    gains, tilts = cfg.resolved_classes()
    sr = cfg.sample_rate
    n = int(round(cfg.duration * sr))
    bed = lfilter([1.0], [1.0, -cfg.noise_color], rng.normal(size=n))
    bed *= cfg.noise_floor / (np.sqrt(np.mean(bed * bed)) + 1e-12)
    length = min(n, int(round(cfg.burst_ms * sr / 1000.0)))
    start = int(rng.integers(0, n - length + 1))
    jitter = 10 ** (rng.uniform(-cfg.gain_jitter_db, cfg.gain_jitter_db) / 20.0)
    burst = _shaped_noise(rng, length, sr, tilts[label]) * np.hanning(length)
    burst *= gains[label] * jitter * cfg.noise_floor / (np.sqrt(np.mean(burst * burst)) + 1e-12)
    x = bed.copy()
    x[start:start + length] += burst
    return Waveform(np.clip(x, -1.0, 1.0), sr), start + length // 2


def burst_frame(center_sample: int, mfcc: MfccConfig, sample_rate: int, n_samples: int) -> int:
    """MFCC frame whose window centre is nearest ``center_sample``."""
    win, hop = mfcc.win_samples(sample_rate), mfcc.hop_samples(sample_rate)
    total = frame_count(n_samples, win, hop)
    return int(np.clip(round((center_sample - win / 2) / hop), 0, total - 1))


def generate_synthetic(cfg: SynthConfig, out_dir: Optional[PathLike] = None,
                       mfcc: MfccConfig = MfccConfig()) -> tuple[Dataset, list[Waveform], dict[str, tuple[int, int]]]:
    """Generate the corpus; when ``out_dir`` is given also write it to disk.

    Returns the dataset, the waveforms (manifest order) and the ground-truth
    ``{utterance_id: (burst_sample, burst_frame)}`` table.
    """
    gains, _ = cfg.resolved_classes()
    labels = [f"class{c}" for c in range(cfg.n_classes)]
    entries, waves, peaks = [], [], {}
    idx = 0
    for c in range(cfg.n_classes):
        for j in range(cfg.per_class):
            rng = np.random.default_rng([cfg.seed, c, j])
            w, center = synth_utterance(cfg, c, rng)
            uid = f"u{idx:05d}"
            entries.append(ManifestEntry(uid, f"wav/{uid}.wav", labels[c], "auto"))
            waves.append(w)
            peaks[uid] = (center, burst_frame(center, mfcc, cfg.sample_rate, w.samples.size))
            idx += 1
    root = Path(out_dir) if out_dir is not None else Path()
    ds = Dataset(entries, sorted(labels), root)
    if out_dir is not None:
        (root / "wav").mkdir(parents=True, exist_ok=True)
        for e, w in zip(entries, waves):
            write_wav(root / e.wav_path, w)
        write_manifest(root / "manifest.csv", entries)
        with open(root / "ground_truth_peaks.csv", "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["utterance_id", "burst_sample", "burst_frame"])
            for uid, (s, f) in peaks.items():
                out.writerow([uid, s, f])
        (root / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return ds, waves, peaks


def read_ground_truth(path: PathLike) -> dict[str, tuple[int, int]]:
    with open(path, newline="") as fh:
        return {r["utterance_id"]: (int(r["burst_sample"]), int(r["burst_frame"]))
                for r in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# Feature bank
# ---------------------------------------------------------------------------


@dataclass
class FeatureSet:
    """Segments of many utterances, stacked for batching.

    ``utt`` maps every segment to its utterance index; ``peak`` holds the
    amplitude peak frame within each segment.
    """

    X: np.ndarray  # N x m x n_mfcc
    valid_len: np.ndarray  # N
    labels: np.ndarray  # N
    utt: np.ndarray  # N
    offsets: np.ndarray  # N
    peak: np.ndarray  # N
    utt_ids: list[str]
    utt_labels: np.ndarray  # U
    utt_folds: np.ndarray  # U
    n_classes: int
    vocabulary: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, utt_indices: Sequence[int]) -> "FeatureSet":
        """Segments of the listed utterances, re-indexed to ``0..len(utt_indices)-1``."""
        utt_indices = np.asarray(utt_indices, dtype=int)
        remap = -np.ones(len(self.utt_ids), dtype=int)
        remap[utt_indices] = np.arange(utt_indices.size)
        sel = np.flatnonzero(remap[self.utt] >= 0)
        return FeatureSet(self.X[sel], self.valid_len[sel], self.labels[sel], remap[self.utt[sel]],
                          self.offsets[sel], self.peak[sel], [self.utt_ids[i] for i in utt_indices],
                          self.utt_labels[utt_indices], self.utt_folds[utt_indices], self.n_classes,
                          list(self.vocabulary))

    def fold_indices(self, folds: Sequence[int]) -> np.ndarray:
        return np.flatnonzero(np.isin(self.utt_folds, list(folds)))


def build_features(ds: Dataset, waves: Optional[Sequence[Waveform]] = None,
                   mfcc: MfccConfig = MfccConfig(), seg_len: int = 50, hop: int = 10) -> FeatureSet:
    """MFCCs, segments and amplitude peaks for every utterance in ``ds``."""
    labels = ds.class_ids
    try:
        folds = ds.folds
    except ValueError:
        folds = -np.ones(len(ds), dtype=int)
    xs, vl, lab, utt, off, peak = [], [], [], [], [], []
    for i, e in enumerate(ds.entries):
        w = waves[i] if waves is not None else load_wav(ds.wav_path(e))
        segs = segment_mfcc(compute_mfcc(w, mfcc), seg_len, hop, int(labels[i]))
        for s in segs:
            xs.append(s.frames)
            vl.append(s.valid_len)
            lab.append(labels[i])
            utt.append(i)
            off.append(s.source_offset)
            peak.append(amplitude_peak_frame(w, mfcc, s))
    return FeatureSet(np.stack(xs), np.array(vl), np.array(lab), np.array(utt), np.array(off),
                      np.array(peak), [e.utterance_id for e in ds.entries], labels, folds,
                      len(ds.vocabulary), list(ds.vocabulary))
