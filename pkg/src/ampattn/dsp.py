"""Audio I/O, MFCC extraction, fixed-length segmentation and amplitude peaks."""

from __future__ import annotations

import csv
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.fft import dct

PathLike = Union[str, Path]


class WavFormatError(ValueError):
    """Unsupported or malformed WAV data; ``chunk`` names the offending chunk."""

    def __init__(self, chunk: str, message: str):
        super().__init__(f"[{chunk}] {message}")
        self.chunk = chunk


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MfccConfig:
    n_mfcc: int = 40
    n_mels: int = 40
    win_ms: float = 25.0
    hop_ms: float = 10.0
    preemph: float = 0.97
    fft_size: Optional[int] = None
    fmin: float = 20.0
    fmax: Optional[float] = None
    log_floor: float = 1e-10

    def win_samples(self, sample_rate: int) -> int:
        return int(round(self.win_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    def resolved(self, sample_rate: int) -> "MfccConfig":
        """Copy with ``fft_size`` and ``fmax`` filled in and invariants checked."""
        win = self.win_samples(sample_rate)
        fft_size = self.fft_size or 1 << int(np.ceil(np.log2(win)))
        fmax = self.fmax if self.fmax is not None else sample_rate / 2.0
        if self.hop_ms > self.win_ms:
            raise ValueError(f"hop_ms {self.hop_ms} exceeds win_ms {self.win_ms}")
        if fmax > sample_rate / 2.0:
            raise ValueError(f"fmax {fmax} above Nyquist {sample_rate / 2.0}")
        if self.n_mfcc > self.n_mels:
            raise ValueError(f"n_mfcc {self.n_mfcc} exceeds n_mels {self.n_mels}")
        if fft_size < win or fft_size & (fft_size - 1):
            raise ValueError(f"fft_size {fft_size} must be a power of two >= {win}")
        return MfccConfig(self.n_mfcc, self.n_mels, self.win_ms, self.hop_ms, self.preemph,
                          fft_size, self.fmin, fmax, self.log_floor)


@dataclass
class MfccMatrix:
    frames: np.ndarray  # T x n_mfcc
    frame_rate: float


@dataclass
class Segment:
    frames: np.ndarray  # m x n_mfcc
    source_offset: int
    label: Optional[int] = None
    padded: bool = False
    valid_len: int = field(default=0)

    def __post_init__(self):
        if not self.valid_len:
            self.valid_len = self.frames.shape[0]


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------


def load_wav(path: PathLike) -> Waveform:
    """Read PCM int16 or IEEE float32 WAV, mono or stereo, as a mono waveform."""
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise WavFormatError("RIFF", f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(buf):
        cid = buf[pos:pos + 4].decode("latin-1")
        (size,) = struct.unpack_from("<I", buf, pos + 4)
        body = buf[pos + 8: pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(cid, f"chunk truncated ({len(body)} of {size} bytes)")
        if cid == "fmt ":
            if size < 16:
                raise WavFormatError(cid, f"format chunk too short ({size} bytes)")
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", body)
            if tag == 0xFFFE and size >= 26:
                (tag,) = struct.unpack_from("<H", body, 24)
            fmt = (tag, channels, rate, bits)
        elif cid == "data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavFormatError("fmt ", "missing format chunk")
    if data is None:
        raise WavFormatError("data", "missing data chunk")
    tag, channels, rate, bits = fmt
    if tag == 1 and bits == 16:
        x = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 3 and bits == 32:
        x = np.frombuffer(data[: len(data) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError("fmt ", f"unsupported encoding (format tag {tag}, {bits} bits)")
    if channels < 1 or channels > 2:
        raise WavFormatError("fmt ", f"unsupported channel count {channels}")
    x = x[: x.size // channels * channels].reshape(-1, channels).mean(axis=1)
    if x.size == 0:
        raise WavFormatError("data", "no samples")
    return Waveform(np.clip(x, -1.0, 1.0), rate)


def write_wav(path: PathLike, w: Waveform) -> None:
    """Write a mono 16-bit PCM WAV."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# MFCC
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(cfg: MfccConfig, sample_rate: int) -> np.ndarray:
    """Centre frequencies (Hz) of the triangular filters."""
    cfg = cfg.resolved(sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: MfccConfig, sample_rate: int) -> np.ndarray:
    """Triangular HTK-mel filters with unit peak, shape ``[n_mels, fft_size // 2 + 1]``."""
    cfg = cfg.resolved(sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.fft_size // 2 + 1) * sample_rate / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def frame_count(n_samples: int, win: int, hop: int) -> int:
    return 1 + (n_samples - win) // hop


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = frame_count(x.size, win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def log_mel_energies(w: Waveform, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    cfg = cfg.resolved(w.sample_rate)
    win, hop = cfg.win_samples(w.sample_rate), cfg.hop_samples(w.sample_rate)
    if w.samples.size < win:
        raise ValueError(f"waveform has {w.samples.size} samples; at least {win} required")
    x = w.samples
    emph = np.concatenate([x[:1], x[1:] - cfg.preemph * x[:-1]])
    frames = frame_signal(emph, win, hop) * np.hamming(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    energies = power @ mel_filterbank(cfg, w.sample_rate).T
    return np.log(np.maximum(energies, cfg.log_floor))


def compute_mfcc(w: Waveform, cfg: MfccConfig = MfccConfig()) -> MfccMatrix:
    """Pre-emphasis, Hamming framing, power spectrum, mel filterbank, log, orthonormal DCT-II."""
    logmel = log_mel_energies(w, cfg)
    coeffs = dct(logmel, type=2, norm="ortho", axis=1)[:, : cfg.n_mfcc]
    return MfccMatrix(np.ascontiguousarray(coeffs), 1000.0 / cfg.hop_ms)


def segment_mfcc(m: MfccMatrix, seg_len: int = 50, hop: int = 10,
                 label: Optional[int] = None) -> list[Segment]:
    """Cut ``m`` into windows of ``seg_len`` frames starting every ``hop`` frames.

    A matrix shorter than one window yields a single zero-padded segment.
    """
    if seg_len < 1 or hop < 1:
        raise ValueError("seg_len and hop must be >= 1")
    frames = m.frames
    total, dim = frames.shape
    if total < seg_len:
        padded = np.zeros((seg_len, dim))
        padded[:total] = frames
        return [Segment(padded, 0, label, padded=True, valid_len=total)]
    count = 1 + (total - seg_len) // hop
    return [Segment(frames[k * hop: k * hop + seg_len].copy(), k * hop, label)
            for k in range(count)]


def frame_rms(w: Waveform, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Rectangular-window RMS of the raw samples for every MFCC frame."""
    win, hop = cfg.win_samples(w.sample_rate), cfg.hop_samples(w.sample_rate)
    frames = frame_signal(w.samples, win, hop)
    return np.sqrt(np.mean(frames * frames, axis=1))


def amplitude_peak_frame(w: Waveform, cfg: MfccConfig, segment: Segment) -> int:
    """Frame within ``segment`` with the largest windowed RMS; earliest on ties."""
    rms = frame_rms(w, cfg)
    m = segment.frames.shape[0]
    local = np.zeros(m)
    stop = min(segment.source_offset + m, rms.size)
    n = max(0, stop - segment.source_offset)
    local[:n] = rms[segment.source_offset: stop]
    return int(np.argmax(local))


def write_segment_csv(path: PathLike, rows: Sequence[tuple]) -> None:
    """Segment metadata rows ``(utterance_id, offset, padded, label)``."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["utterance_id", "offset", "padded", "label"])
        for uid, offset, padded, label in rows:
            out.writerow([uid, offset, int(bool(padded)), label])
