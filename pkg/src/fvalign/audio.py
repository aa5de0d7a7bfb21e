"""WAV parsing, log-mel analysis and fixed-length windowing for the speech encoder."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10


@dataclass
class WavAudio:
    sample_rate: int
    samples: np.ndarray

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, n_mels)
    frame_hop_ms: float = 10.0
    frame_len_ms: float = 25.0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class WindowSpec:
    window_ms: float = 800.0
    overlap_fraction: float = 0.5

    def __post_init__(self):
        if self.window_ms <= 0:
            raise ValueError(f"window_ms must be positive, got {self.window_ms}")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError(f"overlap_fraction must be in [0, 1), got {self.overlap_fraction}")


def read_wav(data: bytes) -> WavAudio:
    """Decode a RIFF/WAVE PCM16 mono 16 kHz file.

    Samples are scaled by 1/32768. Each violated precondition raises a
    :class:`DataError` naming the offending field.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DataError("magic: expected RIFF/WAVE header")
    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise DataError(f"truncated: chunk {cid!r} declares {size} bytes, {len(body)} present")
        if cid == b"fmt ":
            if size < 16:
                raise DataError("fmt: chunk shorter than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise DataError("fmt: missing fmt chunk")
    if payload is None:
        raise DataError("data: missing data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1:
        raise DataError(f"format: expected PCM (1), got {audio_format}")
    if bits != 16:
        raise DataError(f"bits: expected 16, got {bits}")
    if channels != 1:
        raise DataError(f"channels: expected 1, got {channels}")
    if rate != SAMPLE_RATE:
        raise DataError(f"sample_rate: expected {SAMPLE_RATE}, got {rate} (resample before ingestion)")
    if len(payload) % 2:
        raise DataError("data: odd byte count for 16-bit samples")
    samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    return WavAudio(sample_rate=rate, samples=samples)


def write_wav(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> bytes:
    """Encode mono samples in [-1, 1] as PCM16 (values are clipped, then rounded)."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2").tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(pcm), b"WAVE", b"fmt ", 16,
                         1, 1, sample_rate, sample_rate * 2, 2, 16, b"data", len(pcm))
    return header + pcm


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = 40, n_fft: int = 512, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filters with unit peak, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def hann(length: int) -> np.ndarray:
    """Periodic Hann window."""
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def frame_signal(samples: np.ndarray, frame: int, hop: int) -> np.ndarray:
    if len(samples) < frame:
        raise DataError(f"audio has {len(samples)} samples, shorter than one {frame}-sample frame")
    count = (len(samples) - frame) // hop + 1
    idx = np.arange(frame)[None, :] + hop * np.arange(count)[:, None]
    return samples[idx]


def stft_power(samples: np.ndarray, frame: int = 400, hop: int = 160,
               n_fft: int = 512) -> np.ndarray:
    """One-sided power spectrum of Hann-windowed frames, shape (T, n_fft // 2 + 1)."""
    frames = frame_signal(np.asarray(samples, dtype=np.float64), frame, hop) * hann(frame)
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel(audio: WavAudio, frame_len_ms: float = 25.0, hop_ms: float = 10.0,
            n_fft: int = 512, n_mels: int = 40) -> MelSpectrogram:
    """Log mel energies, floored at log(1e-10), with 0 Hz to Nyquist filters."""
    frame = int(round(audio.sample_rate * frame_len_ms / 1000.0))
    hop = int(round(audio.sample_rate * hop_ms / 1000.0))
    if frame > n_fft:
        raise ValueError(f"frame of {frame} samples exceeds n_fft={n_fft}")
    power = stft_power(audio.samples, frame, hop, n_fft)
    energies = power @ mel_filterbank(n_mels, n_fft, audio.sample_rate).T
    return MelSpectrogram(np.log(np.maximum(energies, LOG_FLOOR)), hop_ms, frame_len_ms)


def window_geometry(mel: MelSpectrogram, spec: WindowSpec) -> tuple[int, int]:
    """(frames per window, stride in frames) for a given hop."""
    length = int(round(spec.window_ms / mel.frame_hop_ms))
    stride = max(1, int(round(length * (1.0 - spec.overlap_fraction))))
    return length, stride


def window_utterance(mel: MelSpectrogram, spec: WindowSpec = WindowSpec()) -> list[np.ndarray]:
    """Cut an utterance into overlapping fixed-length windows; a trailing partial window is dropped."""
    length, stride = window_geometry(mel, spec)
    t = mel.n_frames
    if t < length:
        raise DataError(f"utterance has {t} frames, shorter than one {length}-frame window; "
                        "pad or lengthen audio at ingestion")
    count = (t - length) // stride + 1
    return [mel.frames[i * stride:i * stride + length].copy() for i in range(count)]
