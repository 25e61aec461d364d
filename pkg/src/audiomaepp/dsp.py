"""Waveform I/O, 2-second cropping and log-mel spectrogram extraction."""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
CROP_SAMPLES = 2 * SAMPLE_RATE


class AudioFormatError(ValueError):
    """Raised for WAV files outside the supported PCM16 / mono / 16 kHz subset."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be 1-D (mono)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 80
    win_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-5
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not self.win_ms > self.hop_ms > 0:
            raise ValueError("need win_ms > hop_ms > 0")
        if not 0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate / 2:
            raise ValueError("need 0 <= fmin_hz < fmax_hz <= sample_rate/2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.win_length > self.fft_size:
            raise ValueError("window longer than fft_size")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))


# ------------------------------------------------------------------------ io


def load_wav(path) -> Waveform:
    """Read a PCM16 mono 16 kHz WAV file; anything else is rejected, never converted."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: unsupported WAV container or codec ({exc})") from exc
    if channels != 1:
        raise AudioFormatError(f"{path}: mono required, file has {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: 16-bit PCM required, file has {8 * width}-bit samples")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: {SAMPLE_RATE} Hz required, file is {rate} Hz (no resampling)")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def save_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


def write_matrix(path, values) -> None:
    """Flat binary: two little-endian u32 dims, then row-major little-endian f32."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("expected a 2-D array")
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated header")
    rows, cols = struct.unpack("<II", data[:8])
    body = data[8:]
    if len(body) != 4 * rows * cols:
        raise ValueError(f"{path}: expected {rows}x{cols} floats, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)


write_spectrogram = write_matrix
read_spectrogram = read_matrix


# ------------------------------------------------------------------ cropping


def crop_2s(w: Waveform, rng: np.random.Generator) -> Waveform:
    """Random 2-second crop; short clips are right-padded with zeros (no randomness drawn)."""
    n = len(w)
    if n <= CROP_SAMPLES:
        out = np.zeros(CROP_SAMPLES)
        out[:n] = w.samples
        return Waveform(out, w.sample_rate)
    start = int(rng.integers(0, n - CROP_SAMPLES + 1))
    return Waveform(w.samples[start:start + CROP_SAMPLES].copy(), w.sample_rate)


# ------------------------------------------------------------------- log-mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: MelConfig) -> np.ndarray:
    """n_mels + 2 corner frequencies in Hz, equally spaced on the HTK mel scale."""
    pts = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    return mel_to_hz(pts)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters, shape [fft_size//2 + 1, n_mels], unit peak height."""
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    edges = mel_band_edges(cfg)
    lo, mid, hi = edges[:-2], edges[1:-1], edges[2:]
    f = freqs[:, None]
    up = (f - lo) / (mid - lo)
    down = (hi - f) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def _window(cfg: MelConfig) -> np.ndarray:
    # symmetric Hann, centred inside the FFT frame
    win = np.hanning(cfg.win_length)
    padded = np.zeros(cfg.fft_size)
    left = (cfg.fft_size - cfg.win_length) // 2
    padded[left:left + cfg.win_length] = win
    return padded


def power_spectrogram(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    pad = cfg.fft_size // 2
    if x.shape[0] <= pad:
        raise ValueError(
            f"input of {x.shape[0]} samples is shorter than one analysis window after padding"
        )
    hop = cfg.hop_length
    n_frames = max(1, x.shape[0] // hop)
    xp = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(xp, cfg.fft_size)[::hop][:n_frames]
    spec = np.fft.rfft(frames * _window(cfg), axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def logmel(w: Waveform, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Log-mel spectrogram ``[frames, n_mels]``; a 2 s clip gives exactly [200, 80]."""
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"expected {cfg.sample_rate} Hz audio, got {w.sample_rate} Hz")
    if len(w) < 1:
        raise ValueError("empty waveform")
    power = power_spectrogram(w.samples, cfg)
    mel = power @ mel_filterbank(cfg)
    return np.log(mel + cfg.log_floor)
