"""Bundled desk-scale audio: an 8-clip pretraining toyset and three probe tasks.

Everything is generated from a seed, so tests and CLI runs share identical data.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import CROP_SAMPLES, SAMPLE_RATE, MelConfig, Waveform, logmel, save_wav

_t = np.arange(CROP_SAMPLES) / SAMPLE_RATE

# pitch classes: A3 upward in semitones
PITCH_CLASSES_HZ = tuple(220.0 * 2 ** (k / 12) for k in range(12))


def _envelope(rng, n=CROP_SAMPLES):
    on = rng.integers(0, n // 4)
    off = rng.integers(3 * n // 4, n)
    env = np.zeros(n)
    env[on:off] = 1.0
    ramp = 400
    env[on:on + ramp] *= np.linspace(0, 1, ramp)
    env[off - ramp:off] *= np.linspace(1, 0, ramp)
    return env


def harmonic_tone(f0, rng, n_harmonics=4, noise=0.01):
    amps = 0.5 ** np.arange(n_harmonics) * rng.uniform(0.6, 1.0, n_harmonics)
    x = sum(a * np.sin(2 * np.pi * f0 * (k + 1) * _t + rng.uniform(0, 2 * np.pi))
            for k, a in enumerate(amps) if f0 * (k + 1) < SAMPLE_RATE / 2)
    x = x * _envelope(rng) * rng.uniform(0.1, 0.4)
    x = x + noise * rng.standard_normal(CROP_SAMPLES)
    return np.clip(x, -1, 1)


def noise_burst(level, rng):
    x = rng.standard_normal(CROP_SAMPLES) * level * _envelope(rng)
    return np.clip(x, -1, 1)


def toyset_waveforms(seed: int = 0, n: int = 8) -> list[Waveform]:
    """Deterministic stationary sounds (2 s each): tones, chords, AM tones, inharmonic combs."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        kind = i % 4
        if kind == 0:
            partials = [(rng.uniform(120, 900) * k, 0.6 ** k) for k in range(1, 5)]
        elif kind == 1:
            partials = [(f * k, 0.6 ** k) for f in (rng.uniform(120, 400), rng.uniform(500, 1500))
                        for k in range(1, 4)]
        elif kind == 2:
            partials = [(rng.uniform(200, 1200) * k, 0.7 ** k) for k in range(1, 4)]
        else:
            partials = [(f, 0.5) for f in rng.uniform(300, 6000, 6)]
        x = sum(a * np.sin(2 * np.pi * f * _t + rng.uniform(0, 2 * np.pi))
                for f, a in partials if f < SAMPLE_RATE / 2)
        if kind == 2:
            x = x * (0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(1.5, 4.0) * _t))
        x = 0.3 * x / np.max(np.abs(x))
        out.append(Waveform(x))
    return out


def toyset(seed: int = 0, n: int = 8, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """[n, 200, 80] float32 log-mel stack."""
    return np.stack([logmel(w, cfg) for w in toyset_waveforms(seed, n)]).astype(np.float32)


@dataclass
class ProbeTask:
    name: str
    waveforms: list[Waveform]
    labels: np.ndarray
    n_classes: int
    ids: list[str]


def pitch_task(n_per_class: int = 20, seed: int = 0, n_classes: int = 6) -> ProbeTask:
    """Semitone class of pure tones with random detune, level, onset and background noise."""
    if not 2 <= n_classes <= len(PITCH_CLASSES_HZ):
        raise ValueError(f"n_classes must lie in 2..{len(PITCH_CLASSES_HZ)}")
    rng = np.random.default_rng([seed, 11])
    freqs = PITCH_CLASSES_HZ[:n_classes]
    waves, labels = [], []
    for c, f in enumerate(freqs):
        for _ in range(n_per_class):
            x = harmonic_tone(f * 2 ** (rng.uniform(-0.3, 0.3) / 12), rng,
                              n_harmonics=1, noise=rng.uniform(0.01, 0.1))
            waves.append(Waveform(x))
            labels.append(c)
    return _shuffled("pitch", waves, labels, n_classes, rng)


def amplitude_task(n_per_class: int = 20, seed: int = 0, n_classes: int = 4) -> ProbeTask:
    """Level class of white-noise bursts."""
    rng = np.random.default_rng([seed, 12])
    levels = np.geomspace(0.01, 0.5, n_classes)
    waves, labels = [], []
    for c, lv in enumerate(levels):
        for _ in range(n_per_class):
            waves.append(Waveform(noise_burst(lv * rng.uniform(0.85, 1.15), rng)))
            labels.append(c)
    return _shuffled("amplitude", waves, labels, n_classes, rng)


def count_task(n_per_class: int = 20, seed: int = 0, max_sources: int = 3) -> ProbeTask:
    """Number of simultaneous tones (1..max_sources)."""
    rng = np.random.default_rng([seed, 13])
    waves, labels = [], []
    for c in range(max_sources):
        for _ in range(n_per_class):
            x = sum(harmonic_tone(rng.uniform(120, 2000), rng, n_harmonics=2) for _ in range(c + 1))
            waves.append(Waveform(np.clip(x, -1, 1)))
            labels.append(c)
    return _shuffled("count", waves, labels, max_sources, rng)


TASKS = {"pitch": pitch_task, "amplitude": amplitude_task, "count": count_task}


def _shuffled(name, waves, labels, n_classes, rng):
    order = rng.permutation(len(waves))
    waves = [waves[i] for i in order]
    labels = np.asarray(labels)[order]
    ids = [f"{name}_{i:04d}" for i in range(len(waves))]
    return ProbeTask(name, waves, labels, n_classes, ids)


def write_task(task: ProbeTask, directory) -> Path:
    """WAV files plus ``labels.csv`` (``id,label``) under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for clip_id, w in zip(task.ids, task.waveforms):
        save_wav(d / f"{clip_id}.wav", w)
    with open(d / "labels.csv", "w") as fh:
        fh.write("id,label\n")
        for clip_id, y in zip(task.ids, task.labels):
            fh.write(f"{clip_id},{int(y)}\n")
    return d


def write_toyset(directory, seed: int = 0, n: int = 8) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, w in enumerate(toyset_waveforms(seed, n)):
        save_wav(d / f"toy_{i:02d}.wav", w)
    return d
