"""Frozen-feature evaluation: chunked feature extraction, MLP probes, metrics, s(m)."""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as mm
from .dsp import CROP_SAMPLES, MelConfig, Waveform, logmel
from .trainer import OptimConfig, OptimState, adamw_step


# ------------------------------------------------------------------ features


def chunk_spectrograms(w: Waveform, mel: MelConfig = MelConfig()) -> np.ndarray:
    """Consecutive 2 s chunks (last one zero-padded) as a [chunks, 200, 80] stack."""
    n = len(w)
    if n == 0:
        raise ValueError("cannot extract features from an empty waveform")
    n_chunks = -(-n // CROP_SAMPLES)
    padded = np.zeros(n_chunks * CROP_SAMPLES)
    padded[:n] = w.samples
    return np.stack([logmel(Waveform(c, w.sample_rate), mel)
                     for c in padded.reshape(n_chunks, CROP_SAMPLES)])


def extract_features(params, cfg: mm.ModelConfig, w: Waveform, mel: MelConfig = MelConfig()) -> np.ndarray:
    """Mean over patch tokens (cls excluded) of the unmasked encoder, then mean over chunks."""
    z = mm.encode_unmasked(params, cfg, chunk_spectrograms(w, mel))
    return z[:, 1:].mean(axis=1).mean(axis=0)


class FeatureExtractor:
    """Feature extraction with a per-instance cache keyed on the waveform content."""

    def __init__(self, params, cfg: mm.ModelConfig, mel: MelConfig = MelConfig(), threads: int = 1):
        self.params, self.cfg, self.mel = params, cfg, mel
        self.threads = max(1, threads)
        self._cache: dict[str, np.ndarray] = {}
        self.hits = 0

    @staticmethod
    def _key(w: Waveform) -> str:
        h = hashlib.sha1(np.ascontiguousarray(w.samples).tobytes())
        h.update(str(w.sample_rate).encode())
        return h.hexdigest()

    def __call__(self, w: Waveform) -> np.ndarray:
        key = self._key(w)
        if key in self._cache:
            self.hits += 1
        else:
            self._cache[key] = extract_features(self.params, self.cfg, w, self.mel)
        return self._cache[key].copy()

    def many(self, waves: Sequence[Waveform]) -> np.ndarray:
        """Stack of features; clips are independent so the thread count cannot change the result."""
        if self.threads == 1:
            return np.stack([self(w) for w in waves])
        with ThreadPoolExecutor(self.threads) as pool:
            return np.stack(list(pool.map(self, waves)))


# --------------------------------------------------------------------- probe


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 1024
    lr_grid: tuple[float, ...] = (1e-3, 3.2e-4, 1e-4)
    epochs: int = 200
    batch_size: int = 256
    loss_mode: str = "softmax"  # or "bce" for multi-label
    weight_decay: float = 1e-4
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.loss_mode not in ("softmax", "bce"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")


@dataclass
class Probe:
    params: dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    n_classes: int
    loss_mode: str
    lr: float = 0.0
    val_score: float = float("nan")
    history: list[float] = field(default_factory=list)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def logits(self, features) -> np.ndarray:
        x = (np.asarray(features, dtype=np.float64) - self.mean) / self.std
        return _mlp(self.params, x)[0]

    def predict(self, features) -> np.ndarray:
        z = self.logits(features)
        return z.argmax(1) if self.loss_mode == "softmax" else (z > 0).astype(int)


def probe_param_count(d: int, n_classes: int, hidden: int = 1024) -> int:
    return d * hidden + hidden + hidden * n_classes + n_classes


def _mlp(p, x):
    h = x @ p["w1"] + p["b1"]
    a = np.maximum(h, 0.0)
    return a @ p["w2"] + p["b2"], (x, h, a)


def _loss_grad(p, x, y, mode):
    z, (x, h, a) = _mlp(p, x)
    n = x.shape[0]
    if mode == "softmax":
        z = z - z.max(1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        loss = -logp[np.arange(n), y].mean()
        dz = np.exp(logp)
        dz[np.arange(n), y] -= 1.0
    else:
        loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
        dz = (1.0 / (1.0 + np.exp(-z)) - y) / y.shape[1]
    dz /= n
    g = {"w2": a.T @ dz, "b2": dz.sum(0)}
    dh = (dz @ p["w2"].T) * (h > 0)
    g["w1"] = x.T @ dh
    g["b1"] = dh.sum(0)
    return float(loss), g


def _targets(labels, n_classes, mode):
    labels = np.asarray(labels)
    if mode == "softmax":
        return labels.astype(np.int64)
    if labels.ndim == 1:
        return np.eye(n_classes)[labels]
    return labels.astype(np.float64)


def _split(labels, frac, rng):
    """Stratified train/validation split on the first label column."""
    key = labels if labels.ndim == 1 else labels.argmax(1)
    val = []
    for c in np.unique(key):
        idx = rng.permutation(np.flatnonzero(key == c))
        k = int(round(frac * idx.size)) if idx.size > 1 else 0
        val.extend(idx[:k])
    val = np.sort(np.asarray(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(labels)), val)
    return train, val


def _fit(x, y, n_classes, cfg: ProbeConfig, lr, seed):
    rng = np.random.default_rng(seed)
    d = x.shape[1]
    p = {
        "w1": rng.standard_normal((d, cfg.hidden)) * np.sqrt(2.0 / d),
        "b1": np.zeros(cfg.hidden),
        "w2": rng.standard_normal((cfg.hidden, n_classes)) * np.sqrt(1.0 / cfg.hidden),
        "b2": np.zeros(n_classes),
    }
    oc = OptimConfig(peak_lr=lr, weight_decay=cfg.weight_decay, beta1=0.9, beta2=0.999,
                     epochs=1, warmup_epochs=0)
    state = OptimState.zeros_like(p)
    history = []
    n = x.shape[0]
    bs = min(cfg.batch_size, n)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            loss, g = _loss_grad(p, x[idx], y[idx], cfg.loss_mode)
            adamw_step(p, g, state, lr, oc)
            epoch_loss += loss * idx.size
        history.append(epoch_loss / n)
    return p, history


def train_probe(features, labels, cfg: ProbeConfig = ProbeConfig(), n_classes: int | None = None) -> Probe:
    """One-hidden-layer ReLU MLP on standardized features; lr picked on a held-out split."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.ndim == 1:
        classes = np.unique(labels)
        if classes.size < 2:
            raise ValueError("probe training needs at least two classes")
        n_classes = n_classes or int(labels.max()) + 1
    else:
        n_classes = labels.shape[1]
        if np.all(labels == labels[0]):
            raise ValueError("probe training needs varying labels")
    if x.shape[0] < n_classes:
        raise ValueError("fewer examples than classes")
    rng = np.random.default_rng(cfg.seed)
    tr_idx, va_idx = _split(labels, cfg.val_fraction, rng)
    if va_idx.size == 0:
        va_idx = tr_idx
    mean = x[tr_idx].mean(0)
    std = x[tr_idx].std(0) + 1e-6
    xs = (x - mean) / std
    y = _targets(labels, n_classes, cfg.loss_mode)
    metric = "accuracy" if cfg.loss_mode == "softmax" else "mAP"
    best = None
    for lr in cfg.lr_grid:
        p, hist = _fit(xs[tr_idx], y[tr_idx], n_classes, cfg, lr, cfg.seed)
        probe = Probe(p, mean, std, n_classes, cfg.loss_mode, lr, history=hist)
        score = eval_probe(probe, x[va_idx], labels[va_idx], metric)
        probe.val_score = score
        if best is None or score > best.val_score:
            best = probe
    return best


# ------------------------------------------------------------------- metrics


def accuracy(pred, labels) -> float:
    if np.size(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


def average_precision(scores, relevant) -> float:
    """Mean of precision@k over the ranks k of the relevant items (descending score)."""
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(relevant).astype(bool)
    if not relevant.any():
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = relevant[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def mean_average_precision(scores, targets) -> float:
    """Mean AP over label columns that have at least one positive."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    aps = [average_precision(scores[:, j], targets[:, j]) for j in range(targets.shape[1])
           if targets[:, j].any()]
    return float(np.mean(aps))


def eval_probe(probe: Probe, features, labels, metric: str = "accuracy") -> float:
    labels = np.asarray(labels)
    if metric == "accuracy":
        if labels.ndim != 1:
            raise ValueError("accuracy expects integer class labels")
        return accuracy(probe.predict(features), labels)
    if metric == "mAP":
        targets = np.eye(probe.n_classes)[labels] if labels.ndim == 1 else labels
        return mean_average_precision(probe.logits(features), targets)
    raise ValueError(f"unknown metric {metric!r}")


# ------------------------------------------------------------------- scoring


@dataclass
class ScoreTable:
    models: list[str]
    tasks: list[str]
    values: np.ndarray  # [models, tasks]

    @classmethod
    def from_rows(cls, rows) -> "ScoreTable":
        """Rows of (model, task, metric_value); every (model, task) cell must be present once."""
        models, tasks, cells = [], [], {}
        for m, t, v in rows:
            if (m, t) in cells:
                raise ValueError(f"duplicate score for model {m!r} on task {t!r}")
            cells[(m, t)] = float(v)
            if m not in models:
                models.append(m)
            if t not in tasks:
                tasks.append(t)
        vals = np.full((len(models), len(tasks)), np.nan)
        for (m, t), v in cells.items():
            vals[models.index(m), tasks.index(t)] = v
        return cls(models, tasks, vals)


def aggregate_score(table: ScoreTable) -> dict[str, float]:
    """Per-task min-max normalised metric, averaged over tasks, scaled to [0, 100].

    A task on which every model ties contributes 100 to each model.
    """
    v = np.asarray(table.values, dtype=np.float64)
    if v.shape != (len(table.models), len(table.tasks)):
        raise ValueError("score matrix does not match the model/task lists")
    if np.isnan(v).any():
        r, c = np.argwhere(np.isnan(v))[0]
        raise ValueError(f"missing score for model {table.models[r]!r} on task {table.tasks[c]!r}")
    if len(table.models) < 2:
        raise ValueError("aggregated score needs at least two models")
    lo, hi = v.min(0), v.max(0)
    span = hi - lo
    norm = np.where(span > 0, (v - lo) / np.where(span > 0, span, 1.0), 1.0)
    s = norm.mean(1) * 100.0
    return dict(zip(table.models, s.tolist()))
