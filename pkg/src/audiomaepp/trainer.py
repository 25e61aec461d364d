"""AdamW + warmup/cosine schedule, the pretraining loop and finite-difference checks."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as mm
from .checkpoint import Checkpoint, load_checkpoint, read_manifest, save_checkpoint
from .masking import MaskSpec, sample_mask

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float | None = None
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    batch_size: int = 1024
    epochs: int = 100
    warmup_epochs: int = 10
    steps_per_epoch: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch_size and steps_per_epoch must be positive")

    @property
    def lr(self) -> float:
        """Peak learning rate; defaults to 3e-4 scaled by batch/1024."""
        if self.peak_lr is not None:
            return self.peak_lr
        return 3e-4 * self.batch_size / 1024

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to the peak, then cosine decay to zero at the final step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    peak, w, t = cfg.lr, cfg.warmup_steps, cfg.total_steps
    if step < w:
        return peak * step / w
    if step >= t:
        return 0.0
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (t - w)))


# --------------------------------------------------------------------- AdamW


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params, grads, state: OptimState, lr: float, cfg: OptimConfig,
               decay: Callable[[str, np.ndarray], bool] = mm.is_decayed):
    """One in-place AdamW update with decoupled decay on matrices only."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.weight_decay and decay(name, p):
            p *= 1.0 - lr * cfg.weight_decay
        p -= (lr / c1) * m / (np.sqrt(v / c2) + cfg.eps)
    state.step = t
    return params, state


# ------------------------------------------------------------------ pretrain


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float] = field(default_factory=list)
    model_config: mm.ModelConfig | None = None


def fixed_mask(seed: int, sample_index: int, n_patches: int, ratio: float) -> MaskSpec:
    return sample_mask(n_patches, ratio, np.random.default_rng([seed, sample_index]))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 1_000_003, epoch]).permutation(n)


def _with_input_stats(cfg: mm.ModelConfig, data, resume) -> mm.ModelConfig:
    """Fill unset input standardization from the checkpoint being resumed, else from the data."""
    if cfg.input_mean is not None and cfg.input_std is not None:
        return cfg
    if resume is not None:
        echo = (resume.config if isinstance(resume, Checkpoint) else read_manifest(resume)[0]["config"])
        saved = echo.get("model", {})
        if saved.get("input_mean") is not None:
            return cfg.replace(input_mean=saved["input_mean"], input_std=saved["input_std"])
    x = data.astype(np.float64)
    return cfg.replace(input_mean=float(x.mean()) if cfg.input_mean is None else cfg.input_mean,
                       input_std=float(x.std()) or 1.0 if cfg.input_std is None else cfg.input_std)


def pretrain(dataset, model_cfg: mm.ModelConfig, optim_cfg: OptimConfig, seed: int = 0,
             checkpoint_dir=None, steps: int | None = None, checkpoint_every: int = 0,
             fixed_masks: bool = False, resume=None, log_path=None) -> TrainResult:
    """Masked-reconstruction pretraining on an in-memory stack of spectrograms.

    Batches follow a per-epoch permutation derived from ``seed``; masks come
    from a generator whose state is checkpointed (or, with ``fixed_masks``,
    from ``(seed, sample index)`` so every clip keeps one mask throughout).
    """
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 3 or data.shape[1:] != model_cfg.input_shape:
        raise ValueError(f"dataset must be [n, {model_cfg.input_shape[0]}, {model_cfg.input_shape[1]}]")
    n = data.shape[0]
    model_cfg = _with_input_stats(model_cfg, data, resume)
    bs = min(optim_cfg.batch_size, n)
    spe = optim_cfg.steps_per_epoch
    total = optim_cfg.total_steps if steps is None else steps
    n_patches = model_cfg.patch.n_patches

    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(
            resume, mm.param_shapes(model_cfg))
        params = {k: v.copy() for k, v in ck.params.items()}
        state = OptimState({k: v.copy() for k, v in ck.opt_m.items()},
                           {k: v.copy() for k, v in ck.opt_v.items()}, ck.step)
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
    else:
        params = mm.build_model(model_cfg, np.random.default_rng(seed))
        state = OptimState.zeros_like(params)
        rng = np.random.default_rng([seed, 7])

    config_echo = {"model": model_cfg.to_dict(), "optim": asdict(optim_cfg), "seed": seed,
                   "fixed_masks": fixed_masks}
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)

    def snapshot():
        return Checkpoint(params, state.m, state.v, state.step, config_echo, rng.bit_generator.state)

    log_fh = None
    if log_path is not None:
        new = not Path(log_path).exists() or resume is None
        log_fh = open(log_path, "w" if resume is None else "a", newline="")
        writer = csv.writer(log_fh)
        if new:
            writer.writerow(["step", "epoch", "lr", "loss"])

    losses = []
    try:
        for step in range(state.step, total):
            epoch, k = divmod(step, spe)
            order = _epoch_order(seed, epoch, n)
            idx = order[(k * bs) % n:][:bs]
            if idx.size < bs:
                idx = np.concatenate([idx, order[:bs - idx.size]])
            if fixed_masks:
                specs = [fixed_mask(seed, int(i), n_patches, model_cfg.mask_ratio) for i in idx]
            else:
                specs = [sample_mask(n_patches, model_cfg.mask_ratio, rng) for _ in idx]
            loss, grads = mm.loss_and_grads(params, model_cfg, data[idx], specs)
            lr = lr_at(step, optim_cfg)
            adamw_step(params, grads, state, lr, optim_cfg)
            losses.append(loss)
            if log_fh is not None:
                writer.writerow([step, epoch, f"{lr:.8g}", f"{loss:.8g}"])
            if ckdir is not None and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(ckdir / f"step_{state.step:06d}.ampp", snapshot())
            if step % 50 == 0:
                log.info("step %d lr %.3g loss %.5f", step, lr, loss)
    finally:
        if log_fh is not None:
            log_fh.close()
    final = snapshot()
    if ckdir is not None:
        save_checkpoint(ckdir / "last.ampp", final)
    return TrainResult(final, losses, model_cfg)


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    tolerance: float
    per_tensor: dict[str, float]
    n_coords: int
    inert: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.per_tensor.values())

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance and all(v < 1e-9 for v in self.inert.values())

    def failures(self) -> list[str]:
        return [k for k, v in self.per_tensor.items() if not v < self.tolerance]


def inert_tensors(cfg: mm.ModelConfig, names: Sequence[str]) -> list[str]:
    """Key biases without RoPE: softmax ignores a per-query constant, so their gradient is exactly 0."""
    out = []
    for name in names:
        if name.endswith("attn.bk"):
            rope = cfg.rope_encoder if name.startswith("enc.") else cfg.rope_decoder
            if not rope:
                out.append(name)
    return out


def grad_check(model_cfg: mm.ModelConfig | None = None, tolerance: float = 1e-4, seed: int = 0,
               min_coords: int = 200, step: float = 1e-4, batch: int = 2,
               corrupt: str | None = None) -> GradCheckReport:
    """Compare analytic gradients with float64 central differences.

    Every tensor gets at least two sampled coordinates.  ``corrupt`` names a
    tensor whose analytic gradient is deliberately perturbed (negative control).
    """
    cfg = model_cfg or mm.gradcheck_config()
    rng = np.random.default_rng(seed)
    params = mm.build_model(cfg, rng, dtype=np.float64)
    for k in params:
        params[k] += 0.1 * rng.standard_normal(params[k].shape)
    x = rng.standard_normal((batch, *cfg.input_shape))
    specs = [sample_mask(cfg.patch.n_patches, cfg.mask_ratio, rng) for _ in range(batch)]
    _, grads = mm.loss_and_grads(params, cfg, x, specs)
    if corrupt is not None:
        grads[corrupt] = grads[corrupt] * 1.01 + 1e-3

    inert = set(inert_tensors(cfg, list(params)))
    per = max(2, -(-min_coords // len(params)))
    per_tensor, inert_err, count = {}, {}, 0
    for name, p in params.items():
        worst = 0.0
        flat = p.reshape(-1)
        gflat = grads[name].reshape(-1)
        for j in rng.choice(flat.size, size=min(per, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + step
            lp = mm.batch_loss(params, cfg, x, specs)
            flat[j] = old - step
            lm = mm.batch_loss(params, cfg, x, specs)
            flat[j] = old
            fd = (lp - lm) / (2 * step)
            count += 1
            if name in inert:
                worst = max(worst, abs(gflat[j]), abs(fd))
            else:
                worst = max(worst, abs(gflat[j] - fd) / max(abs(fd), 1e-8))
        (inert_err if name in inert else per_tensor)[name] = worst
    return GradCheckReport(tolerance, per_tensor, count, inert_err)
