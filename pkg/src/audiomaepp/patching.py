"""Non-overlapping spectrogram patches, patch embedding and fixed 2-D sin-cos tables.

Patch order is time-major: patch ``i`` covers time block ``i // grid_f`` and
frequency block ``i % grid_f``.  Inside a patch, values are flattened
row-major over (time, freq).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np

CLS = -1  # grid sentinel for the cls slot


@dataclass(frozen=True)
class PatchConfig:
    input_t: int = 200
    input_f: int = 80
    patch_t: int = 4
    patch_f: int = 16

    def __post_init__(self):
        if self.input_t % self.patch_t or self.input_f % self.patch_f:
            raise ValueError(
                f"input [{self.input_t} x {self.input_f}] is not divisible into "
                f"[{self.patch_t} x {self.patch_f}] patches"
            )

    @property
    def grid_t(self) -> int:
        return self.input_t // self.patch_t

    @property
    def grid_f(self) -> int:
        return self.input_f // self.patch_f

    @property
    def n_patches(self) -> int:
        return self.grid_t * self.grid_f

    @property
    def patch_dim(self) -> int:
        return self.patch_t * self.patch_f

    def grid_position(self, index: int) -> tuple[int, int]:
        return divmod(int(index), self.grid_f)


class PositionalMode(Enum):
    NONE = "none"
    SINUSOIDAL_2D = "sinusoidal2d"


@dataclass
class TokenSequence:
    """Tokens ``[..., L, d]`` plus slot positions ``[..., L]``.

    Position 0 is the cls slot; patch ``i`` sits at slot ``i + 1``.  These are
    also the positions fed to RoPE.
    """

    tokens: np.ndarray
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.positions is None:
            self.positions = np.broadcast_to(
                np.arange(self.tokens.shape[-2]), self.tokens.shape[:-1]
            ).copy()
        if self.positions.shape != self.tokens.shape[:-1]:
            raise ValueError("positions must match the token sequence length")

    def __len__(self):
        return self.tokens.shape[-2]

    def grid_positions(self, cfg: PatchConfig):
        """(time_idx, freq_idx) per slot of an unbatched sequence, CLS for slot 0."""
        return [CLS if s == 0 else cfg.grid_position(s - 1) for s in np.ravel(self.positions)]


def _check(s, cfg):
    if s.shape[-2:] != (cfg.input_t, cfg.input_f):
        raise ValueError(f"spectrogram shape {s.shape[-2:]} != ({cfg.input_t}, {cfg.input_f})")


def patchify(s, cfg: PatchConfig) -> np.ndarray:
    """``[..., T, F]`` -> ``[..., N, t*f]``."""
    s = np.asarray(s)
    _check(s, cfg)
    lead = s.shape[:-2]
    x = s.reshape(*lead, cfg.grid_t, cfg.patch_t, cfg.grid_f, cfg.patch_f)
    x = np.swapaxes(x, -3, -2)  # [..., gt, gf, pt, pf]
    return x.reshape(*lead, cfg.n_patches, cfg.patch_dim)


def unpatchify(p, cfg: PatchConfig) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    p = np.asarray(p)
    if p.shape[-2:] != (cfg.n_patches, cfg.patch_dim):
        raise ValueError(f"patch array shape {p.shape[-2:]} != ({cfg.n_patches}, {cfg.patch_dim})")
    lead = p.shape[:-2]
    x = p.reshape(*lead, cfg.grid_t, cfg.grid_f, cfg.patch_t, cfg.patch_f)
    x = np.swapaxes(x, -3, -2)
    return x.reshape(*lead, cfg.input_t, cfg.input_f)


def _sincos_1d(pos: np.ndarray, dim: int) -> np.ndarray:
    # interleaved (sin, cos) pairs, frequency base 10000
    omega = 1.0 / 10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    ang = pos[:, None].astype(np.float64) * omega[None, :]
    out = np.empty((pos.shape[0], dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


@lru_cache(maxsize=32)
def _sinusoidal_2d(grid_t: int, grid_f: int, d_model: int) -> np.ndarray:
    half = d_model // 2
    t_idx, f_idx = np.divmod(np.arange(grid_t * grid_f), grid_f)
    table = np.concatenate([_sincos_1d(t_idx, half), _sincos_1d(f_idx, half)], axis=1)
    table.setflags(write=False)
    return table


def sinusoidal_2d(grid_t: int, grid_f: int, d_model: int) -> np.ndarray:
    """Fixed ``[N, d_model]`` table: time sin-cos in the first half, frequency in the second."""
    if d_model % 4:
        raise ValueError(f"d_model must be divisible by 4 for the 2-D table, got {d_model}")
    return _sinusoidal_2d(grid_t, grid_f, d_model)


def embed_patches(p, weight, bias, pos: PositionalMode = PositionalMode.SINUSOIDAL_2D,
                  cfg: PatchConfig | None = None) -> TokenSequence:
    """Linear patch embedding, optionally plus the fixed 2-D sinusoidal table."""
    p = np.asarray(p)
    if p.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ValueError("patch embedding shapes are inconsistent")
    tokens = p @ weight + bias
    if pos is PositionalMode.SINUSOIDAL_2D:
        if cfg is None:
            raise ValueError("sinusoidal embedding needs the patch grid")
        tokens = tokens + sinusoidal_2d(cfg.grid_t, cfg.grid_f, weight.shape[1]).astype(tokens.dtype)
    n = p.shape[-2]
    positions = np.broadcast_to(np.arange(1, n + 1), tokens.shape[:-1]).copy()
    return TokenSequence(tokens, positions)
