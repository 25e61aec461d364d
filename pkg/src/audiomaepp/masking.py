"""Random patch masking, visible-token gathering and mask-token restoration."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .patching import TokenSequence


@dataclass(frozen=True)
class MaskSpec:
    n_patches: int
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    mask_ratio: float = 0.8

    def __post_init__(self):
        vis = np.asarray(self.visible_idx, dtype=np.int64)
        msk = np.asarray(self.masked_idx, dtype=np.int64)
        object.__setattr__(self, "visible_idx", vis)
        object.__setattr__(self, "masked_idx", msk)
        both = np.concatenate([vis, msk])
        if both.size != self.n_patches or not np.array_equal(np.sort(both), np.arange(self.n_patches)):
            raise ValueError("visible and masked indices must partition 0..N-1")

    @classmethod
    def all_visible(cls, n_patches: int) -> "MaskSpec":
        """Degenerate spec with nothing masked (feature extraction, tests)."""
        return cls(n_patches, np.arange(n_patches), np.zeros(0, dtype=np.int64), 0.0)

    def to_dict(self) -> dict:
        return {
            "n_patches": int(self.n_patches),
            "mask_ratio": float(self.mask_ratio),
            "visible_idx": self.visible_idx.tolist(),
            "masked_idx": self.masked_idx.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        return cls(d["n_patches"], d["visible_idx"], d["masked_idx"], d["mask_ratio"])


def n_visible(n_patches: int, mask_ratio: float) -> int:
    return int(np.floor((1.0 - mask_ratio) * n_patches + 0.5))


def sample_mask(n_patches: int, mask_ratio: float, rng: np.random.Generator) -> MaskSpec:
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    if n_patches < 2:
        raise ValueError("need at least two patches to mask")
    keep = n_visible(n_patches, mask_ratio)
    if keep == 0 or keep == n_patches:
        raise ValueError(f"mask_ratio {mask_ratio} leaves {keep} of {n_patches} patches visible")
    perm = rng.permutation(n_patches)
    return MaskSpec(n_patches, np.sort(perm[:keep]), np.sort(perm[keep:]), mask_ratio)


def _stack_visible(specs: Sequence[MaskSpec]) -> np.ndarray:
    counts = {s.visible_idx.size for s in specs}
    if len(counts) != 1:
        raise ValueError("all specs in a batch must keep the same number of patches")
    return np.stack([s.visible_idx for s in specs])


def apply_mask(seq: TokenSequence, spec: MaskSpec | Sequence[MaskSpec]) -> TokenSequence:
    """Keep cls (slot 0) and the visible patch tokens, in order.

    For batched tokens ``[B, N+1, d]`` pass one spec per batch row.
    """
    tokens = seq.tokens
    batched = tokens.ndim == 3
    specs = list(spec) if batched else [spec]
    n = specs[0].n_patches
    if tokens.shape[-2] != n + 1:
        raise ValueError(f"expected {n + 1} tokens (cls + patches), got {tokens.shape[-2]}")
    vis = _stack_visible(specs)
    slots = np.concatenate([np.zeros((len(specs), 1), dtype=np.int64), vis + 1], axis=1)
    if not batched:
        return TokenSequence(tokens[slots[0]], seq.positions[slots[0]])
    rows = np.arange(len(specs))[:, None]
    return TokenSequence(tokens[rows, slots], seq.positions[rows, slots])


def restore_with_mask_token(z: TokenSequence | np.ndarray, spec: MaskSpec | Sequence[MaskSpec],
                            mask_token: np.ndarray) -> TokenSequence:
    """Scatter encoded tokens back to their slots and fill the rest with ``mask_token``."""
    tokens = z.tokens if isinstance(z, TokenSequence) else np.asarray(z)
    batched = tokens.ndim == 3
    specs = list(spec) if batched else [spec]
    n = specs[0].n_patches
    vis = _stack_visible(specs)
    if tokens.shape[-2] != vis.shape[1] + 1:
        raise ValueError(f"expected {vis.shape[1] + 1} encoded tokens, got {tokens.shape[-2]}")
    if mask_token.shape != tokens.shape[-1:]:
        raise ValueError("mask token width does not match the encoded tokens")
    t = tokens if batched else tokens[None]
    out = np.empty((t.shape[0], n + 1, t.shape[-1]), dtype=np.result_type(t, mask_token))
    out[:] = mask_token
    out[:, 0] = t[:, 0]
    rows = np.arange(t.shape[0])[:, None]
    out[rows, vis + 1] = t[:, 1:]
    return TokenSequence(out if batched else out[0])


def restore_backward(dout: np.ndarray, specs: Sequence[MaskSpec]):
    """Gradients of restoration w.r.t. the encoded tokens and the mask token (batched)."""
    vis = _stack_visible(specs)
    rows = np.arange(dout.shape[0])[:, None]
    dz = np.concatenate([dout[:, :1], dout[rows, vis + 1]], axis=1)
    keep = np.ones(dout.shape[:2], dtype=bool)
    keep[:, 0] = False
    keep[rows, vis + 1] = False
    dmask = dout[keep].sum(0)
    return dz, dmask
