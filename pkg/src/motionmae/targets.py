"""Reconstruction targets for masked tokens.

Two kinds: the raw pixel content of each masked cube (space), and the
absolute temporal difference of nearby frames at each masked cube's anchor
frame (time). The time target for the token at temporal slot tau is the
per-pixel |clip[min(ct*tau + gap, T-1)] - clip[ct*tau]| patch, flattened in
(row, col, channel) order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tokenizer import Mask, TokenGrid, patchify

TARGET_KINDS = ("frame", "motion", "both")


@dataclass(frozen=True)
class TargetConfig:
    kind: str = "both"
    gap: int = 1
    normalize_space: bool = False

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"target kind must be one of {TARGET_KINDS}, got {self.kind!r}")
        if self.gap < 1:
            raise ValueError(f"motion gap must be >= 1, got {self.gap}")


@dataclass(frozen=True)
class TargetBundle:
    """Per-masked-token targets; absent heads are None."""

    space: np.ndarray | None
    time: np.ndarray | None
    gap: int
    norm_stats: np.ndarray | None = None  # (M, 2) rows of (mean, std)

    @property
    def num_rows(self) -> int:
        for part in (self.space, self.time):
            if part is not None:
                return part.shape[0]
        return 0


def make_space_target(
    clip: np.ndarray, mask: Mask, grid: TokenGrid, normalize_per_patch: bool = False
) -> tuple[np.ndarray, np.ndarray | None]:
    """Masked tokens' pixel content, optionally standardized per token row."""
    tokens, got = patchify(clip, grid.ct, grid.cp)
    if got != grid:
        raise ValueError(f"clip tokenizes to {got}, mask built for {grid}")
    if mask.bits.shape[0] != grid.num_tokens:
        raise ValueError("mask does not cover the token grid")
    rows = tokens[mask.masked_indices].astype(np.float32)
    if not normalize_per_patch:
        return rows, None
    mean = rows.mean(axis=1, keepdims=True)
    std = np.maximum(rows.std(axis=1, keepdims=True), np.float32(1e-6))
    stats = np.concatenate([mean, std], axis=1)
    return (rows - mean) / std, stats


def difference_video(clip: np.ndarray, gap: int, signed: bool = False) -> np.ndarray:
    """Per-frame temporal difference, clamped at the clip end.

    out[t] = clip[min(t + gap, T-1)] - clip[t], absolute unless signed.
    """
    T = clip.shape[0]
    if not 1 <= gap < T:
        raise ValueError(f"gap must satisfy 1 <= gap < T={T}, got {gap}")
    ahead = np.minimum(np.arange(T) + gap, T - 1)
    diff = clip[ahead] - clip
    return diff if signed else np.abs(diff)


def make_motion_target(
    clip: np.ndarray, mask: Mask, grid: TokenGrid, gap: int, signed: bool = False
) -> np.ndarray:
    """Temporal-difference patches at each masked token's anchor frame."""
    if clip.shape != grid.clip_shape:
        raise ValueError(f"clip {clip.shape} does not match grid {grid.clip_shape}")
    if mask.bits.shape[0] != grid.num_tokens:
        raise ValueError("mask does not cover the token grid")
    diff = difference_video(clip, gap, signed=signed)
    anchors = diff[:: grid.ct]  # frame ct*tau for each temporal slot
    maps = (
        anchors.reshape(grid.gt, grid.gh, grid.cp, grid.gw, grid.cp, grid.channels)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(grid.num_tokens, grid.motion_dim)
    )
    return np.ascontiguousarray(maps[mask.masked_indices], dtype=np.float32)


def make_targets(
    clip: np.ndarray, mask: Mask, grid: TokenGrid, cfg: TargetConfig
) -> TargetBundle:
    """Build whichever targets the configured kind requests."""
    space = stats = time = None
    if cfg.kind in ("frame", "both"):
        space, stats = make_space_target(clip, mask, grid, cfg.normalize_space)
    if cfg.kind in ("motion", "both"):
        time = make_motion_target(clip, mask, grid, cfg.gap)
    return TargetBundle(space=space, time=time, gap=cfg.gap, norm_stats=stats)
