"""Cube tokenization of clips, sinusoidal position codes, and token masking.

A clip (T, H, W, C) is partitioned into non-overlapping ct x cp x cp cubes;
each cube flattens to one token of dimension ct*cp*cp*C in (frame, row,
col, channel) order. Tokens are indexed (t*gh + h)*gw + w over the
(gt, gh, gw) grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK_STRATEGIES = ("random", "tube", "time_only")


@dataclass(frozen=True)
class TokenGrid:
    """Geometry of the cube partition of one clip."""

    gt: int  # temporal slots
    gh: int  # spatial rows
    gw: int  # spatial cols
    ct: int  # cube frames
    cp: int  # cube pixels per spatial side
    channels: int

    @property
    def num_tokens(self) -> int:
        return self.gt * self.gh * self.gw

    @property
    def token_dim(self) -> int:
        return self.ct * self.cp * self.cp * self.channels

    @property
    def motion_dim(self) -> int:
        return self.cp * self.cp * self.channels

    @property
    def clip_shape(self) -> tuple[int, int, int, int]:
        return (self.gt * self.ct, self.gh * self.cp, self.gw * self.cp, self.channels)


@dataclass(frozen=True)
class Mask:
    """Per-token visibility decision; bits[i] True means token i is hidden."""

    bits: np.ndarray
    ratio: float
    strategy: str
    seed: int

    @property
    def num_masked(self) -> int:
        return int(self.bits.sum())

    @property
    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    @property
    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.bits)


# ---------------------------------------------------------------------------
# Patchify / unpatchify
# ---------------------------------------------------------------------------


def patchify(clip: np.ndarray, ct: int, cp: int) -> tuple[np.ndarray, TokenGrid]:
    """Cut a clip into cube tokens; returns (tokens[N, D], grid)."""
    T, H, W, C = clip.shape
    if T % ct or H % cp or W % cp:
        raise ValueError(f"clip {clip.shape} not divisible by cube ({ct}, {cp}, {cp})")
    grid = TokenGrid(T // ct, H // cp, W // cp, ct, cp, C)
    tokens = (
        clip.reshape(grid.gt, ct, grid.gh, cp, grid.gw, cp, C)
        .transpose(0, 2, 4, 1, 3, 5, 6)
        .reshape(grid.num_tokens, grid.token_dim)
    )
    return np.ascontiguousarray(tokens), grid


def unpatchify(tokens: np.ndarray, grid: TokenGrid) -> np.ndarray:
    """Exact inverse of patchify."""
    if tokens.shape != (grid.num_tokens, grid.token_dim):
        raise ValueError(f"tokens {tokens.shape} do not match grid "
                         f"({grid.num_tokens}, {grid.token_dim})")
    clip = (
        tokens.reshape(grid.gt, grid.gh, grid.gw, grid.ct, grid.cp, grid.cp, grid.channels)
        .transpose(0, 3, 1, 4, 2, 5, 6)
        .reshape(grid.clip_shape)
    )
    return np.ascontiguousarray(clip)


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------


def _axis_sincos(positions: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved sin/cos code over one axis: out[:, 2i] = sin(p * w_i)."""
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    angles = positions[:, None] * freqs[None, :]
    out = np.empty((positions.size, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def sincos_posenc(grid: TokenGrid, embed_dim: int) -> np.ndarray:
    """Fixed 3-axis factorized sin-cos encoding, one row per token.

    embed_dim splits into three equal even parts (t, h, w axes); any
    remainder is zero-padded at the end.
    """
    if embed_dim < 6:
        raise ValueError(f"embed dim {embed_dim} too small for three sin/cos axes")
    part = 2 * (embed_dim // 6)
    tt, hh, ww = np.meshgrid(
        np.arange(grid.gt), np.arange(grid.gh), np.arange(grid.gw), indexing="ij"
    )
    codes = np.concatenate(
        [
            _axis_sincos(tt.reshape(-1).astype(np.float64), part),
            _axis_sincos(hh.reshape(-1).astype(np.float64), part),
            _axis_sincos(ww.reshape(-1).astype(np.float64), part),
        ],
        axis=1,
    )
    if codes.shape[1] < embed_dim:
        pad = np.zeros((grid.num_tokens, embed_dim - codes.shape[1]))
        codes = np.concatenate([codes, pad], axis=1)
    return codes


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------


def sample_mask(grid: TokenGrid, ratio: float, strategy: str, seed: int) -> Mask:
    """Draw a mask; hidden counts follow the floor rule at each strategy's
    granularity (tokens, spatial cells, or temporal slots)."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    if strategy not in MASK_STRATEGIES:
        raise ValueError(f"unknown mask strategy {strategy!r}; "
                         f"choose from {MASK_STRATEGIES}")
    rng = np.random.default_rng(seed)
    n = grid.num_tokens
    bits = np.zeros(n, dtype=bool)
    if strategy == "random":
        k = int(ratio * n)
        bits[rng.permutation(n)[:k]] = True
    elif strategy == "tube":
        cells = grid.gh * grid.gw
        k = int(ratio * cells)
        chosen = rng.permutation(cells)[:k]
        plane = np.zeros(cells, dtype=bool)
        plane[chosen] = True
        bits = np.tile(plane, grid.gt)
    else:  # time_only
        k = min(int(ratio * grid.gt), grid.gt - 1)
        chosen = rng.permutation(grid.gt)[:k]
        grid3 = bits.reshape(grid.gt, grid.gh * grid.gw)
        grid3[chosen] = True
        bits = grid3.reshape(-1)
    return Mask(bits=bits, ratio=ratio, strategy=strategy, seed=seed)


def split_visible(tokens: np.ndarray, mask: Mask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partition tokens into (visible rows, visible indices, masked indices),
    both index lists ascending."""
    if tokens.shape[0] != mask.bits.shape[0]:
        raise ValueError(f"{tokens.shape[0]} tokens but mask covers {mask.bits.shape[0]}")
    vis = mask.visible_indices
    return tokens[vis], vis, mask.masked_indices
