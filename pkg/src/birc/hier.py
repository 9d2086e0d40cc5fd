"""Patch decomposition and the multi-level latent model over patch weights.

Level 0 holds one row per patch: the patch's weight-latent delta concatenated
with its positional-encoding latent.  Level 1 (when present) holds group
deltas or the global row; level 2 is the global row of a three-level model.
A patch's weight latent is the sum of its row's delta and all ancestor rows.
Positional-encoding latents are per-patch only (no hierarchy).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .distributions import kl_terms, variance_from_log
from .gradcore import ContractViolation
from .posenc import ConfigError


@dataclass(frozen=True)
class PatchGrid:
    """How a signal tiles into patches and patches into groups."""

    signal_shape: tuple[int, ...]
    patch_shape: tuple[int, ...]
    levels: int = 1
    group_shape: tuple[int, ...] | None = None  # patches per group, per axis

    def __post_init__(self):
        if self.levels not in (1, 2, 3):
            raise ConfigError("levels must be 1, 2 or 3")
        if len(self.signal_shape) != len(self.patch_shape):
            raise ConfigError("patch dimensionality mismatch")
        for s, p in zip(self.signal_shape, self.patch_shape):
            if s % p != 0:
                raise ConfigError(f"signal axis {s} not divisible by patch size {p}")
        if self.levels == 3:
            if self.group_shape is None:
                raise ConfigError("three-level model needs group_shape")
            for c, g in zip(self.patch_counts, self.group_shape):
                if c % g != 0:
                    raise ConfigError(f"patch count {c} not divisible by group factor {g}")

    @property
    def patch_counts(self) -> tuple[int, ...]:
        return tuple(s // p for s, p in zip(self.signal_shape, self.patch_shape))

    @property
    def num_patches(self) -> int:
        return int(np.prod(self.patch_counts))

    @property
    def num_groups(self) -> int:
        if self.levels != 3:
            return 1
        return int(np.prod([c // g for c, g in zip(self.patch_counts, self.group_shape)]))

    def group_of_patch(self) -> np.ndarray:
        """(P,) group index per patch, C-order patch enumeration."""
        if self.levels != 3:
            return np.zeros(self.num_patches, dtype=np.int64)
        counts = self.patch_counts
        gcounts = [c // g for c, g in zip(counts, self.group_shape)]
        idx = np.stack(np.unravel_index(np.arange(self.num_patches), counts), axis=-1)
        gidx = idx // np.asarray(self.group_shape)
        return np.ravel_multi_index(tuple(gidx.T), gcounts).astype(np.int64)

    def level_rows(self) -> list[int]:
        """Row count per level, patch level first."""
        if self.levels == 1:
            return [self.num_patches]
        if self.levels == 2:
            return [self.num_patches, 1]
        return [self.num_patches, self.num_groups, 1]


@dataclass
class LevelState:
    """Factorized posterior/prior for one level's row matrix.

    Posterior arrays are (rows, cols); the prior broadcasts, either (cols,)
    when shared across rows or (rows, cols) when position-specific.
    """

    post_mean: np.ndarray
    post_log_var: np.ndarray
    prior_mean: np.ndarray
    prior_var: np.ndarray

    @property
    def post_var(self) -> np.ndarray:
        return variance_from_log(self.post_log_var)

    def kl_matrix(self) -> np.ndarray:
        """Per-dimension KL in nats, shape (rows, cols)."""
        return np.broadcast_to(
            kl_terms(self.post_mean, self.post_var, self.prior_mean, self.prior_var),
            self.post_mean.shape).copy()


@dataclass
class HierarchyState:
    grid: PatchGrid
    weight_dim: int  # width of the weight-latent slice of level-0 rows
    levels: list[LevelState] = field(default_factory=list)

    def __post_init__(self):
        rows = self.grid.level_rows()
        if len(self.levels) != len(rows):
            raise ContractViolation("level count mismatch")
        for st, r in zip(self.levels, rows):
            if st.post_mean.shape[0] != r:
                raise ContractViolation("level row count mismatch")


def compose_weight_latents(level_values: list, grid: PatchGrid, weight_dim: int):
    """Per-patch weight latents from per-level row values.

    level_values[l]: (..., rows_l, cols_l) Nodes or arrays; returns
    (..., P, weight_dim).  Linear in every level.
    """
    h = level_values[0][..., :weight_dim]
    if grid.levels == 3:
        h = h + gc.take(level_values[1], grid.group_of_patch(), axis=-2)
    if grid.levels >= 2:
        h = h + level_values[-1]  # global row broadcasts over patches
    return h


def split_posenc_latents(level0_values, weight_dim: int):
    """Level-0 rows (..., P, C0) -> per-patch positional latents (..., P, Cz)."""
    return level0_values[..., weight_dim:]


def compose_patch_latent(state: HierarchyState, patch: int | None = None) -> np.ndarray:
    """Posterior-mean weight latent of one patch (or all, when patch=None)."""
    if patch is not None and not (0 <= patch < state.grid.num_patches):
        raise ContractViolation(f"patch index {patch} out of range")
    all_h = compose_weight_latents([lv.post_mean for lv in state.levels],
                                   state.grid, state.weight_dim)
    return all_h if patch is None else all_h[patch]


def hierarchical_kl(state: HierarchyState) -> float:
    """Total KL of the factorized multi-level posterior from its prior, nats.

    Sums exact per-level factor KLs; an upper bound on the marginal KL of the
    composed patch latents.
    """
    return float(sum(np.sum(lv.kl_matrix()) for lv in state.levels))
