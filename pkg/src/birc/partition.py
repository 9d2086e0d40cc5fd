"""Coding-order machinery: stack per-level representations into matrices,
permute them, and cut KL-budgeted blocks.

The permutation is two-stage: one within-row column permutation shared by all
rows, then an independent across-rows permutation per column, so per-row
information content evens out and every parallel row gets the same number of
blocks.  Plans are regenerated from a seed on the decode side and never
serialized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import prng
from .gradcore import ContractViolation

log = logging.getLogger(__name__)

NATS_PER_BIT = float(np.log(2.0))


@dataclass(frozen=True)
class PermutationPlan:
    """kappa: (C,) within-row permutation; alpha: (R, C), column j's
    across-rows permutation in alpha[:, j]."""

    kappa: np.ndarray
    alpha: np.ndarray

    @classmethod
    def from_seed(cls, rows: int, cols: int, key: int, cross_rows: bool = True) -> "PermutationPlan":
        kappa = prng.permutation(cols, prng.derive_key(key, 1))
        if cross_rows and rows > 1:
            alpha = prng.column_permutations(rows, cols, prng.derive_key(key, 2))
        else:
            alpha = np.tile(np.arange(rows, dtype=np.int64)[:, None], (1, cols))
        return cls(kappa, alpha)

    @classmethod
    def identity(cls, rows: int, cols: int) -> "PermutationPlan":
        return cls(np.arange(cols, dtype=np.int64),
                   np.tile(np.arange(rows, dtype=np.int64)[:, None], (1, cols)))


def permute(h: np.ndarray, plan: PermutationPlan) -> np.ndarray:
    """out[i, j] = h[alpha_j(i), kappa(j)]."""
    h = np.asarray(h)
    if h.shape != plan.alpha.shape or plan.kappa.size != h.shape[1]:
        raise ContractViolation("plan shape mismatch")
    return np.take_along_axis(h[:, plan.kappa], plan.alpha, axis=0)


def unpermute(ht: np.ndarray, plan: PermutationPlan) -> np.ndarray:
    """Exact inverse of permute."""
    ht = np.asarray(ht)
    if ht.shape != plan.alpha.shape:
        raise ContractViolation("plan shape mismatch")
    hk = np.empty_like(ht)
    np.put_along_axis(hk, plan.alpha, ht, axis=0)
    out = np.empty_like(ht)
    out[:, plan.kappa] = hk
    return out


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous column runs shared by all rows of a level matrix."""

    lengths: tuple[int, ...]
    kappa_bits: float = 16.0

    def __post_init__(self):
        if any(n < 1 for n in self.lengths):
            raise ContractViolation("blocks must contain at least one dimension")

    @property
    def block_count(self) -> int:
        return len(self.lengths)

    def starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(np.int64)

    def slices(self) -> list[slice]:
        s = self.starts()
        return [slice(int(a), int(a + n)) for a, n in zip(s, self.lengths)]


def cut_blocks(kl_bits: np.ndarray, kappa_bits: float = 16.0) -> BlockPartition:
    """Greedy left-to-right cut on per-dimension KLs (bits), shared row-wise.

    A block closes when admitting the next column would push the running
    row-max cumulative KL past the budget; a column whose own KL already
    exceeds the budget still gets a (singleton) block.
    """
    kl = np.atleast_2d(np.asarray(kl_bits, dtype=np.float64))
    if np.any(kl < 0):
        raise ContractViolation("per-dimension KLs must be non-negative")
    if kl.shape[1] == 0:
        return BlockPartition((), kappa_bits)
    lengths: list[int] = []
    running = np.zeros(kl.shape[0])
    size = 0
    for j in range(kl.shape[1]):
        candidate = running + kl[:, j]
        if size > 0 and candidate.max() > kappa_bits:
            lengths.append(size)
            running = kl[:, j].copy()
            size = 1
        else:
            running = candidate
            size += 1
        if size == 1 and running.max() > kappa_bits:
            log.warning("dimension KL %.2f bits exceeds block budget %.2f; coding will be lossy-coarse",
                        running.max(), kappa_bits)
    lengths.append(size)
    return BlockPartition(tuple(lengths), kappa_bits)


def even_blocks(cols: int, count: int, kappa_bits: float = 16.0) -> BlockPartition:
    """Split `cols` columns into `count` near-equal blocks (preset mode)."""
    if count < 1 or count > cols:
        raise ContractViolation("invalid preset block count")
    base, extra = divmod(cols, count)
    return BlockPartition(tuple(base + (1 if i < extra else 0) for i in range(count)), kappa_bits)


# Published per-row block counts for the reference configurations, keyed by
# modality and nominal rate.  Levels are listed patch level first, matching
# PatchGrid.level_rows(); totals follow as sum(rows_l * count_l).
PRESET_BLOCK_COUNTS = {
    "cifar": {0.297: [19], 0.719: [46], 0.938: [60], 1.531: [98],
              1.922: [123], 3.344: [214], 4.391: [281]},
    "kodak": {0.074: [17, 17, 85], 0.130: [30, 34, 103], 0.178: [41, 52, 125],
              0.316: [73, 102, 150], 0.488: [114, 145, 190], 0.972: [233, 211, 264]},
    "audio": {5.685: [15, 5, 31], 10.661: [31, 5, 64], 22.112: [64, 14, 96],
              43.637: [122, 50, 112]},
    "video": {0.115: [34, 109, 215], 0.244: [71, 284, 312],
              0.605: [198, 427, 478], 1.183: [409, 561, 653]},
}
