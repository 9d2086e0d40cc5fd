"""Relative entropy coding of posterior blocks.

Each block transmits one b-bit index into a shared candidate stream: the
encoder regenerates candidates x_i ~ p from a counter-based PRNG together
with Poisson-process arrival times T_i, scores每 candidate by
sum(log q(x_i) - log p(x_i)) - log T_i, and sends the argmax index.  This is
a depth-2^b truncation of Gumbel-process sampling from q; its approximation
error is what the inter-block finetuning compensates.  The decoder
regenerates candidate `index` in O(block dims), independent of 2^b.

Per-block seeds hash (global seed, level, row, block ordinal), so parallel
rows never share state and the decoder derives identical streams.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import prng
from .bitstream import CorruptStreamError
from .distributions import log_density
from .gradcore import GraphNanError
from .partition import BlockPartition, PermutationPlan, permute, unpermute
from .trainer import Session

log = logging.getLogger(__name__)

DEFAULT_FINETUNE_STEPS = 10


@dataclass(frozen=True)
class BlockCoder:
    """Candidate-stream parameters for one block."""

    bits: int = 16
    seed: int = 0

    @property
    def n_candidates(self) -> int:
        return 1 << self.bits


def block_seed(global_seed: int, level: int, row: int, ordinal: int) -> int:
    return prng.derive_key(global_seed, 0xB10C, level, row, ordinal)


def plan_key(global_seed: int, level: int) -> int:
    return prng.derive_key(global_seed, 0x9E27, level)


def encode_block(q_mean, q_var, p_mean, p_var, coder: BlockCoder) -> tuple[int, np.ndarray]:
    """Returns (index, decoded sample); the sample is regenerated through the
    decode path so encoder and decoder agree bitwise."""
    q_mean = np.asarray(q_mean, dtype=np.float64).ravel()
    q_var = np.asarray(q_var, dtype=np.float64).ravel()
    p_mean = np.asarray(p_mean, dtype=np.float64).ravel()
    p_var = np.asarray(p_var, dtype=np.float64).ravel()
    d = q_mean.size
    n = coder.n_candidates
    value_key = prng.derive_key(coder.seed, 0)
    scores = np.zeros(n)
    cand = np.arange(n, dtype=np.uint64)[:, None]
    chunk = max(1, min(d, 4_000_000 // n))  # bound working set to a few MB
    for a in range(0, d, chunk):
        b = min(d, a + chunk)
        counters = cand * np.uint64(d) + np.arange(a, b, dtype=np.uint64)[None, :]
        u = prng.uniform01(value_key, counters)
        x = p_mean[a:b] + np.sqrt(p_var[a:b]) * prng.normal_icdf(u)
        scores += (log_density(x, q_mean[a:b], q_var[a:b])
                   - log_density(x, p_mean[a:b], p_var[a:b])).sum(axis=1)
    u_t = prng.uniform01(prng.derive_key(coder.seed, 1), np.arange(n, dtype=np.uint64))
    arrivals = np.cumsum(-np.log(u_t))  # Poisson-process arrival times
    scores -= np.log(arrivals)
    index = int(np.argmax(scores))
    return index, decode_block(index, p_mean, p_var, coder)


def decode_block(index: int, p_mean, p_var, coder: BlockCoder) -> np.ndarray:
    """Candidate `index` of the block's stream; O(dims)."""
    if not 0 <= index < coder.n_candidates:
        raise CorruptStreamError(f"block index {index} out of range for {coder.bits} bits")
    p_mean = np.asarray(p_mean, dtype=np.float64).ravel()
    p_var = np.asarray(p_var, dtype=np.float64).ravel()
    counters = np.uint64(index) * np.uint64(p_mean.size) \
        + np.arange(p_mean.size, dtype=np.uint64)
    u = prng.uniform01(prng.derive_key(coder.seed, 0), counters)
    return p_mean + np.sqrt(p_var) * prng.normal_icdf(u)


# ---------------------------------------------------------------------------
# signal-level progressive coding

def _prior_matrices(model, level: int):
    rows = model.grid.level_rows()[level]
    cols = model.level_cols()[level]
    pm = np.broadcast_to(model.prior_means[level], (rows, cols)).copy()
    pv = np.broadcast_to(model.prior_vars[level], (rows, cols)).copy()
    return pm, pv


def compress_signal(session: Session, plans: list[PermutationPlan],
                    partitions: list[BlockPartition], bits: int, global_seed: int,
                    finetune_steps: int = DEFAULT_FINETUNE_STEPS,
                    threads: int = 1) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Encode every block of every level, finetuning remaining posteriors as
    coded dimensions get pinned to their decoded samples.

    The session must hold a single signal (M=1).  Levels are coded from the
    top of the hierarchy down; within a level, each block column is encoded
    across all rows (in parallel when threads > 1), then the still-uncoded
    posterior dimensions take `finetune_steps` descent steps.  Returns
    (per-level index matrices, per-level decoded value matrices).
    """
    model = session.model
    n_levels = model.grid.levels
    keep = [np.ones((p.alpha.shape[0], p.kappa.size)) for p in plans]
    pinned = [np.zeros_like(k) for k in keep]
    indices = [np.zeros((plans[l].alpha.shape[0], partitions[l].block_count), dtype=np.int64)
               for l in range(n_levels)]
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    total = sum(idx.size for idx in indices)
    done = 0
    try:
        for level in reversed(range(n_levels)):
            plan, part = plans[level], partitions[level]
            p_mean_mat, p_var_mat = _prior_matrices(model, level)
            pm_perm = permute(p_mean_mat, plan)
            pv_perm = permute(p_var_mat, plan)
            rows = pm_perm.shape[0]
            for k, sl in enumerate(part.slices()):
                post = session.posteriors()
                q_mean_perm = permute(post.means[level][0], plan)[:, sl]
                q_var_perm = permute(post.variances()[level][0], plan)[:, sl]
                jobs = [(encode_block, q_mean_perm[i], q_var_perm[i],
                         pm_perm[i, sl], pv_perm[i, sl],
                         BlockCoder(bits, block_seed(global_seed, level, i, k)))
                        for i in range(rows)]
                if pool is not None:
                    results = list(pool.map(lambda j: j[0](*j[1:]), jobs))
                else:
                    results = [j[0](*j[1:]) for j in jobs]
                row_idx = plan.alpha[:, sl]
                col_idx = plan.kappa[sl][None, :]
                for i, (index, sample) in enumerate(results):
                    indices[level][i, k] = index
                    keep[level][row_idx[i], col_idx[0]] = 0.0
                    pinned[level][row_idx[i], col_idx[0]] = sample
                done += rows
                if finetune_steps > 0 and done < total:
                    _finetune(session, keep, pinned, finetune_steps)
    finally:
        if pool is not None:
            pool.shutdown()
    return indices, pinned


def _finetune(session: Session, keep, pinned, steps: int) -> None:
    """Descent on the masked objective; on numerical failure the remaining
    posteriors are restored and frozen at their pre-step state."""
    for _ in range(steps):
        snap = [l.value.copy() for l in session.mean_leaves + session.lvar_leaves]
        try:
            value = session.step(keep_masks=keep, pinned=pinned)
        except GraphNanError:
            value = np.nan
        if not np.isfinite(value):
            for l, s in zip(session.mean_leaves + session.lvar_leaves, snap):
                l.value[...] = s
            log.warning("finetuning diverged; freezing remaining posteriors")
            return


def decode_signal(indices: list[np.ndarray], plans: list[PermutationPlan],
                  partitions: list[BlockPartition], model, bits: int,
                  global_seed: int, threads: int = 1) -> list[np.ndarray]:
    """Regenerate every block's sample from its index; returns per-level
    latent value matrices in original (unpermuted) coordinates."""
    n_levels = model.grid.levels
    values = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for level in range(n_levels):
            plan, part = plans[level], partitions[level]
            p_mean_mat, p_var_mat = _prior_matrices(model, level)
            pm_perm = permute(p_mean_mat, plan)
            pv_perm = permute(p_var_mat, plan)
            rows = pm_perm.shape[0]
            out = np.zeros_like(pm_perm)
            slices = part.slices()
            jobs = [(i, k, sl) for i in range(rows) for k, sl in enumerate(slices)]

            def run(job, lvl=level, idx=indices[level], pm=pm_perm, pv=pv_perm):
                i, k, sl = job
                coder = BlockCoder(bits, block_seed(global_seed, lvl, i, k))
                return decode_block(int(idx[i, k]), pm[i, sl], pv[i, sl], coder)

            results = list(pool.map(run, jobs)) if pool is not None else [run(j) for j in jobs]
            for (i, k, sl), sample in zip(jobs, results):
                out[i, sl] = sample
            values.append(unpermute(out, plan))
    finally:
        if pool is not None:
            pool.shutdown()
    return values
