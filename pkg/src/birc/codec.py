"""End-to-end pipeline: signal ingestion and normalization, patching,
posterior inference, block coding to a bitstream, decoding, and metrics."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import bitstream as bs
from . import prng, rec, sigio
from .gradcore import ContractViolation
from .modelstore import model_hash_u64
from .partition import NATS_PER_BIT, BlockPartition, PermutationPlan, cut_blocks, even_blocks, permute
from .posenc import ConfigError
from .trainer import (Session, SharedModel, optimize_posteriors_and_model, patch_embedding,
                      posteriors_from_prior, predict_values)


@dataclass
class SignalDataset:
    """One signal as normalized coordinate-value data.

    values: (*grid, out_dim) float64 in [0, 1]; norm_lo/hi restore the
    original range.  Grid axes enumerate coordinates in C order.
    """

    values: np.ndarray
    modality: str
    norm_lo: float
    norm_hi: float
    sample_rate: int = 0

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return self.values.shape[:-1]

    @property
    def out_dim(self) -> int:
        return self.values.shape[-1]

    @property
    def num_coords(self) -> int:
        return int(np.prod(self.grid_shape))

    def denormalized(self) -> np.ndarray:
        return self.norm_lo + self.values * (self.norm_hi - self.norm_lo)


def normalize_signal(raw: np.ndarray, modality: str, has_channel_axis: bool,
                     lo: float | None = None, hi: float | None = None,
                     sample_rate: int = 0) -> SignalDataset:
    raw = np.asarray(raw, dtype=np.float64)
    if not has_channel_axis:
        raw = raw[..., None]
    lo = float(raw.min()) if lo is None else lo
    hi = float(raw.max()) if hi is None else hi
    if hi <= lo:
        hi = lo + 1.0
    return SignalDataset((raw - lo) / (hi - lo), modality, lo, hi, sample_rate)


def load_signal(path, modality: str) -> SignalDataset:
    if modality == "image":
        img, maxval = sigio.read_pnm(path)
        return normalize_signal(img.astype(np.float64), "image", img.ndim == 3,
                                0.0, float(maxval))
    if modality == "audio":
        samples, rate = sigio.read_audio(path)
        return normalize_signal(samples, "audio", False, sample_rate=rate)
    if modality in ("video", "pointseq"):
        arr = sigio.read_tensor(path)
        has_channels = arr.ndim > 1 if modality == "pointseq" else arr.ndim > 3
        return normalize_signal(arr, modality, has_channels)
    raise ContractViolation(f"unknown modality {modality!r}")


def save_signal(ds: SignalDataset, path) -> None:
    raw = ds.denormalized()
    if ds.modality == "image":
        img = np.clip(np.rint(raw), 0, ds.norm_hi).astype(np.uint8)
        sigio.write_pnm(path, img[..., 0] if ds.out_dim == 1 else img, int(ds.norm_hi))
    elif ds.modality == "audio":
        sigio.write_audio(path, raw[..., 0], ds.sample_rate)
    else:
        sigio.write_tensor(path, raw if ds.out_dim > 1 else raw[..., 0])


# ---------------------------------------------------------------------------
# patching

def patch_split(values: np.ndarray, patch_shape: tuple[int, ...]) -> np.ndarray:
    """(*grid, O) -> (P, prod(patch_shape), O), lossless tiling in C order."""
    grid = values.shape[:-1]
    out_dim = values.shape[-1]
    if len(grid) != len(patch_shape):
        raise ConfigError("patch dimensionality mismatch")
    counts = []
    for g, p in zip(grid, patch_shape):
        if g % p != 0:
            raise ConfigError(f"signal axis {g} not divisible by patch {p}")
        counts.append(g // p)
    shape = []
    for c, p in zip(counts, patch_shape):
        shape += [c, p]
    x = values.reshape(shape + [out_dim])
    order = list(range(0, 2 * len(grid), 2)) + list(range(1, 2 * len(grid), 2)) + [2 * len(grid)]
    x = x.transpose(order)
    return x.reshape(int(np.prod(counts)), int(np.prod(patch_shape)), out_dim)


def patch_merge(patches: np.ndarray, grid: tuple[int, ...],
                patch_shape: tuple[int, ...]) -> np.ndarray:
    """Exact inverse of patch_split."""
    out_dim = patches.shape[-1]
    counts = [g // p for g, p in zip(grid, patch_shape)]
    x = patches.reshape(counts + list(patch_shape) + [out_dim])
    n = len(grid)
    order = []
    for d in range(n):
        order += [d, n + d]
    x = x.transpose(order + [2 * n])
    return x.reshape(tuple(grid) + (out_dim,))


def psnr(reference: np.ndarray, reconstruction: np.ndarray) -> float:
    """10*log10(1/MSE) on [0,1]-normalized signals, capped at 100 dB."""
    reference = np.asarray(reference, dtype=np.float64)
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    if reference.shape != reconstruction.shape:
        raise ContractViolation("shape mismatch")
    mse = float(np.mean(np.square(reference - reconstruction)))
    if mse < 1e-10:
        return 100.0
    return 10.0 * np.log10(1.0 / mse)


def rmsd(reference: np.ndarray, reconstruction: np.ndarray) -> float:
    """Root mean squared pointwise distance, in denormalized units."""
    d = np.square(reference - reconstruction).sum(axis=-1)
    return float(np.sqrt(d.mean()))


@dataclass
class RdRecord:
    rate_bits_payload: int
    rate_bits_total: int
    num_coords: int
    distortion_db: float
    encode_seconds: float = 0.0
    decode_seconds: float = 0.0

    @property
    def bpp_payload(self) -> float:
        return self.rate_bits_payload / self.num_coords

    @property
    def bpp_total(self) -> float:
        return self.rate_bits_total / self.num_coords


# ---------------------------------------------------------------------------
# compression settings and pipeline

@dataclass
class CodeSettings:
    seed: int = 0
    infer_steps: int = 1000
    samples: int = 5
    finetune_steps: int = 10
    block_bits: int = 16
    threads: int = 1
    lr: float = 2e-4
    cross_permute: bool = True
    preset_blocks: list[int] | None = None  # per-level per-row counts, patch level first


def _make_plans(model: SharedModel, seed: int, cross: bool) -> list[PermutationPlan]:
    rows = model.grid.level_rows()
    cols = model.level_cols()
    return [PermutationPlan.from_seed(r, c, rec.plan_key(seed, lvl), cross_rows=cross)
            for lvl, (r, c) in enumerate(zip(rows, cols))]


def _check_compatible(ds: SignalDataset, model: SharedModel) -> None:
    if ds.grid_shape != model.grid.signal_shape:
        raise ConfigError(f"signal shape {ds.grid_shape} != model {model.grid.signal_shape}")
    if ds.out_dim != model.arch.out_dim:
        raise ConfigError("value dimensionality mismatch")


def infer_posterior_session(ds: SignalDataset, model: SharedModel,
                            settings: CodeSettings) -> Session:
    """Fit the variational posterior of one signal against the trained model."""
    _check_compatible(ds, model)
    targets = patch_split(ds.values, model.grid.patch_shape)[None]  # (1, P, D, O)
    emb = patch_embedding(model)
    rng = np.random.default_rng(prng.derive_key(settings.seed, 0x01FE))
    posteriors = posteriors_from_prior(model, 1)
    session = Session(model, posteriors, emb, targets, train_model=False,
                      sample_count=settings.samples, lr=settings.lr, rng=rng)
    optimize_posteriors_and_model(session, settings.infer_steps)
    return session


def compress(ds: SignalDataset, model: SharedModel,
             settings: CodeSettings) -> tuple[bytes, RdRecord]:
    """Full encode: infer posteriors, permute, cut blocks, REC-code, pack."""
    t0 = time.perf_counter()
    session = infer_posterior_session(ds, model, settings)
    plans = _make_plans(model, settings.seed, settings.cross_permute)
    partitions = []
    post = session.posteriors()
    for lvl, plan in enumerate(plans):
        if settings.preset_blocks is not None:
            partitions.append(even_blocks(plan.kappa.size, settings.preset_blocks[lvl],
                                          settings.block_bits))
            continue
        from .distributions import kl_terms
        kl = kl_terms(post.means[lvl][0], post.variances()[lvl][0],
                      np.broadcast_to(model.prior_means[lvl], post.means[lvl][0].shape),
                      np.broadcast_to(model.prior_vars[lvl], post.means[lvl][0].shape))
        partitions.append(cut_blocks(permute(kl, plan) / NATS_PER_BIT, settings.block_bits))
    indices, pinned = rec.compress_signal(session, plans, partitions, settings.block_bits,
                                          settings.seed, settings.finetune_steps,
                                          settings.threads)
    layouts = [bs.LevelLayout(p.alpha.shape[0], p.kappa.size, part.lengths)
               for p, part in zip(plans, partitions)]
    grid = model.grid
    stream = bs.Bitstream(
        model_hash=model_hash_u64(model), modality=ds.modality, out_dim=ds.out_dim,
        signal_shape=ds.grid_shape, patched=grid.num_patches > 1 or grid.levels > 1,
        patch_shape=grid.patch_shape, levels=grid.levels,
        group_shape=grid.group_shape or (1,) * len(grid.patch_shape),
        norm_lo=ds.norm_lo, norm_hi=ds.norm_hi, sample_rate=ds.sample_rate,
        global_seed=settings.seed, block_bits=settings.block_bits,
        flags=bs.FLAG_CROSS_PERMUTE if settings.cross_permute else 0,
        layouts=layouts, indices=indices)
    payload = stream.to_bytes()
    recon = _reconstruct(pinned, model, ds)
    record = RdRecord(stream.payload_bits, len(payload) * 8, ds.num_coords,
                      psnr(ds.values, recon.values), encode_seconds=time.perf_counter() - t0)
    return payload, record


def _reconstruct(level_values: list[np.ndarray], model: SharedModel,
                 like: SignalDataset) -> SignalDataset:
    pred = predict_values([v[None] for v in level_values], model, patch_embedding(model))
    merged = patch_merge(pred[0], model.grid.signal_shape, model.grid.patch_shape)
    return SignalDataset(merged, like.modality, like.norm_lo, like.norm_hi, like.sample_rate)


def decompress(data: bytes, model: SharedModel, threads: int = 1) -> SignalDataset:
    """Decode a bitstream against the shared trained model."""
    stream = bs.parse(data)
    if stream.model_hash != model_hash_u64(model):
        raise bs.WrongModelError("bitstream was coded with a different model")
    if stream.signal_shape != model.grid.signal_shape:
        raise bs.CorruptStreamError("signal shape disagrees with model")
    plans = _make_plans(model, stream.global_seed, stream.cross_permute)
    for plan, lay in zip(plans, stream.layouts):
        if plan.alpha.shape != (lay.rows, lay.cols):
            raise bs.CorruptStreamError("level layout disagrees with model")
    partitions = [BlockPartition(lay.block_lengths) for lay in stream.layouts]
    values = rec.decode_signal(stream.indices, plans, partitions, model,
                               stream.block_bits, stream.global_seed, threads)
    like = SignalDataset(np.zeros(stream.signal_shape + (stream.out_dim,)),
                         stream.modality, stream.norm_lo, stream.norm_hi, stream.sample_rate)
    return _reconstruct(values, model, like)


def prior_mean_reconstruction(model: SharedModel, like: SignalDataset) -> SignalDataset:
    """Zero-bit baseline: decode the prior mean latents."""
    rows = model.grid.level_rows()
    values = [np.broadcast_to(pm, (r, c)).copy()
              for pm, r, c in zip(model.prior_means, rows, model.level_cols())]
    return _reconstruct(values, model, like)
