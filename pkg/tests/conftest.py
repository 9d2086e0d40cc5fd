import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))  # make oracles/helpers importable

from birc.hier import PatchGrid
from birc.inrnet import InrArchitecture, ReparamTransform
from birc.posenc import LatentGrid, UpsamplerNet
from birc.trainer import SharedModel


def make_model(signal=(8, 8), patch=None, levels=1, groups=None, *, out_dim=1,
               hidden=8, layers=3, fourier=8, pe=4, latent_ch=4, ups_hidden=(4, 4),
               reparam=True, posenc=True, seed=0) -> SharedModel:
    """Small desk-scale model with paper-style initialization."""
    patch = patch or signal
    rng = np.random.default_rng(seed)
    arch = InrArchitecture(len(signal), out_dim, layers, hidden, fourier,
                           pe if posenc else 0)
    grid = PatchGrid(tuple(signal), tuple(patch), levels, groups)
    upsampler = None
    if posenc:
        latent_spatial = tuple(max(1, p // 16) for p in patch)
        upsampler = UpsamplerNet(LatentGrid(latent_ch, latent_spatial), tuple(patch),
                                 out_channels=pe, hidden_channels=ups_hidden)
        upsampler.init_params(rng)
    transform = ReparamTransform.initial(arch, rng) if reparam else None
    model = SharedModel(arch, grid, transform, upsampler)
    model.init_priors()
    return model


def smooth_signals(count: int, shape: tuple[int, ...], rng: np.random.Generator,
                   out_dim: int = 1, waves: int = 4) -> np.ndarray:
    """Smooth banded random fields in [0.05, 0.95], (count, *shape, out_dim)."""
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    out = np.zeros((count,) + tuple(shape) + (out_dim,))
    for m in range(count):
        for o in range(out_dim):
            acc = np.zeros(shape)
            for _ in range(waves):
                freq = rng.uniform(0.3, 1.6, size=len(shape))
                phase = rng.uniform(0, 2 * np.pi)
                amp = rng.uniform(0.3, 1.0)
                arg = sum(np.pi * f * g for f, g in zip(freq, mesh)) + phase
                acc += amp * np.sin(arg)
            lo, hi = acc.min(), acc.max()
            out[m, ..., o] = 0.05 + 0.9 * (acc - lo) / max(hi - lo, 1e-9)
    return out
