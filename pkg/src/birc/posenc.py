"""Latent positional encodings: a small per-signal latent grid decoded by a
shared convolutional upsampler into per-coordinate input features.

The upsampler alternates nearest-neighbor upsampling with three same-padded
convolutions (kernel ladder 5, 3, 3 in the signal's dimensionality).  The
first two upsampling stages are fixed 2x where possible; the last stage takes
whatever integer factor remains to land exactly on the target grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import ContractViolation


class ConfigError(ValueError):
    """Model shapes that cannot be assembled."""


@dataclass(frozen=True)
class LatentGrid:
    channels: int
    spatial: tuple[int, ...]

    @property
    def dim(self) -> int:
        return self.channels * int(np.prod(self.spatial))


@dataclass
class UpsamplerNet:
    """Three-conv upsampling network; `params` are (kernel, bias) pairs."""

    latent: LatentGrid
    target: tuple[int, ...]
    out_channels: int = 16
    hidden_channels: tuple[int, int] = (64, 32)
    kernel_sizes: tuple[int, int, int] = (5, 3, 3)
    params: list[tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        if len(self.latent.spatial) != len(self.target):
            raise ConfigError("latent and target dimensionality differ")
        self.factors = _stage_factors(self.latent.spatial, self.target)
        if self.params is None:
            self.params = []
            chans = [self.latent.channels, *self.hidden_channels, self.out_channels]
            for cin, cout, k in zip(chans[:-1], chans[1:], self.kernel_sizes):
                kshape = (cout, cin) + (k,) * len(self.target)
                self.params.append((np.zeros(kshape), np.zeros(cout)))

    def init_params(self, rng: np.random.Generator) -> None:
        """Glorot-uniform kernels, zero biases."""
        fresh = []
        for kernel, bias in self.params:
            fan_in = int(np.prod(kernel.shape[1:]))
            fan_out = kernel.shape[0] * int(np.prod(kernel.shape[2:]))
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            fresh.append((rng.uniform(-bound, bound, size=kernel.shape), np.zeros(kernel.shape[0])))
        self.params = fresh

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for kernel, bias in self.params:
            out += [kernel, bias]
        return out

    def set_param_arrays(self, arrays) -> None:
        self.params = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(self.params))]


def _stage_factors(latent_spatial, target) -> list[tuple[int, ...]]:
    """Per-stage integer upsampling factors: 2x early, remainder on the last."""
    ratios = []
    for s, t in zip(latent_spatial, target):
        if t % s != 0:
            raise ConfigError(f"latent size {s} does not divide target {t}")
        ratios.append(t // s)
    stages = []
    for _ in range(2):
        f = tuple(2 if r % 2 == 0 and r > 1 else 1 for r in ratios)
        ratios = [r // x for r, x in zip(ratios, f)]
        stages.append(f)
    stages.append(tuple(ratios))
    return stages


def upsample(h_z, net: UpsamplerNet, params=None):
    """Latent grid values -> (..., out_channels, *target) encoding field.

    h_z: (..., latent.dim) flattened; differentiable w.r.t. both the latents
    and the conv parameters when those are Nodes (pass graph leaves via
    `params` as a flat [kernel0, bias0, kernel1, ...] list).
    """
    lead = gc.value_of(h_z).shape[:-1]
    if gc.value_of(h_z).shape[-1] != net.latent.dim:
        raise ContractViolation(f"latent dim != {net.latent.dim}")
    batch = int(np.prod(lead)) if lead else 1
    x = gc.reshape(h_z, (batch, net.latent.channels) + net.latent.spatial)
    plist = params if params is not None else net.param_arrays()
    for stage, (kernel, bias) in zip(net.factors, zip(plist[0::2], plist[1::2])):
        x = gc.upsample_nearest(x, stage)
        x = gc.conv_nd(x, kernel, bias)
    return gc.reshape(x, lead + (net.out_channels,) + net.target)


def encoding_at_coords(field, grid_ndim: int):
    """(..., F, *grid) field -> (..., D, F) per-coordinate encodings.

    Coordinates enumerate the grid in C order, matching the flattened
    coordinate datasets used elsewhere.
    """
    shape = gc.value_of(field).shape
    f_axis = len(shape) - grid_ndim - 1
    moved = gc.moveaxis(field, f_axis, -1)  # lead + grid + (F,)
    lead = shape[:f_axis]
    d = int(np.prod(shape[f_axis + 1:]))
    return gc.reshape(moved, lead + (d, shape[f_axis]))
