"""SIREN coordinate network with Fourier input embeddings and the learned
per-layer linear reparameterization of its flattened weights.

Layer l's weights-plus-bias vector (length (fan_in+1)*fan_out, laid out as
row-major weight matrix followed by bias) is produced as latent @ A[l] with a
square matrix A[l]; stacking the A[l] block-diagonally gives the full linear
map from the latent weight vector to the network weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .gradcore import ContractViolation


@dataclass(frozen=True)
class InrArchitecture:
    coord_dim: int
    out_dim: int
    layers: int = 4
    hidden: int = 32
    fourier_dim: int = 16
    pe_channels: int = 16  # learned positional-encoding channels appended to the input
    omega0: float = 30.0
    fourier_scale: float = 1.0

    def __post_init__(self):
        if self.layers < 2:
            raise ContractViolation("need at least 2 layers")
        if self.fourier_dim % (2 * self.coord_dim) != 0:
            raise ContractViolation(
                f"fourier_dim {self.fourier_dim} must be a multiple of 2*coord_dim")

    @property
    def input_dim(self) -> int:
        return self.fourier_dim + self.pe_channels

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, input embedding through output."""
        dims = [(self.input_dim, self.hidden)]
        dims += [(self.hidden, self.hidden)] * (self.layers - 2)
        dims.append((self.hidden, self.out_dim))
        return dims

    def layer_sizes(self) -> list[int]:
        return [(fi + 1) * fo for fi, fo in self.layer_dims()]

    @property
    def weight_dim(self) -> int:
        return sum(self.layer_sizes())


@dataclass(frozen=True)
class FourierEmbeddingConfig:
    coord_dim: int
    embed_dim: int = 16
    scale: float = 1.0

    def __post_init__(self):
        if self.embed_dim % (2 * self.coord_dim) != 0:
            raise ContractViolation("embed_dim must be a multiple of 2*coord_dim")

    @property
    def frequencies(self) -> np.ndarray:
        n = self.embed_dim // (2 * self.coord_dim)
        return self.scale * (2.0 ** np.arange(n))


def fourier_embed(x, cfg: FourierEmbeddingConfig) -> np.ndarray:
    """sin/cos features of coordinates in [-1, 1].

    x: (..., coord_dim) -> (..., embed_dim), laid out coordinate-major with
    (sin, cos) interleaved per frequency.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.coord_dim:
        raise ContractViolation(f"expected {cfg.coord_dim} coordinates, got {x.shape[-1]}")
    if np.any(np.abs(x) > 1.0 + 1e-12):
        raise ContractViolation("coordinates must be normalized to [-1, 1]")
    phase = 2.0 * np.pi * x[..., :, None] * cfg.frequencies  # (..., I, nfreq)
    feats = np.stack([np.sin(phase), np.cos(phase)], axis=-1)  # (..., I, nfreq, 2)
    return feats.reshape(x.shape[:-1] + (cfg.embed_dim,))


@dataclass
class ReparamTransform:
    """Square matrix per layer; identity when the reparameterization is off."""

    matrices: list[np.ndarray]

    @classmethod
    def initial(cls, arch: InrArchitecture, rng: np.random.Generator) -> "ReparamTransform":
        mats = []
        for (fan_in, fan_out), size in zip(arch.layer_dims(), arch.layer_sizes()):
            a = float(fan_in * fan_out)
            mats.append(rng.uniform(-1.0 / a, 1.0 / a, size=(size, size)))
        return cls(mats)

    @classmethod
    def identity(cls, arch: InrArchitecture) -> "ReparamTransform":
        return cls([np.eye(s) for s in arch.layer_sizes()])


def siren_init_flat(arch: InrArchitecture, rng: np.random.Generator) -> np.ndarray:
    """Flattened SIREN initialization, used as the initial posterior mean.

    First layer ~ U(-1/fan_in, 1/fan_in); later layers
    ~ U(-sqrt(6/fan_in)/omega0, +sqrt(6/fan_in)/omega0); biases
    ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    parts = []
    for l, (fan_in, fan_out) in enumerate(arch.layer_dims()):
        if l == 0:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / arch.omega0
        w = rng.uniform(-bound, bound, size=(fan_in * fan_out,))
        b = rng.uniform(-1.0, 1.0, size=(fan_out,)) / np.sqrt(fan_in)
        parts += [w, b]
    return np.concatenate(parts)


def assemble_weights(h_w, transform: ReparamTransform, sizes: list[int]):
    """Latent weight vector -> network weight vector, per-layer h[l] @ A[l].

    h_w: (..., sum(sizes)); equals the dense multiply by the block-diagonal
    stack of the A[l].  Accepts Nodes or arrays.
    """
    total = sum(sizes)
    if gc.value_of(h_w).shape[-1] != total:
        raise ContractViolation(
            f"latent weight dim {gc.value_of(h_w).shape[-1]} != expected {total}")
    flat = gc.value_of(h_w).ndim == 1
    if flat:
        h_w = gc.reshape(h_w, (1, total))
    parts, off = [], 0
    for a_mat, size in zip(transform.matrices, sizes):
        if gc.value_of(a_mat).shape != (size, size):
            raise ContractViolation("transform matrix shape mismatch")
        parts.append(gc.matmul(h_w[..., off:off + size], a_mat))
        off += size
    out = gc.concat(parts, axis=-1)
    return gc.reshape(out, (total,)) if flat else out


def split_layer(w, arch: InrArchitecture, l: int):
    """Slice layer l's (W, b) out of a flattened weight vector (..., wdim)."""
    fan_in, fan_out = arch.layer_dims()[l]
    off = sum(arch.layer_sizes()[:l])
    wmat = gc.reshape(w[..., off:off + fan_in * fan_out],
                      gc.value_of(w).shape[:-1] + (fan_in, fan_out))
    bias = w[..., off + fan_in * fan_out:off + (fan_in + 1) * fan_out]
    return wmat, bias


def inr_forward(embed, z, w, arch: InrArchitecture):
    """Evaluate the SIREN at pre-embedded coordinates.

    embed: (D, fourier_dim) shared across the batch; z: (..., D, pe_channels)
    or None; w: (..., weight_dim).  Returns (..., D, out_dim).  Hidden layers
    apply sin(omega0 * (x @ W + b)); the output layer is linear.
    """
    if z is not None:
        zv = gc.value_of(z)
        if zv.shape[-1] != arch.pe_channels:
            raise ContractViolation(f"expected {arch.pe_channels} encoding channels")
        lead = zv.shape[:-2]
        emb = np.broadcast_to(embed, lead + embed.shape)
        x = gc.concat([gc.const(emb) if gc.is_node(z) else emb, z], axis=-1)
    else:
        if arch.pe_channels != 0:
            raise ContractViolation("architecture expects positional encodings")
        x = embed if not gc.is_node(w) else gc.const(embed)
    for l in range(arch.layers):
        wmat, bias = split_layer(w, arch, l)
        pre = gc.matmul(x, wmat) + _expand_bias(bias)
        x = gc.sin(arch.omega0 * pre) if l < arch.layers - 1 else pre
    return x


def _expand_bias(bias):
    """(..., fan_out) -> (..., 1, fan_out) so it broadcasts over coordinates."""
    shape = gc.value_of(bias).shape
    return gc.reshape(bias, shape[:-1] + (1, shape[-1]))
