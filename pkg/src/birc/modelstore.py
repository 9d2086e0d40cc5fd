"""Trained-model serialization: a flat container of named float64 arrays plus
a JSON config record, with a content hash embedded in every bitstream so a
stream can never be decoded against the wrong model."""

from __future__ import annotations

import hashlib
import io
import json

import numpy as np

from .hier import PatchGrid
from .inrnet import InrArchitecture, ReparamTransform
from .posenc import LatentGrid, UpsamplerNet
from .trainer import SharedModel


def _model_arrays(model: SharedModel) -> dict[str, np.ndarray]:
    arrays = {}
    for i, (pm, pv) in enumerate(zip(model.prior_means, model.prior_vars)):
        arrays[f"prior_mean_{i}"] = np.asarray(pm, dtype=np.float64)
        arrays[f"prior_var_{i}"] = np.asarray(pv, dtype=np.float64)
    if model.transform is not None:
        for i, a in enumerate(model.transform.matrices):
            arrays[f"transform_{i}"] = np.asarray(a, dtype=np.float64)
    if model.upsampler is not None:
        for i, (k, b) in enumerate(model.upsampler.params):
            arrays[f"ups_kernel_{i}"] = np.asarray(k, dtype=np.float64)
            arrays[f"ups_bias_{i}"] = np.asarray(b, dtype=np.float64)
    return arrays


def _config_record(model: SharedModel) -> dict:
    a, g = model.arch, model.grid
    rec = {
        "coord_dim": a.coord_dim, "out_dim": a.out_dim, "layers": a.layers,
        "hidden": a.hidden, "fourier_dim": a.fourier_dim, "pe_channels": a.pe_channels,
        "omega0": a.omega0, "fourier_scale": a.fourier_scale,
        "signal_shape": list(g.signal_shape), "patch_shape": list(g.patch_shape),
        "levels": g.levels, "group_shape": list(g.group_shape) if g.group_shape else None,
        "reparam": model.transform is not None,
        "per_position_prior": model.per_position_prior,
        "beta": model.beta,
    }
    if model.upsampler is not None:
        u = model.upsampler
        rec["upsampler"] = {
            "channels": u.latent.channels, "latent_spatial": list(u.latent.spatial),
            "target": list(u.target), "out_channels": u.out_channels,
            "hidden_channels": list(u.hidden_channels), "kernel_sizes": list(u.kernel_sizes),
        }
    else:
        rec["upsampler"] = None
    return rec


def content_hash(model: SharedModel) -> bytes:
    """sha256 over the config record and every array, order-independent."""
    h = hashlib.sha256()
    h.update(json.dumps(_config_record(model), sort_keys=True).encode())
    for name, arr in sorted(_model_arrays(model).items()):
        h.update(name.encode() + b"\0")
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.digest()


def model_hash_u64(model: SharedModel) -> int:
    return int.from_bytes(content_hash(model)[:8], "little")


def save_model(path, model: SharedModel) -> None:
    arrays = _model_arrays(model)
    arrays["config_json"] = np.frombuffer(
        json.dumps(_config_record(model), sort_keys=True).encode(), dtype=np.uint8).copy()
    np.savez(path, **arrays)


def load_model(path) -> SharedModel:
    with np.load(path) as data:
        cfg = json.loads(bytes(data["config_json"]))
        arch = InrArchitecture(cfg["coord_dim"], cfg["out_dim"], cfg["layers"], cfg["hidden"],
                               cfg["fourier_dim"], cfg["pe_channels"], cfg["omega0"],
                               cfg["fourier_scale"])
        grid = PatchGrid(tuple(cfg["signal_shape"]), tuple(cfg["patch_shape"]), cfg["levels"],
                         tuple(cfg["group_shape"]) if cfg["group_shape"] else None)
        upsampler = None
        if cfg["upsampler"] is not None:
            u = cfg["upsampler"]
            upsampler = UpsamplerNet(LatentGrid(u["channels"], tuple(u["latent_spatial"])),
                                     tuple(u["target"]), u["out_channels"],
                                     tuple(u["hidden_channels"]), tuple(u["kernel_sizes"]))
            upsampler.set_param_arrays(
                [data[f"ups_{part}_{i}"] for i in range(len(u["kernel_sizes"]))
                 for part in ("kernel", "bias")])
        transform = None
        if cfg["reparam"]:
            transform = ReparamTransform(
                [data[f"transform_{i}"] for i in range(arch.layers)])
        model = SharedModel(arch, grid, transform, upsampler,
                            beta=cfg["beta"], per_position_prior=cfg["per_position_prior"])
        i = 0
        while f"prior_mean_{i}" in data:
            model.prior_means.append(data[f"prior_mean_{i}"])
            model.prior_vars.append(data[f"prior_var_{i}"])
            i += 1
    return model
