"""Training loop: three-step coordinate descent over (posteriors, transform,
upsampler), a closed-form prior update, and an adaptive rate-penalty
controller that steers the mean training KL onto the coding budget.

The same objective builder drives posterior inference and the progressive
finetuning inside the coding loop; masking lets already-coded dimensions act
as constants.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .distributions import INIT_POSTERIOR_VAR, VAR_FLOOR, kl_terms, reparam_sample, variance_from_log
from .gradcore import Adam, ContractViolation, GraphNanError
from .hier import PatchGrid, compose_weight_latents, split_posenc_latents
from .inrnet import InrArchitecture, ReparamTransform, assemble_weights, inr_forward, siren_init_flat
from .posenc import UpsamplerNet, encoding_at_coords, upsample

log = logging.getLogger(__name__)

NATS_PER_BIT = float(np.log(2.0))


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite objective."""


@dataclass
class SharedModel:
    """Everything shared between encoder and decoder after training."""

    arch: InrArchitecture
    grid: PatchGrid
    transform: ReparamTransform | None  # None disables the weight reparameterization
    upsampler: UpsamplerNet | None  # None disables learned positional encodings
    prior_means: list[np.ndarray] = field(default_factory=list)
    prior_vars: list[np.ndarray] = field(default_factory=list)
    beta: float = 1e-8
    per_position_prior: bool = False

    @property
    def weight_dim(self) -> int:
        return self.arch.weight_dim

    @property
    def posenc_dim(self) -> int:
        return self.upsampler.latent.dim if self.upsampler is not None else 0

    def level_cols(self) -> list[int]:
        cols = [self.weight_dim + self.posenc_dim]
        cols += [self.weight_dim] * (self.grid.levels - 1)
        return cols

    def init_priors(self) -> None:
        rows = self.grid.level_rows()
        self.prior_means, self.prior_vars = [], []
        for r, c in zip(rows, self.level_cols()):
            shape = (r, c) if self.per_position_prior else (c,)
            self.prior_means.append(np.zeros(shape))
            self.prior_vars.append(np.ones(shape))


@dataclass
class PosteriorBatch:
    """Stacked per-signal posteriors: per level (M, rows, cols)."""

    means: list[np.ndarray]
    log_vars: list[np.ndarray]

    @property
    def count(self) -> int:
        return self.means[0].shape[0]

    def variances(self) -> list[np.ndarray]:
        return [variance_from_log(lv) for lv in self.log_vars]

    def kl_per_signal(self, model: SharedModel) -> np.ndarray:
        """(M,) total posterior-prior KL in nats."""
        out = np.zeros(self.count)
        for mean, var, pm, pv in zip(self.means, self.variances(),
                                     model.prior_means, model.prior_vars):
            out += kl_terms(mean, var, pm, pv).sum(axis=(-2, -1))
        return out


def init_posteriors(model: SharedModel, count: int, rng: np.random.Generator) -> PosteriorBatch:
    """Fresh posteriors: top-level weight latents get a SIREN draw per signal,
    lower-level deltas and positional latents start at zero; all variances
    start at the shared tight default."""
    rows = model.grid.level_rows()
    cols = model.level_cols()
    means = [np.zeros((count, r, c)) for r, c in zip(rows, cols)]
    top = len(rows) - 1
    for m in range(count):
        if top == 0:
            for p in range(rows[0]):
                means[0][m, p, :model.weight_dim] = siren_init_flat(model.arch, rng)
        else:
            means[top][m, 0] = siren_init_flat(model.arch, rng)
    log_vars = [np.full((count, r, c), np.log(INIT_POSTERIOR_VAR)) for r, c in zip(rows, cols)]
    return PosteriorBatch(means, log_vars)


def posteriors_from_prior(model: SharedModel, count: int) -> PosteriorBatch:
    """Inference-time init: posterior means at the trained prior mean."""
    rows = model.grid.level_rows()
    means = [np.broadcast_to(pm, (count, r, c)).copy()
             for pm, r, c in zip(model.prior_means, rows, model.level_cols())]
    log_vars = [np.full((count, r, c), np.log(INIT_POSTERIOR_VAR))
                for r, c in zip(rows, model.level_cols())]
    return PosteriorBatch(means, log_vars)


# ---------------------------------------------------------------------------
# objective

def patch_embedding(model: SharedModel) -> np.ndarray:
    """Fourier features of the per-patch coordinate grid, (D, fourier_dim).

    Coordinates are pixel centers normalized to [-1, 1] per patch, C order.
    """
    from .inrnet import FourierEmbeddingConfig, fourier_embed

    axes = [(-1.0 + (2.0 * np.arange(n) + 1.0) / n) for n in model.grid.patch_shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=-1)
    cfg = FourierEmbeddingConfig(model.arch.coord_dim, model.arch.fourier_dim,
                                 model.arch.fourier_scale)
    return fourier_embed(coords, cfg)


def build_objective(post_means, post_log_vars, model: SharedModel, emb, targets,
                    beta, noises, transform_parts=None, upsampler_parts=None,
                    keep_masks=None, pinned=None):
    """Rate-distortion objective: beta * mean-signal KL + expected distortion.

    post_*: per level, Nodes or arrays (M, rows, cols); noises: list over
    samples of per-level (M, rows, cols) arrays; keep_masks/pinned freeze
    already-coded dimensions at their decoded values.  Returns
    (objective, kl_mean, distortion); all Nodes when any input is a Node.
    """
    m_count = gc.value_of(post_means[0]).shape[0]
    transform = model.transform if transform_parts is None else ReparamTransform(transform_parts)
    kl_total = 0.0
    for lvl, (mean, lvar) in enumerate(zip(post_means, post_log_vars)):
        terms = kl_terms(mean, variance_from_log(lvar),
                         model.prior_means[lvl], model.prior_vars[lvl])
        if keep_masks is not None:
            terms = terms * keep_masks[lvl]
        kl_total = kl_total + gc.sum_(terms)
    kl_mean = kl_total / float(m_count)

    dist = 0.0
    for noise in noises:
        samples = []
        for lvl, (mean, lvar) in enumerate(zip(post_means, post_log_vars)):
            s = reparam_sample(mean, lvar, noise[lvl])
            if keep_masks is not None:
                s = s * keep_masks[lvl] + pinned[lvl] * (1.0 - keep_masks[lvl])
            samples.append(s)
        h_w = compose_weight_latents(samples, model.grid, model.weight_dim)
        w = assemble_weights(h_w, transform, model.arch.layer_sizes()) \
            if transform is not None else h_w
        if model.upsampler is not None:
            h_z = split_posenc_latents(samples[0], model.weight_dim)
            field = upsample(h_z, model.upsampler, params=upsampler_parts)
            z = encoding_at_coords(field, len(model.grid.patch_shape))
        else:
            z = None
        pred = inr_forward(emb, z, w, model.arch)
        dist = dist + gc.mean(gc.square(pred - targets))
    dist = dist / float(len(noises))
    objective = beta * kl_mean + dist
    return objective, kl_mean, dist


def beta_elbo(post_means, post_log_vars, model: SharedModel, emb, targets,
              beta, noises, **kw) -> float:
    """Objective value on plain arrays (no graph)."""
    obj, _, _ = build_objective(post_means, post_log_vars, model, emb, targets,
                                beta, noises, **kw)
    return float(gc.value_of(obj))


def predict_values(level_values, model: SharedModel, emb) -> np.ndarray:
    """Deterministic reconstruction (M, P, D, O) from latent value arrays."""
    h_w = compose_weight_latents(level_values, model.grid, model.weight_dim)
    w = assemble_weights(h_w, model.transform, model.arch.layer_sizes()) \
        if model.transform is not None else h_w
    if model.upsampler is not None:
        h_z = split_posenc_latents(level_values[0], model.weight_dim)
        field = upsample(h_z, model.upsampler)
        z = encoding_at_coords(field, len(model.grid.patch_shape))
    else:
        z = None
    return inr_forward(emb, z, w, model.arch)


# ---------------------------------------------------------------------------
# optimization sessions

class Session:
    """Adam over posterior leaves (and model leaves when training)."""

    def __init__(self, model: SharedModel, posteriors: PosteriorBatch,
                 emb: np.ndarray, targets: np.ndarray, *, train_model: bool,
                 sample_count: int, lr: float, rng: np.random.Generator):
        self.model = model
        self.emb = emb
        self.targets = targets
        self.sample_count = sample_count
        self.rng = rng
        self.mean_leaves = [gc.leaf(m, tag=f"post_mean_{i}") for i, m in enumerate(posteriors.means)]
        self.lvar_leaves = [gc.leaf(v, tag=f"post_logvar_{i}") for i, v in enumerate(posteriors.log_vars)]
        leaves = self.mean_leaves + self.lvar_leaves
        self.transform_leaves = None
        self.upsampler_leaves = None
        if train_model and model.transform is not None:
            self.transform_leaves = [gc.leaf(a, tag=f"reparam_{i}")
                                     for i, a in enumerate(model.transform.matrices)]
            leaves += self.transform_leaves
        if train_model and model.upsampler is not None:
            self.upsampler_leaves = [gc.leaf(a, tag=f"upsampler_{i}")
                                     for i, a in enumerate(model.upsampler.param_arrays())]
            leaves += self.upsampler_leaves
        self.adam = Adam(leaves, lr=lr)

    def posteriors(self) -> PosteriorBatch:
        return PosteriorBatch([l.value for l in self.mean_leaves],
                              [l.value for l in self.lvar_leaves])

    def draw_noises(self):
        return [[self.rng.standard_normal(l.value.shape) for l in self.mean_leaves]
                for _ in range(self.sample_count)]

    def step(self, keep_masks=None, pinned=None, noises=None) -> float:
        """One Adam step; returns the pre-update objective."""
        noises = self.draw_noises() if noises is None else noises
        obj, _, _ = build_objective(
            self.mean_leaves, self.lvar_leaves, self.model, self.emb, self.targets,
            self.model.beta, noises,
            transform_parts=self.transform_leaves, upsampler_parts=self.upsampler_leaves,
            keep_masks=keep_masks, pinned=pinned)
        self.adam.step(obj)
        self.sync_model()
        return float(obj.value)

    def sync_model(self) -> None:
        if self.transform_leaves is not None:
            self.model.transform.matrices = [l.value for l in self.transform_leaves]
        if self.upsampler_leaves is not None:
            self.model.upsampler.set_param_arrays([l.value for l in self.upsampler_leaves])


def optimize_posteriors_and_model(session: Session, steps: int) -> list[float]:
    """Gradient descent on the mean objective; aborts on divergence."""
    trace = []
    for s in range(steps):
        try:
            trace.append(session.step())
        except GraphNanError as exc:
            raise DivergenceError(f"objective became NaN at step {s} (op {exc.tag}); "
                                  f"beta={session.model.beta:.3e}") from exc
        if not np.isfinite(trace[-1]):
            raise DivergenceError(f"non-finite objective {trace[-1]} at step {s}")
    return trace


# ---------------------------------------------------------------------------
# prior update and rate controller

def update_prior(means: np.ndarray, variances: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form prior refit over the leading axis: the prior mean is the
    posterior-mean average and the prior variance absorbs both the spread of
    the means and the average posterior variance."""
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if means.shape[0] < 1:
        raise ContractViolation("need at least one posterior")
    mu = means.mean(axis=0)
    sigma = (np.square(means - mu) + variances).mean(axis=0)
    return mu, np.maximum(sigma, VAR_FLOOR)


def refit_priors(model: SharedModel, posteriors: PosteriorBatch) -> None:
    for lvl, (mean, var) in enumerate(zip(posteriors.means, posteriors.variances())):
        if model.per_position_prior:
            stacked_m, stacked_v = mean, var
        else:
            cols = mean.shape[-1]
            stacked_m, stacked_v = mean.reshape(-1, cols), var.reshape(-1, cols)
        model.prior_means[lvl], model.prior_vars[lvl] = update_prior(stacked_m, stacked_v)


@dataclass
class RateController:
    """Adaptive rate penalty: multiplicative updates with a hysteresis band."""

    budget_nats: float
    eps_nats: float
    tau: float = 0.5
    beta: float = 1e-8

    def __post_init__(self):
        if self.beta <= 0 or self.eps_nats < 0:
            raise ContractViolation("beta must be positive, eps non-negative")


def adjust_beta(ctrl: RateController, mean_kl_nats: float) -> int:
    """Returns -1/0/+1 for decreased/unchanged/increased beta."""
    if mean_kl_nats > ctrl.budget_nats:
        ctrl.beta *= (1.0 + ctrl.tau)
        return 1
    if mean_kl_nats < ctrl.budget_nats - ctrl.eps_nats:
        ctrl.beta /= (1.0 + ctrl.tau)
        return -1
    return 0


# ---------------------------------------------------------------------------
# full training loop

@dataclass
class TrainConfig:
    budget_bits: float
    eps_bits: float
    rounds: int = 550
    steps_per_round: int = 100
    first_round_steps: int = 200
    lr: float = 2e-4
    sample_count: int = 1
    tau: float = 0.5
    beta_init: float = 1e-8
    seed: int = 0


def train(targets: np.ndarray, model: SharedModel, cfg: TrainConfig,
          log_path=None) -> tuple[PosteriorBatch, list[dict]]:
    """Coordinate descent: optimize everything, refit the prior, nudge beta.

    targets: (M, P, D, O) normalized patch values.  Mutates `model` in place
    (priors, transform, upsampler, beta); returns the final training
    posteriors and one log record per round.
    """
    rng = np.random.default_rng(cfg.seed)
    if not model.prior_means:
        model.init_priors()
    model.beta = cfg.beta_init
    posteriors = init_posteriors(model, targets.shape[0], rng)
    emb = patch_embedding(model)
    session = Session(model, posteriors, emb, targets, train_model=True,
                      sample_count=cfg.sample_count, lr=cfg.lr, rng=rng)
    ctrl = RateController(cfg.budget_bits * NATS_PER_BIT, cfg.eps_bits * NATS_PER_BIT,
                          cfg.tau, cfg.beta_init)
    records = []
    sink = open(log_path, "w") if log_path else None
    try:
        for rnd in range(cfg.rounds):
            steps = cfg.first_round_steps if rnd == 0 else cfg.steps_per_round
            optimize_posteriors_and_model(session, steps)
            posteriors = session.posteriors()
            refit_priors(model, posteriors)
            delta_bar = float(posteriors.kl_per_signal(model).mean())
            if not np.isfinite(delta_bar):
                raise DivergenceError(f"mean KL diverged at round {rnd}")
            action = adjust_beta(ctrl, delta_bar)
            model.beta = ctrl.beta
            rec = {"round": rnd, "kl_bits": delta_bar / NATS_PER_BIT,
                   "beta": ctrl.beta, "action": action,
                   "psnr": _mean_psnr(posteriors, model, emb, targets)}
            records.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
            log.info("round %d: kl=%.1f bits beta=%.3e psnr=%.2f dB",
                     rnd, rec["kl_bits"], ctrl.beta, rec["psnr"])
    finally:
        if sink:
            sink.close()
    return posteriors, records


def _mean_psnr(posteriors: PosteriorBatch, model: SharedModel, emb, targets) -> float:
    pred = predict_values(posteriors.means, model, emb)
    mse = np.square(pred - targets).mean(axis=(1, 2, 3))
    return float(np.mean(10.0 * np.log10(1.0 / np.maximum(mse, 1e-10))))
