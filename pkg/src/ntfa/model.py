"""Generative model: embeddings -> conditioning networks -> RBF factors -> data.

Each participant and stimulus owns a D-dimensional embedding with a
standard normal prior.  A first network maps a participant embedding to
Gaussian parameters for that participant's K factor centers and
log-widths; a second maps a (participant, stimulus) pair to Gaussian
parameters for the K per-time-point factor weights of a trial.  The
likelihood places an isotropic Gaussian around weights @ factors.

Rest trials have no stimulus; they use a fixed all-zero stimulus
embedding (the prior mean) so the weight network still conditions on
the participant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .dataio import StudyDataset, Trial
from .diffcore import Tensor


@dataclass
class GenerativeConfig:
    n_factors: int  # K
    embed_dim: int  # D
    n_voxels: int  # V

    def __post_init__(self):
        if self.n_factors < 1 or self.embed_dim < 1 or self.n_voxels < 1:
            raise ValueError("n_factors, embed_dim and n_voxels must be >= 1")


@dataclass
class MLP:
    """Fully connected stack; weights are (fan_in, fan_out), one learnable
    PReLU slope per hidden layer."""

    weights: list[Tensor]
    biases: list[Tensor]
    slopes: list[Tensor]

    @property
    def n_params(self) -> int:
        return (
            sum(w.size for w in self.weights)
            + sum(b.size for b in self.biases)
            + len(self.slopes)
        )

    def leaves(self) -> list[Tensor]:
        return [*self.weights, *self.biases, *self.slopes]

    def forward(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = dc.add(dc.matmul(h, w), b)
            if i < last:
                h = dc.prelu(h, self.slopes[i])
        return h


@dataclass
class GenerativeParams:
    eta_f: MLP  # participant embedding -> factor geometry parameters
    eta_w: MLP  # (participant, stimulus) embeddings -> weight parameters
    log_sigma_y: Tensor  # scalar observation-noise log-scale

    @property
    def n_params(self) -> int:
        return self.eta_f.n_params + self.eta_w.n_params + 1

    def leaves(self) -> list[Tensor]:
        return [*self.eta_f.leaves(), *self.eta_w.leaves(), self.log_sigma_y]


@dataclass
class FactorBasis:
    centers: np.ndarray  # (K, 3)
    log_widths: np.ndarray  # (K,)
    factors: np.ndarray  # (K, V)


@dataclass
class Latents:
    """Ancestral state for a set of trials, keyed by index."""

    z_p: dict[int, np.ndarray] = field(default_factory=dict)
    z_s: dict[int, np.ndarray] = field(default_factory=dict)
    factor_centers: dict[int, np.ndarray] = field(default_factory=dict)
    factor_log_widths: dict[int, np.ndarray] = field(default_factory=dict)
    weights: dict[int, np.ndarray] = field(default_factory=dict)


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _build_mlp(rng, dims):
    weights, biases, slopes = [], [], []
    for i in range(len(dims) - 1):
        weights.append(dc.parameter(_xavier(rng, dims[i], dims[i + 1])))
        biases.append(dc.parameter(np.zeros(dims[i + 1])))
        if i < len(dims) - 2:
            slopes.append(dc.parameter(0.25))
    return MLP(weights, biases, slopes)


def geometry_output_bias(centers, log_widths) -> np.ndarray:
    """Pack factor centers/log-widths into the geometry network's final
    bias so a near-zero input reproduces them (the sigma slots stay 0)."""
    centers = np.asarray(centers, dtype=np.float64)
    log_widths = np.asarray(log_widths, dtype=np.float64)
    k = centers.shape[0]
    packed = np.zeros((k, 4, 2))
    packed[:, :3, 0] = centers
    packed[:, 3, 0] = log_widths
    return packed.reshape(-1)


def init_generative_params(
    config: GenerativeConfig, rng, factor_bias=None, log_sigma_y=0.0
) -> GenerativeParams:
    """Fresh parameters: Xavier-uniform weights, zero biases, slopes 0.25.

    `factor_bias` (from `geometry_output_bias`) seeds the geometry
    network's final-layer bias; `log_sigma_y` is typically the log of
    the training data's empirical standard deviation.
    """
    d, k = config.embed_dim, config.n_factors
    eta_f = _build_mlp(rng, [d, 2 * d, 4 * d, 8 * k])
    eta_w = _build_mlp(rng, [2 * d, 4 * d, 8 * d, 2 * k])
    if factor_bias is not None:
        factor_bias = np.asarray(factor_bias, dtype=np.float64)
        if factor_bias.shape != (8 * k,):
            raise dc.ShapeError(f"factor bias must have shape ({8 * k},)")
        eta_f.biases[-1] = dc.parameter(factor_bias)
    return GenerativeParams(eta_f, eta_w, dc.parameter(float(log_sigma_y)))


def _as_rows(z, dim, name):
    z = dc.as_tensor(z)
    if z.data.ndim == 1:
        if z.data.shape[0] != dim:
            raise dc.ShapeError(f"{name} must have length {dim}")
        return dc.reshape(z, (1, dim)), True
    if z.data.ndim != 2 or z.data.shape[1] != dim:
        raise dc.ShapeError(f"{name} must be ({dim},) or (batch, {dim})")
    return z, False


def eta_f_forward(params: GenerativeParams, z):
    """Geometry parameters for participant embeddings.

    The network emits 8K values per row, viewed as K x 4 x 2: slots
    [:, :3, 0] / [:, :3, 1] are center means / log-scales, slots
    [:, 3, 0] / [:, 3, 1] the log-width mean / log-scale.  Returns
    (mu_x, log_sigma_x, mu_rho, log_sigma_rho); batch inputs keep a
    leading batch axis.
    """
    d = params.eta_f.weights[0].shape[0]
    k = params.eta_f.weights[-1].shape[1] // 8
    rows, squeeze = _as_rows(z, d, "participant embedding")
    out = dc.reshape(params.eta_f.forward(rows), (-1, k, 4, 2))
    if squeeze:
        out = dc.reshape(out, (k, 4, 2))
        sel = ()
    else:
        sel = (slice(None),)
    mu_x = dc.take(out, sel + (slice(None), slice(0, 3), 0))
    ls_x = dc.take(out, sel + (slice(None), slice(0, 3), 1))
    mu_rho = dc.take(out, sel + (slice(None), 3, 0))
    ls_rho = dc.take(out, sel + (slice(None), 3, 1))
    return mu_x, ls_x, mu_rho, ls_rho


def eta_w_forward(params: GenerativeParams, z_p, z_s):
    """Weight parameters for (participant, stimulus) embedding pairs.

    Emits 2K values per row, viewed as K x 2 (mean, log-scale).
    Returns (mu_w, log_sigma_w).
    """
    d = params.eta_w.weights[0].shape[0] // 2
    k = params.eta_w.weights[-1].shape[1] // 2
    zp, squeeze_p = _as_rows(z_p, d, "participant embedding")
    zs, squeeze_s = _as_rows(z_s, d, "stimulus embedding")
    if zp.shape[0] != zs.shape[0]:
        raise dc.ShapeError("embedding batches must have equal length")
    out = dc.reshape(params.eta_w.forward(dc.concat([zp, zs], axis=1)), (-1, k, 2))
    if squeeze_p and squeeze_s:
        out = dc.reshape(out, (k, 2))
        mu = dc.take(out, (slice(None), 0))
        ls = dc.take(out, (slice(None), 1))
    else:
        mu = dc.take(out, (slice(None), slice(None), 0))
        ls = dc.take(out, (slice(None), slice(None), 1))
    return mu, ls


def rbf_factor_matrix(centers, log_widths, grid) -> Tensor:
    """F[k, v] = exp(-|grid_v - center_k|^2 / exp(rho_k)).

    `log_widths` is the log of the squared length scale; it is clamped
    to the global log-scale window before exponentiation so the kernel
    can never overflow.
    """
    centers = dc.as_tensor(centers)
    log_widths = dc.as_tensor(log_widths)
    grid = dc.as_tensor(grid)
    k = centers.shape[0]
    if log_widths.shape != (k,):
        raise dc.ShapeError("log_widths must be (K,) matching centers")
    sq = dc.pairwise_sqdist(centers, grid)
    inv_width = dc.reshape(dc.exp(dc.neg(dc.clamp(log_widths))), (k, 1))
    return dc.exp(dc.neg(dc.mul(sq, inv_width)))


def log_likelihood(y, weights, factors, log_sigma_y) -> Tensor:
    """Summed Gaussian log-density of y around weights @ factors."""
    return dc.gaussian_logpdf(y, dc.matmul(weights, factors), log_sigma_y)


def log_joint(trials, latents: Latents, params: GenerativeParams, grid) -> Tensor:
    """Joint log-density of data and latents for a slice of trials.

    Covers: standard normal priors of every participant/stimulus
    embedding appearing in the slice, geometry densities under the
    geometry network, weight densities under the weight network, and
    the likelihood.  Missing latents raise ValueError.
    """
    participants = sorted({t.participant for t in trials})
    stimuli = sorted({t.stimulus for t in trials if t.stimulus is not None})
    for p in participants:
        if p not in latents.z_p or p not in latents.factor_centers:
            raise ValueError(f"missing latents for participant {p}")
    for s in stimuli:
        if s not in latents.z_s:
            raise ValueError(f"missing latents for stimulus {s}")

    grid = dc.as_tensor(grid)
    zero = dc.constant(0.0)
    total = dc.constant(0.0)
    bases: dict[int, Tensor] = {}
    zp: dict[int, Tensor] = {}
    zs: dict[int, Tensor] = {}
    for p in participants:
        z = dc.as_tensor(latents.z_p[p])
        zp[p] = z
        total = dc.add(total, dc.gaussian_logpdf(z, zero, zero))
        mu_x, ls_x, mu_rho, ls_rho = eta_f_forward(params, z)
        x = dc.as_tensor(latents.factor_centers[p])
        rho = dc.as_tensor(latents.factor_log_widths[p])
        total = dc.add(total, dc.gaussian_logpdf(x, mu_x, ls_x))
        total = dc.add(total, dc.gaussian_logpdf(rho, mu_rho, ls_rho))
        bases[p] = rbf_factor_matrix(x, rho, grid)
    for s in stimuli:
        z = dc.as_tensor(latents.z_s[s])
        zs[s] = z
        total = dc.add(total, dc.gaussian_logpdf(z, zero, zero))

    d = params.eta_w.weights[0].shape[0] // 2
    for n, trial in enumerate(trials):
        if n not in latents.weights:
            raise ValueError(f"missing weight latents for trial {n}")
        w = dc.as_tensor(latents.weights[n])
        z_s = zs[trial.stimulus] if trial.stimulus is not None else dc.constant(np.zeros(d))
        mu_w, ls_w = eta_w_forward(params, zp[trial.participant], z_s)
        total = dc.add(total, dc.gaussian_logpdf(w, mu_w, ls_w))
        total = dc.add(
            total, log_likelihood(trial.data, w, bases[trial.participant], params.log_sigma_y)
        )
    return total


def sample_generative(
    config: GenerativeConfig, params: GenerativeParams, grid, trial_plan, seed
):
    """Ancestral draw of a full study.

    `trial_plan` lists (participant, stimulus_or_None, n_timepoints) per
    trial.  Returns (StudyDataset, Latents); geometry is drawn once per
    participant and shared across that participant's trials.
    """
    if not trial_plan:
        raise ValueError("trial plan is empty")
    grid = np.asarray(grid, dtype=np.float64)
    rng = np.random.default_rng(seed)
    d = config.embed_dim

    participants = sorted({p for p, _, _ in trial_plan})
    stimuli = sorted({s for _, s, _ in trial_plan if s is not None})
    latents = Latents()
    for p in participants:
        latents.z_p[p] = rng.standard_normal(d)
    for s in stimuli:
        latents.z_s[s] = rng.standard_normal(d)

    sigma_y = float(np.exp(np.clip(params.log_sigma_y.data, -8.0, 8.0)))
    bases: dict[int, np.ndarray] = {}
    trials = []
    for p, s, t_len in trial_plan:
        if p not in bases:
            mu_x, ls_x, mu_rho, ls_rho = (
                o.data for o in eta_f_forward(params, latents.z_p[p])
            )
            x = mu_x + np.exp(np.clip(ls_x, -8.0, 8.0)) * rng.standard_normal(mu_x.shape)
            rho = mu_rho + np.exp(np.clip(ls_rho, -8.0, 8.0)) * rng.standard_normal(
                mu_rho.shape
            )
            latents.factor_centers[p] = x
            latents.factor_log_widths[p] = rho
            bases[p] = rbf_factor_matrix(x, rho, grid).data
        z_s = latents.z_s[s] if s is not None else np.zeros(d)
        mu_w, ls_w = (o.data for o in eta_w_forward(params, latents.z_p[p], z_s))
        w = mu_w + np.exp(np.clip(ls_w, -8.0, 8.0)) * rng.standard_normal(
            (t_len, config.n_factors)
        )
        mean = w @ bases[p]
        y = mean + sigma_y * rng.standard_normal(mean.shape)
        latents.weights[len(trials)] = w
        trials.append(
            Trial(
                participant=p,
                stimulus=s,
                run=0,
                block_type="task" if s is not None else "rest",
                data=y,
            )
        )

    n_p = max(participants) + 1
    n_s = max(stimuli) + 1 if stimuli else 0
    dataset = StudyDataset(n_p, n_s, grid, trials)
    return dataset, latents
