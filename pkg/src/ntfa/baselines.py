"""Comparison models: a simplified hierarchical-template factorization and
a principal-component embedding of the raw data.

The hierarchical baseline shares the factor/likelihood code with the
embedding model but replaces the conditioning networks with a single
global template: per-trial factor centers and log-widths vary around
shared template Gaussians, and weights have a standard normal prior.
Template-to-trial prior scales are fixed (log-scale 0 for centers in
grid units, -1 for log-widths); the top-level template prior is
centered on the weighted clustering solution with the same scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from . import diffcore as dc
from .dataio import StudyDataset
from .diffcore import Tensor
from .evaluation import PredictiveResult, _normal_loglik_sum, _trial_rng
from .inference import TrainConfig, _as_rng, _data_log_std, init_kmeans, lr_schedule
from .model import log_likelihood, rbf_factor_matrix

_CENTER_SCALE = 0.0  # log-scale of center priors, template and per-trial
_WIDTH_SCALE = -1.0  # log-scale of log-width priors


@dataclass
class HtfaState:
    template_x_mu: Tensor  # (K, 3)
    template_x_log_sigma: Tensor
    template_rho_mu: Tensor  # (K,)
    template_rho_log_sigma: Tensor
    x_mu: Tensor  # (N, K, 3)
    x_log_sigma: Tensor
    rho_mu: Tensor  # (N, K)
    rho_log_sigma: Tensor
    w_mu: list[Tensor] = field(default_factory=list)  # per trial, (T_n, K)
    w_log_sigma: list[Tensor] = field(default_factory=list)
    log_sigma_y: Tensor = None
    prior_centers: np.ndarray = None  # clustering solution anchoring the template
    prior_widths: np.ndarray = None

    def leaves(self) -> list[Tensor]:
        return [
            self.template_x_mu,
            self.template_x_log_sigma,
            self.template_rho_mu,
            self.template_rho_log_sigma,
            self.x_mu,
            self.x_log_sigma,
            self.rho_mu,
            self.rho_log_sigma,
            *self.w_mu,
            *self.w_log_sigma,
        ]

    @property
    def n_values(self) -> int:
        """Variational value count (the trained noise scale is excluded
        to match the template/geometry/weight bookkeeping)."""
        return sum(leaf.size for leaf in self.leaves())


@dataclass
class HtfaFit:
    state: HtfaState
    loss_trace: list[float]


def htfa_init(dataset: StudyDataset, n_factors: int, rng) -> HtfaState:
    rng = _as_rng(rng)
    centers, widths = init_kmeans(dataset, n_factors, rng=rng)
    n = dataset.n_trials
    k = n_factors
    return HtfaState(
        template_x_mu=dc.parameter(centers.copy()),
        template_x_log_sigma=dc.parameter(np.full((k, 3), -1.0)),
        template_rho_mu=dc.parameter(widths.copy()),
        template_rho_log_sigma=dc.parameter(np.full(k, -1.0)),
        x_mu=dc.parameter(np.tile(centers, (n, 1, 1))),
        x_log_sigma=dc.parameter(np.full((n, k, 3), -1.0)),
        rho_mu=dc.parameter(np.tile(widths, (n, 1))),
        rho_log_sigma=dc.parameter(np.full((n, k), -1.0)),
        w_mu=[dc.parameter(np.zeros((t.data.shape[0], k))) for t in dataset.trials],
        w_log_sigma=[
            dc.parameter(np.zeros((t.data.shape[0], k))) for t in dataset.trials
        ],
        log_sigma_y=dc.parameter(_data_log_std(dataset)),
        prior_centers=centers,
        prior_widths=widths,
    )


def _htfa_particle(state: HtfaState, dataset, idx, rng, grid):
    k = state.template_rho_mu.shape[0]
    zero = dc.constant(0.0)
    terms = []

    xbar = dc.reparam_sample(
        state.template_x_mu, state.template_x_log_sigma, rng.standard_normal((k, 3))
    )
    rhobar = dc.reparam_sample(
        state.template_rho_mu, state.template_rho_log_sigma, rng.standard_normal(k)
    )
    template = dc.sub(
        dc.add(
            dc.gaussian_logpdf(xbar, dc.constant(state.prior_centers), _CENTER_SCALE),
            dc.gaussian_logpdf(rhobar, dc.constant(state.prior_widths), _WIDTH_SCALE),
        ),
        dc.add(
            dc.gaussian_logpdf(xbar, state.template_x_mu, state.template_x_log_sigma),
            dc.gaussian_logpdf(
                rhobar, state.template_rho_mu, state.template_rho_log_sigma
            ),
        ),
    )
    terms.append(_scale(template, len(idx) / dataset.n_trials))

    for n in idx:
        trial = dataset.trials[n]
        x_mu_q = dc.take(state.x_mu, n)
        x_ls_q = dc.take(state.x_log_sigma, n)
        rho_mu_q = dc.take(state.rho_mu, n)
        rho_ls_q = dc.take(state.rho_log_sigma, n)
        x = dc.reparam_sample(x_mu_q, x_ls_q, rng.standard_normal((k, 3)))
        rho = dc.reparam_sample(rho_mu_q, rho_ls_q, rng.standard_normal(k))
        terms.append(
            dc.sub(
                dc.add(
                    dc.gaussian_logpdf(x, xbar, _CENTER_SCALE),
                    dc.gaussian_logpdf(rho, rhobar, _WIDTH_SCALE),
                ),
                dc.add(
                    dc.gaussian_logpdf(x, x_mu_q, x_ls_q),
                    dc.gaussian_logpdf(rho, rho_mu_q, rho_ls_q),
                ),
            )
        )
        t_len = trial.data.shape[0]
        w = dc.reparam_sample(
            state.w_mu[n], state.w_log_sigma[n], rng.standard_normal((t_len, k))
        )
        terms.append(
            dc.sub(
                dc.gaussian_logpdf(w, zero, zero),
                dc.gaussian_logpdf(w, state.w_mu[n], state.w_log_sigma[n]),
            )
        )
        factors = rbf_factor_matrix(x, rho, grid)
        terms.append(log_likelihood(trial.data, w, factors, state.log_sigma_y))
    return reduce(dc.add, terms)


def _scale(term, w):
    return term if w == 1.0 else dc.mul(term, w)


def htfa_elbo(state: HtfaState, dataset, trial_indices, n_particles=1, rng=0) -> Tensor:
    idx = list(trial_indices)
    if not idx:
        raise ValueError("batch is empty")
    rng = _as_rng(rng)
    grid = dc.constant(dataset.voxel_grid)
    parts = [
        _htfa_particle(state, dataset, idx, rng, grid) for _ in range(n_particles)
    ]
    if n_particles == 1:
        return parts[0]
    return dc.logmeanexp(parts)


def htfa_fit(dataset: StudyDataset, n_factors: int, config: TrainConfig) -> HtfaFit:
    """Train the hierarchical baseline with the same recipe as the main
    model: Adam, shuffled trial batches, plateau annealing."""
    dataset.validate()
    rng = np.random.default_rng(config.seed)
    state = htfa_init(dataset, n_factors, rng)
    theta_opt = dc.Adam([state.log_sigma_y], config.lr_theta)
    lambda_opt = dc.Adam(state.leaves(), config.lr_lambda)
    n_trials = dataset.n_trials
    batch = config.batch_size or n_trials
    trace: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n_trials)
        losses = []
        for start in range(0, n_trials, batch):
            idx = [int(n) for n in order[start : start + batch]]
            bound = htfa_elbo(state, dataset, idx, config.particles, rng)
            loss = -bound.item()
            if not np.isfinite(loss):
                raise dc.NumericalError(
                    f"non-finite loss in epoch {epoch}, batch {idx}"
                )
            bound.backward()
            for leaf in theta_opt.params + lambda_opt.params:
                if leaf.grad is not None:
                    np.negative(leaf.grad, out=leaf.grad)
            theta_opt.step()
            lambda_opt.step()
            losses.append(loss)
        trace.append(float(np.mean(losses)))
        lr_l, lr_t = lr_schedule(
            trace, (config.lr_lambda, config.lr_theta), config.patience, config.decay
        )
        lambda_opt.lr = lr_l
        theta_opt.lr = lr_t
    return HtfaFit(state, trace)


def htfa_log_predictive(
    state: HtfaState, dataset: StudyDataset, test_indices, n_particles=10, seed=0
):
    """Predictive bound for held-out trials under the baseline.

    Geometry is drawn around the trained template means with the fixed
    prior scales and weights from their standard normal prior, so every
    held-out trial shares one predictive distribution.  Contributions
    are averaged over particles and summed over trials.
    """
    k = state.template_rho_mu.shape[0]
    grid = dataset.voxel_grid
    bounds = []
    test_indices = list(test_indices)
    for n in test_indices:
        trial = dataset.trials[n]
        rng = _trial_rng(seed, trial)
        t_len = trial.data.shape[0]
        values = np.empty(n_particles)
        for l in range(n_particles):
            x = state.template_x_mu.data + np.exp(_CENTER_SCALE) * rng.standard_normal(
                (k, 3)
            )
            rho = state.template_rho_mu.data + np.exp(
                _WIDTH_SCALE
            ) * rng.standard_normal(k)
            factors = rbf_factor_matrix(x, rho, grid).data
            w = rng.standard_normal((t_len, k))
            values[l] = _normal_loglik_sum(
                trial.data, w @ factors, state.log_sigma_y.data
            )
        bounds.append(float(values.mean()))
    return PredictiveResult(
        total=float(sum(bounds)), per_trial=list(zip(test_indices, bounds))
    )


def pca_timeavg_embed(data) -> np.ndarray:
    """Project time-averaged trials onto their first two principal axes.

    Accepts a StudyDataset or a prebuilt (trials, voxels) matrix.  The
    decomposition runs on the trials-by-trials Gram matrix; coordinates
    are eigenvector * sqrt(eigenvalue), each axis sign-normalized so its
    largest-magnitude coordinate is positive.
    """
    if isinstance(data, StudyDataset):
        matrix = np.stack([t.data.mean(axis=0) for t in data.trials])
    else:
        matrix = np.asarray(data, dtype=np.float64)
    n = matrix.shape[0]
    if n < 2:
        raise ValueError("need at least two trials")
    centered = matrix - matrix.mean(axis=0)
    gram = centered @ centered.T
    vals, vecs = np.linalg.eigh(gram)
    coords = np.zeros((n, 2))
    for axis in range(2):
        lam = vals[-1 - axis]
        if lam <= 1e-12 * max(vals[-1], 1.0):
            continue
        col = vecs[:, -1 - axis] * np.sqrt(lam)
        if col[np.argmax(np.abs(col))] < 0:
            col = -col
        coords[:, axis] = col
    return coords
