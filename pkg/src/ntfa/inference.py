"""Mean-field variational inference for the embedding-conditioned factor model.

The variational family is a fully factorized product of Gaussians: one
per participant embedding, stimulus embedding, per-participant factor
geometry (centers and log-widths), and per-(trial, time-point) weight
vector.  Training maximizes an importance-weighted bound on the log
marginal (the plain reparameterized bound when one particle is used)
with Adam, separate learning rates for generative and variational
parameters, and reduce-on-plateau annealing of both.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from . import diffcore as dc
from .dataio import StudyDataset
from .diffcore import NumericalError, Tensor
from .model import (
    GenerativeConfig,
    GenerativeParams,
    eta_f_forward,
    eta_w_forward,
    geometry_output_bias,
    init_generative_params,
    log_likelihood,
    rbf_factor_matrix,
)


@dataclass
class TrainConfig:
    lr_lambda: float = 0.01
    lr_theta: float = 1e-4
    epochs: int = 1000
    patience: int = 100
    decay: float = 0.5
    particles: int = 1
    batch_size: int | None = 16  # None trains on the full dataset per step
    seed: int = 0

    def __post_init__(self):
        if self.lr_lambda <= 0 or self.lr_theta <= 0:
            raise ValueError("learning rates must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not (0.0 < self.decay < 1.0):
            raise ValueError("decay must lie in (0, 1)")
        if self.particles < 1:
            raise ValueError("need at least one particle")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return {
            "lr_lambda": self.lr_lambda,
            "lr_theta": self.lr_theta,
            "epochs": self.epochs,
            "patience": self.patience,
            "decay": self.decay,
            "particles": self.particles,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }


@dataclass
class VariationalState:
    """Gaussian mean / log-scale leaves for every latent."""

    z_p_mu: Tensor  # (P, D)
    z_p_log_sigma: Tensor
    z_s_mu: Tensor  # (S, D)
    z_s_log_sigma: Tensor
    x_mu: Tensor  # (P, K, 3)
    x_log_sigma: Tensor
    rho_mu: Tensor  # (P, K)
    rho_log_sigma: Tensor
    w_mu: list[Tensor] = field(default_factory=list)  # per trial, (T_n, K)
    w_log_sigma: list[Tensor] = field(default_factory=list)

    def leaves(self) -> list[Tensor]:
        return [
            self.z_p_mu,
            self.z_p_log_sigma,
            self.z_s_mu,
            self.z_s_log_sigma,
            self.x_mu,
            self.x_log_sigma,
            self.rho_mu,
            self.rho_log_sigma,
            *self.w_mu,
            *self.w_log_sigma,
        ]

    @property
    def n_values(self) -> int:
        return sum(leaf.size for leaf in self.leaves())


@dataclass
class FitResult:
    params: GenerativeParams
    vstate: VariationalState
    loss_trace: list[float]  # per-epoch mean negative bound


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


# ---------------------------------------------------------------------------
# K-means initialization


def init_kmeans(dataset: StudyDataset, n_clusters: int, rng=0):
    """Lloyd's algorithm over voxel coordinates weighted by mean absolute
    signal, with weighted k-means++ seeding.

    Returns (centers (K, 3), log_widths (K,)); a cluster's log-width is
    the log of its weighted mean squared within-cluster distance.  Empty
    clusters are re-seeded from the point farthest from every current
    center; equidistant points go to the lowest-index center.
    """
    coords = np.asarray(dataset.voxel_grid, dtype=np.float64)
    n_voxels = coords.shape[0]
    if n_clusters > n_voxels:
        raise ValueError(f"cannot place {n_clusters} clusters on {n_voxels} voxels")
    rng = _as_rng(rng)

    total_rows = sum(t.data.shape[0] for t in dataset.trials)
    weight = np.zeros(n_voxels)
    for t in dataset.trials:
        weight += np.abs(t.data).sum(axis=0)
    weight /= max(total_rows, 1)
    if weight.sum() <= 0:
        weight = np.ones(n_voxels)
    prob = weight / weight.sum()

    # weighted k-means++ seeding
    centers = np.empty((n_clusters, 3))
    centers[0] = coords[rng.choice(n_voxels, p=prob)]
    for k in range(1, n_clusters):
        d2 = np.min(
            ((coords[:, None, :] - centers[None, :k, :]) ** 2).sum(axis=2), axis=1
        )
        score = weight * d2
        if score.sum() <= 0:
            centers[k] = coords[int(np.argmax(d2))]
        else:
            centers[k] = coords[rng.choice(n_voxels, p=score / score.sum())]

    assign = np.full(n_voxels, -1)
    for _ in range(100):
        d2 = ((coords[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)  # argmin takes the lowest index on ties
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(n_clusters):
            mask = assign == k
            wk = weight[mask]
            if wk.sum() <= 0:
                far = ((coords[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
                centers[k] = coords[int(np.argmax(far.min(axis=1)))]
            else:
                centers[k] = (coords[mask] * wk[:, None]).sum(axis=0) / wk.sum()

    d2 = ((coords[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(d2, axis=1)
    log_widths = np.empty(n_clusters)
    for k in range(n_clusters):
        mask = assign == k
        wk = weight[mask]
        if wk.sum() <= 0:
            log_widths[k] = 0.0
        else:
            msd = (d2[mask, k] * wk).sum() / wk.sum()
            log_widths[k] = np.log(max(msd, 1e-12))
    return centers, log_widths


# ---------------------------------------------------------------------------
# variational initialization


def init_variational(
    dataset: StudyDataset, config: GenerativeConfig, centers, log_widths, rng
) -> VariationalState:
    """Embedding means start close to zero, geometry means at the
    clustering solution, weight means at zero."""
    rng = _as_rng(rng)
    n_p, n_s = dataset.n_participants, dataset.n_stimuli
    d, k = config.embed_dim, config.n_factors
    z_p_mu = rng.normal(0.0, 0.1, size=(n_p, d))
    z_s_mu = rng.normal(0.0, 0.1, size=(n_s, d))
    return VariationalState(
        z_p_mu=dc.parameter(z_p_mu),
        z_p_log_sigma=dc.parameter(np.full((n_p, d), -1.0)),
        z_s_mu=dc.parameter(z_s_mu),
        z_s_log_sigma=dc.parameter(np.full((n_s, d), -1.0)),
        x_mu=dc.parameter(np.tile(np.asarray(centers), (n_p, 1, 1))),
        x_log_sigma=dc.parameter(np.full((n_p, k, 3), -1.0)),
        rho_mu=dc.parameter(np.tile(np.asarray(log_widths), (n_p, 1))),
        rho_log_sigma=dc.parameter(np.full((n_p, k), -1.0)),
        w_mu=[
            dc.parameter(np.zeros((t.data.shape[0], k))) for t in dataset.trials
        ],
        w_log_sigma=[
            dc.parameter(np.zeros((t.data.shape[0], k))) for t in dataset.trials
        ],
    )


# ---------------------------------------------------------------------------
# the importance-weighted bound


def _latent_weights(dataset: StudyDataset, idx):
    """Fraction of each embedding/geometry latent's trials inside the batch;
    scaling prior and entropy terms by this keeps the full-epoch bound
    unbiased under trial subsampling."""
    in_batch_p: Counter = Counter()
    in_batch_s: Counter = Counter()
    for n in idx:
        t = dataset.trials[n]
        in_batch_p[t.participant] += 1
        if t.stimulus is not None:
            in_batch_s[t.stimulus] += 1
    total_p: Counter = Counter()
    total_s: Counter = Counter()
    for t in dataset.trials:
        total_p[t.participant] += 1
        if t.stimulus is not None:
            total_s[t.stimulus] += 1
    w_p = {p: in_batch_p[p] / total_p[p] for p in in_batch_p}
    w_s = {s: in_batch_s[s] / total_s[s] for s in in_batch_s}
    return w_p, w_s


def _weighted(term: Tensor, w: float) -> Tensor:
    return term if w == 1.0 else dc.mul(term, w)


def _particle_bound(
    params, vstate, dataset, idx, rng, include_likelihood, w_p, w_s, grid
):
    trials = dataset.trials
    ps = sorted({trials[n].participant for n in idx})
    ss = sorted({trials[n].stimulus for n in idx if trials[n].stimulus is not None})
    p_pos = {p: i for i, p in enumerate(ps)}
    s_pos = {s: j for j, s in enumerate(ss)}
    d = vstate.z_p_mu.shape[1]
    k = vstate.rho_mu.shape[1]
    zero = dc.constant(0.0)
    terms = []

    zp_mu = dc.take_rows(vstate.z_p_mu, ps)
    zp_ls = dc.take_rows(vstate.z_p_log_sigma, ps)
    z_p = dc.reparam_sample(zp_mu, zp_ls, rng.standard_normal((len(ps), d)))
    if ss:
        zs_mu = dc.take_rows(vstate.z_s_mu, ss)
        zs_ls = dc.take_rows(vstate.z_s_log_sigma, ss)
        z_s = dc.reparam_sample(zs_mu, zs_ls, rng.standard_normal((len(ss), d)))

    # participant embeddings and factor geometry
    mu_x, ls_x, mu_rho, ls_rho = eta_f_forward(params, z_p)
    bases = {}
    for i, p in enumerate(ps):
        row = (slice(i, i + 1),)
        z_row = dc.take(z_p, row)
        emb = dc.sub(
            dc.gaussian_logpdf(z_row, zero, zero),
            dc.gaussian_logpdf(z_row, dc.take(zp_mu, row), dc.take(zp_ls, row)),
        )
        x_mu_q = dc.take(vstate.x_mu, p)
        x_ls_q = dc.take(vstate.x_log_sigma, p)
        x = dc.reparam_sample(x_mu_q, x_ls_q, rng.standard_normal((k, 3)))
        rho_mu_q = dc.take(vstate.rho_mu, p)
        rho_ls_q = dc.take(vstate.rho_log_sigma, p)
        rho = dc.reparam_sample(rho_mu_q, rho_ls_q, rng.standard_normal(k))
        geo = dc.sub(
            dc.add(
                dc.gaussian_logpdf(x, dc.take(mu_x, i), dc.take(ls_x, i)),
                dc.gaussian_logpdf(rho, dc.take(mu_rho, i), dc.take(ls_rho, i)),
            ),
            dc.add(
                dc.gaussian_logpdf(x, x_mu_q, x_ls_q),
                dc.gaussian_logpdf(rho, rho_mu_q, rho_ls_q),
            ),
        )
        terms.append(_weighted(dc.add(emb, geo), w_p[p]))
        bases[p] = rbf_factor_matrix(x, rho, grid)

    # stimulus embeddings
    for j, s in enumerate(ss):
        row = (slice(j, j + 1),)
        z_row = dc.take(z_s, row)
        emb = dc.sub(
            dc.gaussian_logpdf(z_row, zero, zero),
            dc.gaussian_logpdf(z_row, dc.take(zs_mu, row), dc.take(zs_ls, row)),
        )
        terms.append(_weighted(emb, w_s[s]))

    # weights and likelihood, grouped by trial length for stacking
    by_t: dict[int, list[int]] = {}
    for n in idx:
        by_t.setdefault(trials[n].data.shape[0], []).append(n)
    if ss:
        zs_ext = dc.concat([z_s, dc.constant(np.zeros((1, d)))], axis=0)
    else:
        zs_ext = dc.constant(np.zeros((1, d)))
    rest_row = len(ss)
    for t_len in sorted(by_t):
        members = by_t[t_len]
        b = len(members)
        p_rows = [p_pos[trials[n].participant] for n in members]
        s_rows = [
            s_pos[trials[n].stimulus] if trials[n].stimulus is not None else rest_row
            for n in members
        ]
        mu_w, ls_w = eta_w_forward(
            params, dc.take_rows(z_p, p_rows), dc.take_rows(zs_ext, s_rows)
        )
        mu_w3 = dc.reshape(mu_w, (b, 1, k))
        ls_w3 = dc.reshape(ls_w, (b, 1, k))
        q_mu = dc.concat(
            [dc.reshape(vstate.w_mu[n], (1, t_len, k)) for n in members], axis=0
        )
        q_ls = dc.concat(
            [dc.reshape(vstate.w_log_sigma[n], (1, t_len, k)) for n in members],
            axis=0,
        )
        w = dc.reparam_sample(q_mu, q_ls, rng.standard_normal((b, t_len, k)))
        terms.append(dc.gaussian_logpdf(w, mu_w3, ls_w3))
        terms.append(dc.neg(dc.gaussian_logpdf(w, q_mu, q_ls)))
        if include_likelihood:
            by_p: dict[int, list[int]] = {}
            for pos, n in enumerate(members):
                by_p.setdefault(trials[n].participant, []).append(pos)
            for p, rows in sorted(by_p.items()):
                w_flat = dc.reshape(dc.take_rows(w, rows), (len(rows) * t_len, k))
                y = np.concatenate([trials[members[r]].data for r in rows], axis=0)
                terms.append(
                    log_likelihood(y, w_flat, bases[p], params.log_sigma_y)
                )
    return reduce(dc.add, terms)


def elbo_iwae(
    params: GenerativeParams,
    vstate: VariationalState,
    dataset: StudyDataset,
    trial_indices,
    n_particles: int = 1,
    rng=0,
    include_likelihood: bool = True,
) -> Tensor:
    """Importance-weighted bound over a batch of trials (differentiable).

    Draws `n_particles` reparameterized samples of every latent the
    batch touches and returns log-mean-exp of the per-particle
    log-joint minus log-proposal.  One particle reduces to the plain
    reparameterized bound estimator.  Embedding and geometry terms are
    scaled by the fraction of their trials inside the batch.
    """
    idx = list(trial_indices)
    if not idx:
        raise ValueError("batch is empty")
    if n_particles < 1:
        raise ValueError("need at least one particle")
    rng = _as_rng(rng)
    w_p, w_s = _latent_weights(dataset, idx)
    grid = dc.constant(dataset.voxel_grid)
    parts = [
        _particle_bound(
            params, vstate, dataset, idx, rng, include_likelihood, w_p, w_s, grid
        )
        for _ in range(n_particles)
    ]
    if n_particles == 1:
        return parts[0]
    return dc.logmeanexp(parts)


# ---------------------------------------------------------------------------
# learning-rate annealing


def lr_schedule(epoch_losses, lrs, patience: int = 100, factor: float = 0.5):
    """Replay reduce-on-plateau over a loss history.

    Starting from the given base rates, every stretch of `patience`
    consecutive epochs without a new best loss multiplies all rates by
    `factor` and resets the stretch counter.
    """
    best = np.inf
    streak = 0
    triggers = 0
    for loss in epoch_losses:
        if loss < best:
            best = loss
            streak = 0
        else:
            streak += 1
            if streak >= patience:
                triggers += 1
                streak = 0
    scale = factor ** triggers
    return tuple(lr * scale for lr in lrs)


# ---------------------------------------------------------------------------
# training loop


def _data_log_std(dataset: StudyDataset) -> float:
    count = 0
    total = 0.0
    total_sq = 0.0
    for t in dataset.trials:
        count += t.data.size
        total += t.data.sum()
        total_sq += (t.data * t.data).sum()
    if count == 0:
        return 0.0
    var = max(total_sq / count - (total / count) ** 2, 0.0)
    return float(np.log(max(np.sqrt(var), 1e-8)))


def _check_coverage(dataset: StudyDataset) -> None:
    seen_p = {t.participant for t in dataset.trials}
    seen_s = {t.stimulus for t in dataset.trials if t.stimulus is not None}
    missing_p = set(range(dataset.n_participants)) - seen_p
    missing_s = set(range(dataset.n_stimuli)) - seen_s
    if missing_p or missing_s:
        raise ValueError(
            f"dataset coverage incomplete: participants {sorted(missing_p)}, "
            f"stimuli {sorted(missing_s)} have no trials"
        )


def _diagnose_nan(params, vstate, dataset, idx, epoch):
    for n in idx:
        if not np.all(np.isfinite(dataset.trials[n].data)):
            return NumericalError(
                f"non-finite data in trial {n} (epoch {epoch})"
            )
    for n in idx:
        probe = elbo_iwae(params, vstate, dataset, [n], 1, rng=0)
        if not np.isfinite(probe.item()):
            return NumericalError(
                f"non-finite bound contribution from trial {n} (epoch {epoch})"
            )
    return NumericalError(f"non-finite loss in epoch {epoch}, batch {idx}")


def fit(
    dataset: StudyDataset, config: TrainConfig, gen_config: GenerativeConfig
) -> FitResult:
    """Train generative and variational parameters on a study.

    Initializes factor geometry from the weighted clustering solution
    (both the geometry network's output bias and the per-participant
    variational means), then runs `epochs` passes over shuffled trial
    batches with one Adam step per group per batch and plateau annealing
    on the per-epoch mean loss.  Deterministic for a fixed seed in
    single-threaded execution.
    """
    dataset.validate()
    _check_coverage(dataset)
    if gen_config.n_voxels != dataset.n_voxels:
        raise ValueError("generative config voxel count mismatches dataset")
    for n, trial in enumerate(dataset.trials):
        if not np.all(np.isfinite(trial.data)):
            raise NumericalError(f"non-finite data in trial {n}")
    rng = np.random.default_rng(config.seed)

    centers, log_widths = init_kmeans(dataset, gen_config.n_factors, rng=rng)
    params = init_generative_params(
        gen_config,
        rng,
        factor_bias=geometry_output_bias(centers, log_widths),
        log_sigma_y=_data_log_std(dataset),
    )
    vstate = init_variational(dataset, gen_config, centers, log_widths, rng)

    theta_opt = dc.Adam(params.leaves(), config.lr_theta)
    lambda_opt = dc.Adam(vstate.leaves(), config.lr_lambda)
    n_trials = dataset.n_trials
    batch = config.batch_size or n_trials
    trace: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n_trials)
        losses = []
        for start in range(0, n_trials, batch):
            idx = [int(n) for n in order[start : start + batch]]
            bound = elbo_iwae(
                params, vstate, dataset, idx, config.particles, rng
            )
            loss = -bound.item()
            if not np.isfinite(loss):
                raise _diagnose_nan(params, vstate, dataset, idx, epoch)
            bound.backward()
            # maximizing the bound: flip accumulated gradients to descend
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
    return FitResult(params, vstate, trace)
