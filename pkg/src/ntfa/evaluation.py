"""Held-out evaluation: diagonal splits, the posterior-predictive lower
bound, predictive-mean reconstruction, and parameter counting."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataio import StudyDataset
from .inference import VariationalState
from .model import (
    GenerativeParams,
    eta_f_forward,
    eta_w_forward,
    rbf_factor_matrix,
)

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class SplitPlan:
    train: list[int]
    test: list[int]


def heldout_split(dataset: StudyDataset) -> SplitPlan:
    """Reserve one diagonal of the (participant, stimulus) matrix.

    With 0-based indices, a task trial is held out when
    participant mod S == stimulus; rest trials always train.  Fails if
    any participant or stimulus would lose all training trials.
    """
    n_s = dataset.n_stimuli
    if dataset.n_participants < 2 or n_s < 2:
        raise ValueError("diagonal split needs at least 2 participants and 2 stimuli")
    train, test = [], []
    for n, t in enumerate(dataset.trials):
        if t.block_type == "task" and t.participant % n_s == t.stimulus:
            test.append(n)
        else:
            train.append(n)
    seen_p = {dataset.trials[n].participant for n in train}
    seen_s = {
        dataset.trials[n].stimulus
        for n in train
        if dataset.trials[n].stimulus is not None
    }
    for p in range(dataset.n_participants):
        if p not in seen_p:
            raise ValueError(f"participant {p} has no training trials after the split")
    for s in range(n_s):
        if s not in seen_s:
            raise ValueError(f"stimulus {s} has no training trials after the split")
    return SplitPlan(train=train, test=test)


def _normal_loglik_sum(y, mean, log_sigma) -> float:
    ls = float(np.clip(log_sigma, -8.0, 8.0))
    resid = y - mean
    return float(
        y.size * (-0.5 * _LOG_2PI - ls)
        - 0.5 * np.exp(-2.0 * ls) * np.sum(resid * resid)
    )


def _trial_rng(seed, trial):
    key = 0 if trial.stimulus is None else trial.stimulus + 1
    return np.random.default_rng([int(seed), int(trial.participant), int(key)])


def _sample_gaussian(rng, mu, log_sigma):
    return mu + np.exp(np.clip(log_sigma, -8.0, 8.0)) * rng.standard_normal(mu.shape)


@dataclass
class PredictiveResult:
    total: float
    per_trial: list[tuple[int, float]]


def log_predictive_bound(
    params: GenerativeParams,
    vstate: VariationalState,
    dataset: StudyDataset,
    test_indices,
    n_particles: int = 10,
    seed: int = 0,
    threads: int = 1,
) -> PredictiveResult:
    """Lower bound on the log posterior-predictive density of held-out trials.

    Per trial and particle: embeddings are drawn from their variational
    Gaussians, factor geometry and weights from the generative
    conditionals given those embeddings, and the data log-likelihood is
    averaged over particles.  Per-trial contributions are summed.  The
    per-trial noise stream is keyed by (seed, participant, stimulus), so
    duplicated trials contribute identically.
    """
    test_indices = list(test_indices)
    d = vstate.z_p_mu.shape[1]
    grid = dataset.voxel_grid

    def one_trial(n):
        trial = dataset.trials[n]
        p = trial.participant
        if p >= vstate.z_p_mu.shape[0]:
            raise ValueError(f"no trained embedding for participant {p}")
        if trial.stimulus is not None and trial.stimulus >= vstate.z_s_mu.shape[0]:
            raise ValueError(f"no trained embedding for stimulus {trial.stimulus}")
        rng = _trial_rng(seed, trial)
        t_len = trial.data.shape[0]
        values = np.empty(n_particles)
        for l in range(n_particles):
            z_p = _sample_gaussian(
                rng, vstate.z_p_mu.data[p], vstate.z_p_log_sigma.data[p]
            )
            if trial.stimulus is None:
                z_s = np.zeros(d)
            else:
                s = trial.stimulus
                z_s = _sample_gaussian(
                    rng, vstate.z_s_mu.data[s], vstate.z_s_log_sigma.data[s]
                )
            mu_x, ls_x, mu_rho, ls_rho = (
                o.data for o in eta_f_forward(params, z_p)
            )
            x = _sample_gaussian(rng, mu_x, ls_x)
            rho = _sample_gaussian(rng, mu_rho, ls_rho)
            factors = rbf_factor_matrix(x, rho, grid).data
            mu_w, ls_w = (o.data for o in eta_w_forward(params, z_p, z_s))
            w = mu_w + np.exp(np.clip(ls_w, -8.0, 8.0)) * rng.standard_normal(
                (t_len, mu_w.shape[0])
            )
            values[l] = _normal_loglik_sum(
                trial.data, w @ factors, params.log_sigma_y.data
            )
        return float(values.mean())

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            bounds = list(pool.map(one_trial, test_indices))
    else:
        bounds = [one_trial(n) for n in test_indices]
    per_trial = list(zip(test_indices, bounds))
    return PredictiveResult(total=float(sum(bounds)), per_trial=per_trial)


def posterior_predictive_mean(
    params: GenerativeParams,
    vstate: VariationalState,
    dataset: StudyDataset,
    trial_index: int,
) -> np.ndarray:
    """Time-averaged predictive mean for one trial: variational embedding
    means pushed through both network means, then weights @ factors."""
    trial = dataset.trials[trial_index]
    p = trial.participant
    if p >= vstate.z_p_mu.shape[0]:
        raise ValueError(f"no trained embedding for participant {p}")
    z_p = vstate.z_p_mu.data[p]
    if trial.stimulus is None:
        z_s = np.zeros_like(z_p)
    elif trial.stimulus >= vstate.z_s_mu.shape[0]:
        raise ValueError(f"no trained embedding for stimulus {trial.stimulus}")
    else:
        z_s = vstate.z_s_mu.data[trial.stimulus]
    mu_x, _, mu_rho, _ = (o.data for o in eta_f_forward(params, z_p))
    factors = rbf_factor_matrix(mu_x, mu_rho, dataset.voxel_grid).data
    mu_w, _ = (o.data for o in eta_w_forward(params, z_p, z_s))
    return mu_w @ factors


def parameter_count(
    kind: str,
    n_participants: int,
    n_stimuli: int,
    n_trials: int,
    n_timepoints: int,
    n_factors: int,
    embed_dim: int,
) -> int:
    """Closed-form trainable parameter totals.

    The embedding model counts both conditioning networks (weights,
    biases, one slope per hidden layer), the observation-noise scale,
    and the variational family.  The hierarchical-template baseline
    counts its variational family only: a global template plus per-trial
    geometry and per-(trial, time-point) weights.
    """
    if min(n_participants, n_stimuli, n_trials, n_timepoints, n_factors, embed_dim) < 1:
        raise ValueError("all counts must be >= 1")
    p, s, n, t = n_participants, n_stimuli, n_trials, n_timepoints
    k, d = n_factors, embed_dim
    if kind == "ntfa":
        eta_f = 2 * d * (d + 1) + 4 * d * (2 * d + 1) + 8 * k * (4 * d + 1) + 2
        eta_w = 4 * d * (2 * d + 1) + 8 * d * (4 * d + 1) + 2 * k * (8 * d + 1) + 2
        theta = eta_f + eta_w + 1
        lam = 2 * d * (p + s) + 8 * p * k + 2 * n * t * k
        return theta + lam
    if kind == "htfa":
        return 8 * k + 8 * k * n + 2 * n * t * k
    raise ValueError(f"unknown model kind {kind!r}")


def build_metrics(
    kind: str,
    seed: int,
    train_config: dict,
    split: SplitPlan,
    result: PredictiveResult,
    dataset: StudyDataset,
) -> dict:
    """Assemble the metrics record written by the evaluation command."""
    per_trial = [
        {
            "trial": n,
            "participant": dataset.trials[n].participant,
            "stimulus": dataset.trials[n].stimulus,
            "bound": value,
        }
        for n, value in result.per_trial
    ]
    return {
        "model_kind": kind,
        "seed": seed,
        "train_config": train_config,
        "split": {"train": split.train, "test": split.test},
        "n_test_trials": len(split.test),
        "per_trial": per_trial,
        "total_bound": result.total,
    }
