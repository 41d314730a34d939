"""Variational machinery: clustering initialization, the stochastic bound,
annealing, and the training loop."""

import numpy as np
import pytest

from ntfa import diffcore as dc
from ntfa.dataio import StudyDataset, Trial
from ntfa.inference import (
    TrainConfig,
    elbo_iwae,
    fit,
    init_kmeans,
    init_variational,
    lr_schedule,
)
from ntfa.model import (
    GenerativeConfig,
    geometry_output_bias,
    init_generative_params,
)
from ntfa.synthdata import SynthDesign, generate_synthetic, make_voxel_grid

from helpers import QuadToy, make_unit_study

LOG_ROOT_2PI = 0.9189385332046727


def _bump_dataset(center, v=64, amp=5.0):
    grid = make_voxel_grid(v)
    d2 = ((grid - np.asarray(center)) ** 2).sum(axis=1)
    signal = amp * np.exp(-d2 / 4.0)
    data = np.tile(signal, (3, 1))
    return StudyDataset(1, 1, grid, [Trial(0, 0, 0, "task", data)])


class TestKmeansInit:
    def test_single_cluster_is_weighted_centroid(self):
        ds = _bump_dataset([1.5, 1.5, 1.5])
        centers, widths = init_kmeans(ds, 1, rng=0)
        w = np.abs(ds.trials[0].data).mean(axis=0)
        expect = (ds.voxel_grid * w[:, None]).sum(axis=0) / w.sum()
        np.testing.assert_allclose(centers[0], expect, atol=1e-9)
        msd = (w * ((ds.voxel_grid - expect) ** 2).sum(axis=1)).sum() / w.sum()
        assert widths[0] == pytest.approx(np.log(msd))

    def test_two_separated_blobs(self):
        grid = np.vstack(
            [
                np.random.default_rng(0).uniform(-1, 1, size=(30, 3)) + [-10, 0, 0],
                np.random.default_rng(1).uniform(-1, 1, size=(30, 3)) + [10, 0, 0],
            ]
        )
        data = np.ones((2, 60))
        ds = StudyDataset(1, 1, grid, [Trial(0, 0, 0, "task", data)])
        centers, _ = init_kmeans(ds, 2, rng=3)
        xs = sorted(centers[:, 0])
        assert xs[0] == pytest.approx(-10, abs=1.0)
        assert xs[1] == pytest.approx(10, abs=1.0)

    def test_recovers_planted_regions(self):
        design = SynthDesign(n_voxels=1000)
        ds, truth = generate_synthetic(design)
        centers, _ = init_kmeans(ds, 3, rng=0)
        # every planted center is claimed by a distinct clustering center
        claimed = set()
        for planted in truth.factor_centers:
            d = np.linalg.norm(centers - planted, axis=1)
            k = int(np.argmin(d))
            assert d[k] < 2.5
            claimed.add(k)
        assert claimed == {0, 1, 2}

    def test_too_many_clusters_rejected(self):
        ds = _bump_dataset([0, 0, 0], v=8)
        with pytest.raises(ValueError):
            init_kmeans(ds, 9)

    def test_deterministic_given_rng(self):
        ds = _bump_dataset([1, 0, -1])
        c1, w1 = init_kmeans(ds, 3, rng=7)
        c2, w2 = init_kmeans(ds, 3, rng=7)
        np.testing.assert_array_equal(c1, c2)
        np.testing.assert_array_equal(w1, w2)


class TestElboIwae:
    def test_prior_proposal_without_likelihood_is_exactly_zero(self):
        # constant conditionals make the proposal equal the prior exactly,
        # so each particle's log-ratio vanishes term by term
        toy = QuadToy(slope=0.0, intercept=0.4, q_z=(0.0, 0.0), q_w=(0.4, -0.5))
        for seed in range(20):
            bound = elbo_iwae(
                toy.params, toy.vstate, toy.dataset, [0], 3, rng=seed,
                include_likelihood=False,
            )
            assert bound.item() == pytest.approx(0.0, abs=1e-12)

    def test_single_particle_matches_replayed_estimator(self):
        # replay the noise stream and rebuild the one-particle estimate
        # from densities alone
        toy = QuadToy(y=1.3, q_z=(0.5, -0.8), q_w=(1.0, -0.4))
        seed = 17
        bound = elbo_iwae(toy.params, toy.vstate, toy.dataset, [0], 1, rng=seed)

        rng = np.random.default_rng(seed)
        e_zp = rng.standard_normal((1, 1))
        e_zs = rng.standard_normal((1, 1))
        e_x = rng.standard_normal((1, 3))
        e_rho = rng.standard_normal(1)
        e_w = rng.standard_normal((1, 1, 1))

        def logn(x, mu, ls):
            return float(
                np.sum(-0.5 * np.log(2 * np.pi) - ls - (x - mu) ** 2 / (2 * np.exp(2 * ls)))
            )

        z = 0.5 + np.exp(-0.8) * e_zp[0, 0]
        x = np.exp(-8.0) * e_x  # q and conditional share the clamp floor
        rho = np.exp(-8.0) * e_rho
        w = 1.0 + np.exp(-0.4) * e_w[0, 0, 0]
        f = np.exp(-np.sum(x ** 2) / np.exp(rho[0]))
        expect = (
            logn(z, 0.0, 0.0)
            - logn(z, 0.5, -0.8)
            + logn(w, toy.slope * z + toy.intercept, -0.5)
            - logn(w, 1.0, -0.4)
            + logn(toy.y, w * f, -0.5)
        )
        # geometry and stimulus terms cancel exactly
        assert bound.item() == pytest.approx(expect, rel=1e-10)

    def test_bound_below_marginal_for_every_seed(self):
        toy = QuadToy(y=2.0, q_z=(-1.5, -1.0), q_w=(3.0, -1.0))
        marginal = toy.log_marginal()
        vals = [
            elbo_iwae(toy.params, toy.vstate, toy.dataset, [0], 1, rng=s).item()
            for s in range(200)
        ]
        assert max(vals) < marginal

    def test_more_particles_tighten_on_average(self):
        toy = QuadToy(y=2.0, q_z=(-1.5, -1.0), q_w=(3.0, -1.0))
        means = []
        for particles in (1, 5, 25):
            vals = np.array(
                [
                    elbo_iwae(
                        toy.params, toy.vstate, toy.dataset, [0], particles, rng=s
                    ).item()
                    for s in range(150)
                ]
            )
            means.append(vals.mean())
        ses = 2 * 15.0 / np.sqrt(150)  # generous spread allowance
        assert means[1] >= means[0] - ses
        assert means[2] >= means[1] - ses

    def test_batch_sum_is_unbiased_for_full_bound(self):
        dataset, config, params, vstate = make_unit_study()
        n = dataset.n_trials
        half = n // 2
        full_vals, split_vals = [], []
        for s in range(400):
            full_vals.append(
                elbo_iwae(params, vstate, dataset, list(range(n)), 1, rng=s).item()
            )
            a = elbo_iwae(params, vstate, dataset, list(range(half)), 1, rng=s).item()
            b = elbo_iwae(
                params, vstate, dataset, list(range(half, n)), 1, rng=s + 10_000
            ).item()
            split_vals.append(a + b)
        full_vals = np.array(full_vals)
        split_vals = np.array(split_vals)
        se = np.sqrt(full_vals.var() / 400 + split_vals.var() / 400)
        assert abs(full_vals.mean() - split_vals.mean()) < 3 * se

    def test_empty_batch_rejected(self):
        toy = QuadToy()
        with pytest.raises(ValueError):
            elbo_iwae(toy.params, toy.vstate, toy.dataset, [], 1)


class TestLrSchedule:
    def test_improving_losses_keep_rates(self):
        losses = list(np.linspace(10, 1, 300))
        assert lr_schedule(losses, (0.01, 1e-4), patience=100) == (0.01, 1e-4)

    def test_plateau_halves_once(self):
        losses = [1.0] * 101  # the first epoch sets the best
        assert lr_schedule(losses, (0.01, 1e-4), patience=100) == (0.005, 5e-5)

    def test_long_plateau_quarters(self):
        losses = [1.0] * 251
        lrs = lr_schedule(losses, (0.01, 1e-4), patience=100)
        assert lrs == (0.0025, 2.5e-5)

    def test_recovery_resets_counter(self):
        losses = [1.0] + [1.0] * 60 + [0.5] + [0.5] * 60
        assert lr_schedule(losses, (0.01, 1e-4), patience=100) == (0.01, 1e-4)


class TestFit:
    def _dataset(self):
        design = SynthDesign(
            n_voxels=64, t_per_block=4, stimuli_per_category=2, seed=2
        )
        dataset, _ = generate_synthetic(design)
        return dataset

    def test_zero_epochs_returns_initialization(self):
        dataset = self._dataset()
        cfg = GenerativeConfig(3, 2, 64)
        res = fit(dataset, TrainConfig(epochs=0, seed=4), cfg)
        rng = np.random.default_rng(4)
        centers, widths = init_kmeans(dataset, 3, rng=rng)
        params = init_generative_params(
            cfg,
            rng,
            factor_bias=geometry_output_bias(centers, widths),
            log_sigma_y=res.params.log_sigma_y.item(),
        )
        vstate = init_variational(dataset, cfg, centers, widths, rng)
        np.testing.assert_array_equal(
            res.params.eta_f.weights[0].data, params.eta_f.weights[0].data
        )
        np.testing.assert_array_equal(res.vstate.z_p_mu.data, vstate.z_p_mu.data)
        np.testing.assert_array_equal(res.vstate.w_mu[0].data, 0.0)
        assert res.loss_trace == []

    def test_deterministic_given_seed(self):
        dataset = self._dataset()
        cfg = GenerativeConfig(3, 2, 64)
        r1 = fit(dataset, TrainConfig(epochs=3, batch_size=20, seed=9), cfg)
        r2 = fit(dataset, TrainConfig(epochs=3, batch_size=20, seed=9), cfg)
        assert r1.loss_trace == r2.loss_trace
        np.testing.assert_array_equal(r1.vstate.z_p_mu.data, r2.vstate.z_p_mu.data)
        np.testing.assert_array_equal(
            r1.params.eta_w.weights[0].data, r2.params.eta_w.weights[0].data
        )

    def test_loss_improves_on_small_study(self):
        dataset = self._dataset()
        cfg = GenerativeConfig(3, 2, 64)
        res = fit(dataset, TrainConfig(epochs=40, batch_size=20, seed=0), cfg)
        assert res.loss_trace[-1] < res.loss_trace[0]

    def test_nan_data_aborts_with_trial_name(self):
        dataset = self._dataset()
        dataset.trials[5].data[0, 0] = np.nan
        cfg = GenerativeConfig(3, 2, 64)
        with pytest.raises(dc.NumericalError, match="trial 5"):
            fit(dataset, TrainConfig(epochs=2, batch_size=None, seed=0), cfg)

    def test_coverage_precondition(self):
        dataset = self._dataset()
        dataset = StudyDataset(
            dataset.n_participants + 1,  # a participant with no trials
            dataset.n_stimuli,
            dataset.voxel_grid,
            dataset.trials,
        )
        with pytest.raises(ValueError, match="coverage"):
            fit(dataset, TrainConfig(epochs=1), GenerativeConfig(3, 2, 64))

    def test_variational_count_closed_form(self):
        dataset = self._dataset()
        cfg = GenerativeConfig(3, 2, 64)
        res = fit(dataset, TrainConfig(epochs=0, seed=0), cfg)
        p, s = dataset.n_participants, dataset.n_stimuli
        n, t, k, d = dataset.n_trials, 4, 3, 2
        expect = 2 * d * (p + s) + p * (6 * k + 2 * k) + 2 * n * t * k
        assert res.vstate.n_values == expect
