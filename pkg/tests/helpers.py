"""Shared test utilities: finite-difference gradient checking, a tiny
unit-scale study for whole-graph checks, and a one-voxel toy whose log
marginal is computable by Gauss-Hermite quadrature."""

import numpy as np

from ntfa import diffcore as dc
from ntfa.dataio import StudyDataset, Trial
from ntfa.inference import VariationalState, init_kmeans, init_variational
from ntfa.model import (
    MLP,
    GenerativeConfig,
    GenerativeParams,
    geometry_output_bias,
    init_generative_params,
    sample_generative,
)
from ntfa.synthdata import make_voxel_grid

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-8  # treat near-zero analytic/numeric pairs as agreeing


def fd_error(value_fn, leaf, flat_index, analytic, h=FD_STEP):
    """Relative error between an analytic gradient entry and a central
    difference of `value_fn` (which must be deterministic)."""
    flat = leaf.data.reshape(-1)
    old = flat[flat_index]
    flat[flat_index] = old + h
    up = value_fn()
    flat[flat_index] = old - h
    down = value_fn()
    flat[flat_index] = old
    fd = (up - down) / (2.0 * h)
    if abs(analytic - fd) <= FD_ATOL:
        return 0.0
    return abs(analytic - fd) / max(abs(analytic), abs(fd))


def gradcheck_scalar(build_fn, leaves, rng, n_probes=20, h=FD_STEP):
    """Check `n_probes` random coordinates of `leaves` against central
    differences of the scalar built by `build_fn()`.  Returns the worst
    relative error."""
    out = build_fn()
    out.backward()
    grads = {id(leaf): leaf.gradient().copy() for leaf in leaves}
    for leaf in leaves:
        leaf.grad = None
    worst = 0.0
    for _ in range(n_probes):
        leaf = leaves[int(rng.integers(len(leaves)))]
        if leaf.size == 0:
            continue
        j = int(rng.integers(leaf.size))
        err = fd_error(
            lambda: build_fn().item(), leaf, j, grads[id(leaf)].reshape(-1)[j], h
        )
        worst = max(worst, err)
    return worst


def make_unit_study(seed=11, n_voxels=12, n_factors=2, embed_dim=2, t_len=2):
    """A small study sampled from a fresh model, with unit-scale data, plus
    matching initialized parameters and variational state."""
    rng = np.random.default_rng(123)
    grid = make_voxel_grid(n_voxels)
    config = GenerativeConfig(n_factors, embed_dim, n_voxels)
    sampler = init_generative_params(config, rng, log_sigma_y=0.0)
    plan = [
        (0, 0, t_len),
        (0, 1, t_len),
        (1, 0, t_len),
        (1, None, t_len),
        (0, None, t_len),
        (1, 1, t_len),
    ]
    dataset, _ = sample_generative(config, sampler, grid, plan, seed)
    centers, widths = init_kmeans(dataset, n_factors, rng=rng)
    params = init_generative_params(
        config, rng, factor_bias=geometry_output_bias(centers, widths), log_sigma_y=0.0
    )
    vstate = init_variational(dataset, config, centers, widths, rng)
    return dataset, config, params, vstate


# ---------------------------------------------------------------------------
# one-voxel quadrature toy
#
# One factor, one voxel sitting exactly on the factor center, one time
# point.  The geometry network is constant (zero weights, log-scales at
# the clamp floor) and the matching variational factors equal those
# conditionals exactly, so their terms cancel per sample.  The weight
# network reads only the participant embedding and its hidden slopes are
# 1.0, making the conditional weight mean exactly affine: w | z ~
# N(a z + b, sw), y | w ~ N(w, sy), z ~ N(0, 1).  The stimulus embedding
# keeps its prior as proposal and cancels as well.  The only live latent
# dimensions are (z, w), so Gauss-Hermite quadrature over them gives the
# exact log marginal.


def _zero_mlp(dims):
    weights = [dc.parameter(np.zeros((dims[i], dims[i + 1]))) for i in range(len(dims) - 1)]
    biases = [dc.parameter(np.zeros(dims[i + 1])) for i in range(len(dims) - 1)]
    slopes = [dc.parameter(1.0) for _ in range(len(dims) - 2)]
    return MLP(weights, biases, slopes)


class QuadToy:
    def __init__(
        self,
        y=2.0,
        slope=1.0,
        intercept=0.0,
        log_sigma_w=-0.5,
        log_sigma_y=-0.5,
        q_z=(0.0, 0.0),
        q_w=(0.0, 0.0),
    ):
        self.y = float(y)
        self.slope = float(slope)
        self.intercept = float(intercept)
        self.sigma_w = float(np.exp(log_sigma_w))
        self.sigma_y = float(np.exp(log_sigma_y))

        grid = np.zeros((1, 3))
        config = GenerativeConfig(1, 1, 1)
        eta_f = _zero_mlp([1, 2, 4, 8])
        bias = np.zeros((1, 4, 2))
        bias[0, :, 1] = -8.0  # conditional scales at the clamp floor
        eta_f.biases[-1] = dc.parameter(bias.reshape(-1))
        eta_w = _zero_mlp([2, 4, 8, 2])
        w1 = np.zeros((2, 4))
        w1[0, 0] = 1.0  # read z_p only; z_s input is dead
        eta_w.weights[0] = dc.parameter(w1)
        w2 = np.zeros((4, 8))
        w2[0, 0] = 1.0
        eta_w.weights[1] = dc.parameter(w2)
        w3 = np.zeros((8, 2))
        w3[0, 0] = self.slope
        eta_w.weights[2] = dc.parameter(w3)
        eta_w.biases[-1] = dc.parameter(np.array([self.intercept, log_sigma_w]))
        self.params = GenerativeParams(eta_f, eta_w, dc.parameter(float(log_sigma_y)))

        self.vstate = VariationalState(
            z_p_mu=dc.parameter([[q_z[0]]]),
            z_p_log_sigma=dc.parameter([[q_z[1]]]),
            z_s_mu=dc.parameter([[0.0]]),
            z_s_log_sigma=dc.parameter([[0.0]]),
            x_mu=dc.parameter(np.zeros((1, 1, 3))),
            x_log_sigma=dc.parameter(np.full((1, 1, 3), -8.0)),
            rho_mu=dc.parameter(np.zeros((1, 1))),
            rho_log_sigma=dc.parameter(np.full((1, 1), -8.0)),
            w_mu=[dc.parameter([[q_w[0]]])],
            w_log_sigma=[dc.parameter([[q_w[1]]])],
        )
        self.config = config
        self.dataset = StudyDataset(
            1, 1, grid, [Trial(0, 0, 0, "task", np.array([[self.y]]))]
        )

    # quadrature oracles -------------------------------------------------

    def _gh(self, n):
        x, w = np.polynomial.hermite.hermgauss(n)
        return np.sqrt(2.0) * x, w / np.sqrt(np.pi)

    def log_marginal(self, n_nodes=80) -> float:
        """log p(y) by 2-D Gauss-Hermite over (z, w)."""
        z, wz = self._gh(n_nodes)
        u, wu = self._gh(n_nodes)
        mean_w = self.slope * z[:, None] + self.intercept + self.sigma_w * u[None, :]
        dens = np.exp(-0.5 * ((self.y - mean_w) / self.sigma_y) ** 2) / (
            self.sigma_y * np.sqrt(2 * np.pi)
        )
        return float(np.log(np.einsum("i,j,ij->", wz, wu, dens)))

    def log_marginal_analytic(self) -> float:
        var = self.slope ** 2 + self.sigma_w ** 2 + self.sigma_y ** 2
        resid = self.y - self.intercept
        return float(-0.5 * np.log(2 * np.pi * var) - 0.5 * resid ** 2 / var)

    def log_joint_marginal(self, y_new, n_nodes=80) -> float:
        """log p(y, y_new) by 3-D Gauss-Hermite over (z, w, w_new)."""
        z, wz = self._gh(n_nodes)
        u, wu = self._gh(n_nodes)
        v, wv = self._gh(n_nodes)
        mw = self.slope * z[:, None] + self.intercept + self.sigma_w * u[None, :]
        d1 = np.exp(-0.5 * ((self.y - mw) / self.sigma_y) ** 2) / (
            self.sigma_y * np.sqrt(2 * np.pi)
        )
        mw2 = self.slope * z[:, None] + self.intercept + self.sigma_w * v[None, :]
        d2 = np.exp(-0.5 * ((y_new - mw2) / self.sigma_y) ** 2) / (
            self.sigma_y * np.sqrt(2 * np.pi)
        )
        inner1 = d1 @ wu  # integrate w for each z node
        inner2 = d2 @ wv
        return float(np.log(np.sum(wz * inner1 * inner2)))

    def log_posterior_predictive(self, y_new, n_nodes=80) -> float:
        return self.log_joint_marginal(y_new, n_nodes) - self.log_marginal(n_nodes)

    def posterior_z_moments(self):
        """Exact Gaussian posterior of z given y (the toy is linear)."""
        var_obs = self.sigma_w ** 2 + self.sigma_y ** 2
        precision = 1.0 + self.slope ** 2 / var_obs
        mean = (self.slope * (self.y - self.intercept) / var_obs) / precision
        return mean, np.sqrt(1.0 / precision)


def centroid_accuracy(points, labels) -> float:
    """Fraction of points whose nearest own-group centroid matches their
    label."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    groups = sorted(set(labels.tolist()))
    centroids = np.stack([points[labels == g].mean(axis=0) for g in groups])
    dist = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assigned = np.asarray(groups)[np.argmin(dist, axis=1)]
    return float(np.mean(assigned == labels))
