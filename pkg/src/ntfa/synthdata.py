"""Ground-truth synthetic studies with planted participant groups and
stimulus categories.

Participants are drawn from G group-specific Gaussians in embedding
space, stimuli from C category-specific Gaussians.  K factors sit at
manually chosen grid positions with log-widths drawn once per study.
Every participant undergoes one run of interleaved blocks (rest, task,
rest, ..., rest); rest-block weights are zero-mean noise, task-block
weights are noise around the scalar product of the participant and
stimulus embeddings, and the recorded signal is exactly weights @
factors.  Task-block weight noise can be equicorrelated across factors
with a per-category coefficient, which plants a connectivity contrast
between categories on top of the mean-level contrast.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dataio import StudyDataset, Trial
from .model import rbf_factor_matrix


def _default_centers():
    return [[-4.5, -4.5, -4.5], [4.5, 4.5, 4.5], [4.5, -4.5, -4.5]]


def _default_group_means():
    return [[0.8, 0.0], [1.0, 0.0], [1.2, 0.0]]


def _default_category_means():
    return [[1.0, 0.0], [2.0, 0.0]]


@dataclass
class SynthDesign:
    n_groups: int = 3
    participants_per_group: int = 3
    n_categories: int = 2
    stimuli_per_category: int = 4
    t_per_block: int = 20
    n_voxels: int = 5000
    factor_centers: list = field(default_factory=_default_centers)
    width_mean: float = float(np.log(6.25))
    width_sigma: float = 0.05
    group_means: list = field(default_factory=_default_group_means)
    group_cov: float | list = 4e-4
    category_means: list = field(default_factory=_default_category_means)
    category_cov: float | list = 2.5e-3
    weight_noise: float = 0.05
    weight_corr: list = field(default_factory=lambda: [0.6, 0.0])
    seed: int = 2024

    @property
    def n_participants(self) -> int:
        return self.n_groups * self.participants_per_group

    @property
    def n_stimuli(self) -> int:
        return self.n_categories * self.stimuli_per_category

    @property
    def n_factors(self) -> int:
        return len(self.factor_centers)

    @property
    def embed_dim(self) -> int:
        return len(self.group_means[0])

    def validate(self) -> None:
        if self.n_groups < 1 or self.participants_per_group < 1:
            raise ValueError("need at least one participant group member")
        if self.n_categories < 1 or self.stimuli_per_category < 1:
            raise ValueError("need at least one stimulus per category")
        if len(self.group_means) != self.n_groups:
            raise ValueError("one mean per participant group required")
        if len(self.category_means) != self.n_categories:
            raise ValueError("one mean per stimulus category required")
        if len({len(m) for m in self.group_means + self.category_means}) != 1:
            raise ValueError("all embedding means must share one dimension")
        if self.n_voxels < self.n_factors:
            raise ValueError("fewer voxels than factors")
        if len(self.weight_corr) != self.n_categories:
            raise ValueError("one weight-noise correlation per category required")
        if any(not (0.0 <= r < 1.0) for r in self.weight_corr):
            raise ValueError("weight-noise correlations must lie in [0, 1)")
        for cov in (self.group_cov, self.category_cov):
            _as_cov(cov, self.embed_dim)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path) -> "SynthDesign":
        data = json.loads(Path(path).read_text())
        return cls(**data)


@dataclass
class GroundTruth:
    participant_group: list[int]
    stimulus_category: list[int]
    z_p: np.ndarray  # (P, D)
    z_s: np.ndarray  # (S, D)
    factor_centers: np.ndarray  # (K, 3)
    factor_log_widths: np.ndarray  # (K,)
    trial_mean_weight: list[float]  # planted weight mean per trial

    def save(self, path) -> None:
        payload = {
            "participant_group": self.participant_group,
            "stimulus_category": self.stimulus_category,
            "z_p": self.z_p.tolist(),
            "z_s": self.z_s.tolist(),
            "factor_centers": self.factor_centers.tolist(),
            "factor_log_widths": self.factor_log_widths.tolist(),
            "trial_mean_weight": self.trial_mean_weight,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "GroundTruth":
        data = json.loads(Path(path).read_text())
        return cls(
            participant_group=data["participant_group"],
            stimulus_category=data["stimulus_category"],
            z_p=np.array(data["z_p"], dtype=np.float64),
            z_s=np.array(data["z_s"], dtype=np.float64),
            factor_centers=np.array(data["factor_centers"], dtype=np.float64),
            factor_log_widths=np.array(data["factor_log_widths"], dtype=np.float64),
            trial_mean_weight=data["trial_mean_weight"],
        )


def _as_cov(cov, dim) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim == 0:
        cov = np.eye(dim) * float(cov)
    elif cov.ndim == 1:
        if cov.shape[0] != dim:
            raise ValueError("diagonal covariance has wrong length")
        cov = np.diag(cov)
    elif cov.shape != (dim, dim):
        raise ValueError("covariance must be scalar, diagonal or (D, D)")
    if np.any(np.diag(cov) < 0):
        raise ValueError("covariance diagonal must be nonnegative")
    return cov


def _cov_factor(cov) -> np.ndarray:
    """Matrix square root for sampling; tolerates semi-definite inputs."""
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)


def make_voxel_grid(n_voxels: int) -> np.ndarray:
    """Regular unit lattice filling a cube, centered at the origin.

    When n_voxels is not a perfect cube the enclosing cube is truncated
    to the first n_voxels points in lexicographic coordinate order.
    """
    if n_voxels < 1:
        raise ValueError("need at least one voxel")
    side = 1
    while side ** 3 < n_voxels:
        side += 1
    axes = np.arange(side, dtype=np.float64)
    full = np.stack(np.meshgrid(axes, axes, axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return full[:n_voxels] - (side - 1) / 2.0


def sample_design_embeddings(design: SynthDesign, rng):
    """Draw per-stimulus and per-participant embeddings from the design's
    category/group Gaussians.  Returns (z_p, z_s) as (P, D) and (S, D)."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    d = design.embed_dim
    z_s = np.empty((design.n_stimuli, d))
    for c in range(design.n_categories):
        mean = np.asarray(design.category_means[c], dtype=np.float64)
        factor = _cov_factor(_as_cov(design.category_cov, d))
        for j in range(design.stimuli_per_category):
            z_s[c * design.stimuli_per_category + j] = mean + factor @ rng.standard_normal(d)
    z_p = np.empty((design.n_participants, d))
    for g in range(design.n_groups):
        mean = np.asarray(design.group_means[g], dtype=np.float64)
        factor = _cov_factor(_as_cov(design.group_cov, d))
        for j in range(design.participants_per_group):
            z_p[g * design.participants_per_group + j] = mean + factor @ rng.standard_normal(d)
    return z_p, z_s


def _block_sequence(design: SynthDesign):
    """Per-run block order: rest, then (one stimulus, rest) pairs cycling
    through the categories, so consecutive task blocks alternate
    categories.  Yields stimulus ids, None for rest."""
    blocks = [None]
    for j in range(design.stimuli_per_category):
        for c in range(design.n_categories):
            blocks.append(c * design.stimuli_per_category + j)
            blocks.append(None)
    return blocks


def generate_synthetic(design: SynthDesign):
    """Build a study plus its ground truth.

    Rest-block weights are N(0, weight_noise) per (time, factor); task
    blocks get mean z_p . z_s with the category's equicorrelated noise.
    The recorded data is exactly weights @ factors (no extra observation
    noise).  Returns (StudyDataset, GroundTruth).
    """
    design.validate()
    rng = np.random.default_rng(design.seed)
    grid = make_voxel_grid(design.n_voxels)

    centers = np.asarray(design.factor_centers, dtype=np.float64)
    log_widths = rng.normal(design.width_mean, design.width_sigma, size=design.n_factors)
    factors = rbf_factor_matrix(centers, log_widths, grid).data

    z_p, z_s = sample_design_embeddings(design, rng)

    t_len, k = design.t_per_block, design.n_factors
    sigma_w = design.weight_noise
    trials: list[Trial] = []
    trial_means: list[float] = []
    blocks = _block_sequence(design)
    for p in range(design.n_participants):
        for s in blocks:
            if s is None:
                w = rng.normal(0.0, sigma_w, size=(t_len, k))
                mean_w = 0.0
            else:
                mean_w = float(z_p[p] @ z_s[s])
                r = design.weight_corr[s // design.stimuli_per_category]
                shared = rng.standard_normal((t_len, 1))
                indep = rng.standard_normal((t_len, k))
                w = mean_w + sigma_w * (
                    np.sqrt(r) * shared + np.sqrt(1.0 - r) * indep
                )
            trials.append(
                Trial(
                    participant=p,
                    stimulus=s,
                    run=0,
                    block_type="rest" if s is None else "task",
                    data=w @ factors,
                )
            )
            trial_means.append(mean_w)

    dataset = StudyDataset(design.n_participants, design.n_stimuli, grid, trials)
    truth = GroundTruth(
        participant_group=[p // design.participants_per_group for p in range(design.n_participants)],
        stimulus_category=[s // design.stimuli_per_category for s in range(design.n_stimuli)],
        z_p=z_p,
        z_s=z_s,
        factor_centers=centers,
        factor_log_widths=log_widths,
        trial_mean_weight=trial_means,
    )
    return dataset, truth
