"""Pack trained models into on-disk archives and back.

An archive is a directory holding one matrix file per named array plus a
manifest with the model kind, configs, and the loss trace.  Per-trial
weight parameters are concatenated into single matrices with the trial
lengths recorded in the manifest.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .baselines import HtfaState
from .dataio import load_archive, save_archive
from .inference import TrainConfig, VariationalState
from .model import MLP, GenerativeConfig, GenerativeParams


def _mlp_arrays(prefix: str, mlp: MLP) -> dict:
    out = {}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out[f"{prefix}_w{i}"] = w.data
        out[f"{prefix}_b{i}"] = b.data
    for i, s in enumerate(mlp.slopes):
        out[f"{prefix}_s{i}"] = s.data
    return out


def _mlp_from_arrays(prefix: str, arrays: dict, n_layers: int) -> MLP:
    weights = [dc.parameter(arrays[f"{prefix}_w{i}"]) for i in range(n_layers)]
    biases = [dc.parameter(arrays[f"{prefix}_b{i}"]) for i in range(n_layers)]
    slopes = [dc.parameter(arrays[f"{prefix}_s{i}"]) for i in range(n_layers - 1)]
    return MLP(weights, biases, slopes)


def _stack_w(tensors) -> np.ndarray:
    return np.concatenate([t.data for t in tensors], axis=0)


def _split_w(matrix, t_lens) -> list:
    splits = np.cumsum(t_lens)[:-1]
    return [dc.parameter(block) for block in np.split(matrix, splits, axis=0)]


def save_ntfa_model(
    path,
    params: GenerativeParams,
    vstate: VariationalState,
    gen_config: GenerativeConfig,
    train_config: TrainConfig,
    loss_trace,
) -> None:
    arrays = {}
    arrays.update(_mlp_arrays("eta_f", params.eta_f))
    arrays.update(_mlp_arrays("eta_w", params.eta_w))
    arrays["log_sigma_y"] = params.log_sigma_y.data
    arrays["z_p_mu"] = vstate.z_p_mu.data
    arrays["z_p_log_sigma"] = vstate.z_p_log_sigma.data
    arrays["z_s_mu"] = vstate.z_s_mu.data
    arrays["z_s_log_sigma"] = vstate.z_s_log_sigma.data
    arrays["x_mu"] = vstate.x_mu.data
    arrays["x_log_sigma"] = vstate.x_log_sigma.data
    arrays["rho_mu"] = vstate.rho_mu.data
    arrays["rho_log_sigma"] = vstate.rho_log_sigma.data
    arrays["w_mu"] = _stack_w(vstate.w_mu)
    arrays["w_log_sigma"] = _stack_w(vstate.w_log_sigma)
    meta = {
        "gen_config": {
            "n_factors": gen_config.n_factors,
            "embed_dim": gen_config.embed_dim,
            "n_voxels": gen_config.n_voxels,
        },
        "train_config": train_config.to_dict(),
        "loss_trace": list(loss_trace),
        "t_lens": [t.shape[0] for t in vstate.w_mu],
    }
    save_archive(path, "ntfa", arrays, meta)


def load_ntfa_model(path):
    kind, arrays, meta = load_archive(path)
    if kind != "ntfa":
        raise ValueError(f"archive at {path} holds a {kind!r} model")
    gen_config = GenerativeConfig(**meta["gen_config"])
    params = GenerativeParams(
        eta_f=_mlp_from_arrays("eta_f", arrays, 3),
        eta_w=_mlp_from_arrays("eta_w", arrays, 3),
        log_sigma_y=dc.parameter(arrays["log_sigma_y"]),
    )
    t_lens = meta["t_lens"]
    vstate = VariationalState(
        z_p_mu=dc.parameter(arrays["z_p_mu"]),
        z_p_log_sigma=dc.parameter(arrays["z_p_log_sigma"]),
        z_s_mu=dc.parameter(arrays["z_s_mu"]),
        z_s_log_sigma=dc.parameter(arrays["z_s_log_sigma"]),
        x_mu=dc.parameter(arrays["x_mu"]),
        x_log_sigma=dc.parameter(arrays["x_log_sigma"]),
        rho_mu=dc.parameter(arrays["rho_mu"]),
        rho_log_sigma=dc.parameter(arrays["rho_log_sigma"]),
        w_mu=_split_w(arrays["w_mu"], t_lens),
        w_log_sigma=_split_w(arrays["w_log_sigma"], t_lens),
    )
    return params, vstate, gen_config, meta


def save_htfa_model(
    path, state: HtfaState, train_config: TrainConfig, loss_trace
) -> None:
    arrays = {
        "template_x_mu": state.template_x_mu.data,
        "template_x_log_sigma": state.template_x_log_sigma.data,
        "template_rho_mu": state.template_rho_mu.data,
        "template_rho_log_sigma": state.template_rho_log_sigma.data,
        "x_mu": state.x_mu.data,
        "x_log_sigma": state.x_log_sigma.data,
        "rho_mu": state.rho_mu.data,
        "rho_log_sigma": state.rho_log_sigma.data,
        "w_mu": _stack_w(state.w_mu),
        "w_log_sigma": _stack_w(state.w_log_sigma),
        "log_sigma_y": state.log_sigma_y.data,
        "prior_centers": state.prior_centers,
        "prior_widths": state.prior_widths,
    }
    meta = {
        "train_config": train_config.to_dict(),
        "loss_trace": list(loss_trace),
        "t_lens": [t.shape[0] for t in state.w_mu],
        "n_factors": int(state.template_rho_mu.shape[0]),
    }
    save_archive(path, "htfa", arrays, meta)


def load_htfa_model(path):
    kind, arrays, meta = load_archive(path)
    if kind != "htfa":
        raise ValueError(f"archive at {path} holds a {kind!r} model")
    t_lens = meta["t_lens"]
    state = HtfaState(
        template_x_mu=dc.parameter(arrays["template_x_mu"]),
        template_x_log_sigma=dc.parameter(arrays["template_x_log_sigma"]),
        template_rho_mu=dc.parameter(arrays["template_rho_mu"]),
        template_rho_log_sigma=dc.parameter(arrays["template_rho_log_sigma"]),
        x_mu=dc.parameter(arrays["x_mu"]),
        x_log_sigma=dc.parameter(arrays["x_log_sigma"]),
        rho_mu=dc.parameter(arrays["rho_mu"]),
        rho_log_sigma=dc.parameter(arrays["rho_log_sigma"]),
        w_mu=_split_w(arrays["w_mu"], t_lens),
        w_log_sigma=_split_w(arrays["w_log_sigma"], t_lens),
        log_sigma_y=dc.parameter(arrays["log_sigma_y"]),
        prior_centers=np.asarray(arrays["prior_centers"]),
        prior_widths=np.asarray(arrays["prior_widths"]).reshape(-1),
    )
    return state, meta


def model_kind(path) -> str:
    kind, _, _ = load_archive(path)
    return kind
