"""Command-line surface tying the pipeline together.

Subcommands:
    synth      design -> dataset directory plus ground-truth sidecar
    fit        dataset -> trained model archive
    eval       model + dataset -> metrics JSON over the diagonal split
    embed      model -> embeddings CSV (optional SVG scatter)
    mvpa       trial-classification AUC table (voxels or model weights)
    fc         connectivity-classification AUC table
    baseline   pca | htfa comparison models

Global flags (before the subcommand): --seed, --threads, --config.
Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _set_thread_env(argv):
    """Pin numeric thread pools before the array library loads."""
    n = "1"
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _load_config(path) -> dict:
    """key=value lines; '#' starts a comment."""
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {raw!r} is not key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _pick(args_value, config, key, cast, default):
    if args_value is not None:
        return args_value
    if key in config:
        raw = config[key]
        if cast is bool:
            return raw.lower() in ("1", "true", "yes")
        return cast(raw)
    return default


def _train_config(args, config, seed):
    from .inference import TrainConfig

    base = TrainConfig(seed=seed)
    return TrainConfig(
        lr_lambda=_pick(args.lr_lambda, config, "lr_lambda", float, base.lr_lambda),
        lr_theta=_pick(args.lr_theta, config, "lr_theta", float, base.lr_theta),
        epochs=_pick(args.epochs, config, "epochs", int, base.epochs),
        patience=_pick(args.patience, config, "patience", int, base.patience),
        decay=_pick(args.decay, config, "decay", float, base.decay),
        particles=_pick(args.particles, config, "particles", int, base.particles),
        batch_size=_pick(args.batch_size, config, "batch_size", int, base.batch_size),
        seed=seed,
    )


def _add_train_flags(parser):
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    parser.add_argument("--particles", type=int, default=None)
    parser.add_argument("--lr-lambda", type=float, default=None, dest="lr_lambda")
    parser.add_argument("--lr-theta", type=float, default=None, dest="lr_theta")
    parser.add_argument("--patience", type=int, default=None)
    parser.add_argument("--decay", type=float, default=None)


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _labels_for(dataset, task_idx, truth_path):
    if truth_path is not None:
        from .synthdata import GroundTruth

        truth = GroundTruth.load(truth_path)
        return [
            f"cat{truth.stimulus_category[dataset.trials[n].stimulus]}"
            for n in task_idx
        ]
    return [f"stim{dataset.trials[n].stimulus}" for n in task_idx]


def _write_auc_csv(path, results) -> None:
    lines = ["class,fold,auc"]
    for cls in sorted(results, key=str):
        scores = results[cls]
        for f, value in enumerate(scores.folds):
            lines.append(f"{cls},{f},{value!r}")
        lines.append(f"{cls},mean,{scores.mean!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# command handlers


def _cmd_synth(args, config):
    from .synthdata import SynthDesign, generate_synthetic

    if args.design == "default":
        design = SynthDesign()
    else:
        design = SynthDesign.from_json(args.design)
    if args.seed is not None:
        design.seed = args.seed
    dataset, truth = generate_synthetic(design)
    from .dataio import save_dataset

    out = Path(args.out)
    save_dataset(dataset, out)
    truth.save(out / "ground_truth.json")
    design.to_json(out / "design.json")
    print(f"wrote {dataset.n_trials} trials, V={dataset.n_voxels} to {out}")
    return 0


def _cmd_fit(args, config):
    from .dataio import load_dataset, zscore_dataset
    from .inference import fit
    from .model import GenerativeConfig
    from .persist import save_ntfa_model

    dataset = load_dataset(args.data)
    if args.zscore:
        dataset = zscore_dataset(dataset)
    seed = _seed(args)
    train_config = _train_config(args, config, seed)
    gen_config = GenerativeConfig(
        n_factors=_pick(args.factors, config, "factors", int, 3),
        embed_dim=_pick(args.embed_dim, config, "embed_dim", int, 2),
        n_voxels=dataset.n_voxels,
    )
    result = fit(dataset, train_config, gen_config)
    save_ntfa_model(
        args.out, result.params, result.vstate, gen_config, train_config,
        result.loss_trace,
    )
    final = result.loss_trace[-1] if result.loss_trace else float("nan")
    print(f"trained {train_config.epochs} epochs, final loss {final:.6g}")
    return 0


def _cmd_eval(args, config):
    from .dataio import load_dataset
    from .evaluation import build_metrics, heldout_split, log_predictive_bound
    from .persist import load_htfa_model, load_ntfa_model, model_kind

    dataset = load_dataset(args.data)
    split = heldout_split(dataset)
    seed = _seed(args)
    particles = _pick(args.particles, config, "eval_particles", int, 10)
    kind = model_kind(args.model)
    if kind == "ntfa":
        params, vstate, _, meta = load_ntfa_model(args.model)
        result = log_predictive_bound(
            params, vstate, dataset, split.test, particles, seed,
            threads=args.threads,
        )
    else:
        from .baselines import htfa_log_predictive

        state, meta = load_htfa_model(args.model)
        result = htfa_log_predictive(state, dataset, split.test, particles, seed)
    metrics = build_metrics(
        kind, seed, meta["train_config"], split, result, dataset
    )
    Path(args.out).write_text(json.dumps(metrics, indent=2, sort_keys=True))
    print(f"total bound {result.total:.6g} over {len(split.test)} held-out trials")
    return 0


def _cmd_embed(args, config):
    from .dataio import export_embeddings
    from .persist import load_ntfa_model

    _, vstate, _, _ = load_ntfa_model(args.model)
    labels = None
    if args.truth is not None:
        from .synthdata import GroundTruth

        truth = GroundTruth.load(args.truth)
        labels = {}
        for p, g in enumerate(truth.participant_group):
            labels[("participant", p)] = f"p{p}/g{g}"
        for s, c in enumerate(truth.stimulus_category):
            labels[("stimulus", s)] = f"s{s}/c{c}"
    export_embeddings(vstate, labels, args.out, args.svg)
    print(f"wrote embeddings to {args.out}")
    return 0


def _task_indices(dataset):
    return [n for n, t in enumerate(dataset.trials) if t.block_type == "task"]


def _load_weight_list(path):
    from .persist import load_htfa_model, load_ntfa_model, model_kind

    if model_kind(path) == "ntfa":
        _, vstate, _, _ = load_ntfa_model(path)
        return vstate.w_mu
    state, _ = load_htfa_model(path)
    return state.w_mu


def _cmd_mvpa(args, config):
    import numpy as np

    from .analysis import mvpa_run, timeavg_weight_features
    from .dataio import load_dataset

    dataset = load_dataset(args.data)
    task_idx = _task_indices(dataset)
    labels = _labels_for(dataset, task_idx, args.truth)
    run_ids = np.array(
        [f"{dataset.trials[n].participant}:{dataset.trials[n].run}" for n in task_idx]
    )
    if args.model is not None:
        features = timeavg_weight_features(_load_weight_list(args.model), task_idx)
        n_select = None
    else:
        features = np.stack([dataset.trials[n].data.mean(axis=0) for n in task_idx])
        n_select = args.select
    results = mvpa_run(
        features, labels, scheme=args.scheme, run_ids=run_ids,
        n_select=n_select, seed=_seed(args),
    )
    _write_auc_csv(args.out, results)
    means = {cls: round(r.mean, 4) for cls, r in results.items()}
    print(f"mean AUC per class: {means}")
    return 0


def _cmd_fc(args, config):
    import numpy as np

    from .analysis import fc_classify, fc_matrix
    from .dataio import load_dataset

    dataset = load_dataset(args.data)
    task_idx = _task_indices(dataset)
    labels = _labels_for(dataset, task_idx, args.truth)
    run_ids = np.array(
        [f"{dataset.trials[n].participant}:{dataset.trials[n].run}" for n in task_idx]
    )
    weights = _load_weight_list(args.model)
    mats = [fc_matrix(weights[n].data) for n in task_idx]
    results = fc_classify(
        mats, labels, scheme=args.scheme, run_ids=run_ids, seed=_seed(args)
    )
    _write_auc_csv(args.out, results)
    means = {cls: round(r.mean, 4) for cls, r in results.items()}
    print(f"mean AUC per class: {means}")
    return 0


def _cmd_baseline(args, config):
    if args.baseline_kind == "pca":
        from .baselines import pca_timeavg_embed
        from .dataio import load_dataset

        dataset = load_dataset(args.data)
        coords = pca_timeavg_embed(dataset)
        lines = ["trial,participant,stimulus,axis0,axis1"]
        for n, t in enumerate(dataset.trials):
            lines.append(
                f"{n},{t.participant},{t.stimulus if t.stimulus is not None else ''},"
                f"{coords[n, 0]!r},{coords[n, 1]!r}"
            )
        Path(args.out).write_text("\n".join(lines) + "\n")
        print(f"wrote {coords.shape[0]} projections to {args.out}")
        return 0

    from .baselines import htfa_fit
    from .dataio import load_dataset
    from .persist import save_htfa_model

    dataset = load_dataset(args.data)
    seed = _seed(args)
    train_config = _train_config(args, config, seed)
    n_factors = _pick(args.factors, config, "factors", int, 3)
    result = htfa_fit(dataset, n_factors, train_config)
    save_htfa_model(args.out, result.state, train_config, result.loss_trace)
    final = result.loss_trace[-1] if result.loss_trace else float("nan")
    print(f"trained baseline {train_config.epochs} epochs, final loss {final:.6g}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="ntfa", description=__doc__.split("\n\n")[0])
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--config", default=None, help="key=value defaults file")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic study")
    p.add_argument("--design", default="default", help="design JSON or 'default'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fit", help="train the embedding model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--factors", type=int, default=None)
    p.add_argument("--embed-dim", type=int, default=None, dest="embed_dim")
    p.add_argument("--zscore", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("eval", help="held-out predictive bound")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--particles", type=int, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("embed", help="export embeddings")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", default=None)
    p.add_argument("--truth", default=None)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("mvpa", help="trial classification AUC")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", choices=("stratified", "loro"), default="stratified")
    p.add_argument("--truth", default=None)
    p.add_argument("--select", type=int, default=500)
    p.set_defaults(func=_cmd_mvpa)

    p = sub.add_parser("fc", help="connectivity classification AUC")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", choices=("stratified", "loro"), default="stratified")
    p.add_argument("--truth", default=None)
    p.set_defaults(func=_cmd_fc)

    p = sub.add_parser("baseline", help="comparison models")
    bsub = p.add_subparsers(dest="baseline_kind")
    bp = bsub.add_parser("pca")
    bp.add_argument("--data", required=True)
    bp.add_argument("--out", required=True)
    bp.set_defaults(func=_cmd_baseline, baseline_kind="pca")
    bh = bsub.add_parser("htfa")
    bh.add_argument("--data", required=True)
    bh.add_argument("--out", required=True)
    bh.add_argument("--factors", type=int, default=None)
    _add_train_flags(bh)
    bh.set_defaults(func=_cmd_baseline, baseline_kind="htfa")

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    _set_thread_env(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        config = _load_config(args.config) if args.config else {}
        return args.func(args, config)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:  # format and contract violations
        print(f"error: {err}", file=sys.stderr)
        return 2
    except RuntimeError as err:  # numerical failures
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
