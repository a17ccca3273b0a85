"""Command-line pipeline: synth, train, extract, fnc, infomax, compare,
gradcheck, dump-config.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
error. All randomness is controlled by --seed (fallback: TCSEP_SEED).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import analysis, infomax as ica, io, train as training
from .config import RunConfig, load_config
from .dataset import (Dataset, SynthConfig, load_dataset, load_truth, pca_fit,
                      pca_transform, save_dataset, save_truth, standardize,
                      synth_generate)
from .errors import (ArgumentError, DataError, FormatError, NumericalError,
                     TcsepError)
from .model import load_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(sub, threads: bool = False):
    sub.add_argument("--config", help="plain-text key = value config file")
    sub.add_argument("--seed", type=int, default=None,
                     help="RNG seed (default: $TCSEP_SEED or 0)")
    if threads:
        sub.add_argument("--threads", type=int, default=1,
                         help="worker-thread cap; results are identical for any value")


def build_parser() -> _Parser:
    parser = _Parser(prog="tcsep", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic ground-truth dataset")
    p.add_argument("--out", required=True, help="output TCSF matrix path")
    p.add_argument("--subjects-out", help="subjects CSV (default: <out>.subjects.csv)")
    p.add_argument("--truth", help="optional ground-truth container path")
    p.add_argument("--kind", help="linear | post_nonlinear (pnl) | mlp")
    p.add_argument("--k-true", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--subjects", type=int)
    p.add_argument("--t", type=int, help="timepoints per subject")
    p.add_argument("--noise", type=float)
    _add_common(p)

    p = subs.add_parser("train", help="train the model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--subjects", help="subjects CSV (default: <data>.subjects.csv)")
    p.add_argument("--out", help="checkpoint path (default: <data>.ckpt)")
    p.add_argument("--log", help="loss CSV path (default: <out>.loss.csv)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta", type=float, help="final beta after warm-up")
    p.add_argument("--warmup", type=int)
    p.add_argument("--clip", type=float)
    p.add_argument("--k", type=int, help="latent dimensionality")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--hidden1", type=int)
    p.add_argument("--hidden2", type=int)
    p.add_argument("--no-pca", action="store_true")
    p.add_argument("--pca-dim", type=int)
    p.add_argument("--pca-whiten", action="store_true")
    p.add_argument("--per-subject-standardize", action="store_true")
    p.add_argument("--ckpt-every", type=int)
    _add_common(p, threads=True)

    p = subs.add_parser("extract", help="extract components from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subjects")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--method", choices=("regression", "jacobian"))
    p.add_argument("--probes", type=int, help="jacobian probe count")
    p.add_argument("--n-components", type=int,
                   help="keep top-n components by time-course variance (0 = all)")
    _add_common(p, threads=True)

    p = subs.add_parser("fnc", help="functional connectivity of latent time courses")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subjects")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--n-components", type=int)
    _add_common(p, threads=True)

    p = subs.add_parser("infomax", help="fit the linear ICA baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--subjects")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--tol", type=float)
    _add_common(p)

    p = subs.add_parser("compare", help="match model components against InfoMax")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subjects")
    p.add_argument("--truth", help="ground-truth container for MCC columns")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, help="InfoMax component count")
    p.add_argument("--method", choices=("regression", "jacobian"))
    p.add_argument("--n-components", type=int)
    _add_common(p, threads=True)

    p = subs.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--models", type=int, default=20)
    p.add_argument("--h", type=float, default=1e-5)
    _add_common(p)

    p = subs.add_parser("dump-config", help="print the effective config")
    p.add_argument("--config")
    return parser


def _seed_of(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("TCSEP_SEED")
    return int(env) if env else 0


def _config_of(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _override(cfg: RunConfig, key: str, value) -> None:
    if value is not None:
        cfg.set(key, value)


def _subjects_path(args, data_attr: str = "data") -> str:
    return args.subjects or getattr(args, data_attr) + ".subjects.csv"


def _load_standardized(args, per_subject: bool) -> Dataset:
    d = load_dataset(args.data, _subjects_path(args))
    return standardize(d, per_subject=per_subject)


def _model_input(d: Dataset, pca) -> Dataset:
    if pca is None:
        return d
    return Dataset(pca_transform(pca, d.x), d.subject_of_row, d.n_subjects,
                   d.n_timepoints_per_subject)


def _cmd_synth(args) -> int:
    cfg = _config_of(args)
    _override(cfg, "synth.k_true", args.k_true)
    _override(cfg, "synth.d", args.d)
    _override(cfg, "synth.subjects", args.subjects)
    _override(cfg, "synth.t_per_subject", args.t)
    _override(cfg, "synth.noise_std", args.noise)
    if args.kind is not None:
        cfg.set_raw("synth.kind", args.kind)
    scfg = SynthConfig(
        k_true=cfg["synth.k_true"], d=cfg["synth.d"],
        n_subjects=cfg["synth.subjects"], t_per_subject=cfg["synth.t_per_subject"],
        mixing_kind=cfg["synth.kind"], noise_std=cfg["synth.noise_std"],
        seed=_seed_of(args),
    )
    d, truth = synth_generate(scfg)
    save_dataset(args.out, args.subjects_out or args.out + ".subjects.csv", d)
    if args.truth:
        save_truth(args.truth, truth)
    print(f"wrote {d.n_rows}x{d.feature_dim} dataset "
          f"({scfg.n_subjects} subjects, kind={scfg.mixing_kind})")
    return 0


def _cmd_train(args) -> int:
    cfg = _config_of(args)
    _override(cfg, "train.epochs", args.epochs)
    _override(cfg, "train.batch_size", args.batch_size)
    _override(cfg, "train.lr", args.lr)
    _override(cfg, "train.beta_final", args.beta)
    _override(cfg, "train.warmup_epochs", args.warmup)
    _override(cfg, "train.clip_norm", args.clip)
    _override(cfg, "train.ckpt_every", args.ckpt_every)
    _override(cfg, "model.latent_dim", args.k)
    _override(cfg, "model.embed_dim", args.embed_dim)
    _override(cfg, "model.hidden1", args.hidden1)
    _override(cfg, "model.hidden2", args.hidden2)
    _override(cfg, "data.pca_dim", args.pca_dim)
    if args.no_pca:
        cfg.set("data.use_pca", False)
    if args.pca_whiten:
        cfg.set("data.pca_whiten", True)
    if args.per_subject_standardize:
        cfg.set("data.per_subject_standardize", True)

    out = args.out or args.data + ".ckpt"
    log_path = args.log or out + ".loss.csv"

    if args.resume:
        params, meta, adam_tensors, pca = load_checkpoint(args.resume)
        per_subject = meta.get("standardize.per_subject", "false") == "true"
        d = _load_standardized(args, per_subject)
        din = _model_input(d, pca)
        seed = int(meta["seed"])
        start_epoch = int(meta["epoch"])
        adam = training.AdamState.from_tensors(
            params, adam_tensors, step=int(meta["step"]), lr=float(meta["lr"]))
        tcfg = _train_config(cfg, out)
        params, log = training.train(
            din, tcfg, seed, resume_params=params, resume_adam=adam,
            start_epoch=start_epoch, pca=pca,
            extra_meta={"standardize.per_subject": "true" if per_subject else "false"})
    else:
        per_subject = cfg["data.per_subject_standardize"]
        d = _load_standardized(args, per_subject)
        pca = None
        if cfg["data.use_pca"]:
            pca = pca_fit(d, cfg["data.pca_dim"], whiten=cfg["data.pca_whiten"])
        din = _model_input(d, pca)
        tcfg = _train_config(cfg, out)
        params, log = training.train(
            din, tcfg, _seed_of(args), pca=pca,
            extra_meta={"standardize.per_subject": "true" if per_subject else "false"})

    log.to_csv(log_path)
    if log.records:
        last = log.records[-1]
        print(f"epoch {last.epoch}: total={last.total:.6g} rec={last.rec:.6g} "
              f"mi={last.mi:.6g} tc={last.tc:.6g}")
    print(f"checkpoint: {out}\nloss log: {log_path}")
    return 0


def _train_config(cfg: RunConfig, ckpt_path: str) -> training.TrainConfig:
    return training.TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        beta_final=cfg["train.beta_final"],
        warmup_epochs=cfg["train.warmup_epochs"],
        clip_norm=cfg["train.clip_norm"],
        latent_dim=cfg["model.latent_dim"],
        embed_dim=cfg["model.embed_dim"],
        hidden1=cfg["model.hidden1"],
        hidden2=cfg["model.hidden2"],
        ckpt_every=cfg["train.ckpt_every"],
        ckpt_path=ckpt_path,
    )


def _extract_component_set(args, cfg: RunConfig):
    params, meta, _, pca = load_checkpoint(args.ckpt)
    per_subject = meta.get("standardize.per_subject", "false") == "true"
    d = _load_standardized(args, per_subject)
    din = _model_input(d, pca)
    tcs = analysis.latent_timecourses(params, din)
    method = getattr(args, "method", None) or cfg["analysis.extractor"]
    threads = getattr(args, "threads", 1)
    if method == "jacobian":
        probes = getattr(args, "probes", None) or cfg["analysis.jacobian_probes"]
        cs = analysis.spatial_maps_jacobian(params, din, probes, pca, threads)
    else:
        cs = analysis.spatial_maps_regression(tcs, din, pca, threads)
    n = getattr(args, "n_components", None)
    if n is None:
        n = cfg["analysis.n_components"]
    if n and n > 0:
        cs = analysis.select_components(cs, n)
    return cs, d


def _cmd_extract(args) -> int:
    cfg = _config_of(args)
    cs, _ = _extract_component_set(args, cfg)
    analysis.save_component_set(args.out_prefix, cs)
    print(f"extracted {cs.n_components} components ({cs.method}) "
          f"-> {args.out_prefix}_maps.tcsf")
    return 0


def _cmd_fnc(args) -> int:
    cfg = _config_of(args)
    params, meta, _, pca = load_checkpoint(args.ckpt)
    per_subject = meta.get("standardize.per_subject", "false") == "true"
    d = _load_standardized(args, per_subject)
    din = _model_input(d, pca)
    tcs = analysis.latent_timecourses(params, din)

    labels = np.arange(tcs[0].shape[1], dtype=np.int64)
    n = args.n_components if args.n_components is not None else cfg["analysis.n_components"]
    if n and n > 0:
        pooled = np.concatenate(tcs, axis=0)
        variance = np.mean(pooled * pooled, axis=0)
        chosen = np.sort(np.argsort(-variance, kind="stable")[:n])
        tcs = [t[:, chosen] for t in tcs]
        labels = labels[chosen]

    threshold = args.threshold if args.threshold is not None else cfg["analysis.fnc_threshold"]
    f = analysis.fnc(tcs, threshold, n_threads=args.threads)
    order = analysis.hcluster_order(f) if f.r.shape[0] >= 2 else f.order
    analysis.save_fnc_csv(args.out, f, order, labels=labels)
    print(f"FNC over {f.r.shape[0]} components, threshold {threshold}: {args.out}")
    return 0


def _cmd_infomax(args) -> int:
    cfg = _config_of(args)
    _override(cfg, "ica.lr", args.lr)
    _override(cfg, "ica.max_iter", args.max_iter)
    _override(cfg, "ica.tol", args.tol)
    d = _load_standardized(args, cfg["data.per_subject_standardize"])
    icfg = ica.IcaConfig(lr=cfg["ica.lr"], max_iter=cfg["ica.max_iter"],
                         tol=cfg["ica.tol"], anneal=cfg["ica.anneal"])
    model = ica.infomax_fit(d, args.k, icfg)
    cs = ica.unmix(model, d)
    analysis.save_component_set(args.out_prefix, cs)
    io.write_kv_text(args.out_prefix + "_fit.meta", {
        "converged": "true" if model.converged else "false",
        "iterations": model.iterations,
    })
    print(f"InfoMax k={args.k}: converged={model.converged} "
          f"after {model.iterations} iterations")
    return 0


def _cmd_compare(args) -> int:
    cfg = _config_of(args)
    cs_model, d = _extract_component_set(args, cfg)
    truth = load_truth(args.truth) if args.truth else None

    k = args.k or (truth.true_spatial.shape[0] if truth else cs_model.n_components)
    icfg = ica.IcaConfig(lr=cfg["ica.lr"], max_iter=cfg["ica.max_iter"],
                         tol=cfg["ica.tol"], anneal=cfg["ica.anneal"])
    model = ica.infomax_fit(d, k, icfg)
    cs_ica = ica.unmix(model, d)

    pairs, mean_abs = analysis.match_components(cs_model, cs_ica)
    lines = ["kind,i,j,value"]
    for i, j, r in pairs:
        lines.append(f"pair,{i},{j},{repr(r)}")
    lines.append(f"mean_abs_r,,,{repr(mean_abs)}")
    if truth is not None:
        mcc_model = analysis.mcc_score(cs_model, truth, mode="time")
        mcc_ica = analysis.mcc_score(cs_ica, truth, mode="time")
        lines.append(f"mcc_tcvae,,,{repr(mcc_model)}")
        lines.append(f"mcc_infomax,,,{repr(mcc_ica)}")
        print(f"time-course MCC: model={mcc_model:.4f} infomax={mcc_ica:.4f}")
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    print(f"matched {len(pairs)} components, mean |r| = {mean_abs:.4f}: {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    err = training.random_tiny_gradcheck(args.models, _seed_of(args), args.h)
    print(f"max relative gradient error: {err:.3e}")
    if err >= 1e-6:
        print("gradient check FAILED (threshold 1e-6)", file=sys.stderr)
        return 3
    return 0


def _cmd_dump_config(args) -> int:
    cfg = _config_of(args)
    sys.stdout.write(cfg.dump())
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "extract": _cmd_extract,
    "fnc": _cmd_fnc,
    "infomax": _cmd_infomax,
    "compare": _cmd_compare,
    "gradcheck": _cmd_gradcheck,
    "dump-config": _cmd_dump_config,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ArgumentError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FormatError, DataError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except TcsepError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
