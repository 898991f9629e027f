"""Command-line entry points: prepare, train, eval, infer (and synth).

Configuration is a flat ``key=value`` file plus ``--set key=value``
overrides. Every train run writes its fully resolved configuration next to
the checkpoint so the run can be repeated from the output directory alone.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import nn
from .checkpoint import load_params, save_params
from .data import SplitBundle, ingest, prepare, read_bundle, read_kv, write_bundle, write_manifest
from .diffusion import DenoiserNet, EpochLog, TrainConfig, score_fn, train
from .errors import ConfigError, DataError, DiffRecError, UsageError
from .evaluate import EvalReport, evaluate, rank_items
from .latent import (ClusterModel, LatentConfig, LatentModel, count_params, latent_score_fn,
                     train_latent)
from .temporal import apply_temporal, reweight

log = logging.getLogger("diffrec")

MODELS = ("diffrec", "l-diffrec", "t-diffrec", "lt-diffrec")

DEFAULTS: Dict[str, str] = {
    "model": "diffrec",
    "w_min": "0.3",
    "w_max": "1.0",
    "ks": "10,20",
    "bundle": "",
    "out": "",
}
DEFAULTS.update(LatentConfig(epochs=1000).as_kv())


# ------------------------------------------------------------------- config

def resolve_config(path: Optional[str] = None, overrides: Sequence[str] = (),
                   extra: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    """Defaults, then the config file, then ``--set`` pairs, then ``extra``."""
    kv = dict(DEFAULTS)
    layers: List[Mapping[str, str]] = []
    if path:
        layers.append(read_kv(path))
    sets = {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip()] = v.strip()
    layers.append(sets)
    if extra:
        layers.append(extra)
    for layer in layers:
        unknown = sorted(set(layer) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kv.update({k: str(v) for k, v in layer.items()})
    if kv["model"] not in MODELS:
        raise ConfigError(f"model must be one of {', '.join(MODELS)}, got {kv['model']!r}")
    train_config(kv)  # validates numeric fields
    return kv


def is_latent(kv) -> bool:
    return kv["model"] in ("l-diffrec", "lt-diffrec")


def is_temporal(kv) -> bool:
    return kv["model"] in ("t-diffrec", "lt-diffrec")


def train_config(kv: Mapping[str, str]):
    try:
        return (LatentConfig if is_latent(kv) else TrainConfig).from_kv(kv)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DiffRecError):
            raise
        raise ConfigError(f"bad config value: {exc}") from exc


def parse_ks(s: str) -> List[int]:
    try:
        ks = [int(x) for x in str(s).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad K list {s!r}") from exc
    if not ks or min(ks) < 1:
        raise ConfigError(f"K values must be positive, got {s!r}")
    return ks


def _weights(kv):
    return float(kv["w_min"]), float(kv["w_max"])


# ------------------------------------------------------------------ prepare

def cmd_prepare(source, out_dir, regime: str = "clean", seed: int = 0, fmt: str = "tsv") -> SplitBundle:
    ds = ingest(source, fmt)
    bundle = prepare(ds, regime, seed)
    write_bundle(bundle, out_dir)
    log.info("wrote %s bundle to %s (%d users, %d items)", bundle.regime, out_dir,
             bundle.n_users, bundle.n_items)
    return bundle


# -------------------------------------------------------------- model io

def _model_meta(kv, bundle: SplitBundle, model) -> dict:
    meta = {"config": dict(kv), "items": list(bundle.items), "n_items": bundle.n_items,
            "regime": bundle.regime}
    if isinstance(model, LatentModel):
        meta["assignment"] = model.clusters.assignment.tolist()
        meta["latent_dims"] = list(model.clusters.latent_dims)
        meta["vae_hidden"] = list(model.vae_hidden)
    return meta


def _build_model(kv, params: nn.ParamStore, meta: dict):
    cfg = train_config(kv)
    if is_latent(kv):
        clusters = ClusterModel(np.asarray(meta["assignment"]), list(meta["latent_dims"]))
        den = DenoiserNet(params, clusters.latent_total, cfg.hidden, cfg.emb_dim, cfg.latent_dropout, "den")
        return LatentModel(clusters, params, list(meta["vae_hidden"]), den)
    return DenoiserNet(params, int(meta["n_items"]), cfg.hidden, cfg.emb_dim, cfg.dropout, "den")


def load_model(path):
    params, meta = load_params(path)
    if "config" not in meta or "items" not in meta:
        raise DataError(f"{path}: checkpoint lacks model metadata")
    kv = dict(DEFAULTS)
    kv.update(meta["config"])
    return _build_model(kv, params, meta), kv, meta


def _scorer(model, kv, sched):
    cfg = train_config(kv)
    if isinstance(model, LatentModel):
        return latent_score_fn(model, sched, cfg.T_prime, cfg.seed)
    return score_fn(model, sched, cfg.T_prime, cfg.seed)


# -------------------------------------------------------------------- train

def cmd_train(kv: Mapping[str, str], bundle_dir=None, out_dir=None, resume=None):
    kv = dict(kv)
    bundle_dir = bundle_dir or kv.get("bundle")
    out_dir = out_dir or kv.get("out")
    if not bundle_dir or not out_dir:
        raise UsageError("train needs a bundle directory and an output directory")
    kv["bundle"], kv["out"] = str(bundle_dir), str(out_dir)
    cfg = train_config(kv)
    bundle = read_bundle(bundle_dir)
    if is_temporal(kv) and not bundle.temporal:
        raise ConfigError(f"model {kv['model']} needs a bundle prepared with regime=temporal, "
                          f"got regime={bundle.regime}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "config.resolved", kv)

    train_m = bundle.train
    hist_val = bundle.train
    if is_temporal(kv):
        train_m = apply_temporal(bundle.train, *_weights(kv))
        hist_val = train_m
    validation = (hist_val, bundle.val) if bundle.val.nnz else None

    model = None
    rng = np.random.default_rng(cfg.seed)
    if resume:
        model, rkv, meta = load_model(resume)
        if int(meta["n_items"]) != bundle.n_items:
            raise DataError(f"checkpoint has {meta['n_items']} items, bundle has {bundle.n_items}")
        if meta["items"] != list(bundle.items):
            raise DataError("checkpoint item vocabulary differs from the bundle's")
        if rkv["model"] != kv["model"]:
            raise ConfigError(f"cannot resume a {rkv['model']} checkpoint as {kv['model']}")
        rng = np.random.default_rng([cfg.seed, model.params.step])

    log_path = out / "train.log"
    fh = open(log_path, "w", encoding="utf-8", newline="\n")
    fh.write(f"epoch,loss,val-recall@{cfg.val_k},val-ndcg@{cfg.val_k}\n")

    def on_epoch(entry: EpochLog):
        fh.write(entry.line() + "\n")
        fh.flush()

    try:
        if cfg.epochs == 0:
            log.warning("epochs=0: saving the initial parameters untrained")
        if is_latent(kv):
            res = train_latent(train_m, cfg, validation, model, on_epoch, rng)
            model = res.model
        else:
            res = train(train_m, cfg, validation, model, on_epoch, rng)
            model = res.net
    finally:
        fh.close()
    meta = _model_meta(kv, bundle, model)
    save_params(out / "model.ckpt", model.params, meta)
    if isinstance(model, LatentModel):
        model.clusters.write(out / "clusters.tsv", bundle.items)
    summary = {"best_epoch": res.best_epoch, "epochs_run": len(res.log), "adam_step": model.params.step}
    summary.update({f"params_{k}": v for k, v in count_params(model).items()})
    if res.log:
        last = res.log[res.best_epoch - 1] if res.best_epoch else res.log[-1]
        summary[f"best_val_recall@{cfg.val_k}"] = last.recall
        summary[f"best_val_ndcg@{cfg.val_k}"] = last.ndcg
    if isinstance(model, LatentModel):
        summary["lam"] = res.lam
        summary["term_ratio_epoch1"] = res.term_ratio
    write_manifest(out / "train.summary", summary)
    return model, res


# --------------------------------------------------------------------- eval

def eval_history(kv, bundle: SplitBundle, split: str):
    if not is_temporal(kv):
        return None
    base = bundle.train.merge(bundle.val) if split == "test" else bundle.train
    return apply_temporal(base, *_weights(kv))


def cmd_eval(checkpoint, bundle_dir, ks="10,20", split: str = "test", out_dir=None) -> EvalReport:
    model, kv, meta = load_model(checkpoint)
    bundle = read_bundle(bundle_dir)
    if int(meta["n_items"]) != bundle.n_items:
        raise DataError(f"checkpoint has {meta['n_items']} items, bundle has {bundle.n_items}")
    if meta["items"] != list(bundle.items):
        raise DataError("checkpoint item vocabulary differs from the bundle's")
    if is_temporal(kv) and not bundle.temporal:
        raise ConfigError("temporal checkpoint evaluated on a non-temporal bundle")
    sched = train_config(kv).schedule()
    rep = evaluate(_scorer(model, kv, sched), bundle, parse_ks(ks), split, eval_history(kv, bundle, split))
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rep.write(out / f"report_{split}.txt", out / f"per_user_{split}.csv")
    return rep


# -------------------------------------------------------------------- infer

def read_history(path, n_items: int) -> List[int]:
    """Item indices, oldest first, separated by whitespace."""
    try:
        toks = Path(path).read_text(encoding="utf-8").split()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    try:
        seq = [int(t) for t in toks]
    except ValueError as exc:
        raise DataError(f"{path}: history must list integer item indices") from exc
    bad = [i for i in seq if not 0 <= i < n_items]
    if bad:
        raise DataError(f"{path}: item index {bad[0]} outside 0..{n_items - 1}")
    if len(set(seq)) != len(seq):
        raise DataError(f"{path}: duplicate items in history")
    return seq


def cmd_infer(checkpoint, history_path, k: int = 20):
    """Returns [(item_index, item_token, score)] best first."""
    model, kv, meta = load_model(checkpoint)
    n = int(meta["n_items"])
    seq = read_history(history_path, n)
    if is_temporal(kv):
        x = reweight(seq, n, *_weights(kv)).vector
    else:
        x = np.zeros(n)
        x[seq] = 1.0
    sched = train_config(kv).schedule()
    scores = _scorer(model, kv, sched)(np.array([0]), x[None, :])[0]
    top = rank_items(scores, seq, k)
    return [(int(i), meta["items"][i], float(scores[i])) for i in top]


# --------------------------------------------------------------------- main

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffrec", description="Diffusion recommenders: prepare, train, eval, infer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    sp = sub.add_parser("prepare", help="split a rating log into a bundle")
    sp.add_argument("source")
    sp.add_argument("out_dir")
    sp.add_argument("--regime", default="clean", help="clean, natural, temporal or random(p)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--fmt", default="tsv", choices=("tsv", "dat"))

    st = sub.add_parser("train", help="train a model on a bundle")
    st.add_argument("--config")
    st.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    st.add_argument("--bundle")
    st.add_argument("--out")
    st.add_argument("--resume", help="checkpoint to continue from")
    st.add_argument("--temporal", action="store_true", help="use the time-aware variant")
    st.add_argument("--w-min", type=float)
    st.add_argument("--w-max", type=float)

    se = sub.add_parser("eval", help="evaluate a checkpoint")
    se.add_argument("checkpoint")
    se.add_argument("bundle")
    se.add_argument("--ks", default="10,20")
    se.add_argument("--split", default="test", choices=("test", "val"))
    se.add_argument("--out")

    si = sub.add_parser("infer", help="top-K for one history")
    si.add_argument("checkpoint")
    si.add_argument("history")
    si.add_argument("-k", type=int, default=20)
    si.add_argument("--out")

    sy = sub.add_parser("synth", help="write a synthetic rating log")
    sy.add_argument("out")
    sy.add_argument("--users", type=int, default=600)
    sy.add_argument("--items", type=int, default=400)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--fmt", default="tsv", choices=("tsv", "dat"))
    return p


def _run(args) -> None:
    if args.cmd == "prepare":
        b = cmd_prepare(args.source, args.out_dir, args.regime, args.seed, args.fmt)
        print(f"{b.regime}: {b.n_users} users, {b.n_items} items, "
              f"train={b.train.nnz} val={b.val.nnz} test={b.test.nnz}")
    elif args.cmd == "train":
        extra = {}
        base = read_kv(args.config) if args.config else {}
        if args.temporal:
            model = dict(base, **dict(s.split("=", 1) for s in args.set if "=" in s)).get("model", "diffrec")
            extra["model"] = {"diffrec": "t-diffrec", "l-diffrec": "lt-diffrec"}.get(model, model)
        if args.w_min is not None:
            extra["w_min"] = str(args.w_min)
        if args.w_max is not None:
            extra["w_max"] = str(args.w_max)
        kv = resolve_config(args.config, args.set, extra)
        _, res = cmd_train(kv, args.bundle, args.out, args.resume)
        print(f"trained {len(res.log)} epochs, best epoch {res.best_epoch}")
    elif args.cmd == "eval":
        rep = cmd_eval(args.checkpoint, args.bundle, args.ks, args.split, args.out)
        for key, v in rep.as_kv().items():
            print(f"{key}={v:.6f}" if isinstance(v, float) else f"{key}={v}")
    elif args.cmd == "infer":
        rows = cmd_infer(args.checkpoint, args.history, args.k)
        lines = [f"{r}\t{i}\t{tok}\t{s:.10g}" for r, (i, tok, s) in enumerate(rows, 1)]
        text = "rank\titem\ttoken\tscore\n" + "".join(line + "\n" for line in lines)
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
    elif args.cmd == "synth":
        from .synthetic import write_ratings
        write_ratings(args.out, args.users, args.items, args.seed, args.fmt)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _run(args)
    except DiffRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
