"""Command line front end.

Subcommands: gen, pretrain, confidence, eval, baseline, finetune, inspect.
Exit codes: 0 success, 1 usage or bad argument values, 2 data/config/format
errors, 3 training divergence. Every run writes its fully resolved
configuration next to its artifacts, and identical invocations produce
byte-identical artifacts.
"""

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import channel, storage
from .errors import ConfigError, CsilabError, DivergenceError, FormatError
from .evaluate import (FinetuneConfig, confidence_cdf_rows, confidence_mae,
                       finetune_scenario_classifier, routing_csv_rows,
                       run_baselines, run_zero_shot)
from .model import ModelConfig, build_model, load_model, save_model
from .numeric import child_seed
from .training import (Corpus, Phase1Config, Phase2Config, run_phase1,
                       run_phase2)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(parser):
    parser.add_argument("--config", help="run config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key")
    parser.add_argument("--threads", type=int, default=None,
                        help="torch thread count (or env CSILAB_THREADS)")


def build_parser():
    parser = _Parser(prog="csilab",
                     description="masked-autoencoder CSI reconstruction lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[], help="generate synthetic datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--presets", default=",".join(channel.PRESETS),
                   help="comma-separated preset names")
    p.add_argument("--train", type=int, default=512)
    p.add_argument("--val", type=int, default=64)
    p.add_argument("--test", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="phase-1 masked denoising pretraining")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--gating", choices=("task", "unified"), default=None)
    p.add_argument("--no-load-balance", action="store_true",
                   help="drop the load-balance penalty (weight 0)")
    p.add_argument("--fixed-ratio", action="store_true",
                   help="pin mask ratios / pilot fractions instead of sampling")
    p.add_argument("--no-random-mask", action="store_true",
                   help="exclude the random-mask task from draws")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("confidence", help="phase-2 confidence calibration")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="phase-1 checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_confidence)

    p = sub.add_parser("eval", help="zero-shot reconstruction evaluation")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--snr", default=None, help="comma-separated SNR (dB) list")
    p.add_argument("--ratio", default=None,
                   help="comma-separated ratio labels (low, high, or a number)")
    p.add_argument("--routing-stats", action="store_true",
                   help="also write per-layer expert usage")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="classical reference methods")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--snr", default=None)
    p.add_argument("--ratio", default=None)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("finetune", help="scenario classification fine-tune")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("inspect", help="print dataset/checkpoint headers")
    p.add_argument("paths", nargs="+")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_inspect)
    return parser


def _configure_threads(args):
    threads = getattr(args, "threads", None)
    if threads is None:
        env = os.environ.get("CSILAB_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError as exc:
                raise ConfigError(f"bad CSILAB_THREADS value {env!r}") from exc
    if threads is not None:
        if threads < 1:
            raise ValueError(f"thread count must be >= 1, got {threads}")
        torch.set_num_threads(threads)


def _load_cfg(args, extra=()):
    overrides = list(args.set) + list(extra)
    return storage.load_config(getattr(args, "config", None), overrides)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out, name, cfg, header):
    path = out / name
    storage.write_resolved_config(path, cfg, header=header)
    print(f"resolved config -> {path}")


def _load_group(cfg, key):
    return [storage.read_dataset(p) for p in cfg.get(key)]


def _load_corpus(cfg, which):
    corpus = Corpus(coarse=_load_group(cfg, f"data.coarse_{which}"),
                    fine=_load_group(cfg, f"data.fine_{which}"))
    if not corpus.coarse and not corpus.fine:
        raise ConfigError(f"no datasets configured for data.*_{which}")
    return corpus


def cmd_gen(args):
    names = [n.strip() for n in args.presets.split(",") if n.strip()]
    presets = []
    for name in names:
        if name not in channel.PRESETS:
            raise ValueError(f"unknown preset {name!r}; "
                             f"available: {', '.join(sorted(channel.PRESETS))}")
        presets.append(channel.PRESETS[name])
    if not presets:
        raise ValueError("no presets selected")
    out = _out_dir(args)
    written = channel.build_corpus(presets, (args.train, args.val, args.test),
                                   out, args.seed)
    for path in written:
        print(f"wrote {path}")
    lines = [f"presets = {','.join(names)}",
             f"train = {args.train}", f"val = {args.val}",
             f"test = {args.test}", f"seed = {args.seed}"]
    storage._atomic_write(out / "gen.resolved.cfg",
                          ("\n".join(lines) + "\n").encode())
    return 0


def _pretrain_overrides(args):
    extra = []
    if args.seed is not None:
        extra.append(f"training.seed={args.seed}")
    if args.epochs is not None:
        extra.append(f"training.epochs={args.epochs}")
    if args.batch_size is not None:
        extra.append(f"training.batch_size={args.batch_size}")
    if args.max_steps is not None:
        extra.append(f"training.max_steps={args.max_steps}")
    if args.gating is not None:
        extra.append(f"model.gating={args.gating}")
    if args.no_load_balance:
        extra.append("training.load_balance_weight=0")
    if args.fixed_ratio:
        extra.append("training.fixed_ratio=true")
    if args.no_random_mask:
        extra.append("training.no_random_mask=true")
    return extra


def cmd_pretrain(args):
    cfg = _load_cfg(args, _pretrain_overrides(args))
    out = _out_dir(args)
    corpus = _load_corpus(cfg, "train")
    tcfg = Phase1Config.from_run(cfg)
    model = build_model(ModelConfig.from_run(cfg), seed=child_seed(tcfg.seed, 0))
    _write_resolved(out, "pretrain.resolved.cfg", cfg, ["command: pretrain"])
    run_phase1(model, corpus, tcfg, out_dir=out, log=print)
    print(f"checkpoint -> {out / 'phase1.mdae'}")
    return 0


def cmd_confidence(args):
    cfg = _load_cfg(args)
    out = _out_dir(args)
    model, meta = load_model(args.ckpt)
    corpus = _load_corpus(cfg, "train")
    tcfg = Phase1Config.from_run(cfg)
    p2cfg = Phase2Config.from_run(cfg)
    _write_resolved(out, "confidence.resolved.cfg", cfg, ["command: confidence"])
    run_phase2(model, corpus, tcfg, p2cfg, out_dir=out, log=print)
    print(f"checkpoint -> {out / 'phase2.mdae'}")
    return 0


def _eval_settings(args, cfg):
    snrs = cfg.get("evaluation.snrs")
    if args.snr is not None:
        snrs = [float(s) for s in args.snr.split(",") if s.strip()]
    ratios = cfg.get("evaluation.ratios")
    if args.ratio is not None:
        ratios = [r.strip() for r in args.ratio.split(",") if r.strip()]
    for entry in ratios:
        if entry not in ("low", "high"):
            value = float(entry)
            if not 0.0 < value < 1.0:
                raise ValueError(f"ratio {entry} out of (0, 1)")
    if not snrs or not ratios:
        raise ValueError("need at least one SNR and one ratio")
    return ratios, snrs


def cmd_eval(args):
    cfg = _load_cfg(args)
    out = _out_dir(args)
    ratios, snrs = _eval_settings(args, cfg)
    model, meta = load_model(args.ckpt)
    corpus = _load_corpus(cfg, "test")
    report, routing = run_zero_shot(
        model, corpus.coarse, corpus.fine, ratios=ratios, snrs=snrs,
        noise_seed=cfg.get("evaluation.noise_seed"),
        aggregate=cfg.get("evaluation.nmse_aggregate"),
        floor_db=cfg.get("evaluation.nmse_floor_db"),
        se_snr_db=cfg.get("evaluation.se_snr_db"),
        collect_routing=args.routing_stats, log=print)
    storage.write_eval_report(out / "eval_report.csv",
                              [row.csv() for row in report.rows])
    storage.write_confidence_cdf(out / "confidence_cdf.csv",
                                 confidence_cdf_rows(report))
    storage.write_metrics(out / "confidence_mae.csv",
                          sorted(confidence_mae(report).items()))
    if args.routing_stats:
        storage.write_routing_stats(out / "routing_stats.csv",
                                    routing_csv_rows(routing))
    _write_resolved(out, "eval.resolved.cfg", cfg, ["command: eval"])
    print(f"report -> {out / 'eval_report.csv'}")
    return 0


def cmd_baseline(args):
    cfg = _load_cfg(args)
    out = _out_dir(args)
    ratios, snrs = _eval_settings(args, cfg)
    corpus = _load_corpus(cfg, "test")
    report = run_baselines(
        corpus.coarse, corpus.fine, ratios=ratios, snrs=snrs,
        noise_seed=cfg.get("evaluation.noise_seed"),
        aggregate=cfg.get("evaluation.nmse_aggregate"),
        floor_db=cfg.get("evaluation.nmse_floor_db"),
        se_snr_db=cfg.get("evaluation.se_snr_db"), log=print)
    storage.write_eval_report(out / "baseline_report.csv",
                              [row.csv() for row in report.rows])
    _write_resolved(out, "baseline.resolved.cfg", cfg, ["command: baseline"])
    print(f"report -> {out / 'baseline_report.csv'}")
    return 0


def cmd_finetune(args):
    cfg = _load_cfg(args)
    out = _out_dir(args)
    model, meta = load_model(args.ckpt)
    train_sets = ([(ds, 1) for ds in _load_group(cfg, "data.finetune_los")]
                  + [(ds, 0) for ds in _load_group(cfg, "data.finetune_nlos")])
    test_sets = ([(ds, 1) for ds in _load_group(cfg, "data.finetune_los_test")]
                 + [(ds, 0) for ds in _load_group(cfg, "data.finetune_nlos_test")])
    if not train_sets or not test_sets:
        raise ConfigError("finetune needs data.finetune_los/nlos and *_test paths")
    ftcfg = FinetuneConfig.from_run(cfg)
    classifier, metrics, trace = finetune_scenario_classifier(
        model, train_sets, test_sets, ftcfg, log=print)
    save_model(out / "classifier.mdae", classifier, phase=3,
               step=metrics["steps"], seed=ftcfg.seed,
               kind="scenario_classifier",
               extra={"gate_index": classifier.gate_index,
                      "n_classes": classifier.n_classes})
    storage.write_loss_trace(out / "finetune_loss.csv", trace)
    storage.write_metrics(out / "finetune_metrics.csv",
                          sorted(metrics.items()))
    _write_resolved(out, "finetune.resolved.cfg", cfg, ["command: finetune"])
    print(f"f1 = {metrics['f1']:.4f}, accuracy = {metrics['accuracy']:.4f}")
    return 0


def cmd_inspect(args):
    for raw in args.paths:
        path = Path(raw)
        try:
            head = path.open("rb").read(8)
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
        if head == storage.DATASET_MAGIC:
            ds = storage.read_dataset(path)
            print(f"{path}: dataset {ds.name}, {ds.count} samples, "
                  f"grid {ds.grid.t_samples}x{ds.grid.subcarriers}"
                  f"x{ds.geometry.n_elements}, dt {ds.grid.dt_s:g}s, "
                  f"df {ds.grid.df_hz:g}Hz, split {ds.split}, seed {ds.seed}")
        elif head == storage.CHECKPOINT_MAGIC:
            data = storage.load_checkpoint(path)
            meta = data.meta
            n_params = sum(int(np.prod(s)) for _, s, _ in meta["manifest"])
            print(f"{path}: checkpoint kind {meta.get('kind')}, "
                  f"phase {meta.get('phase')}, step {meta.get('step')}, "
                  f"seed {meta.get('seed')}, {len(meta['manifest'])} tensors, "
                  f"{n_params} parameters")
        else:
            raise FormatError(f"{path}: unrecognized magic {head!r}")
    return 0


def main(argv=None):
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        _configure_threads(args)
        return args.func(args) or 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CsilabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
