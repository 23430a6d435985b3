"""Command-line entry point: ``patchcast <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import re
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .dataset import (
    ForecastTask,
    Preprocessor,
    SyntheticConfig,
    generate_panel,
    load_panel_csv,
    split_task,
    write_panel_csv,
)
from .errors import ConfigError, ParseError, PatchcastError, RenderError
from .experiments import ComparisonReport, ExperimentSpec, TaskConfig, canonical_suite, run_suite
from .htsr import Esd, ccdf_csv, diagnose
from .models import BackboneSpec, ModelSpec, build_model, canonical_spec
from .params import load_into, load_ptwf, parameter_count, save_ptwf
from .plots import plot_ccdf, plot_loss_colored
from .pretrain import ToyLmConfig, pretrain_toy_lm
from .training import EvalReport, TrainConfig, evaluate, train
from .utils import atomic_write_text, read_json, sha256_file, write_json

log = logging.getLogger("patchcast")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


class ArgumentParser(argparse.ArgumentParser):
    def __init__(self, *a, **kw):
        kw.setdefault("formatter_class", argparse.ArgumentDefaultsHelpFormatter)
        super().__init__(*a, **kw)


def _common(p, seed_default=0):
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    # None marks "not given"; the empty %(default).0s stops the formatter appending "(default: None)"
    p.add_argument("--seed", type=int, default=None, help=f"master seed, u64 (default: {seed_default})%(default).0s")
    p.set_defaults(seed_default=seed_default)
    p.add_argument("--verbose", "-v", action="count", default=0, help="more logging (repeatable)")


def build_parser():
    parser = ArgumentParser(prog="patchcast", description="Patch-based forecasting with frozen transformer backbones")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("generate", help="write a synthetic panel as CSV")
    _common(p, seed_default=7)
    p.add_argument("--series", type=int, default=None, help="number of series (overrides config)")
    p.add_argument("--periods", type=int, default=None, help="number of periods (overrides config)")

    p = sub.add_parser("pretrain", help="pretrain a toy backbone on next-token prediction")
    _common(p)
    p.add_argument("--backbone", default=None, choices=["decoder_only", "encoder_decoder"], help="stack kind (overrides config)")
    p.add_argument("--chain", default=None, choices=["random", "repeat"], help="Markov chain (overrides config)")
    p.add_argument("--steps", type=int, default=None, help="optimizer steps (overrides config)")

    p = sub.add_parser("train", help="train a forecaster on a CSV panel")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="panel CSV directory")
    p.add_argument("--model", default=None, help="canonical model name (overrides config)")
    p.add_argument("--weights", type=Path, default=None, help="pretrained backbone .ptwf")
    p.add_argument("--epochs", type=int, default=None, help="epochs (overrides config)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (overrides config)")
    p.add_argument("--batch-size", type=int, default=None, help="batch size (overrides config)")
    p.add_argument("--window", type=int, default=None, help="patch window w (overrides config)")
    p.add_argument("--stride", type=int, default=None, help="patch stride s (overrides config)")

    p = sub.add_parser("evaluate", help="score a trained run on its held-out FCDs")
    _common(p)
    p.add_argument("--run", type=Path, required=True, help="training output directory")
    p.add_argument("--data", type=Path, default=None, help="panel CSV directory (default: the one used for training)%(default).0s")
    p.add_argument("--checkpoint", type=Path, default=None, help="weights to score (default: final.ptwf of the run)%(default).0s")
    p.add_argument("--baseline", type=Path, default=None, help="another run directory to normalise against")

    p = sub.add_parser("diagnose", help="spectral diagnostics of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help=".ptwf file")
    p.add_argument("--layers", default="all", help="'all', 'trainable' or a regex over tensor names")
    p.add_argument("--ks-threshold", type=float, default=0.10, help="KS distance for inclusion in the alpha metric")

    p = sub.add_parser("suite", help="run an experiment suite (canonical six runs by default)")
    _common(p, seed_default=7)
    p.add_argument("--epochs", type=int, default=None, help="epochs for every run (overrides config)")

    p = sub.add_parser("plot", help="render SVG figures from report JSON files")
    _common(p)
    p.add_argument("--report", type=Path, nargs="+", required=True, help="EsdReport or suite report.json")
    p.add_argument("--color-by", default="alpha_metric", choices=["alpha_metric", "stable_rank"], help="marker color")
    return parser


# --------------------------------------------------------------------------- #
# helpers
# --------------------------------------------------------------------------- #


def _load_config(args):
    if args.config is None:
        return {}
    try:
        cfg = read_json(args.config)
    except FileNotFoundError:
        raise ConfigError(f"{args.config} not found", "--config") from None
    except ValueError as exc:
        raise ParseError(str(exc), str(args.config)) from None
    if not isinstance(cfg, dict):
        raise ConfigError("expected a JSON object", "--config")
    return cfg


def _section(cfg, key):
    value = cfg.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError("expected an object", key)
    return dict(value)


def _manifest(out: Path, command, config, seed, files, **extra):
    files = sorted(set(files))
    data = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        **extra,
        "files": {Path(f).relative_to(out).as_posix(): sha256_file(f) for f in files},
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    write_json(out / "manifest.json", data)
    return data


def _echo_config(out: Path, config):
    return write_json(out / "config.json", config)


def _set_threads():
    raw = os.environ.get("PATCHCAST_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"expected a positive integer, got {raw!r}", "PATCHCAST_THREADS") from None
    torch.set_num_threads(n)


def _task_from(cfg: TaskConfig, n_periods):
    full = ForecastTask.spanning(n_periods, cfg.context_length, cfg.horizons, cfg.quantiles, stride=cfg.fcd_stride)
    return full, *split_task(full, cfg.test_fraction)


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #


def cmd_generate(args):
    cfg = _load_config(args)
    gen = _section(cfg, "data") if "data" in cfg else cfg
    if args.series is not None:
        gen["n_series"] = args.series
    if args.periods is not None:
        gen["n_periods"] = args.periods
    gen_cfg = SyntheticConfig.from_dict(gen)
    gen_cfg.validate()
    ds = generate_panel(gen_cfg, args.seed)
    paths = write_panel_csv(ds, args.out)
    effective = {"data": gen_cfg.__dict__, "seed": args.seed}
    checksum = ds.checksum()
    files = [*paths.values(), _echo_config(args.out, effective)]
    files.append(atomic_write_text(args.out / "checksum.txt", checksum + "\n"))
    _manifest(args.out, "generate", effective, args.seed, files, checksum=checksum)
    print(f"wrote {ds.n_series} series x {ds.n_periods} periods to {args.out} (checksum {checksum})")
    return EXIT_OK


def cmd_pretrain(args):
    cfg = _load_config(args)
    pre_cfg = _section(cfg, "pretrain")
    bb_cfg = _section(cfg, "backbone")
    if args.chain is not None:
        pre_cfg["chain"] = args.chain
    if args.steps is not None:
        pre_cfg["steps"] = args.steps
    if args.backbone is not None:
        bb_cfg["kind"] = args.backbone
    bb_cfg.setdefault("kind", "decoder_only")
    toy = ToyLmConfig.from_dict(pre_cfg)
    toy.validate()
    try:
        bspec = BackboneSpec(**bb_cfg)
    except TypeError as exc:
        raise ConfigError(str(exc), "backbone") from None
    store = pretrain_toy_lm(toy, bspec, args.seed)
    effective = {"pretrain": toy.to_dict(), "backbone": bspec.__dict__, "seed": args.seed}
    weights = save_ptwf(store, args.out / "backbone.ptwf")
    summary = write_json(args.out / "pretrain.json", store.info)
    _manifest(args.out, "pretrain", effective, args.seed, [weights, summary, _echo_config(args.out, effective)])
    info = store.info
    print(
        f"cross-entropy {info['final_cross_entropy']:.4f} (unigram {info['unigram_entropy']:.4f}), "
        f"next-token accuracy {info['next_token_accuracy']:.4f}; weights -> {weights}"
    )
    return EXIT_OK


def _model_spec_from(cfg, args):
    model = _section(cfg, "model")
    name = args.model or model.pop("canonical", None)
    if args.window is not None:
        model["window"] = args.window
    if args.stride is not None:
        model["stride"] = args.stride
    if name is not None:
        return canonical_spec(name, **model)
    return ModelSpec.from_dict(model)


def cmd_train(args):
    cfg = _load_config(args)
    ds = load_panel_csv(args.data)
    task_cfg = TaskConfig.from_dict(_section(cfg, "task"))
    full, train_task, test_task = _task_from(task_cfg, ds.n_periods)
    spec = _model_spec_from(cfg, args).for_data(ds, full)

    train_cfg = {"seed": args.seed, **_section(cfg, "train")}
    if args.seed_given:
        train_cfg["seed"] = args.seed
    for key, value in (("epochs", args.epochs), ("lr", args.lr), ("batch_size", args.batch_size)):
        if value is not None:
            train_cfg[key] = value
    tcfg = TrainConfig.from_dict(train_cfg)

    weights = None
    if spec.architecture == "patch" and spec.backbone is not None:
        if args.weights is None:
            raise ConfigError("a backbone model needs pretrained weights", "--weights")
        weights = load_ptwf(args.weights)
    elif args.weights is not None:
        raise ConfigError("this model has no backbone", "--weights")

    pre = Preprocessor.fit(ds, upto=min(test_task.fcd_grid), target_transform=task_cfg.target_transform)
    model = build_model(spec, weights, seed=args.seed)
    out = args.out
    initial = save_ptwf(model.param_store(), out / "initial.ptwf")
    history = train(model, pre.transform(ds), train_task, tcfg, eval_task=test_task, pre=pre, checkpoint_dir=out / "checkpoints")
    final = save_ptwf(model.param_store(), out / "final.ptwf")
    history_dict = history.to_dict()
    history_dict["checkpoints"] = [None if c is None else Path(c).relative_to(out).as_posix() for c in history.checkpoints]
    total, trainable = parameter_count(model.param_store())

    effective = {
        "data": str(args.data),
        "model": spec.to_dict(),
        "train": tcfg.to_dict(),
        "task": task_cfg.__dict__,
        "weights": None if args.weights is None else str(args.weights),
    }
    files = [
        initial,
        final,
        _echo_config(out, effective),
        write_json(out / "history.json", history_dict),
        write_json(out / "preprocessor.json", pre.to_dict()),
        write_json(out / "task.json", {"train": train_task.to_dict(), "test": test_task.to_dict()}),
        write_json(out / "parameters.json", {"total": total, "trainable": trainable}),
    ]
    files += [out / c for c in history_dict["checkpoints"] if c is not None]
    _manifest(out, "train", effective, args.seed, files)
    last = history.test_qwe[-1]
    print(
        f"trained {history.epochs[-1]} epochs ({trainable}/{total} trainable); "
        f"final train loss {history.train_loss[-1]:.5f}; test "
        + " ".join(f"{k} {v:.4f}" for k, v in last.items())
    )
    return EXIT_OK


def _load_run(run_dir: Path, data=None, checkpoint=None):
    try:
        conf = read_json(run_dir / "config.json")
        tasks = read_json(run_dir / "task.json")
        pre = Preprocessor.from_dict(read_json(run_dir / "preprocessor.json"))
    except FileNotFoundError as exc:
        raise ConfigError(f"not a training output directory ({exc.filename} missing)", "--run") from None
    ds = load_panel_csv(data or conf["data"])
    spec = ModelSpec.from_dict(conf["model"])
    model = build_model(spec, None, seed=0)
    weights = load_ptwf(checkpoint or run_dir / "final.ptwf")
    load_into(model, weights)
    t = tasks["test"]
    task = ForecastTask(t["context_length"], t["horizons"], t["quantiles"], t["fcd_grid"])
    return model, ds, task, pre


def cmd_evaluate(args):
    model, ds, task, pre = _load_run(args.run, args.data, args.checkpoint)
    report = evaluate(model, pre.transform(ds), task, pre=pre)
    if args.baseline is not None:
        bmodel, bds, btask, bpre = _load_run(args.baseline, args.data)
        if btask.to_dict() != task.to_dict():
            raise ConfigError("baseline run was evaluated on a different task", "--baseline")
        base = evaluate(bmodel, bpre.transform(bds), btask, pre=bpre)
        report = report.with_baseline(base, str(args.baseline))
    out = args.out
    effective = {"run": str(args.run), "baseline": None if args.baseline is None else str(args.baseline)}
    files = [write_json(out / "eval.json", report.to_dict()), _echo_config(out, effective)]
    _manifest(out, "evaluate", effective, args.seed, files)
    _print_eval(report)
    return EXIT_OK


def _print_eval(report: EvalReport):
    print(f"{'quantile':>8} {'QWE':>10} {'ratio':>8}")
    for key, value in report.qwe.items():
        ratio = (report.ratios or {}).get(key)
        print(f"{key:>8} {value:10.5f} {'' if ratio is None else f'{ratio:8.3f}':>8}")
    print(f"quantile crossing rate {report.crossing_rate:.4f} over {report.n_cells} cells")


def _safe_name(name):
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def cmd_diagnose(args):
    store = load_ptwf(args.checkpoint)
    report = diagnose(store, args.layers, args.ks_threshold)
    out = args.out
    files = [write_json(out / "esd_report.json", report.to_dict())]
    for layer in report.layers:
        esd = Esd(layer.name, np.asarray(layer.eigenvalues), tuple(layer.shape))
        files.append(atomic_write_text(out / "ccdf" / f"{_safe_name(layer.name)}.csv", ccdf_csv(esd)))
    effective = {"checkpoint": str(args.checkpoint), "layers": args.layers, "ks_threshold": args.ks_threshold}
    files.append(_echo_config(out, effective))
    _manifest(out, "diagnose", effective, args.seed, files)
    print(f"{'layer':40} {'shape':>12} {'alpha':>7} {'KS':>6} {'srank':>7}  note")
    for layer in report.layers:
        shape = "x".join(map(str, layer.shape))
        if layer.pl is None:
            print(f"{layer.name:40} {shape:>12} {'-':>7} {'-':>6} {layer.stable_rank:7.2f}  {layer.fit_error}")
            continue
        note = "included" if layer.included else "excluded"
        if layer.unreliable:
            note += ", alpha<2 unreliable"
        print(
            f"{layer.name:40} {shape:>12} {layer.pl['alpha']:7.3f} {layer.pl['ks_distance']:6.3f} "
            f"{layer.stable_rank:7.2f}  {note}"
        )
    metric = "n/a" if report.alpha_metric is None else f"{report.alpha_metric:.4f}"
    print(f"alpha metric {metric} over {len(report.included)} layer(s)")
    return EXIT_OK


def cmd_suite(args):
    cfg = _load_config(args)
    if cfg:
        if args.seed_given:
            cfg = {**cfg, "master_seed": args.seed}
        if args.epochs is not None:
            for run in cfg.get("runs", []):
                run.setdefault("train", {})["epochs"] = args.epochs
        spec = ExperimentSpec.from_dict(cfg)
    else:
        overrides = {} if args.epochs is None else {"epochs": args.epochs}
        spec = canonical_suite(args.seed, **overrides)
    out = args.out
    report = run_suite(spec, out)
    files = [out / "report.json", out / "table.csv", out / "loss_alpha.csv", _echo_config(out, spec.to_dict())]
    rows = report.loss_alpha_rows()
    if rows:
        files.append(out / "loss_alpha.svg")
        plot_loss_colored(rows, "alpha_metric", "test_p50", path=files[-1])
        files.append(out / "loss_stable_rank.svg")
        plot_loss_colored(rows, "stable_rank", "test_p50", path=files[-1])
    _manifest(out, "suite", spec.to_dict(), args.seed, files)
    print(report.table_csv(), end="")
    for failure in report.failures:
        print(f"FAILED {failure['run']}: {failure['error']}", file=sys.stderr)
    return EXIT_RUNTIME if report.failures else EXIT_OK


def cmd_plot(args):
    out = args.out
    files = []
    for path in args.report:
        try:
            data = read_json(path)
        except (OSError, ValueError) as exc:
            raise RenderError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise RenderError(f"{path}: not a report object")
        stem = _safe_name(Path(path).stem)
        try:
            if "layers" in data:
                for layer in data["layers"]:
                    target = out / f"{stem}_{_safe_name(layer['name'])}_ccdf.svg"
                    plot_ccdf(layer["eigenvalues"], layer.get("pl"), layer["name"], path=target)
                    files.append(target)
            elif "runs" in data:
                rows = ComparisonReport.from_dict(data).loss_alpha_rows()
                target = out / f"{stem}_loss_{args.color_by}.svg"
                plot_loss_colored(rows, args.color_by, "test_p50", path=target)
                files.append(target)
            else:
                raise RenderError(f"{path}: neither an ESD report nor a suite report")
        except (KeyError, TypeError) as exc:
            raise RenderError(f"{path}: malformed report ({exc})") from None
    effective = {"reports": [str(p) for p in args.report], "color_by": args.color_by}
    files.append(_echo_config(out, effective))
    _manifest(out, "plot", effective, args.seed, files)
    for f in files[:-1]:
        print(f)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "suite": cmd_suite,
    "plot": cmd_plot,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args.seed_given = args.seed is not None
    if not args.seed_given:
        args.seed = args.seed_default
    if args.seed < 0 or args.seed >= 2**64:
        print("error: --seed: must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        _set_threads()
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PatchcastError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
