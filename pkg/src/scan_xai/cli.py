"""Command-line entry point: ``scan-xai <command> [options]``.

Every command writes a ``manifest.json`` into its output directory; ``scan-xai
rerun <manifest>`` replays it and checks the outputs byte for byte.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .analysis_net import load_decoder, save_decoder
from .data import list_images, load_dataset, load_image
from .errors import ConfigurationError, DomainError, ScanError, TrainingError
from .eval_suite import DEFAULT_FRACTIONS
from .experiments import (
    METHODS,
    ablation_grid,
    evaluate_methods,
    rank_correlation,
    sanity_check,
    summary_row,
)
from .explainer import check_compatible, percentile_sweep_batch
from .feature_tap import TargetModel, train_toy_targets
from .io import (
    RunManifest,
    read_config,
    save_grayscale_png,
    save_image_png,
    save_overlay_png,
    write_saliency,
)
from .trainer import ABLATIONS, TrainConfig, ablation_variant, train_scan

logger = logging.getLogger("scan_xai")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
# keys that describe where/how to run rather than what to compute
META_KEYS = {"command", "config", "print_config", "verbose", "func"}


class UsageError(Exception):
    """Bad flags or inputs detected after argument parsing."""


# -- argument helpers -------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _on_off(text: str) -> bool:
    low = text.lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _add_common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", help="INI file; the section named after the command supplies defaults")
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", "--out", dest="out_dir", default=out_default, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_dataset(p: argparse.ArgumentParser, required: bool = False) -> None:
    p.add_argument("--dataset", default=None if required else "shapes",
                   help="'shapes', a CIFAR-10 python archive directory, or a class-per-folder tree")
    p.add_argument("--n-train", type=int, default=4000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--image-side", type=int, default=32)
    p.add_argument("--data-seed", type=int, default=0)


def _add_scan_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tap-layer", default=None)
    p.add_argument("--alpha", type=float, default=4.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--variant", default="none", choices=("none", *ABLATIONS))


def _add_metrics(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n", type=int, default=500, help="number of evaluation images")
    p.add_argument("--fractions", type=_floats, default=list(DEFAULT_FRACTIONS))
    p.add_argument("--fill", choices=("zero", "mean"), default="zero")
    p.add_argument("--coarse", type=_on_off, default=False, help="pool SCAN maps to the tap grid (on/off)")
    p.add_argument("--percentile", type=float, default=95.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scan-xai", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-target", help="train a toy target classifier")
    _add_common(p, "runs/target")
    _add_dataset(p)
    p.add_argument("--arch", choices=("cnn", "vit"), default="cnn")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--tap-layer", default=None)
    p.set_defaults(func=cmd_train_target)

    p = sub.add_parser("train-scan", help="train an analysis decoder for a target")
    _add_common(p, "runs/scan")
    _add_dataset(p)
    p.add_argument("--target", required=True)
    _add_scan_training(p)
    p.set_defaults(func=cmd_train_scan)

    p = sub.add_parser("explain", help="write saliency maps for images")
    _add_common(p, "runs/explain")
    p.add_argument("--decoder", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--image", required=True, help="image file or directory")
    p.add_argument("--class", dest="class_idx", type=int, default=None)
    p.add_argument("--percentile", type=float, default=95.0)
    p.add_argument("--sweep", type=_floats, default=None, help="comma-separated percentiles")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="perturbation metrics for one or more methods")
    _add_common(p, "runs/evaluate")
    _add_dataset(p)
    p.add_argument("--decoder", default=None)
    p.add_argument("--target", required=True)
    p.add_argument("--methods", type=_names, default=["scan", "gradcam", "random"])
    p.add_argument("--n-random", type=int, default=10)
    _add_metrics(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sanity", help="weight- and label-randomisation checks")
    _add_common(p, "runs/sanity")
    _add_dataset(p)
    p.add_argument("--target", required=True)
    p.add_argument("--decoder", default=None, help="decoder for the intact target (trained if omitted)")
    p.add_argument("--target-epochs", type=int, default=None)
    _add_scan_training(p)
    _add_metrics(p)
    p.set_defaults(func=cmd_sanity)

    p = sub.add_parser("ablate", help="train-and-evaluate sweeps")
    _add_common(p, "runs/ablate")
    _add_dataset(p)
    p.add_argument("--target", required=True)
    p.add_argument("--alphas", type=_floats, default=[])
    p.add_argument("--percentiles", type=_floats, default=[])
    p.add_argument("--percentile-mode", choices=("inference", "train"), default="inference")
    p.add_argument("--layers", type=_names, default=[])
    p.add_argument("--components", type=_names, default=[])
    _add_scan_training(p)
    _add_metrics(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("rerun", help="replay a run from its manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out-dir", default=None, help="write the replay here instead of the original location")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_rerun, config=None, print_config=False)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> None:
    """Install INI values as subcommand defaults so explicit flags still win.

    Runs before the real parse, so a config file may also supply flags that
    are otherwise required.
    """
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        subparser = _subparser(parser, known.command)
    except KeyError:
        return
    values = read_config(known.config, known.command)
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in META_KEYS:
            raise ConfigurationError(f"unknown key {key!r} in [{known.command}] of {known.config}")
        action = actions[dest]
        try:
            if isinstance(action, argparse._StoreTrueAction):
                defaults[dest] = _on_off(raw)
            elif raw == "":
                defaults[dest] = None
            else:
                defaults[dest] = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ConfigurationError(f"bad value for {key!r} in {known.config}: {exc}") from exc
    subparser.set_defaults(**defaults)
    for dest in defaults:
        actions[dest].required = False


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def resolved_config(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in META_KEYS}


def _format_config(command: str, cfg: dict) -> str:
    lines = [f"[{command}]"]
    for k, v in cfg.items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k.replace('_', '-')} = {'' if v is None else v}")
    return "\n".join(lines) + "\n"


# -- shared plumbing --------------------------------------------------------------

def _load_split(args, n_val: int | None = None):
    if not args.dataset:
        raise UsageError("--dataset is required")
    try:
        return load_dataset(args.dataset, side=args.image_side, n_train=args.n_train,
                            n_val=n_val or args.n_val, seed=args.data_seed)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def _load_target(path) -> TargetModel:
    if not Path(path).is_file():
        raise UsageError(f"target checkpoint {path} not found")
    return TargetModel.load(path)


def _load_decoder(path):
    if not Path(path).is_file():
        raise UsageError(f"decoder checkpoint {path} not found")
    return load_decoder(path)[0]


def _scan_config(args) -> TrainConfig:
    cfg = TrainConfig(alpha=args.alpha, lam=args.lam, epochs=args.epochs, batch_size=args.batch_size,
                      learning_rate=args.lr, seed=args.seed, tap_layer=args.tap_layer,
                      inference_percentile=getattr(args, "percentile", 95.0))
    return ablation_variant(cfg, args.variant)


def _metric_kw(args) -> dict:
    return {"fractions": args.fractions, "fill": args.fill}


def _eval_images(args, split):
    n = min(args.n, len(split.val))
    if n < args.n:
        logger.warning("only %d evaluation images available (asked for %d)", n, args.n)
    return split.val.images[:n]


class Run:
    """Output directory plus the manifest that records it."""

    def __init__(self, args):
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command=args.command, config=resolved_config(args), seed=args.seed)

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def close(self) -> Path:
        self.manifest.finish()
        return self.manifest.write(self.out / "manifest.json")


def _record(run: Run, path: Path) -> Path:
    run.manifest.add_artifact(path, run.out)
    return path


def _write_json(run: Run, name: str, obj) -> Path:
    path = run.path(name)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return _record(run, path)


def _write_table(run: Run, name: str, columns: list, rows: dict[str, list]) -> Path:
    """CSV with one row per metric and one column per grid value."""
    path = run.path(name)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", *columns])
        for metric, values in rows.items():
            w.writerow([metric, *("" if v is None else f"{v:.6f}" for v in values)])
    return _record(run, path)


def _metric_rows(reports: list) -> dict[str, list]:
    rows = [summary_row(r) for r in reports]
    return {k: [r[k] for r in rows] for k in rows[0]}


# -- commands ---------------------------------------------------------------------

def cmd_train_target(args) -> int:
    split = _load_split(args)
    run = Run(args)
    target = train_toy_targets(split.train, split.val, arch=args.arch, epochs=args.epochs, seed=args.seed,
                               lr=args.lr, batch_size=args.batch_size, tap_layer=args.tap_layer)
    _record(run, target.save(run.path("target.pt")))
    _write_json(run, "train_info.json", target.train_info)
    print(f"target: val acc {target.train_info.get('val_acc', float('nan')):.4f} -> {run.out / 'target.pt'}")
    run.close()
    return EXIT_OK


def cmd_train_scan(args) -> int:
    target = _load_target(args.target)
    split = _load_split(args)
    cfg = _scan_config(args)
    if cfg.tap_layer:
        target._resolve(cfg.tap_layer)
    run = Run(args)
    decoder, log = train_scan(target, split.train, cfg, val=split.val)
    _record(run, save_decoder(decoder, run.path("decoder.pt"), seed=args.seed,
                              extra={"train_config": asdict(cfg), "target_hash": target.hash()}))
    _record(run, log.to_jsonl(run.path("train_log.jsonl")))
    last = log.epochs[-1] if log.epochs else {}
    print(f"decoder: val mean confidence {last.get('val_c_mean', float('nan')):.4f} -> {run.out / 'decoder.pt'}")
    run.close()
    return EXIT_OK


def cmd_explain(args) -> int:
    target = _load_target(args.target)
    decoder = _load_decoder(args.decoder)
    check_compatible(decoder, target)
    paths = list_images(args.image)
    if not paths:
        raise UsageError(f"no images found at {args.image}")
    ps = args.sweep or [args.percentile]
    run = Run(args)
    failures = 0
    for path in paths:
        try:
            image = load_image(path, target.image_side)
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", path, exc)
            failures += 1
            continue
        sweep = percentile_sweep_batch(decoder, target, image.unsqueeze(0), args.class_idx, ps)
        entry = {"image": str(path), "outputs": {}}
        for p, batch in sweep.items():
            e = batch.item(0)
            stem = f"{path.stem}_p{p:g}"
            files = [
                save_grayscale_png(run.path(f"{stem}_saliency.png"), e.saliency),
                save_overlay_png(run.path(f"{stem}_overlay.png"), image, e.saliency),
                save_image_png(run.path(f"{stem}_reconstruction.png"), e.reconstruction),
                write_saliency(run.path(f"{stem}_saliency.scn"), e.saliency),
            ]
            for f in files:
                _record(run, f)
            entry["class"] = e.target_class
            entry["outputs"][f"{p:g}"] = [f.name for f in files]
        run.manifest.entries.append(entry)
    run.close()
    done = len(paths) - failures
    print(f"explained {done}/{len(paths)} image(s) -> {run.out}")
    if done == 0:
        return EXIT_RUNTIME
    return EXIT_OK


def _report_files(run: Run, reports: dict, prefix: str = "") -> None:
    for name, rep in reports.items():
        safe = str(name).replace("/", "_")
        _write_json(run, f"{prefix}report_{safe}.json", rep.to_dict())
        _record(run, rep.to_csv(run.path(f"{prefix}samples_{safe}.csv")))


def cmd_evaluate(args) -> int:
    bad = [m for m in args.methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown method(s) {', '.join(bad)}; choose from {', '.join(METHODS)}")
    target = _load_target(args.target)
    decoder = None
    if "scan" in args.methods:
        if not args.decoder:
            raise UsageError("method 'scan' needs --decoder")
        decoder = _load_decoder(args.decoder)
        check_compatible(decoder, target)
    split = _load_split(args, n_val=max(args.n, args.n_val))
    images = _eval_images(args, split)
    run = Run(args)
    reports = evaluate_methods(target, images, args.methods, decoder, args.percentile, args.coarse,
                               n_random=args.n_random, seed=args.seed, **_metric_kw(args))
    _report_files(run, reports)
    _write_table(run, "comparison.csv", list(reports), _metric_rows(list(reports.values())))
    for name, rep in reports.items():
        print(f"{name:>8}: AUC-D {rep.auc_d:7.2f}  Neg {rep.neg_auc:6.2f}  Pos {rep.pos_auc:6.2f}  "
              f"Drop {rep.drop_pct:6.2f}  Inc {rep.inc_pct:6.2f}"
              + (f"  Win {rep.win_pct:6.2f}" if rep.win_pct is not None else ""))
    run.close()
    return EXIT_OK


def cmd_sanity(args) -> int:
    target = _load_target(args.target)
    decoder = None
    if args.decoder:
        decoder = _load_decoder(args.decoder)
        check_compatible(decoder, target)
    split = _load_split(args, n_val=max(args.n, args.n_val))
    images = _eval_images(args, split)
    run = Run(args)
    rows = sanity_check(target, split, _scan_config(args), images, decoder, seed=args.seed,
                        target_epochs=args.target_epochs, coarse=args.coarse, **_metric_kw(args))
    _report_files(run, rows)
    _write_table(run, "sanity.csv", list(rows), _metric_rows(list(rows.values())))
    for name, rep in rows.items():
        print(f"{name:>8}: AUC-D {rep.auc_d:7.2f}")
    run.close()
    return EXIT_OK


def cmd_ablate(args) -> int:
    bad = [c for c in args.components if c not in ("none", *ABLATIONS)]
    if bad:
        raise UsageError(f"unknown component(s) {', '.join(bad)}")
    if not any((args.alphas, args.percentiles, args.layers, args.components)):
        raise UsageError("empty grid: give at least one of --alphas, --percentiles, --layers, --components")
    target = _load_target(args.target)
    for layer in args.layers:
        target._resolve(layer)
    split = _load_split(args, n_val=max(args.n, args.n_val))
    images = _eval_images(args, split)
    run = Run(args)
    tables = ablation_grid(target, split, _scan_config(args), images, alphas=args.alphas,
                           percentiles=args.percentiles, layers=args.layers, components=args.components,
                           percentile_mode=args.percentile_mode, coarse=args.coarse, **_metric_kw(args))
    summary = {}
    for sweep, reports in tables.items():
        cols = [f"{k:g}" if isinstance(k, float) else str(k) for k in reports]
        _write_table(run, f"{sweep}_sweep.csv", cols, _metric_rows(list(reports.values())))
        summary[sweep] = {c: summary_row(r) for c, r in zip(cols, reports.values())}
        if sweep in ("percentile", "alpha"):
            keys = [float(k) for k in reports]
            summary[sweep + "_spearman_auc_d"] = rank_correlation(keys, [r.auc_d for r in reports.values()])
        print(f"{sweep}: " + "  ".join(f"{c}={r.auc_d:.2f}" for c, r in zip(cols, reports.values())))
    _write_json(run, "ablation.json", summary)
    run.close()
    return EXIT_OK


def cmd_rerun(args) -> int:
    manifest = RunManifest.read(args.manifest)
    original_out = Path(manifest.config.get("out_dir") or Path(args.manifest).parent)
    argv = [manifest.command]
    parser = build_parser()
    sub = _subparser(parser, manifest.command)
    actions = {a.dest: a for a in sub._actions}
    config = dict(manifest.config)
    if args.out_dir:
        config["out_dir"] = args.out_dir
    for dest, value in config.items():
        if dest not in actions or value is None:
            continue
        action = actions[dest]
        flag = action.option_strings[0]
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                argv.append(flag)
            continue
        if isinstance(value, list):
            value = ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, bool):
            value = "on" if value else "off"
        argv += [flag, str(value)]
    logger.info("replaying: scan-xai %s", " ".join(argv))
    code = main(argv)
    if code != EXIT_OK:
        return code
    new_out = Path(config["out_dir"])
    replay = RunManifest.read(new_out / "manifest.json")
    mismatched = sorted(k for k, v in manifest.artifacts.items() if replay.artifacts.get(k) != v)
    missing = sorted(set(manifest.artifacts) - set(replay.artifacts))
    if mismatched or missing:
        for k in mismatched:
            print(f"MISMATCH {k}")
        print(f"rerun of {original_out} differs in {len(mismatched)} artifact(s)")
        return EXIT_RUNTIME
    print(f"rerun reproduced {len(manifest.artifacts)} artifact(s) byte for byte")
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
    except ConfigurationError as exc:
        print(f"scan-xai: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.print_config:
            sys.stdout.write(_format_config(args.command, resolved_config(args)))
            return EXIT_OK
        return args.func(args)
    except (UsageError, ConfigurationError, DomainError) as exc:
        print(f"scan-xai {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    except (TrainingError, ScanError, RuntimeError, OSError) as exc:
        print(f"scan-xai {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
