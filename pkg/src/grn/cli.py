"""Command-line front end: generate, preprocess, train, eval, simulate, inspect.

Settings resolve as flags > ``--config`` JSON file > built-in defaults. The
config file may hold the sections ``synth``, ``grn``, ``train``, ``eval`` and
``simulate``; every output embeds the effective settings. Relative output
paths are placed under ``$GRN_OUT_DIR`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import dsp
from .evaluation import ClassTaxonomy, aggregate_table, evaluate_candidates, export_embeddings, run_protocol
from .model import GrnConfig, ProtocolError, load_checkpoint, save_checkpoint
from .online import Acquisition, ModelDecoder, Timing, load_script, oracle_decoder, run_session
from .training import TrainingDiverged, fit, sample_support

EXIT_OK = 0
EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_DIVERGED = 4
EXIT_USAGE = 64

OUT_ENV = "GRN_OUT_DIR"

log = logging.getLogger("grn")

TRAIN_DEFAULTS = {
    "shots": 5,
    "seed": 0,
    "max_epochs": 300,
    "target_loss": 1e-3,
    "lr": 1e-3,
    "pairs_per_epoch": None,
    "episode_shots": None,
}
EVAL_DEFAULTS = {
    "shots": [1, 5, 25],
    "repeats": 10,
    "seed_base": 0,
    "max_epochs": 300,
    "target_loss": 1e-3,
    "lr": 1e-3,
    "pairs_per_epoch": None,
    "episode_shots": None,
    "candidates": False,
}


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _out_path(p) -> Path:
    p = Path(p)
    base = os.environ.get(OUT_ENV)
    return p if p.is_absolute() or not base else Path(base) / p


def _load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"config file {path}: top level must be an object")
    return cfg


def _merge(defaults: dict, section: dict, flags: dict) -> dict:
    unknown = set(section) - set(defaults)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(section)
    out.update({k: v for k, v in flags.items() if k in defaults and v is not None})
    return out


def _require_file(path, what):
    if path is None:
        raise UsageError(f"missing --{what}")
    p = Path(path)
    if not p.exists() and not Path(str(p) + ".json").exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _grn_config(cfg: dict, n_classes: int) -> GrnConfig:
    d = dict(cfg.get("grn", {}))
    d.setdefault("n_classes", n_classes)
    try:
        return GrnConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"grn config: {exc}") from None


def _grid_dataset(path) -> D.Dataset:
    ds = D.load_dataset(_require_file(path, "data"))
    if ds.kind != "grid":
        raise ValidationError(f"{path}: expected a preprocessed (grid) dataset, got {ds.kind}")
    return ds


def _representative(ds: D.Dataset, taxonomy: ClassTaxonomy) -> D.Dataset:
    names = taxonomy.representative_classes
    missing = [c for c in names if c not in ds.class_names]
    if missing:
        raise ValidationError(f"dataset lacks representative classes {missing}")
    return ds.select_classes(names)


# -- subcommands ---------------------------------------------------------------


def cmd_generate(args, cfg):
    synth = dict(cfg.get("synth", {}))
    for key in ("seed", "trials_per_class", "snr_db", "noise_uv", "phase_lock"):
        v = getattr(args, key)
        if v is not None:
            synth[key] = v
    if args.depth is not None:
        synth["classes"] = [{**c.__dict__, "depth": args.depth} for c in _classes(args.classes)]
    elif "classes" not in synth:
        synth["classes"] = [c.__dict__ for c in _classes(args.classes)]
    try:
        config = D.SynthConfig.from_dict(synth)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"synth config: {exc}") from None
    raw = D.generate_session(config)
    out = _out_path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save_dataset(raw, out)
    print(json.dumps({"output": str(out), "trials": len(raw), "shape": list(raw.data.shape),
                      "config": config.to_dict()}, indent=2))


def _classes(which):
    return D.REPRESENTATIVE if which == "representative" else D.REPRESENTATIVE + D.CANDIDATES


def cmd_preprocess(args, cfg):
    raw = D.load_dataset(_require_file(args.input, "input"))
    if raw.kind != "raw":
        raise ValidationError(f"{args.input}: already preprocessed")
    grid = D.preprocess_dataset(raw)
    out = _out_path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save_dataset(grid, out)
    print(json.dumps({"output": str(out), "shape": list(grid.data.shape)}, indent=2))


def cmd_train(args, cfg):
    ds = _grid_dataset(args.data)
    taxonomy = ClassTaxonomy.default()
    ds = _representative(ds, taxonomy)
    settings = _merge(TRAIN_DEFAULTS, cfg.get("train", {}), vars(args))
    grn_cfg = _grn_config(cfg, len(ds.class_names))
    support = sample_support(ds.labels, settings["shots"], settings["seed"], grn_cfg.n_classes)
    x = ds.data[support.flat].astype(np.float64)
    try:
        model, protos, report = fit(
            x, support.labels, grn_cfg, seed=settings["seed"], max_epochs=settings["max_epochs"],
            target_loss=settings["target_loss"], lr=settings["lr"], pairs_per_epoch=settings["pairs_per_epoch"],
            episode_shots=settings["episode_shots"],
        )
    except TrainingDiverged as exc:
        if exc.report is not None:
            _write_json(_out_path(args.output) / "train_report.json", exc.report.to_dict())
        raise
    # wall time varies between runs; keep it out of the digested checkpoint
    report_d = report.to_dict()
    extra = {
        "effective_config": {"train": settings, "grn": grn_cfg.to_dict()},
        "dataset": {"path": str(args.data), "provenance": ds.provenance},
        "class_names": ds.class_names,
        "support_indices": support.indices.tolist(),
        "train_report": {k: v for k, v in report_d.items() if k != "wall_time_s"},
    }
    out = _out_path(args.output)
    digest = save_checkpoint(out, model, protos, extra)
    _write_json(out / "train_report.json", {**report_d, "effective_config": extra["effective_config"],
                                            "checkpoint_sha256": digest})
    print(f"epochs={report.epochs} final_loss={report.final_loss:.6g} stopped={report.stopped}")
    print(f"checkpoint {out} sha256={digest}")


def cmd_eval(args, cfg):
    ds = _grid_dataset(args.data)
    taxonomy = ClassTaxonomy.default()
    rep = _representative(ds, taxonomy)
    settings = _merge(EVAL_DEFAULTS, cfg.get("eval", {}), vars(args))
    grn_cfg = _grn_config(cfg, len(rep.class_names))
    seeds = [settings["seed_base"] + i for i in range(settings["repeats"])]
    x = rep.data.astype(np.float64)
    fit_kw = {k: settings[k] for k in ("max_epochs", "target_loss", "lr", "pairs_per_epoch")}
    results = {}
    for n in settings["shots"]:
        log.info("running %d-shot protocol over %d seeds", n, len(seeds))
        ep = settings["episode_shots"]
        results[n] = run_protocol(x, rep.labels, n, seeds, grn_cfg, episode_shots=min(ep, n) if ep else None, **fit_kw)
    table = aggregate_table({args.subject: {args.session: results}}, shots=settings["shots"])
    out = _out_path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    report = {"effective_config": {"eval": settings, "grn": grn_cfg.to_dict()},
              "results": {str(n): r.to_dict() for n, r in results.items()}}
    if settings["candidates"]:
        cand_names = [c for c in taxonomy.candidates if c in ds.class_names]
        if not cand_names:
            raise ValidationError("dataset holds no candidate classes")
        cand = ds.select_classes(cand_names)
        names = [cand.class_names[i] for i in cand.labels]
        report["candidates"] = {}
        for n, r in results.items():
            c = evaluate_candidates(cand.data.astype(np.float64), names, r.best_model, r.best_prototypes, taxonomy)
            report["candidates"][str(n)] = {**c.to_dict(), "best_seed": r.best_seed}
    text = table.render()
    (out / "table.txt").write_text(text)
    (out / "table.csv").write_text(table.to_csv())
    _write_json(out / "eval_report.json", report)
    if args.embeddings:
        best = results[max(results)]
        export_embeddings(best.best_model, x, rep.labels, out / "embeddings.csv", rep.class_names)
    print(text, end="")
    if "candidates" in report:
        for n, c in report["candidates"].items():
            print(f"candidates {n}-shot accuracy {c['accuracy']:.4f} (best seed {c['best_seed']})")


def cmd_simulate(args, cfg):
    script = load_script(_require_file(args.script, "script"))
    timing_d = {**cfg.get("simulate", {}).get("timing", {}), **script.get("timing", {})}
    try:
        timing = Timing(**timing_d)
    except TypeError as exc:
        raise ValidationError(f"timing: {exc}") from None
    if args.checkpoint:
        model, protos, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
        if protos is None:
            raise ValidationError("checkpoint holds no prototypes")
        source = _acquisition_source(args, script)
        decoder = ModelDecoder(model, protos, source)
    else:
        decoder = oracle_decoder
    stats, records = run_session(script["tasks"], decoder, timing)
    report = {
        "stats": stats.to_dict(),
        "tasks": [{"success": r.success, "commands": r.commands, "control_time_s": r.control_time_s,
                   "events": r.events} for r in records],
        "effective_config": {"timing": timing.__dict__, "script": str(args.script),
                             "decoder": "model" if args.checkpoint else "oracle"},
    }
    if args.output:
        _write_json(_out_path(args.output), report)
    print(json.dumps(report["stats"], indent=2))


def _acquisition_source(args, script):
    """Acquisitions come from synthetic 5 s trials keyed by ``seed`` and ``intent``."""
    taxonomy = ClassTaxonomy.default()
    synth = D.representative_config(**script.get("synth", {}))
    pre = dsp.Preprocessor()

    def source(step):
        name = taxonomy.representative[step["intent"]]
        cls = next(c for c in synth.classes if c.name == name)
        cfg5 = synth.replace(duration_s=5.0)
        raw = D.generate_trial(cfg5, int(step.get("seed", 0)), cls)
        return Acquisition(pre(raw, D.MONTAGE_60), step["intent"])

    return source


def cmd_inspect(args, cfg):
    model, protos, extra = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    c = model.config
    x0 = np.zeros((1, *c.input_shape))
    report = {
        "config": c.to_dict(),
        "shapes": {k: list(v) for k, v in model.shape_trace(x0).items()},
        "n_parameters": int(sum(p.size for p in model.params.values())),
        "prototypes": None if protos is None else list(protos.shape),
    }
    fs = 250.0
    kernels = model.params["enc1.w"].reshape(c.n_filters, -1)
    report["beta_fraction_kernels"] = dsp.beta_fraction(kernels, fs)
    report["band_histogram_kernels"] = dsp.band_histogram(kernels, fs)
    if args.data:
        ds = _grid_dataset(args.data)
        feats = model.layer1_features(ds.data[: args.trials].astype(np.float64))
        maps = feats.reshape(-1, feats.shape[-1])
        report["beta_fraction_features"] = dsp.beta_fraction(maps, fs)
        report["band_histogram_features"] = dsp.band_histogram(maps, fs)
    print(json.dumps(report, indent=2, default=_jsonable))


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="grn", description="Few-shot gradual relation network toolkit for MI-EEG.")
    p.add_argument("--config", help="JSON settings file (flags take precedence)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="synthesise a raw dataset")
    g.add_argument("--output", required=True, help="dataset base path (writes .json and .f32)")
    g.add_argument("--seed", type=int)
    g.add_argument("--trials-per-class", dest="trials_per_class", type=int)
    g.add_argument("--snr-db", dest="snr_db", type=float)
    g.add_argument("--noise-uv", dest="noise_uv", type=float)
    g.add_argument("--phase-lock", dest="phase_lock", type=float)
    g.add_argument("--depth", type=float, help="override every class's modulation depth")
    g.add_argument("--classes", choices=("representative", "all"), default="all")

    pp = sub.add_parser("preprocess", help="raw dataset -> 5x5 grid dataset")
    pp.add_argument("--input", required=True)
    pp.add_argument("--output", required=True)

    t = sub.add_parser("train", help="fit one model on an n-shot support set")
    t.add_argument("--data", required=True)
    t.add_argument("--output", required=True, help="checkpoint directory")
    t.add_argument("--shots", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", dest="max_epochs", type=int)
    t.add_argument("--target-loss", dest="target_loss", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--pairs-per-epoch", dest="pairs_per_epoch", type=int)
    t.add_argument("--episode-shots", dest="episode_shots", type=int, help="trials per class drawn each epoch")

    e = sub.add_parser("eval", help="n-shot protocol over repeated support draws")
    e.add_argument("--data", required=True)
    e.add_argument("--output", default="eval")
    e.add_argument("--shots", type=int, nargs="+")
    e.add_argument("--repeats", type=int)
    e.add_argument("--seed-base", dest="seed_base", type=int)
    e.add_argument("--max-epochs", dest="max_epochs", type=int)
    e.add_argument("--target-loss", dest="target_loss", type=float)
    e.add_argument("--lr", type=float)
    e.add_argument("--pairs-per-epoch", dest="pairs_per_epoch", type=int)
    e.add_argument("--episode-shots", dest="episode_shots", type=int, help="cap on trials per class drawn each epoch")
    e.add_argument("--candidates", action="store_true", default=None)
    e.add_argument("--embeddings", action="store_true")
    e.add_argument("--subject", default="Sub 1")
    e.add_argument("--session", default="Session 1")

    s = sub.add_parser("simulate", help="replay an online drinking-task session script")
    s.add_argument("--script", required=True)
    s.add_argument("--checkpoint", help="decode with this model (default: oracle decoder)")
    s.add_argument("--output")

    i = sub.add_parser("inspect", help="shapes and spectral report of a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", help="grid dataset for layer-1 feature spectra")
    i.add_argument("--trials", type=int, default=8)
    return p


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
        cfg = _load_config(args.config)
        COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (D.DatasetFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ProtocolError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
