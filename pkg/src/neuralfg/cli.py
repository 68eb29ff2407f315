"""Command-line entry point: ``neuralfg <subcommand> [options]``.

Options come from built-in defaults, then an optional JSON ``--config`` file,
then explicit flags (flags win).  Each run writes into its own directory
``<out>/<UTC timestamp>-<config hash>``; every result file carries a run
record with the tool version, resolved config, seed and input hashes.
Failures exit with status 1 and one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, plotting
from .data import SyntheticSpec, file_sha256, generate_synthetic, load_csv, write_csv
from .metrics import EvalHorizons, MetricReport, evaluate_model, event_quantiles
from .model import NfgModel, SchemaError
from .objectives import SurvivalBatch
from .reclassification import RiskBins, reclassification_matrix, subgroup_brier_diff
from .trainer import GRID, CvConfig, HyperParams, TrainConfig, cross_validate, train
from .verification import likelihood_cost_benchmark

log = logging.getLogger("neuralfg")


class UsageError(Exception):
    pass


_COMMON = {"seed": 0, "out": "runs", "jobs": 1}
_DATASET = {"data": None, "time_col": "time", "event_col": "event", "features": None}
_MODEL = {"variant": "nfg", "risks": None}
_HYPER = {"learning_rate": 1e-3, "batch_size": 250, "dropout": 0.0, "layers": 2, "nodes": 50}
_TRAINING = {"max_epochs": 1000, "patience": 50, "val_fraction": 0.10}

DEFAULTS = {
    "generate": {**_COMMON, "n": 30_000, "p": 12, "risks": 2, "censoring": 0.5,
                 "scale": 3.0, "time_col": "time", "event_col": "event"},
    "train": {**_COMMON, **_DATASET, **_MODEL, **_HYPER, **_TRAINING},
    "evaluate": {**_COMMON, **_DATASET, "checkpoint": None, "horizons": None,
                 "cumulative": True},
    "cv": {**_COMMON, **_DATASET, **_MODEL, **_HYPER, **_TRAINING, "k": 5, "trials": 100,
           "grid": None, "horizons": None, "cumulative": True},
    "reclassify": {**_COMMON, **_DATASET, "checkpoint_a": None, "checkpoint_b": None,
                   "horizon": None, "risk": 1, "thresholds": [0.10, 0.20],
                   "filter_column": None, "filter_min": None, "filter_max": None,
                   "group_column": None, "group_edges": None, "horizons": None},
    "benchmark": {**_COMMON, **_MODEL, "data": None, "time_col": "time", "event_col": "event",
                  "features": None, "checkpoint": None, "degrees": [1, 15, 100],
                  "batch_size": 250, "layers": 2, "nodes": 50, "min_samples": 50},
}
REQUIRED = {"train": ["data"], "evaluate": ["data", "checkpoint"], "cv": ["data"],
            "reclassify": ["data", "checkpoint_a", "checkpoint_b", "horizon"]}
_NOT_HASHED = ("out", "jobs")


# -- argument parsing -------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _variant(text: str) -> str:
    name = text.replace("-", "_")
    if name not in ("nfg", "monofg", "cause_specific"):
        raise argparse.ArgumentTypeError(f"unknown variant {text!r}")
    return name


def _add(p, *flags, **kw):
    p.add_argument(*flags, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neuralfg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"neuralfg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        _add(p, "--config", help="JSON file of option values (flags override it)")
        _add(p, "--seed", type=int)
        _add(p, "--out", help="parent directory for run directories")
        _add(p, "--jobs", type=int)

    def dataset(p):
        _add(p, "--data", help="CSV with a header row")
        _add(p, "--time-col", dest="time_col")
        _add(p, "--event-col", dest="event_col")
        _add(p, "--features", type=_names, help="comma-separated feature columns")

    def model(p):
        _add(p, "--variant", type=_variant, help="nfg, monofg or cause-specific")
        _add(p, "--risks", type=int)

    def hyper(p):
        _add(p, "--learning-rate", dest="learning_rate", type=float)
        _add(p, "--batch-size", dest="batch_size", type=int)
        _add(p, "--dropout", type=float)
        _add(p, "--layers", type=int)
        _add(p, "--nodes", type=int)
        _add(p, "--max-epochs", dest="max_epochs", type=int)
        _add(p, "--patience", type=int)
        _add(p, "--val-fraction", dest="val_fraction", type=float)

    p = sub.add_parser("generate", help="write a synthetic competing-risks cohort")
    common(p)
    _add(p, "--n", type=int)
    _add(p, "--p", type=int, help="number of features")
    _add(p, "--risks", type=int)
    _add(p, "--censoring", type=float, help="target censored fraction")
    _add(p, "--scale", type=float, help="non-linearity scale of the log-rates")
    _add(p, "--time-col", dest="time_col")
    _add(p, "--event-col", dest="event_col")

    p = sub.add_parser("train", help="fit one model and save a checkpoint")
    common(p), dataset(p), model(p), hyper(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    common(p), dataset(p)
    _add(p, "--checkpoint")
    _add(p, "--horizons", type=_floats, help="evaluation times (default: event-time quartiles)")
    _add(p, "--no-cumulative", dest="cumulative", action="store_false")

    p = sub.add_parser("cv", help="k-fold cross-validation with hyperparameter search")
    common(p), dataset(p), model(p), hyper(p)
    _add(p, "--k", type=int)
    _add(p, "--trials", type=int, help="search trials per fold; 0 uses the given hyperparameters")
    _add(p, "--horizons", type=_floats)
    _add(p, "--no-cumulative", dest="cumulative", action="store_false")

    p = sub.add_parser("reclassify", help="risk-bin reclassification between two checkpoints")
    common(p), dataset(p)
    _add(p, "--checkpoint-a", dest="checkpoint_a")
    _add(p, "--checkpoint-b", dest="checkpoint_b")
    _add(p, "--horizon", type=float)
    _add(p, "--risk", type=int)
    _add(p, "--thresholds", type=_floats)
    _add(p, "--filter-column", dest="filter_column")
    _add(p, "--filter-min", dest="filter_min", type=float)
    _add(p, "--filter-max", dest="filter_max", type=float)
    _add(p, "--group-column", dest="group_column")
    _add(p, "--group-edges", dest="group_edges", type=_floats)
    _add(p, "--horizons", type=_floats, help="horizons of the subgroup Brier comparison")

    p = sub.add_parser("benchmark", help="exact vs quadrature likelihood cost")
    common(p), model(p)
    _add(p, "--data")
    _add(p, "--time-col", dest="time_col")
    _add(p, "--event-col", dest="event_col")
    _add(p, "--features", type=_names)
    _add(p, "--checkpoint")
    _add(p, "--degrees", type=_ints)
    _add(p, "--batch-size", dest="batch_size", type=int)
    _add(p, "--layers", type=int)
    _add(p, "--nodes", type=int)
    _add(p, "--min-samples", dest="min_samples", type=int)
    return parser


def resolve_config(command: str, flags: dict) -> dict:
    """Defaults, then the JSON config file, then flags."""
    cfg = dict(DEFAULTS[command])
    path = flags.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise UsageError(f"config keys not used by {command}: {unknown}")
        if "variant" in loaded:
            loaded["variant"] = _variant(loaded["variant"])
        cfg.update(loaded)
    cfg.update(flags)
    missing = [k for k in REQUIRED.get(command, []) if cfg.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s) {', '.join(missing)}")
    return cfg


# -- run directories and the reproducibility record -------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False, default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


class Run:
    """One run directory plus the record embedded in every file written to it."""

    def __init__(self, command: str, cfg: dict, inputs: dict):
        hashed = {k: v for k, v in cfg.items() if k not in _NOT_HASHED}
        digest = hashlib.sha256(json.dumps(hashed, sort_keys=True).encode()).hexdigest()[:10]
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        base = Path(cfg["out"]) / f"{stamp}-{digest}"
        path, k = base, 1
        while path.exists():
            path, k = base.with_name(f"{base.name}-{k}"), k + 1
        path.mkdir(parents=True)
        self.dir = path
        self.record = {"tool": "neuralfg", "version": __version__, "command": command,
                       "seed": cfg["seed"], "config": cfg, "config_hash": digest,
                       "inputs": inputs}
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def write_json(self, name: str, payload: dict) -> None:
        self.path(name).write_text(_dumps({"run": self.record, **payload}) + "\n", encoding="utf-8")

    def write_text(self, name: str, body: str) -> None:
        header = "".join(f"# {line}\n" for line in _dumps(self.record).splitlines())
        self.path(name).write_text(header + body, encoding="utf-8")

    @property
    def meta(self) -> str:
        return json.dumps(self.record, sort_keys=True, default=_jsonable)


def _inputs(cfg: dict, *keys) -> dict:
    out = {}
    for k in keys:
        if cfg.get(k) is not None:
            path = Path(cfg[k])
            if not path.is_file():
                raise FileNotFoundError(f"{k}: no such file {path}")
            out[k] = {"path": str(path), "sha256": file_sha256(path)}
    return out


def _load(cfg: dict, n_risks=None):
    return load_csv(cfg["data"], cfg["time_col"], cfg["event_col"], cfg["features"],
                    n_risks if n_risks is not None else cfg.get("risks"))


def _check_schema(model, dataset) -> None:
    if dataset.n_features != model.n_features:
        raise SchemaError(f"checkpoint expects {model.n_features} features "
                          f"but the data has {dataset.n_features}")


def _hyper(cfg: dict) -> HyperParams:
    return HyperParams(*(cfg[k] for k in ("learning_rate", "batch_size", "dropout", "layers",
                                          "nodes")))


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(cfg["max_epochs"], cfg["patience"], cfg["val_fraction"], cfg["seed"],
                       cfg["variant"], cfg["risks"])


def _horizons(cfg: dict, dataset) -> EvalHorizons:
    if cfg.get("horizons"):
        return EvalHorizons.fixed(cfg["horizons"])
    return event_quantiles(dataset.times, dataset.events)


# -- commands ---------------------------------------------------------------

def cmd_generate(cfg: dict) -> Run:
    spec = SyntheticSpec(n=cfg["n"], p=cfg["p"], n_risks=cfg["risks"],
                         nonlinearity_scale=cfg["scale"], censoring=cfg["censoring"],
                         seed=cfg["seed"])
    dataset = generate_synthetic(spec)
    run = Run("generate", cfg, {})
    csv_path = run.path("cohort.csv")
    write_csv(dataset, csv_path, cfg["time_col"], cfg["event_col"])
    counts = {str(e): int(np.sum(dataset.events == e)) for e in range(spec.n_risks + 1)}
    run.write_json("manifest.json", {"spec": spec.to_dict(), "event_counts": counts,
                                     "outputs": {"cohort.csv": file_sha256(csv_path)}})
    print(f"wrote {len(dataset)} patients to {csv_path}")
    return run


def cmd_train(cfg: dict) -> Run:
    inputs = _inputs(cfg, "data")
    dataset = _load(cfg)
    hp = _hyper(cfg)
    model, history = train(dataset, hp, _train_config(cfg))
    run = Run("train", cfg, inputs)
    ckpt = run.path("model.nfg")
    checkpoint.save(model, ckpt)
    body = "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in history.epochs)
    run.path("training_log.jsonl").write_text(
        json.dumps({"run": run.record}, sort_keys=True, default=_jsonable) + "\n" + body,
        encoding="utf-8")
    run.write_json("result.json", {
        "hyperparams": asdict(hp), "best_epoch": history.best_epoch,
        "best_val_nll": history.best_val_nll, "stopped_epoch": history.stopped_epoch,
        "n_parameters": model.n_parameters(), "outputs": {"model.nfg": file_sha256(ckpt)}})
    plotting.plot_training_curve(history, run.path("training_curve.png"), run.meta)
    print(f"best epoch {history.best_epoch}, validation NLL {history.best_val_nll:.4f}")
    return run


def _report_outputs(run: Run, report: MetricReport, title: str, extra: dict) -> None:
    run.write_json("metrics.json", {"report": report.to_dict(), **extra})
    text = report.render(title)
    run.write_text("metrics.txt", text)
    plotting.plot_metrics_by_horizon(report, run.path("metrics.png"), run.meta)
    print(text, end="")


def cmd_evaluate(cfg: dict) -> Run:
    inputs = _inputs(cfg, "data", "checkpoint")
    model = checkpoint.load(cfg["checkpoint"])
    dataset = _load(cfg, model.n_risks)
    _check_schema(model, dataset)
    horizons = _horizons(cfg, dataset)
    report = MetricReport(horizons, [evaluate_model(model, dataset, horizons, cfg["cumulative"])],
                          {"variant": model.variant, "n": len(dataset)})
    run = Run("evaluate", cfg, inputs)
    _report_outputs(run, report, f"{model.variant} on {len(dataset)} patients", {})
    plotting.plot_cif_curves(model, dataset.covariates[:3], run.path("cif.png"), meta=run.meta)
    return run


def cmd_cv(cfg: dict) -> Run:
    inputs = _inputs(cfg, "data")
    dataset = _load(cfg)
    grid = dict(GRID) if cfg["grid"] is None else {k: tuple(v) for k, v in cfg["grid"].items()}
    fixed = _hyper(cfg) if cfg["trials"] == 0 else None
    cv = CvConfig(k=cfg["k"], n_trials=max(cfg["trials"], 1), hyperparams=fixed, grid=grid,
                  cumulative=cfg["cumulative"])
    horizons = _horizons(cfg, dataset) if cfg["horizons"] else None
    result = cross_validate(dataset, _train_config(cfg), cv, horizons, jobs=cfg["jobs"])
    run = Run("cv", cfg, inputs)
    ckpts = {}
    for i, model in enumerate(result.models):
        name = f"fold{i}.nfg"
        checkpoint.save(model, run.path(name))
        ckpts[name] = file_sha256(run.dir / name)
    title = f"{cfg['k']}-fold cross-validation, variant {cfg['variant']}"
    _report_outputs(run, result.report, title, {"folds": result.fold_info, "outputs": ckpts})
    return run


def _cohort_mask(cfg: dict, dataset):
    column = cfg["filter_column"]
    if column is None:
        return None, "all patients"
    values = dataset.column(column)
    mask = np.ones(len(dataset), dtype=bool)
    parts = []
    if cfg["filter_min"] is not None:
        mask &= values >= cfg["filter_min"]
        parts.append(f"{column} >= {cfg['filter_min']:g}")
    if cfg["filter_max"] is not None:
        mask &= values < cfg["filter_max"]
        parts.append(f"{column} < {cfg['filter_max']:g}")
    return mask, " and ".join(parts) or "all patients"


def cmd_reclassify(cfg: dict) -> Run:
    inputs = _inputs(cfg, "data", "checkpoint_a", "checkpoint_b")
    model_a = checkpoint.load(cfg["checkpoint_a"])
    model_b = checkpoint.load(cfg["checkpoint_b"])
    dataset = _load(cfg, max(model_a.n_risks, model_b.n_risks))
    for m in (model_a, model_b):
        _check_schema(m, dataset)
    bins = RiskBins(tuple(cfg["thresholds"]))
    mask, cohort = _cohort_mask(cfg, dataset)
    free, event = reclassification_matrix(model_a, model_b, dataset, cfg["horizon"], cfg["risk"],
                                          bins, mask, cohort)
    payload = {"boundary_rule": bins.boundary_rule, "horizon": cfg["horizon"],
               "risk": cfg["risk"], "matrices": [free.to_dict(), event.to_dict()]}
    text = free.render("A", "B") + "\n" + event.render("A", "B")
    if cfg["group_column"] is not None:
        if not cfg["group_edges"]:
            raise UsageError("--group-column needs --group-edges")
        hs = cfg["horizons"] or [cfg["horizon"]]
        diff = subgroup_brier_diff([(model_a, model_b, dataset)], cfg["group_column"],
                                   cfg["group_edges"], {f"{h:g}": h for h in hs}, cfg["risk"])
        payload["subgroup_brier_diff"] = {"values": diff.values, "summary": diff.summary()}
        text += "\nBrier(A) - Brier(B) by " + cfg["group_column"] + "\n" + diff.render()
    run = Run("reclassify", cfg, inputs)
    run.write_json("reclassification.json", payload)
    run.write_text("reclassification.txt", text)
    plotting.plot_reclassification([free, event], run.path("reclassification.png"), meta=run.meta)
    print(text, end="")
    return run


def cmd_benchmark(cfg: dict) -> Run:
    inputs = _inputs(cfg, "data", "checkpoint")
    rng = np.random.default_rng(cfg["seed"])
    if cfg["data"] is not None:
        dataset = _load(cfg)
    else:
        dataset = generate_synthetic(SyntheticSpec(n=cfg["batch_size"], seed=cfg["seed"]))
    if cfg["checkpoint"] is not None:
        model = checkpoint.load(cfg["checkpoint"])
        _check_schema(model, dataset)
    else:
        model = NfgModel.build(dataset.n_features, cfg["risks"] or dataset.n_risks,
                               layers=cfg["layers"], nodes=cfg["nodes"], variant=cfg["variant"],
                               t_scale=dataset.max_event_time(), rng=rng)
    idx = rng.permutation(len(dataset))[:cfg["batch_size"]]
    report = likelihood_cost_benchmark(model, SurvivalBatch.from_dataset(dataset, idx),
                                       tuple(cfg["degrees"]), cfg["min_samples"])
    run = Run("benchmark", cfg, inputs)
    run.write_json("benchmark.json", {"report": report.to_dict(),
                                      "note": "wall-clock timings vary between runs"})
    text = report.render()
    run.write_text("benchmark.txt", text)
    plotting.plot_benchmark(report, run.path("benchmark.png"), run.meta)
    print(text, end="")
    return run


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "cv": cmd_cv, "reclassify": cmd_reclassify, "benchmark": cmd_benchmark}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    command = None
    try:
        args = vars(build_parser().parse_args(argv))
        command = args.pop("command")
        cfg = resolve_config(command, args)
        run = COMMANDS[command](cfg)
        print(f"run directory: {run.dir}")
        return 0
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error record
        record = {"error": type(exc).__name__, "message": str(exc), "command": command}
        sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
