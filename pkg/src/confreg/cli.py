"""``confreg`` command line: split, train, calibrate, predict, evaluate, simulate.

Exit codes: 0 success, 2 input or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .conformal import ABSOLUTE, NORMALIZED, ConformalCalibrator, PredictionInterval, encode_float
from .core import (
    DEFAULT_RATIOS,
    PARTITIONS,
    SplitSpec,
    TScoreReference,
    ValidationError,
    check_uniform_k,
    format_categories,
    read_as_bundles,
    split_dataset,
    who_category_set,
)
from .metrics import EvaluationReport, plot_data_csv, render_levels, render_table, report_from_intervals
from .trainer import TrainConfig, train
from .tta import CLI_MODES, MULTI_SAMPLE, TtaStrategy, aggregate_point, calibrate, predict_with_strategy

log = logging.getLogger("confreg")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
DEFAULT_ALPHAS = (0.1, 0.05, 0.01)
SCORE_FLAGS = {"abs": ABSOLUTE, "normalized": NORMALIZED}
RESERVED_COLUMNS = {"id", "y_true", "y_pred", "group_id", "aug_index"}


# -- file plumbing ---------------------------------------------------------

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 16), b""):
                h.update(chunk)
    except FileNotFoundError as exc:
        raise ValidationError(f"no such file: {path}") from exc
    return h.hexdigest()


def write_atomic(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class Manifest:
    """Run provenance. The hash covers inputs, config and version but not the timestamp."""

    def __init__(self, subcommand: str, inputs: list, config: dict, seed=None):
        self.subcommand = subcommand
        self.inputs = [{"path": str(p), "sha256": sha256_file(p)} for p in inputs]
        self.config = config
        self.seed = seed
        self.outputs: list[dict] = []

    @property
    def digest(self) -> str:
        core = {"subcommand": self.subcommand, "inputs": [i["sha256"] for i in self.inputs],
                "config": self.config, "seed": self.seed, "version": __version__}
        return hashlib.sha256(json.dumps(core, sort_keys=True, default=str).encode()).hexdigest()

    def record(self, path: Path) -> Path:
        self.outputs.append({"path": str(path), "sha256": sha256_file(path)})
        return path

    def write(self, path: str | Path) -> Path:
        doc = {"subcommand": self.subcommand, "inputs": self.inputs, "config": self.config,
               "seed": self.seed, "version": __version__, "manifest_sha256": self.digest,
               "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
               "outputs": self.outputs}
        return write_atomic(path, json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x: float) -> str:
    return str(encode_float(float(x)))


def _read_table(path) -> tuple[list[str], list[dict]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            return list(reader.fieldnames or []), rows
    except FileNotFoundError as exc:
        raise ValidationError(f"no such file: {path}") from exc


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValidationError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def _parse_ratios(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ValidationError(f"bad --ratios {text!r}") from exc
    return vals


def _parse_t_ref(text: str) -> TScoreReference:
    try:
        mu, sigma = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ValidationError(f"--t-ref expects MU,SIGMA, got {text!r}") from exc
    return TScoreReference(mu, sigma)


# -- split -----------------------------------------------------------------

def cmd_split(args) -> int:
    header, rows = _read_table(args.input)
    if not rows:
        raise ValidationError(f"{args.input}: no data rows")
    ratios = _parse_ratios(args.ratios) if args.ratios else DEFAULT_RATIOS
    group_aware = args.group_aware
    if group_aware is None:
        # on by default whenever subject ids are available
        group_aware = "group_id" in header
    spec = SplitSpec(ratios=ratios, seed=args.seed, group_aware=group_aware)
    split = split_dataset(rows, spec)

    out = Path(args.out_dir)
    manifest = Manifest("split", [args.input], {"ratios": list(spec.ratios), "group_aware": group_aware},
                        seed=args.seed)
    for name, idx in zip(PARTITIONS, split.as_tuple()):
        text = _csv_text(header, [[rows[i][h] for h in header] for i in idx])
        manifest.record(write_atomic(out / f"{name}.csv", text))
    manifest.write(out / "manifest.json")
    print(" ".join(f"{n}={len(i)}" for n, i in zip(PARTITIONS, split.as_tuple())))
    return EXIT_OK


# -- train -----------------------------------------------------------------

def _feature_table(path, feature_names=None):
    header, rows = _read_table(path)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    names = feature_names or [h for h in header if h not in RESERVED_COLUMNS]
    if not names:
        raise ValidationError(f"{path}: no feature columns")
    missing = [n for n in names if n not in header]
    if missing:
        raise ValidationError(f"{path}: missing feature columns {missing}")
    try:
        X = np.array([[float(r[n]) for n in names] for r in rows])
        y = np.array([float(r["y_true"]) for r in rows]) if "y_true" in header else None
    except (ValueError, KeyError) as exc:
        raise ValidationError(f"{path}: non-numeric value ({exc})") from exc
    return names, rows, X, y


TRAIN_FLAGS = ("max_epochs", "batch_size", "lr_max", "lr_min", "weight_decay", "patience", "delta",
               "hidden_units")


def cmd_train(args) -> int:
    names, _, X, y = _feature_table(args.train)
    _, _, Xv, yv = _feature_table(args.val, names)
    if y is None or yv is None:
        raise ValidationError("training and validation files need a y_true column")

    cfg = {}
    if args.config:
        cfg.update(_load_json(args.config))
    for flag in TRAIN_FLAGS:
        if getattr(args, flag) is not None:
            cfg[flag] = getattr(args, flag)
    if args.seed is not None:
        cfg["seed"] = args.seed
    config = TrainConfig.from_dict(cfg)

    result = train(X, y, Xv, yv, config)
    out = Path(args.out_dir)
    inputs = [args.train, args.val] + ([args.config] if args.config else [])
    manifest = Manifest("train", inputs, asdict(config), seed=config.seed)
    model_doc = {"features": names, "model": result.model.to_dict(), "best_val_pearson_r": result.best_r,
                 "epochs_run": result.epochs_run, "stopped_early": result.stopped_early,
                 "manifest": manifest.digest}
    manifest.record(write_atomic(out / "model.json", json.dumps(model_doc, indent=2, sort_keys=True) + "\n"))
    manifest.record(write_atomic(out / "train_log.jsonl", result.log_jsonl()))

    for pred_path in args.predict or []:
        _, rows, Xp, yp = _feature_table(pred_path, names)
        preds = result.model.predict(Xp)
        if yp is None:
            raise ValidationError(f"{pred_path}: needs y_true to produce a prediction file")
        has_group = "group_id" in rows[0]
        header = ["id", "y_true", "y_pred"] + (["group_id"] if has_group else [])
        body = [[r["id"], r["y_true"], repr(float(p))] + ([r["group_id"]] if has_group else [])
                for r, p in zip(rows, preds)]
        manifest.record(write_atomic(out / f"pred_{Path(pred_path).stem}.csv", _csv_text(header, body)))
    manifest.write(out / "manifest.json")
    print(f"epochs={result.epochs_run} best_val_pearson_r={result.best_r:.6f}")
    return EXIT_OK


# -- calibrate -------------------------------------------------------------

def _strategy_for(mode: str, k: int) -> TtaStrategy:
    if mode == "none" and k != 1:
        raise ValidationError("--tta none expects one prediction per case; use traditional or multi for bundles")
    return TtaStrategy(CLI_MODES[mode], k)


def cmd_calibrate(args) -> int:
    alphas = args.alpha or list(DEFAULT_ALPHAS)
    bundles = read_as_bundles(args.predictions)
    k = check_uniform_k(bundles)
    strategy = _strategy_for(args.tta, k)
    score_kind = SCORE_FLAGS[args.score]
    digest = sha256_file(args.predictions)
    calibrators = [calibrate(strategy, bundles, a, score_kind=score_kind, created_from=digest) for a in alphas]

    manifest = Manifest("calibrate", [args.predictions],
                        {"alphas": alphas, "tta": args.tta, "score": args.score})
    doc = {"tta": args.tta, "strategy": strategy.kind, "k_augment": k,
           "exchangeability": strategy.exchangeability, "manifest": manifest.digest,
           "calibrators": [c.to_dict() for c in calibrators]}
    out = Path(args.output)
    manifest.record(write_atomic(out, json.dumps(doc, indent=2, sort_keys=True) + "\n"))
    manifest.write(out.with_name(out.stem + ".manifest.json"))
    for c in calibrators:
        print(f"alpha={c.alpha:g} q_radius={c.q_radius!r} n_calib={c.n_calib}")
    if strategy.kind == MULTI_SAMPLE and k > 1:
        log.warning("multi-sample scores share cases; exchangeability is heuristic")
    return EXIT_OK


def load_calibrators(path) -> tuple[dict, list[ConformalCalibrator]]:
    doc = _load_json(path)
    if "calibrators" in doc:
        cals = [ConformalCalibrator.from_dict(d) for d in doc["calibrators"]]
    else:
        cals = [ConformalCalibrator.from_dict(doc)]
    if not cals:
        raise ValidationError(f"{path}: no calibrators")
    return doc, cals


# -- predict ---------------------------------------------------------------

def cmd_predict(args) -> int:
    doc, cals = load_calibrators(args.calibrator)
    bundles = read_as_bundles(args.predictions)
    k = check_uniform_k(bundles)
    mode = doc.get("tta", "none")
    if mode not in CLI_MODES:
        raise ValidationError(f"calibrator file has unknown tta mode {mode!r}")
    expected_k = doc.get("k_augment", k)
    if k != expected_k:
        raise ValidationError(f"predictions have K={k}, calibrator was fitted with K={expected_k}")
    strategy = _strategy_for(mode, k)
    ref = _parse_t_ref(args.t_ref) if args.t_ref else None

    header = ["id", "alpha", "center", "lower", "upper", "q_radius"] + (["who_categories"] if ref else [])
    body = []
    for b in bundles:
        for c in cals:
            iv = predict_with_strategy(c, strategy, b)
            row = [b.id, repr(c.alpha), _num(iv.center), _num(iv.lower), _num(iv.upper), _num(c.q_radius)]
            if ref:
                row.append(format_categories(who_category_set(iv, ref)))
            body.append(row)

    manifest = Manifest("predict", [args.calibrator, args.predictions], {"t_ref": args.t_ref})
    out = Path(args.output)
    manifest.record(write_atomic(out, _csv_text(header, body)))
    manifest.write(out.with_name(out.stem + ".manifest.json"))
    print(f"wrote {len(body)} intervals to {out}")
    return EXIT_OK


def read_intervals(path) -> dict[float, dict[str, tuple[PredictionInterval, float]]]:
    header, rows = _read_table(path)
    need = {"id", "alpha", "center", "lower", "upper"}
    if not need <= set(header):
        raise ValidationError(f"{path}: missing columns {sorted(need - set(header))}")
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    out: dict[float, dict] = {}
    try:
        for r in rows:
            alpha = float(r["alpha"])
            iv = PredictionInterval(center=float(r["center"]), lower=float(r["lower"]),
                                    upper=float(r["upper"]), alpha=alpha)
            q = float(r["q_radius"]) if r.get("q_radius") else iv.radius
            out.setdefault(alpha, {})[r["id"]] = (iv, q)
    except ValueError as exc:
        raise ValidationError(f"{path}: bad number ({exc})") from exc
    return out


# -- evaluate --------------------------------------------------------------

def cmd_evaluate(args) -> int:
    bundles = read_as_bundles(args.predictions)
    intervals = read_intervals(args.intervals)
    ids = [b.id for b in bundles]
    y_true = [b.y_true for b in bundles]
    centers = [aggregate_point(b) for b in bundles]

    by_alpha, radius = {}, {}
    for alpha, table in intervals.items():
        if len(table) != len(ids) or set(table) != set(ids):
            raise ValidationError(
                f"alpha={alpha}: {len(table)} intervals do not match the {len(ids)} prediction rows")
        by_alpha[alpha] = [table[i][0] for i in ids]
        qs = {table[i][1] for i in ids}
        radius[alpha] = qs.pop() if len(qs) == 1 else float(np.median([table[i][1] for i in ids]))

    report = report_from_intervals(y_true, centers, by_alpha, radius, model=args.model or "",
                                   strategy=args.strategy or "none")
    manifest = Manifest("evaluate", [args.predictions, args.intervals], {"model": args.model})
    out = Path(args.out_dir)
    manifest.record(write_atomic(out / "report.json", report.to_json(manifest=manifest.digest)))
    text = render_table([report]) + "\n" + render_levels(report)
    if report.error_width_correlation is not None:
        text += f"\nerror/width correlation: {report.error_width_correlation:.4f}\n"
    manifest.record(write_atomic(out / "report.txt", text))
    if args.emit_plot_data:
        from . import plotting

        csv_path = Path(args.emit_plot_data)
        manifest.record(write_atomic(csv_path, plot_data_csv(y_true, centers)))
        png = plotting.scatter_true_vs_pred(y_true, centers, csv_path.with_suffix(".png"), r=report.pearson_r)
        manifest.record(png)
    manifest.write(out / "manifest.json")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_table(args) -> int:
    reports = [EvaluationReport.from_dict(_load_json(p)) for p in args.reports]
    sys.stdout.write(render_table(reports))
    return EXIT_OK


# -- simulate --------------------------------------------------------------

def cmd_simulate(args) -> int:
    from dataclasses import replace

    from . import synthlab

    scenario = synthlab.load_scenario(args.scenario)
    if args.seed is not None:
        scenario.task = replace(scenario.task, seed=args.seed)
    if args.trials is not None:
        scenario.n_trials = args.trials
    rows = synthlab.run_scenario(scenario)

    inputs = [args.scenario] if Path(args.scenario).is_file() else []
    manifest = Manifest("simulate", inputs, scenario.to_dict(), seed=scenario.task.seed)
    doc = {"scenario": scenario.to_dict(), "rows": [r.to_dict() for r in rows], "manifest": manifest.digest}
    out = Path(args.out_dir)
    manifest.record(write_atomic(out / "faceoff.json", json.dumps(doc, indent=2, sort_keys=True) + "\n"))
    text = synthlab.render_face_off(rows)
    manifest.record(write_atomic(out / "faceoff.txt", text))
    if not args.no_figure:
        from . import plotting

        manifest.record(plotting.face_off(rows, out / "faceoff.png"))
    manifest.write(out / "manifest.json")
    sys.stdout.write(text)
    return EXIT_OK


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="confreg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"confreg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", help="seeded train/val/test/calib split of a CSV")
    s.add_argument("input")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--ratios", help="four comma-separated fractions (default 0.7,0.1,0.1,0.1)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--group-aware", action=argparse.BooleanOptionalAction, default=None,
                   help="keep each group_id in one partition (default: on when the column exists)")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="fit the Huber-loss regressor on feature CSVs")
    t.add_argument("train")
    t.add_argument("val")
    t.add_argument("--config", help="JSON file of training settings")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--predict", action="append", metavar="CSV", help="write predictions for this file")
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr-max", type=float)
    t.add_argument("--lr-min", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--delta", type=float)
    t.add_argument("--hidden-units", type=int)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="fit conformal radii on a calibration prediction file")
    c.add_argument("predictions")
    c.add_argument("--alpha", type=float, action="append", help="repeatable; default 0.1 0.05 0.01")
    c.add_argument("--tta", choices=sorted(CLI_MODES), default="none")
    c.add_argument("--score", choices=sorted(SCORE_FLAGS), default="abs")
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("predict", help="prediction intervals for a test prediction file")
    r.add_argument("calibrator")
    r.add_argument("predictions")
    r.add_argument("--t-ref", metavar="MU,SIGMA", help="add the WHO categories each interval spans")
    r.add_argument("-o", "--output", required=True)
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="metrics report for predictions and their intervals")
    e.add_argument("predictions")
    e.add_argument("intervals")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--model", help="row label in the rendered table")
    e.add_argument("--strategy", help="strategy label stored in the report")
    e.add_argument("--emit-plot-data", metavar="PATH",
                   help="write (y_true, y_pred, abs_error) CSV here and a scatter figure beside it")
    e.set_defaults(func=cmd_evaluate)

    tb = sub.add_parser("table", help="render report JSON files as one table")
    tb.add_argument("reports", nargs="+")
    tb.set_defaults(func=cmd_table)

    m = sub.add_parser("simulate", help="Monte Carlo coverage and strategy comparison")
    m.add_argument("scenario", help="scenario JSON file or bundled scenario name")
    m.add_argument("--out-dir", required=True)
    m.add_argument("--seed", type=int)
    m.add_argument("--trials", type=int)
    m.add_argument("--no-figure", action="store_true")
    m.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
