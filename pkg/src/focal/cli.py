"""Command-line interface.

    focal simulate --config sim.json --out runs/sim [--scenario all] [--threads 4] [--seed 1]
    focal fit      --config fit.json --out runs/fit
    focal bands    --model runs/fit/model.json --x 0.1,0,1 --out runs/band [--alpha 0.05 --mode pointwise]
    focal report   --out runs/sim

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
On failure a JSON error record is printed to stderr (and written to
``<out>/error.json`` when ``--out`` is given).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__
from . import plotting
from .errors import ConfigError, DataError, FocalError, NumericalError
from .funcdata import BSplineBasis, Grid, read_curves_csv, smooth_curveset
from .learners import MlpConfig
from .metalearner import (
    Dataset,
    FcateModel,
    FocalSpec,
    LearnerSpec,
    PropensitySpec,
    confidence_band,
    fate_band,
    fit_fcate,
    make_plan,
    surface_points,
)
from .rng import derive_seed
from .simulate import (
    DgpConfig,
    McReport,
    ScenarioConfig,
    default_threads,
    fit_replication,
    generate,
    run_study,
)

log = logging.getLogger("focal")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SCHEMA_VERSION = 1

# ---------------------------------------------------------------------------
# Config schemas

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int_pos = {"type": "integer", "minimum": 1}
_seed = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}

_MLP = {
    "type": "object", "additionalProperties": False,
    "properties": {
        "hidden": {"type": "array", "items": _int_pos, "minItems": 1},
        "activation": {"enum": ["relu"]},
        "alpha": _nonneg, "max_iter": _int_pos, "learning_rate": _pos,
        "schedule": {"enum": ["adaptive"]},
        "batch_size": {"type": ["integer", "null"], "minimum": 1},
        "tol": _nonneg, "init": {"enum": ["he", "zeros"]},
    },
}
_FOS = {
    "type": "object", "additionalProperties": False,
    "properties": {"kind": {"enum": ["ridge", "mlp"]}, "lam": _nonneg, "mlp": _MLP},
}

SIMULATE_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "focal simulate config",
    "type": "object", "additionalProperties": False,
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": _seed,
        "threads": _int_pos,
        "dgp": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n": _int_pos, "T": {"type": "integer", "minimum": 2},
                "length_scale": _pos, "nu": _pos, "beta_amplitude": _pos,
                "effect_amplitude": _pos, "noise_amplitude": _pos,
                "eta": {"type": "array", "items": _num, "minItems": 4, "maxItems": 4},
                "beta_seed": {"type": ["integer", "null"], "minimum": 0},
            },
        },
        "study": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "replications": _int_pos,
                "J": {"type": "integer", "minimum": 2},
                "scenarios": {"type": "array", "items": {"enum": [1, 2, 3, 4]}, "minItems": 1,
                              "uniqueItems": True},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "B": {"type": "integer", "minimum": 200},
                "probes": {"type": "array",
                           "items": {"type": "array", "items": _num, "minItems": 4, "maxItems": 4}},
                "n_eval": _int_pos,
                "trim": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5},
                "cov_k": {"type": ["integer", "null"], "minimum": 1},
                "n_eff": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "learners": {
            "type": "object", "additionalProperties": False,
            "properties": {"mu_lam": _nonneg, "pi_lam": _nonneg, "final_lam": _nonneg,
                           "clip": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5}},
        },
        "output": {
            "type": "object", "additionalProperties": False,
            "properties": {"figures": {"type": "boolean"}},
        },
    },
}

FIT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "focal fit config",
    "type": "object", "additionalProperties": False,
    "required": ["schema_version", "data"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": _seed,
        "threads": _int_pos,
        "data": {
            "type": "object", "additionalProperties": False,
            "required": ["covariates", "curves"],
            "properties": {
                "covariates": {"type": "string"}, "curves": {"type": "string"},
                "id_column": {"type": "string"}, "treatment": {"type": "string"},
                "smooth": {
                    "type": "object", "additionalProperties": False,
                    "properties": {"n_interior": {"type": "integer", "minimum": 0},
                                   "grid_size": {"type": "integer", "minimum": 2}},
                },
            },
        },
        "learners": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "mu": _FOS, "final": _FOS,
                "pi": {"type": "object", "additionalProperties": False,
                       "properties": {"lam": _nonneg,
                                      "clip": {"type": "number", "exclusiveMinimum": 0,
                                               "exclusiveMaximum": 0.5}}},
                "cov_k": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "J": {"type": "integer", "minimum": 2},
        "bands": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "B": {"type": "integer", "minimum": 200},
                "mode": {"enum": ["pointwise", "simultaneous"]},
                "trim": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5},
            },
        },
        "surface": {
            "type": "object", "additionalProperties": False,
            "properties": {"column": {"type": "string"}, "n_points": {"type": "integer", "minimum": 2}},
        },
        "output": {
            "type": "object", "additionalProperties": False,
            "properties": {"figures": {"type": "boolean"}},
        },
    },
}

BANDS_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "focal bands config",
    "type": "object", "additionalProperties": False,
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "model": {"type": "string"},
        "x": {"type": "array", "items": _num, "minItems": 1},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "mode": {"enum": ["pointwise", "simultaneous"]},
        "B": {"type": "integer", "minimum": 200},
        "n_eff": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "seed": _seed,
    },
}

SCHEMAS = {"simulate": SIMULATE_SCHEMA, "fit": FIT_SCHEMA, "bands": BANDS_SCHEMA}


def validate_config(cfg, command: str) -> dict:
    validator = jsonschema.Draft7Validator(SCHEMAS[command])
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        detail = [{"path": "/" + "/".join(map(str, e.absolute_path)), "message": e.message} for e in errors]
        raise ConfigError(json.dumps(detail))
    return cfg


def load_config(path, command: str) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(json.dumps([{"path": "/", "message": f"config file not found: {path}"}])) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(json.dumps([{"path": "/", "message": f"invalid JSON: {exc}"}])) from exc
    return validate_config(cfg, command)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def _provenance(out: Path, cfg: dict, command: str, seeds: dict) -> None:
    prov = {
        "command": command,
        "config_sha256": config_hash(cfg),
        "config": cfg,
        "seeds": seeds,
        "versions": {"focal": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
    }
    (out / "provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


# ---------------------------------------------------------------------------
# simulate / report


def _study_from_config(cfg: dict, args) -> tuple[DgpConfig, list[ScenarioConfig]]:
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.get("seed", 0)
    dgp_kw = dict(cfg.get("dgp", {}))
    if "eta" in dgp_kw:
        dgp_kw["eta"] = tuple(dgp_kw["eta"])
    dgp = DgpConfig(seed=seed, **dgp_kw)
    study = dict(cfg.get("study", {}))
    ids = study.pop("scenarios", [1, 2, 3, 4])
    scen = getattr(args, "scenario", None)
    if scen and scen != "all":
        ids = [int(scen)]
    if "probes" in study:
        study["probes"] = tuple(tuple(p) for p in study["probes"])
    learn = cfg.get("learners", {})
    base = ScenarioConfig(id=1, seed=seed, **study, **learn)
    return dgp, [base.with_id(i) for i in sorted(ids)]


def _threads(args, cfg) -> int:
    if getattr(args, "threads", None):
        return args.threads
    if os.environ.get("FOCAL_THREADS"):
        return default_threads()
    return int(cfg.get("threads", 1))


def write_simulation_bundle(out: Path, report: McReport, dgp: DgpConfig, scenarios, figures: bool = True) -> None:
    report.write_summary_csv(out / "summary.csv")
    report.write_ndjson(out / "rows.ndjson")

    box = [(r["scenario"], r["replication"], r["armse"]) for r in report.ok_rows()]
    _write_csv(out / "armse_boxplot.csv", ["scenario", "replication", "armse"], box)

    # first replication: FATE per scenario and the theta surface of the first scenario
    truth = generate(dgp, 0)
    t = truth.grid.points
    fate_truth = truth.theta(truth.X).mean(axis=0)
    fates, lo, hi = {}, None, None
    surface = None
    for sc in scenarios:
        model = fit_replication(truth, sc, 0)
        band = fate_band(model.pseudo, sc.trim, sc.alpha, sc.B, "simultaneous", derive_seed(sc.seed, 0, 99))
        fates[sc.id] = band
        if surface is None:
            rows = surface_points(truth.X, 0, 50)
            surface = (sc.id, rows[:, 0], model.predict_values(rows), truth.theta(rows))
    header = ["t", "truth"]
    cols = [t, fate_truth]
    for sid, band in fates.items():
        header += [f"fate_s{sid}", f"lower_s{sid}", f"upper_s{sid}"]
        cols += [band.center.values, band.lower.values, band.upper.values]
    _write_csv(out / "fate_curves.csv", header, zip(*cols))

    sid, xv, est, tru = surface
    _write_csv(out / "theta_surface.csv", ["scenario", "x1", "t", "theta_hat", "theta_true"],
               [(sid, xv[i], t[j], est[i, j], tru[i, j]) for i in range(len(xv)) for j in range(len(t))])

    if figures:
        first = fates[min(fates)]
        lo, hi = first.lower.values, first.upper.values
        plotting.fate_figure(out / "fate_curves.svg", t,
                             {f"scenario {k}": b.center.values for k, b in fates.items()},
                             lo, hi, fate_truth, title="FATE, replication 0")
        by = {}
        for s, _, v in box:
            by.setdefault(s, []).append(v)
        if by:
            plotting.armse_boxplot(out / "armse_boxplot.svg", by)
        plotting.surface_heatmap(out / "theta_surface.svg", xv, t, est, xlabel="x1")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, "simulate")
    dgp, scenarios = _study_from_config(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = _threads(args, cfg)
    ndjson = out / "rows.ndjson"
    if not getattr(args, "resume", False) and ndjson.exists():
        ndjson.unlink()
    report = run_study(scenarios, dgp, threads=threads, ndjson_path=ndjson,
                       progress=lambda i, k: log.info("replication %d/%d", i, k))
    (out / "config.json").write_text(canonical_json(cfg) + "\n")
    write_simulation_bundle(out, report, dgp, scenarios, cfg.get("output", {}).get("figures", True))
    _provenance(out, cfg, "simulate", {"seed": dgp.seed, "scenarios": [s.id for s in scenarios],
                                        "overrides": {"seed": args.seed, "scenario": args.scenario}})
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    cfg_path = Path(args.config) if args.config else out / "config.json"
    cfg = load_config(cfg_path, "simulate")
    if not (out / "rows.ndjson").exists():
        raise DataError(f"{out / 'rows.ndjson'} not found; run 'focal simulate' first")
    dgp, scenarios = _study_from_config(cfg, args)
    report = McReport.read_ndjson(out / "rows.ndjson", [s.id for s in scenarios])
    report.rows = [r for r in report.rows if r["scenario"] in report.scenarios]
    write_simulation_bundle(out, report, dgp, scenarios, cfg.get("output", {}).get("figures", True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def read_covariates_csv(path, id_column: str = "id", treatment: str = "A"):
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            names = reader.fieldnames or []
            rows = list(reader)
    except FileNotFoundError as exc:
        raise DataError(f"covariate file not found: {path}") from exc
    for col in (id_column, treatment):
        if col not in names:
            raise DataError(f"{path}: missing column {col!r}")
    cov_names = [c for c in names if c not in (id_column, treatment)]
    if not cov_names:
        raise DataError(f"{path}: no covariate columns")
    ids = [r[id_column] for r in rows]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate ids")
    try:
        A = np.array([float(r[treatment]) for r in rows])
        X = np.array([[float(r[c]) for c in cov_names] for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric value: {exc}") from exc
    if not np.all(np.isin(A, (0.0, 1.0))):
        raise DataError("treatment column must be binary (0/1)")
    return ids, cov_names, X, A.astype(int)


def load_dataset(data_cfg: dict, base: Path) -> tuple[Dataset, list[str]]:
    cov_path = base / data_cfg["covariates"]
    cur_path = base / data_cfg["curves"]
    ids, names, X, A = read_covariates_csv(cov_path, data_cfg.get("id_column", "id"), data_cfg.get("treatment", "A"))
    try:
        cids, curves = read_curves_csv(cur_path)
    except FileNotFoundError as exc:
        raise DataError(f"curve file not found: {cur_path}") from exc
    if set(ids) != set(cids):
        missing = sorted(set(ids) ^ set(cids))[:5]
        raise DataError(f"ids differ between covariate and curve files (e.g. {missing})")
    order = {c: i for i, c in enumerate(cids)}
    curves = curves.subset([order[i] for i in ids])
    smooth = data_cfg.get("smooth")
    if smooth is not None:
        grid = curves.grid
        basis = BSplineBasis.from_breakpoints(
            np.linspace(grid.points[0], grid.points[-1], smooth.get("n_interior", 10) + 2))
        target = Grid(np.linspace(grid.points[0], grid.points[-1], smooth.get("grid_size", len(grid))))
        curves = smooth_curveset(curves, basis, target)
    elif not np.all(np.isfinite(curves.values)):
        raise DataError("curves contain missing values; add data.smooth to impute them")
    if A.min() == A.max():
        raise DataError("both treatment arms required")
    return Dataset(X, A, curves), names


def _spec_from_config(cfg: dict) -> FocalSpec:
    lc = cfg.get("learners", {})

    def fos(d):
        d = d or {}
        mlp = dict(d.get("mlp", {}))
        if "hidden" in mlp:
            mlp["hidden"] = tuple(mlp["hidden"])
        return LearnerSpec(d.get("kind", "ridge"), d.get("lam", 1e-8), MlpConfig(**mlp))

    pi = lc.get("pi", {})
    return FocalSpec(fos(lc.get("mu")), PropensitySpec(pi.get("lam", 0.0), pi.get("clip", 0.01)),
                     fos(lc.get("final")), lc.get("cov_k"), cfg.get("seed", 0))


def cmd_fit(args) -> int:
    cfg = load_config(args.config, "fit")
    if args.seed is not None:
        cfg = {**cfg, "seed": args.seed}
    seed = cfg.get("seed", 0)
    base = Path(args.config).resolve().parent
    d, names = load_dataset(cfg["data"], base)
    spec = _spec_from_config(cfg)
    J = cfg.get("J", 5)
    plan = make_plan(d.n, J, derive_seed(seed, 0))
    model = fit_fcate(d, spec, plan)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(json.dumps(model.to_dict()) + "\n")

    bc = cfg.get("bands", {})
    band = fate_band(model.pseudo, bc.get("trim", 0.0), bc.get("alpha", 0.05), bc.get("B", 2000),
                     bc.get("mode", "simultaneous"), derive_seed(seed, 1))
    t = d.grid.points
    _write_csv(out / "fate.csv", ["t", "fate", "lower", "upper"],
               zip(t, band.center.values, band.lower.values, band.upper.values))

    sc = cfg.get("surface", {})
    col_name = sc.get("column", names[0])
    if col_name not in names:
        raise DataError(f"surface column {col_name!r} is not a covariate")
    col = names.index(col_name)
    rows = surface_points(d.X, col, sc.get("n_points", 50))
    Z = model.predict_values(rows)
    xv = rows[:, col]
    _write_csv(out / "theta_surface.csv", [col_name, "t", "theta_hat"],
               [(xv[i], t[j], Z[i, j]) for i in range(len(xv)) for j in range(len(t))])
    _write_csv(out / "covariate_profile.csv", names, rows)

    norms = model.pseudo.diff.norms()
    _write_csv(out / "summary.csv", ["quantity", "value"], [
        ("n", d.n), ("n_treated", int(d.A.sum())), ("J", J),
        ("fate_l2_norm", float(np.sqrt(np.sum(band.center.values**2 * d.grid.weights())))),
        ("band_level", band.level), ("band_mode", band.mode),
        ("pseudo_diff_norm_median", float(np.median(norms))),
        ("propensity_min", float(model.pseudo.pi_hat.min())),
        ("propensity_max", float(model.pseudo.pi_hat.max())),
    ])
    (out / "config.json").write_text(canonical_json(cfg) + "\n")
    if cfg.get("output", {}).get("figures", True):
        plotting.fate_figure(out / "fate.svg", t, {"FATE": band.center.values}, band.lower.values,
                             band.upper.values)
        plotting.surface_heatmap(out / "theta_surface.svg", xv, t, Z, xlabel=col_name)
    _provenance(out, cfg, "fit", {"seed": seed, "plan_seed": plan.rng_seed})
    return EXIT_OK


# ---------------------------------------------------------------------------
# bands


def cmd_bands(args) -> int:
    cfg = load_config(args.config, "bands") if args.config else {"schema_version": SCHEMA_VERSION}
    overrides = {"model": args.model, "alpha": args.alpha, "mode": args.mode, "B": args.B, "seed": args.seed,
                 "n_eff": args.n_eff}
    if args.x is not None:
        try:
            overrides["x"] = [float(v) for v in args.x.split(",")]
        except ValueError as exc:
            raise ConfigError(json.dumps([{"path": "/x", "message": str(exc)}])) from exc
    cfg = validate_config({**cfg, **{k: v for k, v in overrides.items() if v is not None}}, "bands")
    for key in ("model", "x"):
        if key not in cfg:
            raise ConfigError(json.dumps([{"path": f"/{key}", "message": f"'{key}' is required"}]))
    try:
        model = FcateModel.from_dict(json.loads(Path(cfg["model"]).read_text()))
    except FileNotFoundError as exc:
        raise DataError(f"model dump not found: {cfg['model']}") from exc
    x = np.asarray(cfg["x"], dtype=float)
    if x.size != model.n_features:
        raise DataError(f"x has {x.size} entries; the model expects {model.n_features}")
    band = confidence_band(model, x, cfg.get("alpha", 0.05), cfg.get("B", 2000), cfg.get("mode", "simultaneous"),
                           cfg.get("seed", 0), cfg.get("n_eff"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "band.csv", ["t", "center", "lower", "upper"],
               zip(model.grid.points, band.center.values, band.lower.values, band.upper.values))
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(json.dumps([{"path": "argv", "message": message}]))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="focal", description="Doubly robust functional CATE estimation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON run configuration")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed (u64)")
        sp.add_argument("--threads", type=int, default=None, help="worker processes (env FOCAL_THREADS)")
        sp.add_argument("--scenario", choices=["1", "2", "3", "4", "all"], default=None)

    sp = sub.add_parser("simulate", help="run the Monte Carlo benchmark")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="keep rows already in <out>/rows.ndjson")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit on covariate + curve CSV files")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("bands", help="confidence band at a covariate row from a model dump")
    common(sp, config_required=False)
    sp.add_argument("--model", help="model.json written by 'focal fit'")
    sp.add_argument("--x", help="comma-separated covariate row")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--mode", choices=["pointwise", "simultaneous"])
    sp.add_argument("--B", type=int)
    sp.add_argument("--n-eff", dest="n_eff", type=float)
    sp.set_defaults(func=cmd_bands)

    sp = sub.add_parser("report", help="rebuild summary and figures from <out>/rows.ndjson")
    common(sp, config_required=False)
    sp.set_defaults(func=cmd_report)
    return p


def _error_record(kind: str, exc: BaseException) -> dict:
    msg = str(exc)
    rec = {"error": kind, "message": msg}
    if isinstance(exc, ConfigError):
        try:
            rec["errors"] = json.loads(msg)
            rec["message"] = "invalid configuration"
        except json.JSONDecodeError:
            pass
    return rec


def main(argv=None) -> int:
    out_dir = None
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        out_dir = getattr(args, "out", None)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ConfigError as exc:
        code, rec = EXIT_CONFIG, _error_record("config", exc)
    except DataError as exc:
        code, rec = EXIT_DATA, _error_record("data", exc)
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        code, rec = EXIT_NUMERIC, _error_record("numerical", exc)
    except (FocalError, ValueError) as exc:
        code, rec = EXIT_DATA, _error_record("data", exc)
    print(json.dumps(rec), file=sys.stderr)
    if out_dir is not None:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "error.json").write_text(json.dumps(rec, indent=2) + "\n")
        except OSError:
            pass
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
