"""Command-line interface: ``rbmest fit``, ``rbmest simulate`` and ``rbmest select``.

Exit codes: 0 success, 1 input error, 2 numerical failure or non-convergence
(the report is still written when one exists).
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from importlib import resources

import jsonschema
import numpy as np

from . import inference
from .adjustment import empirical_adjustment
from .errors import (EmptyData, EvaluationFailed, FlavorMismatch, InadmissibleSpec, NonFiniteMatrix, RBMError,
                     SingularMatrix)
from .estimating import Flavor, assemble
from .models.glm import GlmSpec, glm_model
from .models.quasi import QuasiSpec, phi_moment, quasi_model
from .models.ratio import RatioData, ratio_model
from .simulate import SimDesign, run_study, write_outputs
from .solver import EstimatorKind, SolverConfig, fit

log = logging.getLogger("rbmest")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2
_NUMERIC_ERRORS = (SingularMatrix, EvaluationFailed, NonFiniteMatrix)


class InputError(Exception):
    pass


def load_schema(name):
    text = resources.files("rbmest").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(instance, name):
    """Validate against a shipped schema; problems are reported with JSON pointers."""
    validator = jsonschema.Draft202012Validator(load_schema(name))
    errors = sorted(validator.iter_errors(instance), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for err in errors:
            pointer = "/" + "/".join(str(p) for p in err.absolute_path)
            lines.append(f"{pointer}: {err.message}")
        raise InputError("schema validation failed:\n  " + "\n  ".join(lines))


# ---------------------------------------------------------------------------
# CSV


def read_csv(path):
    """Read a comma-separated file with a header row into a dict of float columns."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise EmptyData(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise InputError(f"{path}: duplicate column names in header")
    body = rows[1:]
    if not body:
        raise EmptyData(f"{path} has a header but no data rows")
    cols = {h: np.empty(len(body)) for h in header}
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise InputError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}")
        for h, cell in zip(header, row):
            try:
                value = float(cell)
            except ValueError:
                raise InputError(f"{path}: row {i}, column {h!r}: cannot parse {cell.strip()!r} as a number") from None
            if not math.isfinite(value):
                raise InputError(f"{path}: row {i}, column {h!r}: value is not finite")
            cols[h][i - 2] = value
    return cols


def _column(cols, name, path="data"):
    if name not in cols:
        raise InputError(f"{path}: no column named {name!r} (have {sorted(cols)})")
    return cols[name]


def _design_matrix(cols, covariates, intercept):
    parts, names = [], []
    if intercept:
        n = len(next(iter(cols.values())))
        parts.append(np.ones(n))
        names.append("(intercept)")
    for c in covariates:
        parts.append(_column(cols, c))
        names.append(c)
    if not parts:
        raise InputError("the model has no covariates and no intercept")
    return np.column_stack(parts), tuple(names)


def _split(text, cast=str):
    if text is None:
        return None
    items = [t.strip() for t in text.split(",") if t.strip()]
    try:
        return [cast(t) for t in items]
    except ValueError:
        raise InputError(f"cannot parse {text!r} as a comma-separated list of numbers") from None


# ---------------------------------------------------------------------------
# model construction


def _dispersion(value):
    if value is None or str(value).lower() == "unknown":
        return None
    return float(value)


def build_model(kind, cols, opts):
    """Return ``(model, spec)`` for a model kind and options."""
    if kind == "ratio":
        data = RatioData(_column(cols, opts.get("x", "x")), _column(cols, opts.get("y", "y")))
        return ratio_model(data), data
    covariates = opts.get("covariates") or []
    X, names = _design_matrix(cols, covariates, opts.get("intercept", True))
    y = _column(cols, opts.get("response", "y"))
    w = _column(cols, opts["weights"]) if opts.get("weights") else None
    if kind == "glm":
        family = opts.get("family") or "normal"
        link = opts.get("link") or _DEFAULT_LINKS[family]
        spec = GlmSpec(family, link, X, y, w,
                       dispersion=_dispersion(opts.get("dispersion", 1.0)), names=names)
        return glm_model(spec), spec
    if kind == "quasi":
        spec = QuasiSpec(opts.get("link") or "log", opts.get("variance", "mu"), X, y, w,
                         mode=opts.get("mode", "moment"), names=names)
        return quasi_model(spec), spec
    raise InputError(f"unknown model kind {kind!r}")


def check_compatible(model, estimator):
    kind = EstimatorKind(estimator)
    if kind in (EstimatorKind.PENALIZED_MAX, EstimatorKind.LOGDET_PENALIZED_MAX) and model.flavor is not Flavor.OBJECTIVE:
        raise FlavorMismatch(f"estimator {estimator!r} needs an objective-based model; {model.description} "
                             "is defined by estimating equations only")


# ---------------------------------------------------------------------------
# fit


def fit_report(model, spec, estimator, result, null=None, kind_name=""):
    theta = result.theta
    report = {
        "model": kind_name,
        "description": model.description,
        "estimator": EstimatorKind(estimator).value,
        "n": int(model.k),
        "parameters": model.parameter_names(),
        "estimates": [float(t) for t in theta],
        "convergence": {
            "converged": bool(result.converged),
            "iterations": int(result.iterations),
            "residual": float(result.residual),
            "message": result.message,
        },
        "dispersion": None,
        "criteria": None,
        "pivots": None,
        "adjustment": None,
    }
    try:
        mats = assemble(model, theta, need_second=True)
        var = inference.sandwich(mats)
        report["vcov"] = var.vhat.tolist()
        report["se"] = [float(s) for s in var.se]
        report["adjustment"] = [float(a) for a in empirical_adjustment(mats)]
    except (RBMError, ValueError) as exc:
        report["vcov"] = None
        report["se"] = [None] * len(theta)
        report["convergence"]["message"] = (report["convergence"]["message"] + f"; variance unavailable: {exc}").lstrip("; ")
    if isinstance(spec, QuasiSpec) and not spec.joint:
        report["dispersion"] = phi_moment(spec, theta)
    if isinstance(spec, GlmSpec) and not spec.unknown_dispersion:
        report["dispersion"] = float(spec.dispersion)
    if model.flavor is Flavor.OBJECTIVE:
        at = EstimatorKind(estimator).value
        try:
            crit = {}
            for name, fn in (("TIC", inference.tic), ("AIC", inference.aic), ("CLIC", inference.clic)):
                c = fn(model, theta, at)
                crit[name] = {"value": c.value, "larger_is_better": c.larger_is_better,
                              "objective": c.objective_value, "penalty": c.penalty, "trace_penalty": c.trace_penalty}
            report["criteria"] = crit
        except RBMError as exc:
            log.warning("criteria unavailable: %s", exc)
    if null is not None:
        null = np.asarray(null, float)
        if null.size != theta.size:
            raise InputError(f"--null has {null.size} values, the model has {theta.size} parameters")
        piv = {"null": null.tolist(), "df": int(theta.size), "wald": None, "wald_p": None, "score": None, "score_p": None}
        if report["vcov"] is not None:
            w = inference.wald_pivot(theta, null, np.asarray(report["vcov"]))
            piv["wald"], piv["wald_p"] = w, inference.chisq_sf(max(w, 0.0), theta.size)
        try:
            s = inference.score_pivot(model, null, theta)
            piv["score"], piv["score_p"] = s, inference.chisq_sf(max(s, 0.0), theta.size)
        except RBMError as exc:
            log.warning("score pivot unavailable: %s", exc)
        report["pivots"] = piv
    return report


def cmd_fit(args):
    cols = read_csv(args.data)
    opts = {
        "x": args.x, "y": args.y, "response": args.response,
        "covariates": _split(args.covariates) or [], "intercept": not args.no_intercept,
        "weights": args.weights, "family": args.family, "link": args.link,
        "dispersion": args.dispersion, "variance": args.variance, "mode": args.mode,
    }
    if args.model == "ratio":
        opts["y"] = args.y or "y"
    model, spec = build_model(args.model, cols, opts)
    check_compatible(model, args.estimator)
    start = _split(args.start, float)
    cfg = SolverConfig(max_iter=args.max_iter, epsilon=args.epsilon, stop=args.stop,
                       start=np.asarray(start) if start is not None else "from_m_estimate")
    result = fit(model, args.estimator, cfg)
    report = fit_report(model, spec, args.estimator, result, _split(args.null, float), args.model)
    _emit(report, "fit_report", args.output)
    return EXIT_OK if result.converged else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args):
    try:
        with open(args.design, encoding="utf-8") as fh:
            design = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {args.design}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.design}: invalid JSON: {exc}") from None
    validate(design, "design")
    if os.environ.get("RBM_SEED"):
        try:
            design["seed"] = int(os.environ["RBM_SEED"])
        except ValueError:
            raise InputError("RBM_SEED must be an integer") from None
    sim = SimDesign.from_dict(design)

    def progress(msg):
        print(msg, file=sys.stderr, flush=True)

    summary = run_study(sim, workers=args.threads, progress=progress)
    out = write_outputs(summary, args.out)
    print(json.dumps({"summary": str(out / "summary.json"), "tables": str(out / "tables.csv")}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# select


def _candidate_name(cand, index):
    if cand.get("name"):
        return cand["name"]
    covs = cand.get("covariates", [])
    terms = (["1"] if cand.get("intercept", True) else []) + list(covs)
    return "+".join(terms) or f"candidate{index}"


def select_models(candidates, cols, criterion="tic", at="rbm", response="y", weights=None, cfg=None):
    """Fit each candidate, compute the criterion and rank (smaller value first).

    Ties are broken by fewer parameters, then by input order.
    """
    cfg = cfg or SolverConfig()
    fn = {"tic": inference.tic, "aic": inference.aic, "clic": inference.clic}[criterion]
    fitted, excluded = [], []
    for index, cand in enumerate(candidates):
        name = _candidate_name(cand, index)
        opts = dict(cand)
        opts.setdefault("response", response)
        if weights and "weights" not in opts:
            opts["weights"] = weights
        try:
            model, _ = build_model(cand["model"], cols, opts)
            if model.flavor is not Flavor.OBJECTIVE:
                raise FlavorMismatch("information criteria need an objective-based model")
            res = fit(model, at, cfg)
            if not res.converged:
                raise RBMError(f"{at} fit did not converge: {res.message}")
            c = fn(model, res.theta, at)
        except (RBMError, InputError, ValueError) as exc:
            excluded.append({"name": name, "index": index, "reason": f"{type(exc).__name__}: {exc}"})
            continue
        fitted.append({"name": name, "index": index, "value": c.value, "larger_is_better": c.larger_is_better,
                       "objective": c.objective_value, "penalty": c.penalty, "p": int(model.p),
                       "estimates": [float(t) for t in res.theta]})
    fitted.sort(key=lambda r: (r["value"], r["p"], r["index"]))
    if fitted:
        w = inference.criterion_weights([r["value"] for r in fitted])
        for r, wk in zip(fitted, w):
            r["weight"] = float(wk)
            r["best"] = False
        fitted[0]["best"] = True
    return {"criterion": criterion, "at": at, "best": fitted[0]["name"] if fitted else None,
            "ranking": fitted, "excluded": excluded}


def cmd_select(args):
    try:
        with open(args.candidates, encoding="utf-8") as fh:
            spec = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {args.candidates}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.candidates}: invalid JSON: {exc}") from None
    validate(spec, "candidates")
    cols = read_csv(args.data)
    report = select_models(spec["candidates"], cols, args.criterion, args.at,
                           response=spec.get("response", "y"), weights=spec.get("weights"))
    _emit(report, "select_report", args.output)
    return EXIT_OK if report["ranking"] else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.floating):
        return _clean(float(obj))
    return obj


def _emit(report, schema, output=None):
    report = _clean(report)
    validate(report, schema)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if output:
        with open(output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def build_parser():
    parser = argparse.ArgumentParser(prog="rbmest", description="Reduced-bias M-estimation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log debugging information")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a built-in model to CSV data")
    p.add_argument("--model", required=True, choices=["ratio", "glm", "quasi"])
    p.add_argument("--estimator", default="rbm", choices=[k.value for k in EstimatorKind])
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--stop", choices=["residual", "step"], default="residual")
    p.add_argument("--start", help="comma-separated starting values")
    p.add_argument("--null", help="comma-separated null values for the Wald and score pivots")
    p.add_argument("--x", default="x", help="ratio model: denominator column")
    p.add_argument("--y", default=None, help="ratio model: numerator column")
    p.add_argument("--response", default="y")
    p.add_argument("--covariates", help="comma-separated covariate columns")
    p.add_argument("--no-intercept", action="store_true")
    p.add_argument("--weights", help="column of observation weights")
    p.add_argument("--family", default="normal", choices=["normal", "binomial", "poisson", "gamma"])
    p.add_argument("--link", default=None, choices=["identity", "log", "logit", "probit"])
    p.add_argument("--dispersion", default="1", help="known dispersion value or 'unknown'")
    p.add_argument("--variance", default="mu", help="quasi model variance function")
    p.add_argument("--mode", default="moment", choices=["moment", "joint"])
    p.add_argument("--output", help="write the report here instead of standard output")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run a simulation design")
    p.add_argument("--design", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("select", help="rank candidate models by an information criterion")
    p.add_argument("--candidates", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--criterion", default="tic", choices=["tic", "aic", "clic"])
    p.add_argument("--at", default="rbm", choices=["m", "rbm"])
    p.add_argument("--output")
    p.set_defaults(func=cmd_select)
    return parser


_DEFAULT_LINKS = {"normal": "identity", "binomial": "logit", "poisson": "log", "gamma": "log"}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    if getattr(args, "command", None) == "fit":
        if args.link is None:
            args.link = _DEFAULT_LINKS[args.family] if args.model == "glm" else "log"
    try:
        return args.func(args)
    except _NUMERIC_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, RBMError, InadmissibleSpec, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
