"""Seeded Monte Carlo harness for the built-in simulation designs.

Every replication draws from its own counter-based stream keyed by
``(seed, design tag, purpose, sample-size index, replication index)``, so
results do not depend on the number of workers or on the order in which
replications are run. Replications are reduced in index order.
"""

import concurrent.futures
import csv
import io
import itertools
import json
import logging
import math
import pathlib
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .errors import DomainError, InadmissibleSpec, RBMError
from .estimating import assemble
from .inference import aic, sandwich, tic
from .models.glm import GlmSpec, glm_model
from .models.quasi import QuasiSpec, phi_moment, quasi_model
from .models.ratio import (RatioData, ratio_jackknife, ratio_m_estimate, ratio_onestep, ratio_rbm_estimate,
                           ratio_sandwich)
from .solver import SolverConfig, one_step_fit, solve_m, solve_rbm

log = logging.getLogger(__name__)

_DESIGN_TAGS = {"ratio_copula": 1, "probit": 2, "negbin_quasi": 3}
_PURPOSE_DESIGN, _PURPOSE_RESPONSE = 0, 1


class RngStream:
    """Uniform, normal, exponential and Bernoulli draws from one Philox stream.

    Continuous variates use the inverse CDF so each draw consumes exactly
    one uniform.
    """

    def __init__(self, seed, stream=()):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=self.stream)))

    def uniform(self, size):
        # shift off zero so that inverse CDFs stay finite
        return self._gen.random(size) + 2.0**-54

    def normal(self, size):
        return special.ndtri(self.uniform(size))

    def exponential(self, size, rate=1.0):
        return -np.log1p(-self.uniform(size)) / rate

    def bernoulli(self, p, size=None):
        p = np.asarray(p, float)
        size = p.shape if size is None else size
        return (self.uniform(size) < p).astype(float)


# ---------------------------------------------------------------------------
# generators


def gen_ratio_copula(n, rng, rho=0.5):
    """Pairs with exponential (rate 1/2) ``x`` and normal (mean 10) ``y`` joined by a gaussian copula."""
    if n < 1:
        raise ValueError("n must be at least 1")
    z1 = rng.normal(n)
    z2 = rng.normal(n)
    w2 = rho * z1 + math.sqrt(1.0 - rho * rho) * z2
    x = -2.0 * special.log_ndtr(-z1)
    return RatioData(x, 10.0 + w2)


def gen_probit_design(n, rng):
    """Intercept plus N(0,1), Bernoulli(1/4), Bernoulli(3/4) and Exp(1) covariates."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return np.column_stack([
        np.ones(n),
        rng.normal(n),
        rng.bernoulli(np.full(n, 0.25)),
        rng.bernoulli(np.full(n, 0.75)),
        rng.exponential(n, 1.0),
    ])


def gen_probit_response(X, beta, rng):
    return rng.bernoulli(special.ndtr(X @ np.asarray(beta, float)))


def gen_negbin_design(n0, rng):
    """Intercept, Bernoulli(1/2) and Exp(rate 2) covariates for ``n0`` settings."""
    return np.column_stack([np.ones(n0), rng.bernoulli(np.full(n0, 0.5)), rng.exponential(n0, 2.0)])


def gen_negbin(mu, phi, rng):
    """Negative-binomial counts with mean ``mu`` and variance ``phi * mu``."""
    if not phi > 1:
        raise DomainError("phi must exceed 1 for the negative-binomial generator")
    mu = np.asarray(mu, float)
    return stats.nbinom.ppf(rng.uniform(mu.shape), mu / (phi - 1.0), 1.0 / phi)


# ---------------------------------------------------------------------------
# designs


@dataclass
class SimDesign:
    """A simulation study.

    ``replications`` is either a count used for every sample size or a dict
    ``{"base": N, "n_ref": n0, "power": k}`` giving
    ``round(N * (n / n0) ** k)`` replications at sample size ``n``.
    """

    kind: str
    sample_sizes: list
    replications: object
    estimators: list
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _DESIGN_TAGS:
            raise InadmissibleSpec(f"unknown design kind {self.kind!r}; choose from {sorted(_DESIGN_TAGS)}")
        self.sample_sizes = [int(n) for n in self.sample_sizes]
        if not self.sample_sizes or any(n < 1 for n in self.sample_sizes):
            raise InadmissibleSpec("sample sizes must be positive")
        if any(b <= a for a, b in zip(self.sample_sizes, self.sample_sizes[1:])):
            raise InadmissibleSpec("sample sizes must be strictly increasing")
        allowed = _ESTIMATORS[self.kind]
        bad = [e for e in self.estimators if e not in allowed]
        if bad or not self.estimators:
            raise InadmissibleSpec(f"estimators for {self.kind} must be a nonempty subset of {allowed}")
        for n in self.sample_sizes:
            if self.n_replications(n) < 1:
                raise InadmissibleSpec("replication counts must be at least 1")
        if self.kind == "negbin_quasi":
            n0 = self.params.get("n0", 20)
            if any(n % n0 for n in self.sample_sizes):
                raise InadmissibleSpec("negbin sample sizes must be multiples of n0")
            if not self.params.get("phi", 6.0) > 1:
                raise InadmissibleSpec("phi must exceed 1")

    def n_replications(self, n):
        rule = self.replications
        if isinstance(rule, dict):
            return int(round(rule["base"] * (n / rule.get("n_ref", self.sample_sizes[0])) ** rule.get("power", 0)))
        return int(rule)

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], sample_sizes=list(d["sample_sizes"]), replications=d["replications"],
                   estimators=list(d["estimators"]), seed=int(d.get("seed", 0)), params=dict(d.get("params", {})))

    def as_dict(self):
        return {"kind": self.kind, "sample_sizes": self.sample_sizes, "replications": self.replications,
                "estimators": self.estimators, "seed": self.seed, "params": self.params}

    def stream(self, purpose, n_index, rep=0):
        return RngStream(self.seed, (_DESIGN_TAGS[self.kind], purpose, n_index, rep))


_ESTIMATORS = {
    "ratio_copula": ["m", "rbm", "onestep", "jackknife"],
    "probit": ["m", "rbm", "onestep"],
    "negbin_quasi": ["quasi", "rbm_beta", "rbm_joint"],
}


# ---------------------------------------------------------------------------
# per-design replication


class _Outcome:
    """Estimates of one estimator in one replication."""

    __slots__ = ("theta", "vhat", "converged")

    def __init__(self, theta=None, vhat=None, converged=False):
        self.theta = theta
        self.vhat = vhat
        self.converged = converged


def _ratio_setup(design, n_index, n):
    return None


def _ratio_truth(design):
    return np.array([design.params.get("theta", 5.0)])


def _ratio_rep(design, ctx, n, rep):
    const = design.params.get("constant")
    if const is not None:
        data = RatioData(np.full(n, float(const["x"])), np.full(n, float(const["y"])))
    else:
        data = gen_ratio_copula(n, design.stream(_PURPOSE_RESPONSE, ctx["n_index"], rep), design.params.get("rho", 0.5))
    fns = {"m": ratio_m_estimate, "rbm": ratio_rbm_estimate, "onestep": ratio_onestep, "jackknife": ratio_jackknife}
    out = {}
    for name in design.estimators:
        try:
            t = fns[name](data)
            vhat = None if name == "jackknife" else np.array([ratio_sandwich(data, t)])
            out[name] = _Outcome(np.array([t]), vhat, bool(np.isfinite(t)))
        except RBMError:
            out[name] = _Outcome()
    return out, None


def _probit_columns(design):
    return [0] + [c - 1 for c in design.params.get("model", [4, 5])]


def _probit_setup(design, n_index, n):
    X = gen_probit_design(n, design.stream(_PURPOSE_DESIGN, n_index))
    return {"X": X}


def _probit_truth(design):
    beta = np.asarray(design.params.get("beta", [-0.5, 0.0, 0.0, 0.5, 0.5]), float)
    return beta[_probit_columns(design)]


def _probit_candidates():
    out = []
    for size in range(5):
        for subset in itertools.combinations((2, 3, 4, 5), size):
            out.append(subset)
    return out


def _candidate_label(subset):
    return "+".join(["1"] + [f"x{c}" for c in subset])


def _fit_glm(X, y, kinds, cfg):
    model = glm_model(GlmSpec("binomial", "probit", X, y))
    res = {}
    try:
        m_fit = solve_m(model, cfg)
    except RBMError:
        m_fit = None
    if "m" in kinds:
        res["m"] = m_fit if m_fit is not None and m_fit.converged else None
    if "rbm" in kinds:
        start = m_fit.theta if m_fit is not None and m_fit.converged else model.start
        try:
            fit = solve_rbm(model, SolverConfig(max_iter=cfg.max_iter, epsilon=cfg.epsilon, start=start,
                                                method=cfg.method))
            res["rbm"] = fit if fit.converged else None
        except RBMError:
            res["rbm"] = None
    if "onestep" in kinds:
        res["onestep"] = None
        if m_fit is not None and m_fit.converged:
            try:
                fit = one_step_fit(model, SolverConfig(start=m_fit.theta, method=cfg.method))
                res["onestep"] = fit if fit.converged else None
            except RBMError:
                pass
    return model, res


def _sandwich_diag(model, theta, method):
    try:
        return sandwich(assemble(model, theta, need_second=False, method=method)).se ** 2
    except (RBMError, ValueError):
        return None


def _probit_rep(design, ctx, n, rep):
    X_full = ctx["X"]
    beta = np.asarray(design.params.get("beta", [-0.5, 0.0, 0.0, 0.5, 0.5]), float)
    y = gen_probit_response(X_full, beta, design.stream(_PURPOSE_RESPONSE, ctx["n_index"], rep))
    cfg = SolverConfig(method="analytic")
    model, fits = _fit_glm(X_full[:, _probit_columns(design)], y, design.estimators, cfg)
    out = {}
    for name in design.estimators:
        f = fits[name]
        if f is None:
            out[name] = _Outcome()
        else:
            out[name] = _Outcome(f.theta, _sandwich_diag(model, f.theta, "analytic"), True)
    selection = None
    sel = design.params.get("selection")
    if sel:
        selection = _probit_selection(X_full, y, sel, cfg)
    return out, selection


def _probit_selection(X_full, y, sel, cfg):
    criteria = sel.get("criteria", ["tic"])
    ats = sel.get("at", ["rbm"])
    values = {(c, a): [] for c in criteria for a in ats}
    for subset in _probit_candidates():
        cols = [0] + [c - 1 for c in subset]
        model, fits = _fit_glm(X_full[:, cols], y, ats, cfg)
        for a in ats:
            f = fits[a]
            for c in criteria:
                if f is None:
                    values[(c, a)].append(None)
                    continue
                try:
                    fn = aic if c == "aic" else tic
                    values[(c, a)].append(fn(model, f.theta, a, method="analytic").value)
                except RBMError:
                    values[(c, a)].append(None)
    chosen = {}
    cands = _probit_candidates()
    for key, vals in values.items():
        ok = [(v, len(cands[k]), k) for k, v in enumerate(vals) if v is not None]
        chosen[key] = _candidate_label(cands[min(ok)[2]]) if ok else None
    return chosen


def _negbin_setup(design, n_index, n):
    n0 = design.params.get("n0", 20)
    # the same base covariate settings for every sample size, replicated n / n0 times
    base = gen_negbin_design(n0, design.stream(_PURPOSE_DESIGN, 0))
    return {"X": np.tile(base, (n // n0, 1))}


def _negbin_variances(design):
    return design.params.get("variances", ["mu"])


def _negbin_truth(design):
    beta = design.params.get("beta", [2.0, 1.0, -1.0])
    return np.array(list(beta) + [design.params.get("phi", 6.0)])


def _negbin_rep(design, ctx, n, rep):
    X = ctx["X"]
    beta = np.asarray(design.params.get("beta", [2.0, 1.0, -1.0]), float)
    phi = float(design.params.get("phi", 6.0))
    y = gen_negbin(np.exp(X @ beta), phi, design.stream(_PURPOSE_RESPONSE, ctx["n_index"], rep))
    cfg = SolverConfig(method="analytic")
    p = X.shape[1]
    out = {}
    for vname in _negbin_variances(design):
        moment_spec = QuasiSpec("log", vname, X, y, mode="moment")
        moment = quasi_model(moment_spec)
        try:
            q_fit = solve_m(moment, cfg)
        except RBMError:
            q_fit = None
        q_ok = q_fit is not None and q_fit.converged
        for name in design.estimators:
            key = f"{name}[{vname}]"
            try:
                if name == "quasi":
                    fit = q_fit
                elif name == "rbm_beta":
                    start = q_fit.theta if q_ok else moment.start
                    fit = solve_rbm(moment, SolverConfig(start=start, method="analytic"))
                else:
                    joint = quasi_model(QuasiSpec("log", vname, X, y, mode="joint"))
                    start = np.append(q_fit.theta, phi_moment(moment_spec, q_fit.theta, n)) if q_ok else joint.start
                    fit = solve_rbm(joint, SolverConfig(start=start, method="analytic"))
            except RBMError:
                fit = None
            if fit is None or not fit.converged:
                out[key] = _Outcome()
                continue
            theta = fit.theta if name == "rbm_joint" else np.append(fit.theta, phi_moment(moment_spec, fit.theta, n - p))
            out[key] = _Outcome(theta, None, True)
    return out, None


_DESIGNS = {
    "ratio_copula": (_ratio_setup, _ratio_rep, _ratio_truth, lambda d: ["theta"]),
    "probit": (_probit_setup, _probit_rep, _probit_truth,
               lambda d: [f"beta{c + 1}" for c in _probit_columns(d)]),
    "negbin_quasi": (_negbin_setup, _negbin_rep, _negbin_truth,
                     lambda d: [f"beta{s}" for s in range(len(d.params.get("beta", [2, 1, -1])))] + ["phi"]),
}


def _estimator_keys(design):
    if design.kind == "negbin_quasi":
        return [f"{e}[{v}]" for v in _negbin_variances(design) for e in design.estimators]
    return list(design.estimators)


def _run_chunk(design_dict, n_index, reps):
    design = SimDesign.from_dict(design_dict)
    n = design.sample_sizes[n_index]
    setup, rep_fn, _, _ = _DESIGNS[design.kind]
    ctx = setup(design, n_index, n) or {}
    ctx["n_index"] = n_index
    return [rep_fn(design, ctx, n, r) for r in reps]


# ---------------------------------------------------------------------------
# summaries


@dataclass
class SimSummary:
    design: dict
    rows: list
    slopes: list
    selection: list

    def as_dict(self):
        return {"design": self.design, "results": self.rows, "slopes": self.slopes, "selection": self.selection}

    def to_json(self):
        return json.dumps(_clean(self.as_dict()), sort_keys=True, indent=2, allow_nan=False) + "\n"

    def lookup(self, estimator, parameter, n):
        for row in self.rows:
            if row["estimator"] == estimator and row["parameter"] == parameter and row["n"] == n:
                return row
        raise KeyError((estimator, parameter, n))

    def slope(self, estimator, parameter):
        for row in self.slopes:
            if row["estimator"] == estimator and row["parameter"] == parameter:
                return row["slope"]
        raise KeyError((estimator, parameter))

    def tables_csv(self):
        """One table per parameter: rows are metric by estimator, columns are sample sizes."""
        sizes = self.design["sample_sizes"]
        metrics = ["bias", "mse", "mae", "pu", "variance", "mean_vhat", "nonconvergence"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["parameter", "metric", "estimator"] + [f"n={n}" for n in sizes])
        params = list(dict.fromkeys(r["parameter"] for r in self.rows))
        estimators = list(dict.fromkeys(r["estimator"] for r in self.rows))
        index = {(r["estimator"], r["parameter"], r["n"]): r for r in self.rows}
        for par in params:
            for metric in metrics:
                for est in estimators:
                    cells = [_fmt(index.get((est, par, n), {}).get(metric)) for n in sizes]
                    writer.writerow([par, metric, est] + cells)
        return buf.getvalue()

    def selection_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["n", "criterion", "at", "model", "count", "proportion"])
        for block in self.selection:
            total = sum(block["counts"].values())
            for label, count in block["counts"].items():
                writer.writerow([block["n"], block["criterion"], block["at"], label, count,
                                 _fmt(count / total if total else None)])
        return buf.getvalue()


def _fmt(x):
    return "" if x is None else repr(float(x))


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _mc_se(values):
    if values.size < 2:
        return None
    return float(np.std(values, ddof=1) / math.sqrt(values.size))


def _summarize_cell(estimates, vhats, truth, n_total, n_failed):
    err = estimates - truth
    used = err.size
    row = {"replications": n_total, "used": used, "nonconvergence": n_failed / n_total}
    if used == 0:
        row.update(bias=None, mse=None, mae=None, pu=None, variance=None, mean_vhat=None,
                   se={"bias": None, "mse": None, "mae": None, "pu": None})
        return row
    under = np.where(estimates < truth, 1.0, np.where(estimates == truth, 0.5, 0.0))
    row.update(
        bias=float(np.mean(err)),
        mse=float(np.mean(err**2)),
        mae=float(np.mean(np.abs(err))),
        pu=float(np.mean(under)),
        variance=float(np.var(estimates, ddof=1)) if used > 1 else None,
        mean_vhat=None if vhats is None else float(np.mean(vhats)),
        se={"bias": _mc_se(err), "mse": _mc_se(err**2), "mae": _mc_se(np.abs(err)), "pu": _mc_se(under)},
    )
    return row


def _ols_slope(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def run_study(design, workers=1, progress=None, chunk_size=None):
    """Run every replication of ``design`` and summarize.

    Summaries for each sample size use the replications in which every
    estimator converged; each estimator's own failure rate is reported as
    ``nonconvergence``.
    """
    if isinstance(design, dict):
        design = SimDesign.from_dict(design)
    _, _, truth_fn, names_fn = _DESIGNS[design.kind]
    truth = truth_fn(design)
    names = names_fn(design)
    keys = _estimator_keys(design)
    rows, selection = [], []
    design_dict = design.as_dict()
    executor = concurrent.futures.ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for n_index, n in enumerate(design.sample_sizes):
            N = design.n_replications(n)
            size = chunk_size or max(1, min(500, -(-N // (4 * max(1, workers)))))
            chunks = [range(a, min(N, a + size)) for a in range(0, N, size)]
            if executor is None:
                results = (_run_chunk(design_dict, n_index, c) for c in chunks)
            else:
                results = executor.map(_run_chunk, itertools.repeat(design_dict), itertools.repeat(n_index), chunks)
            outcomes, picks = [], []
            for part in results:
                for out, sel in part:
                    outcomes.append(out)
                    picks.append(sel)
                if progress:
                    progress(f"{design.kind}: n={n} {len(outcomes)}/{N}")
            rows.extend(_summarize_size(outcomes, keys, names, truth, n, N))
            if picks and picks[0] is not None:
                selection.extend(_summarize_selection(picks, n))
    finally:
        if executor is not None:
            executor.shutdown()
    slopes = _slopes(rows, keys, names, design.sample_sizes)
    return SimSummary(design_dict, rows, slopes, selection)


def _summarize_size(outcomes, keys, names, truth, n, N):
    conv = np.array([[o[k].converged for k in keys] for o in outcomes], dtype=bool).reshape(N, len(keys))
    keep = conv.all(axis=1)
    rows = []
    for col, key in enumerate(keys):
        est = np.array([outcomes[i][key].theta for i in np.flatnonzero(keep)]).reshape(-1, len(names))
        has_v = keep.any() and all(outcomes[i][key].vhat is not None for i in np.flatnonzero(keep))
        vh = np.array([outcomes[i][key].vhat for i in np.flatnonzero(keep)]) if has_v else None
        failed = int(N - conv[:, col].sum())
        for s, name in enumerate(names):
            row = {"estimator": key, "parameter": name, "n": n, "truth": float(truth[s])}
            v = None
            if vh is not None and vh.ndim == 2 and vh.shape[1] > s:
                v = vh[:, s]
            row.update(_summarize_cell(est[:, s], v, truth[s], N, failed))
            rows.append(row)
    return rows


def _summarize_selection(picks, n):
    out = []
    for key in picks[0]:
        counts = {}
        for p in picks:
            label = p[key] if p[key] is not None else "none"
            counts[label] = counts.get(label, 0) + 1
        ordered = {_candidate_label(c): counts.get(_candidate_label(c), 0) for c in _probit_candidates()}
        if "none" in counts:
            ordered["none"] = counts["none"]
        out.append({"n": n, "criterion": key[0], "at": key[1], "counts": ordered})
    return out


def _slopes(rows, keys, names, sizes):
    out = []
    if len(sizes) < 2:
        return out
    for key in keys:
        for name in names:
            biases = [r["bias"] for r in rows if r["estimator"] == key and r["parameter"] == name]
            ok = all(b is not None and b != 0 for b in biases)
            slope = _ols_slope(np.log(sizes), np.log(np.abs(biases))) if ok else None
            out.append({"estimator": key, "parameter": name, "slope": slope})
    return out


def write_outputs(summary, out_dir):
    """Write ``summary.json``, ``tables.csv`` and, if present, ``selection.csv``."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(summary.to_json())
    (out / "tables.csv").write_text(summary.tables_csv())
    if summary.selection:
        (out / "selection.csv").write_text(summary.selection_csv())
    return out


__all__ = ["RngStream", "SimDesign", "SimSummary", "run_study", "write_outputs", "gen_ratio_copula",
           "gen_probit_design", "gen_probit_response", "gen_negbin", "gen_negbin_design"]
