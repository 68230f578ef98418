"""Synthetic benchmark: Matérn-coefficient DGP, misspecification scenarios, Monte Carlo driver.

Data model, for covariates ``X ~ N(0, I_4)``::

    pi(X)  = expit(eta . X)
    mu_a(X) = b0 + sum_j b_j X_j + a * b5 X_1      (b_j are Matérn GP paths)
    Y_a    = mu_a(X) + eps                          (eps shared by both arms)

so the true F-CATE is ``b5 * x_1``. Scenario ``s`` feeds the nuisance
learners either the raw covariates or their nonlinear distortion.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import NumericalError
from .funcdata import CurveSet, Grid, l2_norms, write_curves_csv
from .gp import GpSampler, MaternKernel
from .learners import IDENTITY, MISSPECIFIED, z_transform
from .metalearner import (
    Dataset,
    FocalSpec,
    LearnerSpec,
    PropensitySpec,
    aipw_pseudo_outcomes,
    confidence_band,
    fate,
    fit_fcate,
    make_plan,
    model_bias,
)
from .rng import STREAM_BETA, STREAM_DATA, STREAM_EVAL, STREAM_FOLDS, derive_seed, stream

log = logging.getLogger(__name__)

ROW_SCHEMA = 1
SCENARIO_FEATURES = {1: (IDENTITY, IDENTITY), 2: (MISSPECIFIED, IDENTITY),
                     3: (IDENTITY, MISSPECIFIED), 4: (MISSPECIFIED, MISSPECIFIED)}
DEFAULT_PROBES = ((0.0, 0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0), (-1.0, 0.0, 0.0, 0.0),
                  (0.5, -0.5, 0.5, -0.5), (-0.5, 0.5, -0.5, 0.5))

__all__ = ["DgpConfig", "McReport", "ScenarioConfig", "SimTruth", "armse", "generate", "run_scenario",
           "run_study", "export_dataset", "z_transform"]


@dataclass(frozen=True)
class DgpConfig:
    n: int = 5000
    T: int = 100
    length_scale: float = 0.25
    nu: float = 5.5
    beta_amplitude: float = 2.0  # b0..b4
    effect_amplitude: float = 10.0  # b5
    noise_amplitude: float = 10.0
    eta: tuple[float, float, float, float] = (-1.0, 0.5, -0.25, -0.1)
    seed: int = 0
    beta_seed: int | None = None  # freeze the coefficient paths across replications

    def __post_init__(self):
        if self.n < 1 or self.T < 2:
            raise ValueError("n must be >= 1 and T >= 2")
        if len(self.eta) != 4:
            raise ValueError("eta needs four weights")
        MaternKernel(self.length_scale, self.nu, self.beta_amplitude)
        MaternKernel(self.length_scale, self.nu, self.effect_amplitude)
        MaternKernel(self.length_scale, self.nu, self.noise_amplitude)

    @property
    def grid(self) -> Grid:
        return Grid.uniform(self.T)


@lru_cache(maxsize=32)
def _sampler(length_scale: float, nu: float, amplitude: float, T: int) -> GpSampler:
    return GpSampler.build(MaternKernel(length_scale, nu, amplitude), Grid.uniform(T))


@dataclass(frozen=True)
class SimTruth:
    grid: Grid
    betas: np.ndarray  # (6, T): b0..b5
    eta: np.ndarray
    X: np.ndarray
    A: np.ndarray
    pi: np.ndarray
    Y0: CurveSet
    Y1: CurveSet

    @property
    def Y(self) -> CurveSet:
        A = self.A[:, None]
        return CurveSet(self.grid, A * self.Y1.values + (1 - A) * self.Y0.values)

    def dataset(self) -> Dataset:
        return Dataset(self.X, self.A, self.Y)

    def propensity(self, X) -> np.ndarray:
        return expit(np.atleast_2d(X) @ self.eta)

    def mu(self, a: int, X) -> np.ndarray:
        X = np.atleast_2d(X)
        out = self.betas[0] + X @ self.betas[1:5]
        if a == 1:
            out = out + np.outer(X[:, 0], self.betas[5])
        return out

    def theta(self, X) -> np.ndarray:
        return np.outer(np.atleast_2d(X)[:, 0], self.betas[5])


def generate(cfg: DgpConfig, replication: int = 0) -> SimTruth:
    """One synthetic dataset; coefficient paths are redrawn per replication."""
    grid = cfg.grid
    beta_seed = cfg.seed if cfg.beta_seed is None else cfg.beta_seed
    beta_rep = replication if cfg.beta_seed is None else 0
    brng = stream(beta_seed, beta_rep, STREAM_BETA)
    s_beta = _sampler(cfg.length_scale, cfg.nu, cfg.beta_amplitude, cfg.T)
    s_eff = _sampler(cfg.length_scale, cfg.nu, cfg.effect_amplitude, cfg.T)
    betas = np.vstack([s_beta.draw(brng, 5), s_eff.draw(brng, 1)])

    rng = stream(cfg.seed, replication, STREAM_DATA)
    X = rng.standard_normal((cfg.n, 4))
    eta = np.asarray(cfg.eta, dtype=float)
    pi = expit(X @ eta)
    A = (rng.random(cfg.n) < pi).astype(int)
    eps = _sampler(cfg.length_scale, cfg.nu, cfg.noise_amplitude, cfg.T).draw(rng, cfg.n)
    mu0 = betas[0] + X @ betas[1:5]
    Y0 = mu0 + eps
    Y1 = Y0 + np.outer(X[:, 0], betas[5])
    for arr in (betas, X, pi, A):
        arr.setflags(write=False)
    return SimTruth(grid, betas, eta, X, A, pi, CurveSet(grid, Y0), CurveSet(grid, Y1))


def export_dataset(truth: SimTruth, covariates_path, curves_path, treatment: str = "A") -> None:
    """Write the observed data in the CSV layout read by ``focal fit``."""
    ids = [f"s{i:06d}" for i in range(truth.X.shape[0])]
    with open(covariates_path, "w") as fh:
        fh.write(",".join(["id", treatment, *(f"x{j + 1}" for j in range(truth.X.shape[1]))]) + "\n")
        for i, a, x in zip(ids, truth.A, truth.X):
            fh.write(",".join([i, str(int(a)), *(repr(float(v)) for v in x)]) + "\n")
    write_curves_csv(curves_path, ids, truth.Y)


def oracle_pseudo_outcomes(truth: SimTruth, pi=None, mu0=None, mu1=None) -> tuple[np.ndarray, np.ndarray]:
    """Pseudo-outcomes with the true nuisances, any of which may be overridden."""
    X = truth.X
    pi = truth.pi if pi is None else np.broadcast_to(np.asarray(pi, dtype=float), (truth.X.shape[0],))
    mu0 = truth.mu(0, X) if mu0 is None else np.broadcast_to(mu0, truth.Y0.values.shape)
    mu1 = truth.mu(1, X) if mu1 is None else np.broadcast_to(mu1, truth.Y0.values.shape)
    return aipw_pseudo_outcomes(truth.Y.values, truth.A, pi, mu0, mu1)


def armse(theta_hat, theta_true, x_eval=None) -> float:
    """Mean L2 distance between estimated and true F-CATE curves.

    Arguments are CurveSets on a shared grid, or callables mapping covariate
    rows to curve matrices (then ``x_eval`` is required and the unit grid of
    matching size is assumed).
    """
    if callable(theta_hat) or callable(theta_true):
        if x_eval is None or len(x_eval) == 0:
            raise ValueError("x_eval must be non-empty")
        est = theta_hat(x_eval) if callable(theta_hat) else theta_hat
        tru = theta_true(x_eval) if callable(theta_true) else theta_true
    else:
        est, tru = theta_hat, theta_true
    if isinstance(est, CurveSet) and isinstance(tru, CurveSet):
        if est.grid != tru.grid:
            raise ValueError("estimated and true curves live on different grids")
        grid, e, t = est.grid, est.values, tru.values
    else:
        e = getattr(est, "values", est)
        t = getattr(tru, "values", tru)
        e, t = np.atleast_2d(e), np.atleast_2d(t)
        if e.shape != t.shape:
            raise ValueError(f"shape mismatch {e.shape} vs {t.shape}")
        grid = getattr(est, "grid", None) or getattr(tru, "grid", None) or Grid.uniform(e.shape[1])
    if len(e) == 0:
        raise ValueError("x_eval must be non-empty")
    return float(np.mean(l2_norms(e - t, grid)))


@dataclass(frozen=True)
class ScenarioConfig:
    id: int = 1
    J: int = 5
    replications: int = 50
    seed: int = 0
    mu_lam: float = 1e-8
    pi_lam: float = 0.0
    final_lam: float = 1e-8
    clip: float = 0.01
    alpha: float = 0.05
    B: int = 1000
    probes: tuple[tuple[float, ...], ...] = DEFAULT_PROBES
    n_eval: int = 100
    trim: float = 0.0
    cov_k: int | None = None
    n_eff: float | None = None

    def __post_init__(self):
        if self.id not in SCENARIO_FEATURES:
            raise ValueError(f"scenario must be one of 1-4, got {self.id}")
        if self.replications < 1 or self.J < 2:
            raise ValueError("need replications >= 1 and J >= 2")

    @property
    def mu_features(self):
        return SCENARIO_FEATURES[self.id][0]

    @property
    def pi_features(self):
        return SCENARIO_FEATURES[self.id][1]

    def focal_spec(self) -> FocalSpec:
        return FocalSpec(
            mu=LearnerSpec("ridge", self.mu_lam, features=self.mu_features),
            pi=PropensitySpec(self.pi_lam, self.clip, self.pi_features),
            final=LearnerSpec("ridge", self.final_lam),
            cov_k=self.cov_k,
        )

    def with_id(self, sid: int) -> "ScenarioConfig":
        return ScenarioConfig(**{**asdict(self), "id": sid, "probes": self.probes})


def fit_replication(truth: SimTruth, sc: ScenarioConfig, replication: int):
    plan = make_plan(truth.X.shape[0], sc.J, derive_seed(sc.seed, replication, STREAM_FOLDS))
    return fit_fcate(truth.dataset(), sc.focal_spec(), plan, with_cov=bool(sc.probes))


def evaluate_replication(truth: SimTruth, model, sc: ScenarioConfig, replication: int) -> dict:
    grid = truth.grid
    x_eval = stream(sc.seed, replication, STREAM_EVAL).standard_normal((sc.n_eval, 4))
    theta_true = truth.theta(x_eval)
    err = armse(CurveSet(grid, model.predict_values(x_eval)), CurveSet(grid, theta_true))

    fate_hat = fate(model.pseudo, sc.trim).values
    fate_true = truth.theta(truth.X).mean(axis=0)
    fate_err = fate_hat - fate_true

    bias = model_bias(model, x_eval, truth.propensity(x_eval), truth.mu(0, x_eval), truth.mu(1, x_eval))

    cov_sim, cov_pw = [], []
    for k, probe in enumerate(sc.probes):
        target = truth.theta(np.asarray(probe, dtype=float))[0]
        seed = derive_seed(sc.seed, replication, 1000 + k)
        kw = dict(alpha=sc.alpha, B=sc.B, rng_seed=seed, n_eff=sc.n_eff)
        sim = confidence_band(model, probe, mode="simultaneous", **kw)
        pw = confidence_band(model, probe, mode="pointwise", **kw)
        cov_sim.append(bool(np.all(sim.contains(target))))
        cov_pw.append(float(np.mean(pw.contains(target))))

    return {
        "schema": ROW_SCHEMA,
        "replication": replication,
        "scenario": sc.id,
        "n": int(truth.X.shape[0]),
        "status": "ok",
        "armse": err,
        "fate_sup_error": float(np.max(np.abs(fate_err))),
        "fate_l2_error": float(l2_norms(fate_err, grid)),
        "bias_norm": float(np.mean(l2_norms(bias, grid))),
        "coverage_simultaneous": cov_sim,
        "coverage_pointwise": cov_pw,
    }


def run_replication(replication: int, scenarios: Sequence[ScenarioConfig], dgp: DgpConfig) -> list[dict]:
    """All scenarios on one shared dataset (paired comparison)."""
    truth = generate(dgp, replication)
    rows = []
    for sc in scenarios:
        try:
            model = fit_replication(truth, sc, replication)
            rows.append(evaluate_replication(truth, model, sc, replication))
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("replication %d scenario %d failed: %s", replication, sc.id, exc)
            rows.append({"schema": ROW_SCHEMA, "replication": replication, "scenario": sc.id,
                         "n": dgp.n, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
    return rows


def _run_replication_single_thread(args):
    replication, scenarios, dgp = args
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return run_replication(replication, scenarios, dgp)
    with threadpool_limits(1):
        return run_replication(replication, scenarios, dgp)


# ---------------------------------------------------------------------------
# Reports

METRICS = ("armse", "fate_sup_error", "fate_l2_error", "bias_norm")


def _quantiles(x: Sequence[float]) -> tuple[float, float, float]:
    if not len(x):
        return (float("nan"),) * 3
    q1, med, q3 = np.quantile(np.asarray(x, dtype=float), [0.25, 0.5, 0.75])
    return float(q1), float(med), float(q3)


@dataclass
class McReport:
    rows: list[dict] = field(default_factory=list)
    replications: int = 0
    scenarios: tuple[int, ...] = ()

    def sorted_rows(self) -> list[dict]:
        return sorted(self.rows, key=lambda r: (r["scenario"], r["replication"]))

    def ok_rows(self, scenario: int | None = None) -> list[dict]:
        return [r for r in self.sorted_rows()
                if r["status"] == "ok" and (scenario is None or r["scenario"] == scenario)]

    def metric(self, name: str, scenario: int) -> np.ndarray:
        return np.array([r[name] for r in self.ok_rows(scenario)], dtype=float)

    def summary(self) -> list[dict]:
        out = []
        for s in self.scenarios:
            rows = self.ok_rows(s)
            rec = {"scenario": s, "replications": sum(r["scenario"] == s for r in self.rows),
                   "failures": sum(r["scenario"] == s and r["status"] != "ok" for r in self.rows)}
            for m in METRICS:
                q1, med, q3 = _quantiles([r[m] for r in rows])
                rec[f"{m}_q1"], rec[f"{m}_median"], rec[f"{m}_q3"] = q1, med, q3
            sim = [c for r in rows for c in r["coverage_simultaneous"]]
            pw = [c for r in rows for c in r["coverage_pointwise"]]
            rec["coverage_simultaneous"] = float(np.mean(sim)) if sim else float("nan")
            rec["coverage_pointwise"] = float(np.mean(pw)) if pw else float("nan")
            out.append(rec)
        return out

    def write_ndjson(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.sorted_rows():
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    def write_summary_csv(self, path) -> None:
        import csv

        rows = self.summary()
        if not rows:
            Path(path).write_text("")
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    @classmethod
    def read_ndjson(cls, path, scenarios: Iterable[int] | None = None) -> "McReport":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        sc = tuple(sorted(set(scenarios) if scenarios is not None else {r["scenario"] for r in rows}))
        reps = len({r["replication"] for r in rows})
        return cls(rows, reps, sc)


def run_study(scenarios: Sequence[ScenarioConfig], dgp: DgpConfig, threads: int = 1,
              ndjson_path=None, progress: Callable[[int, int], None] | None = None) -> McReport:
    """Monte Carlo over replications; all scenarios share each replication's data.

    Rows are appended to ``ndjson_path`` as replications finish, and
    replications already present there are skipped (resume). A run aborts
    once more than 5% of the planned rows have failed.
    """
    if not scenarios:
        raise ValueError("no scenarios given")
    reps = scenarios[0].replications
    if any(s.replications != reps or s.seed != scenarios[0].seed for s in scenarios):
        raise ValueError("scenarios in one study must share replications and seed")
    sids = tuple(s.id for s in scenarios)
    done: dict[tuple[int, int], dict] = {}
    if ndjson_path is not None and Path(ndjson_path).exists():
        for r in McReport.read_ndjson(ndjson_path).rows:
            if r["scenario"] in sids and r["replication"] < reps:
                done[(r["replication"], r["scenario"])] = r
    todo = [rep for rep in range(reps) if any((rep, s) not in done for s in sids)]
    rows = list(done.values())
    total = reps * len(sids)
    failures = sum(r["status"] != "ok" for r in rows)
    fh = open(ndjson_path, "a") if ndjson_path is not None else None
    try:
        jobs = [(rep, tuple(s for s in scenarios if (rep, s.id) not in done), dgp) for rep in todo]
        if threads > 1 and len(jobs) > 1:
            pool = ProcessPoolExecutor(max_workers=threads)
            results = pool.map(_run_replication_single_thread, jobs)
        else:
            pool = None
            results = map(lambda job: run_replication(*job), jobs)
        try:
            for i, new in enumerate(results, start=1):
                rows.extend(new)
                if fh is not None:
                    for r in new:
                        fh.write(json.dumps(r, sort_keys=True) + "\n")
                    fh.flush()
                failures += sum(r["status"] != "ok" for r in new)
                if failures > 0.05 * total:
                    raise NumericalError(f"{failures} of {total} replication fits failed (more than 5%); aborting")
                if progress is not None:
                    progress(i, len(jobs))
        finally:
            if pool is not None:
                pool.shutdown(cancel_futures=True)
    finally:
        if fh is not None:
            fh.close()
    report = McReport(rows, reps, sids)
    if ndjson_path is not None:
        report.write_ndjson(ndjson_path)
    return report


def run_scenario(sc: ScenarioConfig, dgp: DgpConfig, threads: int = 1, ndjson_path=None) -> McReport:
    return run_study([sc], dgp, threads, ndjson_path)


def default_threads() -> int:
    env = os.environ.get("FOCAL_THREADS")
    return max(1, int(env)) if env else 1
