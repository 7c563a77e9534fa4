"""Derivative-free search over protocol parameters and threshold location.

Each candidate is a 7-vector (theta, two Alice angles, three Bob angles,
log10 p) whose score is one full key-rate evaluation, i.e. one SDP solve,
so budgets are counted in rate evaluations. The search is a bounded
Nelder-Mead race: every start (warm start, structured seeds, scrambled
Sobol draws) gets a short run, the best few are continued, and the winner
is polished with the remaining budget. Restarts are independent and can run
in a process pool; results merge deterministically by start index.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from . import npa
from .entropy import (NOKEY, PostSelectionPolicy, RatePoint, binary_entropy,
                      chsh_and_qber, default_relaxation, ec_cost, key_rate,
                      postselected_distribution, ps_weights, retained_fraction)
from .model import DetectorParams, MeasurementConfig, StateParams, behavior, binarize

SEARCH_TOL = 1e-9  # SDP tolerance inside searches; keeps the rate noise floor low
_FAILED_SCORE = 2.5  # worse than any true -rate, which is bounded by 2


class OptimizationFailedError(RuntimeError):
    """Every rate evaluation across all restarts failed to solve."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class SearchSpace:
    """Box bounds of the 7 search coordinates; p is searched in log scale."""

    theta_bounds: tuple[float, float] = (0.0, np.pi / 2)
    angle_bounds: tuple[float, float] = (-np.pi, np.pi)
    log10_p_bounds: tuple[float, float] = (-4.0, 0.0)

    def __post_init__(self):
        for name, (lo, hi) in (("theta_bounds", self.theta_bounds),
                               ("angle_bounds", self.angle_bounds),
                               ("log10_p_bounds", self.log10_p_bounds)):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"{name} must be a finite increasing pair")

    def lower(self) -> np.ndarray:
        return np.array([self.theta_bounds[0]] + [self.angle_bounds[0]] * 5
                        + [self.log10_p_bounds[0]])

    def upper(self) -> np.ndarray:
        return np.array([self.theta_bounds[1]] + [self.angle_bounds[1]] * 5
                        + [self.log10_p_bounds[1]])

    def clip(self, v: np.ndarray) -> np.ndarray:
        return np.clip(v, self.lower(), self.upper())

    def contains(self, v: np.ndarray) -> bool:
        return bool(np.all(v >= self.lower()) and np.all(v <= self.upper()))


@dataclass(frozen=True)
class OptimizationBudget:
    """Evaluation budget and reproducibility knobs for one optimized point."""

    max_evals: int = 2000
    restarts: int = 8
    rate_tol: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.max_evals <= 0 or self.restarts <= 0:
            raise ValueError("max_evals and restarts must be positive")
        if self.rate_tol <= 0:
            raise ValueError("rate_tol must be positive")


@dataclass(frozen=True)
class SearchEvent:
    """Progress notification consumed by the CLI."""

    kind: str  # point-start | point-done | best-so-far | probe | scan-done
    eta: float
    rate: float | None = None
    n_evals: int = 0
    message: str = ""


EventCallback = Callable[[SearchEvent], None]


@dataclass(frozen=True)
class OptimizedPoint:
    """Best configuration found at one detector setting."""

    point: RatePoint
    params: np.ndarray = field(repr=False)
    n_evals: int = 0


@dataclass(frozen=True)
class ThresholdResult:
    """Outcome of a bisection for the lowest efficiency with positive rate."""

    threshold: float | None
    bracket: tuple[float, float] | None
    probes: tuple[RatePoint, ...]
    message: str = ""

    @property
    def found(self) -> bool:
        return self.threshold is not None


# structured cold-start seeds: the lossless CHSH optimum and a loss-adapted
# configuration (sparse-click measurement orientations, aggressive retention)
_SEED_IDEAL = np.array([np.pi / 4, 0.0, np.pi / 2, np.pi / 4, -np.pi / 4, 0.0, 0.0])
_SEED_LOSSY = np.array([0.35, np.pi - 1.0, -np.pi + 0.3, -np.pi + 0.9,
                        np.pi - 0.2, -np.pi + 1.2, -2.0])


@dataclass(frozen=True)
class _Task:
    """Picklable description of one rate evaluation context."""

    eta: float
    dark: float
    visibility: float
    level: str
    tol: float
    key_x: int = 1
    key_y: int = 3
    baseline: bool = False

    def rate_point(self, v: np.ndarray) -> RatePoint:
        if self.baseline:
            sp, mc, det, _ = _baseline_behavior(v, self)
            return _baseline_rate_point(sp, mc, det)
        sp = StateParams(theta=float(v[0]), visibility=self.visibility)
        mc = MeasurementConfig(tuple(v[1:3]), tuple(v[3:6]),
                               key_x=self.key_x, key_y=self.key_y)
        det = DetectorParams(eta=self.eta, dark=self.dark)
        level, extended = npa.parse_level(self.level)
        return key_rate(sp, mc, det, PostSelectionPolicy(10.0 ** float(v[6])),
                        relaxation=default_relaxation(level, extended),
                        tol=self.tol)

    def score(self, v: np.ndarray) -> float:
        """Value minimized by the simplex search (negated surrogate rate)."""
        if self.baseline:
            return _baseline_score(v, self)
        # lean evaluation: rank candidates with a shorter solver leash than
        # the final report needs; only stalled extremal inputs lose accuracy,
        # and there only ~1e-5, far below any ranking consequence
        sp = StateParams(theta=float(v[0]), visibility=self.visibility)
        mc = MeasurementConfig(tuple(v[1:3]), tuple(v[3:6]),
                               key_x=self.key_x, key_y=self.key_y)
        det = DetectorParams(eta=self.eta, dark=self.dark)
        policy = PostSelectionPolicy(10.0 ** float(v[6]))
        tb = behavior(sp, mc, det)
        w = ps_weights(policy)
        pv = retained_fraction(tb, w, self.key_x, self.key_y)
        hec = ec_cost(postselected_distribution(tb, w, self.key_x, self.key_y))
        level, extended = npa.parse_level(self.level)
        gp = npa.assemble_guessing_program(
            binarize(tb), w.binary, (self.key_x, self.key_y),
            default_relaxation(level, extended))
        try:
            sol = npa.solve(gp, self.tol, maxiters=35)
        except npa.SolverFailureError:
            return _FAILED_SCORE
        hmin = min(max(-np.log2(sol.value / pv), 0.0), 1.0)
        return -pv * (hmin - hec)


def _baseline_behavior(v: np.ndarray, task: _Task):
    sp = StateParams(theta=np.pi / 4, visibility=task.visibility)
    mc = MeasurementConfig(tuple(v[0:2]), tuple(v[2:5]),
                           key_x=task.key_x, key_y=task.key_y)
    det = DetectorParams(eta=task.eta, dark=task.dark)
    return sp, mc, det, binarize(behavior(sp, mc, det))


def _baseline_score(v: np.ndarray, task: _Task) -> float:
    """Continuous surrogate: the true negated rate above S = 2, a ramp below."""
    _, mc, _, pb = _baseline_behavior(v, task)
    s, qber = chsh_and_qber(pb, task.key_x, task.key_y)
    if s <= 2.0:
        return binary_entropy(qber) + (2.0 - s)
    secrecy = 1.0 - binary_entropy((1.0 + np.sqrt((s / 2) ** 2 - 1.0)) / 2.0)
    return -(secrecy - binary_entropy(qber))


def _baseline_rate_point(sp: StateParams, mc: MeasurementConfig,
                         det: DetectorParams) -> RatePoint:
    """Report a baseline configuration in RatePoint form.

    The secrecy term plays the H_min role and h2(Q) the H_EC role, so the
    stored fields still satisfy rate = p_V (H_min - H_EC) with p_V = 1.
    No-violation points carry the NOKEY sentinel.
    """
    pb = binarize(behavior(sp, mc, det))
    s, qber = chsh_and_qber(pb, mc.key_x, mc.key_y)
    hec = binary_entropy(qber)
    if s <= 2.0:
        secrecy, rate = NOKEY, NOKEY
    else:
        secrecy = 1.0 - binary_entropy((1.0 + np.sqrt((s / 2) ** 2 - 1.0)) / 2.0)
        rate = secrecy - hec
    return RatePoint(eta=det.eta, dark=det.dark, visibility=sp.visibility,
                     theta=sp.theta, angles_alice=mc.angles_alice,
                     angles_bob=mc.angles_bob, key_x=mc.key_x, key_y=mc.key_y,
                     p=1.0, level="analytic", p_v=1.0, h_min=secrecy, h_ec=hec,
                     rate=rate, solver_status="analytic", solver_gap=None)


def _baseline_space_vectors(space: SearchSpace) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = space.lower(), space.upper()
    return lo[1:6], hi[1:6]


def _run_simplex(task: _Task, start: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                 maxfev: int) -> tuple[float, np.ndarray, int, int]:
    """One bounded Nelder-Mead run; returns (score, x, n_evals, n_solved)."""
    counters = [0, 0]

    def objective(v):
        counters[0] += 1
        score = task.score(v)
        if score < _FAILED_SCORE:
            counters[1] += 1
        return score

    res = minimize(objective, np.clip(start, lo, hi), method="Nelder-Mead",
                   bounds=list(zip(lo, hi)),
                   options=dict(maxfev=maxfev, fatol=1e-12, xatol=1e-10))
    return float(res.fun), np.clip(res.x, lo, hi), counters[0], counters[1]


def _run_simplex_job(args):
    return _run_simplex(*args)


def _resolve_workers(parallel: int | None) -> int:
    if parallel is None:
        return os.cpu_count() or 1
    if parallel < 1:
        raise ValueError("parallel must be >= 1")
    return parallel


def _map_jobs(jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [_run_simplex_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_simplex_job, jobs))


_STAGE_FEV = 80  # shortest simplex run that can shape a 7-dim simplex


def _search(task: _Task, space: SearchSpace, budget: OptimizationBudget,
            warm_starts: Sequence[np.ndarray], workers: int,
            ) -> tuple[float, np.ndarray, int]:
    """Race the starts, continue the best two, polish the winner."""
    if task.baseline:
        lo, hi = _baseline_space_vectors(space)
        seeds = [_SEED_IDEAL[1:6]]
        dims = 5
    else:
        lo, hi = space.lower(), space.upper()
        seeds = [_SEED_IDEAL, _SEED_LOSSY]
        dims = 7
    sobol = qmc.Sobol(dims, seed=budget.seed)
    n_draw = 1 << max(0, int(np.ceil(np.log2(budget.restarts))))
    cold = seeds + list(lo + sobol.random(n_draw)[:budget.restarts] * (hi - lo))
    # small budgets race fewer cold starts so the winner still gets polished;
    # warm starts always run in full
    n_cold = max(1, min(len(cold), budget.max_evals // (4 * _STAGE_FEV)))
    starts = [np.clip(np.asarray(w, dtype=float), lo, hi) for w in warm_starts]
    starts += cold[:n_cold]

    stage_fev = max(_STAGE_FEV, int(0.25 * budget.max_evals / len(starts)))
    results = _map_jobs([(task, s, lo, hi, stage_fev) for s in starts], workers)
    used = sum(r[2] for r in results)
    solved = sum(r[3] for r in results)

    order = sorted(range(len(results)), key=lambda i: (results[i][0], i))
    best = results[order[0]]
    finalists = [results[i] for i in order[:2]]
    remaining = budget.max_evals - used
    per = remaining // 3
    if per >= 50:
        cont = _map_jobs([(task, r[1], lo, hi, per) for r in finalists], workers)
        used += sum(r[2] for r in cont)
        solved += sum(r[3] for r in cont)
        for r in cont:
            if r[0] < best[0]:
                best = r
    remaining = budget.max_evals - used
    if remaining >= 50:
        r = _run_simplex(task, best[1], lo, hi, remaining)
        used += r[2]
        solved += r[3]
        if r[0] < best[0]:
            best = r

    if not task.baseline and solved == 0:
        raise OptimizationFailedError(
            f"all {used} rate evaluations failed to solve at eta={task.eta}",
            {"eta": task.eta, "n_evals": used})
    return best[0], best[1], used


def _expand_params(task: _Task, x: np.ndarray) -> np.ndarray:
    """Full 7-vector for reporting (baseline searches fix theta and p)."""
    if task.baseline:
        return np.concatenate([[np.pi / 4], x, [0.0]])
    return x


def optimize_point(det: DetectorParams, visibility: float = 1.0,
                   space: SearchSpace | None = None,
                   budget: OptimizationBudget | None = None,
                   warm_start: np.ndarray | None = None,
                   level: str = "2", tol: float = SEARCH_TOL,
                   baseline: bool = False,
                   parallel: int | None = None,
                   on_event: EventCallback | None = None) -> OptimizedPoint:
    """Maximize the key rate over the 7 search coordinates at fixed detectors.

    ``warm_start`` injects a previous optimum as an extra (prioritized)
    start. Baseline mode searches the five measurement angles of the
    reference CHSH analysis with the state pinned maximally entangled.
    """
    space = space or SearchSpace()
    budget = budget or OptimizationBudget()
    workers = _resolve_workers(parallel)
    # the search itself always runs at level 2; the returned optimum is
    # re-evaluated at the configured level
    task = _Task(eta=det.eta, dark=det.dark, visibility=visibility,
                 level="2", tol=tol, baseline=baseline)
    if on_event:
        on_event(SearchEvent("point-start", det.eta))
    warm = [] if warm_start is None else [np.asarray(warm_start, dtype=float)]
    if warm and not task.baseline and warm[0].shape != (7,):
        raise ValueError(f"warm start must be a 7-vector, got {warm[0].shape}")
    if warm and task.baseline and warm[0].shape == (7,):
        warm[0] = warm[0][1:6]
    _, x, used = _search(task, space, budget, warm, workers)
    point = replace(task, level=level).rate_point(x)
    if on_event:
        on_event(SearchEvent("point-done", det.eta, rate=point.rate, n_evals=used))
    return OptimizedPoint(point=point, params=_expand_params(task, x), n_evals=used)


def _is_positive(point: RatePoint, budget: OptimizationBudget) -> bool:
    """Positivity test robust to the solver noise floor."""
    return point.rate is not None and point.rate > budget.rate_tol


def _warm_vector(opt: OptimizedPoint, baseline: bool) -> np.ndarray:
    return opt.params[1:6] if baseline else opt.params


def threshold_scan(eta_range: tuple[float, float], dark: float = 0.0,
                   visibility: float = 1.0,
                   space: SearchSpace | None = None,
                   budget: OptimizationBudget | None = None,
                   bracket: float = 0.002,
                   level: str = "2", tol: float = SEARCH_TOL,
                   baseline: bool = False,
                   parallel: int | None = None,
                   on_event: EventCallback | None = None) -> ThresholdResult:
    """Bisect the detection efficiency where the optimized rate turns positive.

    Each probe warm-starts from the nearest already-solved efficiency; the
    upper end is reached by a short warm-started descent from eta = 1 so the
    first inner search does not start cold.
    """
    lo, hi = eta_range
    if not 0.0 <= lo < hi <= 1.0:
        raise ValueError(f"eta range must satisfy 0 <= lo < hi <= 1, got {eta_range}")
    if bracket <= 0:
        raise ValueError("bracket must be positive")
    space = space or SearchSpace()
    budget = budget or OptimizationBudget()

    def emit(kind, eta, rate=None, n=0, msg=""):
        if on_event:
            on_event(SearchEvent(kind, eta, rate=rate, n_evals=n, message=msg))

    probes: dict[float, OptimizedPoint] = {}

    def probe(eta: float, warm: np.ndarray | None) -> OptimizedPoint:
        opt = optimize_point(DetectorParams(eta=eta, dark=dark),
                             visibility=visibility, space=space, budget=budget,
                             warm_start=warm, level=level, tol=tol,
                             baseline=baseline, parallel=parallel)
        probes[eta] = opt
        emit("probe", eta, rate=opt.point.rate, n=opt.n_evals)
        return opt

    # approach path: descend from the lossless optimum to the range top
    approach = [e for e in (1.0, 0.9, 0.8) if e > hi + bracket]
    warm = None
    for eta in approach:
        warm = _warm_vector(optimize_point(
            DetectorParams(eta=eta, dark=dark), visibility=visibility,
            space=space, budget=budget, warm_start=warm, level=level, tol=tol,
            baseline=baseline, parallel=parallel), baseline)

    opt_hi = probe(hi, warm)
    opt_lo = probe(lo, _warm_vector(opt_hi, baseline))
    if not _is_positive(opt_hi.point, budget) or _is_positive(opt_lo.point, budget):
        ordered = tuple(probes[e].point for e in sorted(probes))
        msg = ("no sign change: rate not positive at the top of the range"
               if not _is_positive(opt_hi.point, budget)
               else "no sign change: rate already positive at the bottom of the range")
        emit("scan-done", lo, msg=msg)
        return ThresholdResult(threshold=None, bracket=None, probes=ordered,
                               message=msg)

    while hi - lo > bracket:
        mid = 0.5 * (lo + hi)
        nearest = min(probes, key=lambda e: (abs(e - mid), -e))
        opt_mid = probe(mid, _warm_vector(probes[nearest], baseline))
        if _is_positive(opt_mid.point, budget):
            hi = mid
        else:
            lo = mid

    threshold = 0.5 * (lo + hi)
    emit("scan-done", threshold, msg=f"threshold bracket [{lo:.4f}, {hi:.4f}]")
    return ThresholdResult(threshold=threshold, bracket=(lo, hi),
                           probes=tuple(probes[e].point for e in sorted(probes)),
                           message=f"rate turns positive within [{lo:.6g}, {hi:.6g}]")


MONOTONE_SLACK = 2e-6


def curve(eta_grid: Sequence[float], dark: float = 0.0, visibility: float = 1.0,
          space: SearchSpace | None = None,
          budget: OptimizationBudget | None = None,
          level: str = "2", tol: float = SEARCH_TOL,
          baseline: bool = False,
          parallel: int | None = None,
          warm_start: np.ndarray | None = None,
          on_event: EventCallback | None = None) -> list[RatePoint]:
    """Optimized rate at every grid efficiency, chained from high to low.

    Points are optimized in descending eta order, each warm-started from the
    previous optimum, and returned in the input grid order. A failed point is
    recorded with its solver status instead of aborting the sweep; rates that
    increase as eta drops are tagged with a data-quality warning.
    """
    etas = list(eta_grid)
    if not etas:
        raise ValueError("eta grid is empty")
    space = space or SearchSpace()
    budget = budget or OptimizationBudget()

    results: dict[float, RatePoint] = {}
    warm = None if warm_start is None else np.asarray(warm_start, dtype=float)
    for eta in sorted(set(etas), reverse=True):
        try:
            opt = optimize_point(DetectorParams(eta=eta, dark=dark),
                                 visibility=visibility, space=space,
                                 budget=budget, warm_start=warm, level=level,
                                 tol=tol, baseline=baseline, parallel=parallel,
                                 on_event=on_event)
        except OptimizationFailedError as exc:
            results[eta] = RatePoint(
                eta=eta, dark=dark, visibility=visibility, theta=np.nan,
                angles_alice=(np.nan, np.nan), angles_bob=(np.nan, np.nan, np.nan),
                key_x=1, key_y=3, p=np.nan, level=level, p_v=None, h_min=None,
                h_ec=None, rate=None, solver_status="numerical-failure",
                solver_gap=None, warnings=(str(exc),))
            continue
        results[eta] = opt.point
        warm = _warm_vector(opt, baseline)

    solved = [(eta, pt) for eta, pt in sorted(results.items(), reverse=True)
              if pt.rate is not None and pt.rate != NOKEY]
    for (eta_hi, pt_hi), (eta_lo, pt_lo) in zip(solved, solved[1:]):
        if pt_lo.rate > pt_hi.rate + MONOTONE_SLACK:
            results[eta_lo] = replace(pt_lo, warnings=pt_lo.warnings + (
                f"rate {pt_lo.rate:.6g} exceeds rate {pt_hi.rate:.6g} at "
                f"higher efficiency {eta_hi:g}: inner search under-converged",))
    return [results[eta] for eta in etas]
