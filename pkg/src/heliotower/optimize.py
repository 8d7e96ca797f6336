"""Derivative-free minimization of the plant objective.

Three interchangeable algorithms share one problem/result interface and a
deterministic RNG contract (a seed fully reproduces a run):

* :func:`coordinate_cycle` - cyclic per-variable bracketing line searches
  whose precision is halved whenever a full sweep stops moving; the cheap
  and preferred local method (single-variable moves let the objective reuse
  its evaluation stages);
* :func:`metropolis_seek` + :func:`quasi_newton_refine` - a Metropolis
  random walk able to jump over barriers, refined by a BFGS quasi-Newton
  method with finite-difference gradients and an Armijo line search;
* :func:`genetic_run` - a real-coded genetic algorithm with blend
  crossover, multiplicative mutation, elitism and roulette-wheel selection.
"""

from __future__ import annotations

import inspect
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .sensitivity import fd_gradient

logger = logging.getLogger(__name__)


@dataclass
class OptProblem:
    """Minimization problem over a box.

    ``eval`` maps an 11-ish design vector to a scalar; it may optionally
    accept a ``changed`` keyword with the indices moved since the previous
    call (a cache hint for staged objectives).
    """

    eval: Callable[..., float]
    bounds: np.ndarray  # (n, 2) rows of [lo, hi]
    x0: np.ndarray
    tol_f: float = 0.0
    budget: int = 100000

    def __post_init__(self) -> None:
        self.bounds = np.asarray(self.bounds, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.bounds.ndim != 2 or self.bounds.shape[1] != 2:
            raise ValueError("bounds must be an (n, 2) array")
        if np.any(self.bounds[:, 0] >= self.bounds[:, 1]):
            raise ValueError("each lower bound must be below its upper bound")
        if self.x0.shape != (self.bounds.shape[0],):
            raise ValueError("x0 must match the bounds dimension")
        if np.any(self.x0 < self.bounds[:, 0]) or np.any(self.x0 > self.bounds[:, 1]):
            raise ValueError("x0 must lie within bounds")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")

    @property
    def n(self) -> int:
        return self.bounds.shape[0]

    @property
    def ranges(self) -> np.ndarray:
        return self.bounds[:, 1] - self.bounds[:, 0]


@dataclass
class OptResult:
    """Outcome of one optimizer run."""

    x_best: np.ndarray
    f_best: float
    n_evals: int
    trace: tuple[tuple[int, float], ...]  # (eval_index, f) per evaluation
    termination_reason: str
    algorithm: str
    x_history: np.ndarray  # (n_evals, n) evaluated points, trace order
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GAConfig:
    """Genetic algorithm knobs."""

    n_tot: int = 30
    p_c: float = 0.05
    p_m: float = 0.1
    n_elite: int = 6
    generations_per_block: int = 200
    stall_window: int = 20

    def __post_init__(self) -> None:
        if self.n_tot < 2:
            raise ValueError("population size must be at least 2")
        if not 0 < self.n_elite < self.n_tot:
            raise ValueError("n_elite must lie strictly between 0 and n_tot")
        for name in ("p_c", "p_m"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.generations_per_block < 1 or self.stall_window < 1:
            raise ValueError("generations_per_block and stall_window must be >= 1")


class BudgetExhausted(Exception):
    """Internal control flow: the evaluation budget ran out."""


class _Recorder:
    """Counts, traces and audits every objective evaluation."""

    def __init__(self, problem: OptProblem):
        self.problem = problem
        self.lo = problem.bounds[:, 0]
        self.hi = problem.bounds[:, 1]
        self.n_evals = 0
        self.trace: list[tuple[int, float]] = []
        self.xs: list[np.ndarray] = []
        self.f_best = math.inf
        self.x_best = problem.x0.copy()
        try:
            sig = inspect.signature(problem.eval)
            self._pass_hint = any(
                p.name == "changed" or p.kind is inspect.Parameter.VAR_KEYWORD
                for p in sig.parameters.values()
            )
        except (TypeError, ValueError):
            self._pass_hint = False

    def __call__(self, x: np.ndarray, changed: Sequence[int] | None = None) -> float:
        x = np.asarray(x, dtype=float)
        if np.any(x < self.lo - 1e-12) or np.any(x > self.hi + 1e-12):
            raise ValueError(f"evaluation point violates bounds: {x!r}")
        if self.n_evals >= self.problem.budget:
            raise BudgetExhausted()
        if self._pass_hint:
            f = float(self.problem.eval(x, changed=changed))
        else:
            f = float(self.problem.eval(x))
        self.n_evals += 1
        self.trace.append((self.n_evals, f))
        self.xs.append(x.copy())
        if f < self.f_best:
            self.f_best = f
            self.x_best = x.copy()
        return f

    def result(self, algorithm: str, termination: str, **extra) -> OptResult:
        return OptResult(
            x_best=self.x_best.copy(),
            f_best=self.f_best,
            n_evals=self.n_evals,
            trace=tuple(self.trace),
            termination_reason=termination,
            algorithm=algorithm,
            x_history=np.asarray(self.xs).reshape(self.n_evals, -1),
            extra=dict(extra),
        )


def _step_vector(h0, problem: OptProblem) -> np.ndarray:
    """Per-variable steps: fractions of the variable ranges."""
    h = np.broadcast_to(np.asarray(h0, dtype=float), (problem.n,)).copy()
    if np.any(h <= 0.0):
        raise ValueError("steps must be positive")
    return h * problem.ranges


# ---------------------------------------------------------------------------
# cyclic coordinate search
# ---------------------------------------------------------------------------


def _line_min(rec: _Recorder, x: np.ndarray, i: int, h: float, f0: float) -> tuple[float, float, bool]:
    """Bracketing line search along coordinate ``i`` to precision ``h``.

    Expands (1, 2, 4, ...) * h from the current point in the improving
    direction, then bisects the bracket down to ``h``.  Returns
    (new value of x_i, new f, moved flag).
    """
    lo_i, hi_i = rec.lo[i], rec.hi[i]
    base = x[i]
    cache = {base: f0}
    xt = x.copy()

    def feval(s: float, sgn: float) -> tuple[float, float]:
        xi = min(max(base + sgn * s, lo_i), hi_i)
        if xi not in cache:
            xt[i] = xi
            cache[xi] = rec(xt, changed=(i,))
        return cache[xi], sgn * (xi - base)

    f_p, s_p = feval(h, +1.0)
    if f_p < f0 and s_p > 0.0:
        sgn = +1.0
        s1, f1 = s_p, f_p
    else:
        f_m, s_m = feval(h, -1.0)
        if f_m < f0 and s_m > 0.0:
            sgn = -1.0
            s1, f1 = s_m, f_m
        else:
            return base, f0, False

    s_lo = 0.0
    step = h
    while True:
        step *= 2.0
        f_n, s_n = feval(step, sgn)
        if s_n <= s1:  # bound reached, no further progress possible
            s_hi, f_hi = s1, f1
            break
        if f_n >= f1:
            s_hi = s_n
            break
        s_lo = s1
        s1, f1 = s_n, f_n

    while (s_hi - s_lo) > 2.0 * h:
        if (s1 - s_lo) >= (s_hi - s1):
            probe = 0.5 * (s_lo + s1)
        else:
            probe = 0.5 * (s1 + s_hi)
        f_pr, s_pr = feval(probe, sgn)
        if s_pr == s1:
            break
        if f_pr < f1:
            if s_pr < s1:
                s_hi = s1
            else:
                s_lo = s1
            s1, f1 = s_pr, f_pr
        else:
            if s_pr < s1:
                s_lo = s_pr
            else:
                s_hi = s_pr

    xi = min(max(base + sgn * s1, lo_i), hi_i)
    return xi, f1, xi != base


def coordinate_cycle(problem: OptProblem, h0=0.1, refinements: int = 6) -> OptResult:
    """Cyclic per-variable line searches with progressive step halving.

    ``h0`` is the initial step as a fraction of each variable's range
    (scalar or per-variable).  When a full sweep over all variables moves
    nothing (or improves by less than ``problem.tol_f``), every step is
    halved; the run stops after ``refinements`` halvings or on budget.
    """
    if refinements < 0:
        raise ValueError("refinements must be non-negative")
    rec = _Recorder(problem)
    h = _step_vector(h0, problem)
    x = problem.x0.copy()
    termination = "refinements"
    try:
        f = rec(x)
        halvings = 0
        while True:
            f_start = f
            moved_any = False
            for i in range(problem.n):
                xi, fi, moved = _line_min(rec, x, i, h[i], f)
                if moved:
                    x[i] = xi
                    f = fi
                    moved_any = True
            if not moved_any or (f_start - f) <= problem.tol_f:
                if halvings >= refinements:
                    break
                h = h / 2.0
                halvings += 1
    except BudgetExhausted:
        termination = "budget"
    return rec.result("coord", termination)


# ---------------------------------------------------------------------------
# Metropolis search and quasi-Newton refinement
# ---------------------------------------------------------------------------


def metropolis_acceptance(f_old: float, f_new: float, t_rel: float = 0.1,
                          literal: bool = False) -> float:
    """Probability of moving from ``f_old`` to ``f_new`` (positive costs).

    Default rule: ``min(1, exp((f_old - f_new) / T))`` with the relative
    temperature ``T = t_rel * f_old``.  The ``literal`` variant is the plain
    ``exp(-f_new / f_old)``.  Infeasible (non-finite) states are always left
    for feasible ones and never entered.
    """
    if not math.isfinite(f_old):
        return 1.0 if math.isfinite(f_new) else 0.0
    if not math.isfinite(f_new):
        return 0.0
    if literal:
        return min(1.0, math.exp(-f_new / f_old))
    if f_new <= f_old:
        return 1.0
    return math.exp((f_old - f_new) / (t_rel * f_old))


def metropolis_seek(problem: OptProblem, n_steps: int, step_scale: float = 0.1,
                    rng_seed: int = 0, t_rel: float = 0.1,
                    literal_acceptance: bool = False) -> OptResult:
    """Metropolis random walk over the box; records the best visited point.

    Proposals are per-variable Gaussian steps of width
    ``step_scale * range``, clamped to the bounds.  A candidate is accepted
    with probability ``min(1, exp((E_old - E_new) / T))`` at the relative
    temperature ``T = t_rel * E_old``; ``literal_acceptance`` switches to
    the plain ``exp(-E_new / E_old)`` rule instead.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    rng = np.random.default_rng(rng_seed)
    rec = _Recorder(problem)
    widths = step_scale * problem.ranges
    x = problem.x0.copy()
    termination = "steps"
    try:
        f = rec(x)
        for _ in range(n_steps):
            cand = np.clip(x + rng.normal(0.0, 1.0, problem.n) * widths,
                           rec.lo, rec.hi)
            f_new = rec(cand)
            u = rng.random()
            if u < metropolis_acceptance(f, f_new, t_rel=t_rel,
                                         literal=literal_acceptance):
                x, f = cand, f_new
    except BudgetExhausted:
        termination = "budget"
    return rec.result("seek", termination)


def quasi_newton_refine(problem: OptProblem, x0=None, grad_steps=1e-3,
                        tol: float = 1e-6, max_iters: int = 10000) -> OptResult:
    """BFGS refinement with central-difference gradients.

    ``grad_steps`` is the finite-difference step as a fraction of each
    variable's range.  The inverse-metric update is skipped and the metric
    reset to the identity whenever the curvature condition fails; the run
    terminates when the gradient infinity-norm falls below ``tol`` or on
    budget.  Steps are projected onto the bounds.
    """
    rec = _Recorder(problem)
    steps = _step_vector(grad_steps, problem)
    x = problem.x0.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    n = problem.n
    metric = np.eye(n)
    termination = "gtol"

    def fd_eval(xq: np.ndarray) -> float:
        return rec(np.clip(xq, rec.lo, rec.hi))

    try:
        f = rec(x)
        g = fd_gradient(fd_eval, x, steps)
        for _ in range(max_iters):
            if np.max(np.abs(g)) < tol:
                termination = "gtol"
                break
            direction = -metric @ g
            slope = float(direction @ g)
            if slope >= 0.0:
                logger.debug("quasi-newton: non-descent direction, metric reset")
                metric = np.eye(n)
                direction = -g
                slope = float(direction @ g)
            alpha = 1.0
            f_new = None
            x_new = x
            for _ in range(40):
                cand = np.clip(x + alpha * direction, rec.lo, rec.hi)
                f_cand = rec(cand)
                if f_cand <= f + 1e-4 * alpha * slope:
                    f_new, x_new = f_cand, cand
                    break
                alpha *= 0.5
            if f_new is None:
                if np.allclose(metric, np.eye(n)):
                    termination = "stalled"
                    break
                logger.debug("quasi-newton: line search failed, metric reset")
                metric = np.eye(n)
                continue
            g_new = fd_gradient(fd_eval, x_new, steps)
            s = x_new - x
            y = g_new - g
            sy = float(s @ y)
            if sy > 1e-12 * (np.linalg.norm(s) * np.linalg.norm(y) + 1e-300):
                rho = 1.0 / sy
                outer = np.outer(s, y)
                metric = (np.eye(n) - rho * outer) @ metric @ (np.eye(n) - rho * outer.T)
                metric += rho * np.outer(s, s)
            else:
                logger.debug("quasi-newton: curvature condition failed, metric reset")
                metric = np.eye(n)
            x, f, g = x_new, f_new, g_new
        else:
            termination = "iterations"
    except BudgetExhausted:
        termination = "budget"
    return rec.result("qn", termination)


def seek_refine(problem: OptProblem, rng_seed: int, n_steps: int = 400,
                step_scale: float = 0.1, grad_steps=1e-3, tol: float = 1e-6,
                t_rel: float = 0.1, literal_acceptance: bool = False) -> OptResult:
    """Metropolis search followed by quasi-Newton refinement of its best."""
    seek = metropolis_seek(problem, n_steps=n_steps, step_scale=step_scale,
                           rng_seed=rng_seed, t_rel=t_rel,
                           literal_acceptance=literal_acceptance)
    remaining = problem.budget - seek.n_evals
    if remaining < 1:
        return OptResult(
            x_best=seek.x_best, f_best=seek.f_best, n_evals=seek.n_evals,
            trace=seek.trace, termination_reason="budget",
            algorithm="seek-refine", x_history=seek.x_history, extra={},
        )
    sub = OptProblem(eval=problem.eval, bounds=problem.bounds, x0=seek.x_best,
                     tol_f=problem.tol_f, budget=remaining)
    refine = quasi_newton_refine(sub, grad_steps=grad_steps, tol=tol)
    offset = seek.n_evals
    trace = seek.trace + tuple((k + offset, fv) for k, fv in refine.trace)
    best = seek if seek.f_best <= refine.f_best else refine
    return OptResult(
        x_best=best.x_best.copy(),
        f_best=best.f_best,
        n_evals=seek.n_evals + refine.n_evals,
        trace=trace,
        termination_reason=refine.termination_reason,
        algorithm="seek-refine",
        x_history=np.vstack((seek.x_history, refine.x_history)),
        extra={"seek_evals": seek.n_evals, "refine_evals": refine.n_evals},
    )


# ---------------------------------------------------------------------------
# genetic algorithm
# ---------------------------------------------------------------------------


def crossover(g1, g2, rng, bounds: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Blend crossover: per-gene mixing weights drawn from N(0.5, 0.5).

    Weights outside [0, 1] extrapolate beyond the parents' segment, which
    keeps the population from collapsing early.  Children are clamped to
    ``bounds`` when given.
    """
    g1 = np.asarray(g1, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    if g1.shape != g2.shape:
        raise ValueError("parents must have equal gene counts")
    r = np.asarray(rng.normal(0.5, 0.5, g1.size))
    q = np.asarray(rng.normal(0.5, 0.5, g1.size))
    c1 = r * g1 + (1.0 - r) * g2
    c2 = q * g1 + (1.0 - q) * g2
    if bounds is not None:
        c1 = np.clip(c1, bounds[:, 0], bounds[:, 1])
        c2 = np.clip(c2, bounds[:, 0], bounds[:, 1])
    return c1, c2


def mutate(g, p_m: float, rng, bounds: np.ndarray | None = None) -> np.ndarray:
    """Each gene is multiplied by (1 + r), r ~ N(0, 1), with probability p_m."""
    g = np.asarray(g, dtype=float)
    mask = np.asarray(rng.random(g.size)) < p_m
    r = np.asarray(rng.standard_normal(g.size))
    out = np.where(mask, g * (1.0 + r), g)
    if bounds is not None:
        out = np.clip(out, bounds[:, 0], bounds[:, 1])
    return out


def roulette_select(population_fitness, n_pick: int, rng) -> np.ndarray:
    """Fitness-proportional selection via accumulated normalized fitness.

    ``population_fitness`` are positive maximization weights (a member with
    twice the weight is twice as likely to be picked per draw).
    """
    w = np.asarray(population_fitness, dtype=float)
    if w.size == 0:
        raise ValueError("population is empty")
    if np.any(~np.isfinite(w)) or np.any(w <= 0.0):
        raise ValueError("fitness weights must be positive and finite")
    order = np.argsort(-w, kind="stable")
    cum = np.cumsum(w[order])
    cum /= cum[-1]
    us = np.asarray(rng.random(n_pick))
    pos = np.minimum(np.searchsorted(cum, us, side="right"), w.size - 1)
    return order[pos]


def _roulette_weights(fvals: np.ndarray) -> np.ndarray:
    """Minimization transform: weight = (f_worst - f + tiny), 0 for infeasible."""
    finite = np.isfinite(fvals)
    if not finite.any():
        return np.ones(fvals.size)
    worst = float(fvals[finite].max())
    tiny = 1e-12 * (1.0 + abs(worst))
    return np.where(finite, worst - fvals + tiny, 0.0)


def genetic_run(problem: OptProblem, ga_config: GAConfig, rng_seed: int = 0) -> OptResult:
    """Elitist real-coded GA with roulette selection and stall-based stopping.

    The population starts uniform over the box with ``problem.x0`` injected
    as one member.  Each generation pairs members up, crossovers with
    probability ``p_c``, mutates every gene with probability ``p_m``
    (elites keep pristine copies), re-evaluates only changed members, and
    refills via roulette over the parents-plus-children pool.  Blocks of
    ``generations_per_block`` generations continue for as long as the best
    member improved within the last ``stall_window`` generations.
    """
    cfg = ga_config
    rng_init, rng_pair, rng_cross, rng_mut, rng_sel = (
        np.random.default_rng(s) for s in np.random.SeedSequence(rng_seed).spawn(5)
    )
    rec = _Recorder(problem)
    lo, hi = rec.lo, rec.hi
    n = problem.n

    pop = lo + rng_init.random((cfg.n_tot, n)) * (hi - lo)
    pop[0] = problem.x0
    fit = np.empty(cfg.n_tot)
    termination = "stalled"
    generation = 0
    last_improvement = 0
    variance_history: list[np.ndarray] = []
    best_history: list[float] = []
    try:
        for k in range(cfg.n_tot):
            fit[k] = rec(pop[k])
        best_f = float(fit.min())
        best_history.append(best_f)
        stop = False
        while not stop:
            for _ in range(cfg.generations_per_block):
                generation += 1
                # pairing and crossover
                perm = rng_pair.permutation(cfg.n_tot)
                children = []
                for a, b in zip(perm[0::2], perm[1::2]):
                    if rng_cross.random() < cfg.p_c:
                        c1, c2 = crossover(pop[a], pop[b], rng_cross, problem.bounds)
                        children.append(c1)
                        children.append(c2)
                elite_idx = np.argsort(fit, kind="stable")[: cfg.n_elite]
                elite_x = pop[elite_idx].copy()
                elite_f = fit[elite_idx].copy()
                if children:
                    pool_x = np.vstack([pop, np.asarray(children)])
                    pool_f = np.concatenate([fit, np.full(len(children), np.nan)])
                else:
                    pool_x = pop.copy()
                    pool_f = fit.copy()
                changed = np.isnan(pool_f)
                # mutation over the whole pool
                mask = rng_mut.random(pool_x.shape) < cfg.p_m
                if mask.any():
                    r = rng_mut.standard_normal(pool_x.shape)
                    pool_x = np.where(mask, pool_x * (1.0 + r), pool_x)
                    pool_x = np.clip(pool_x, lo, hi)
                    changed |= mask.any(axis=1)
                for idx in np.nonzero(changed)[0]:
                    pool_f[idx] = rec(pool_x[idx])
                # next generation: pristine elites + roulette picks
                weights = _roulette_weights(pool_f)
                eligible = np.nonzero(weights > 0.0)[0]
                if eligible.size == 0:
                    eligible = np.arange(pool_x.shape[0])
                    weights = np.ones(pool_x.shape[0])
                picks = eligible[roulette_select(weights[eligible], cfg.n_tot - cfg.n_elite, rng_sel)]
                pop = np.vstack([elite_x, pool_x[picks]])
                fit = np.concatenate([elite_f, pool_f[picks]])
                variance_history.append(pop.var(axis=0))
                logger.debug("generation %d: best %.6g, gene variance %s",
                             generation, fit.min(), variance_history[-1])
                gen_best = float(fit.min())
                if gen_best < best_f - problem.tol_f:
                    best_f = gen_best
                    last_improvement = generation
                best_history.append(best_f)
            if generation - last_improvement >= cfg.stall_window:
                stop = True
    except BudgetExhausted:
        termination = "budget"
    return rec.result(
        "genetic",
        termination,
        generations=len(variance_history),  # completed generations
        last_improvement_generation=last_improvement,
        gene_variance=np.asarray(variance_history),
        best_history=np.asarray(best_history),
    )


# ---------------------------------------------------------------------------
# convergence log
# ---------------------------------------------------------------------------


def write_convergence_log(results: Mapping[str, OptResult] | OptResult,
                          var_names: Sequence[str], path) -> None:
    """Newline-delimited JSON: one record per evaluation.

    Schema per line: ``{"eval": int, "algo": str, "f": float,
    "x": {variable: value}}``.
    """
    if isinstance(results, OptResult):
        results = {results.algorithm: results}
    with open(path, "w", encoding="utf-8") as fh:
        for name, result in results.items():
            for (idx, fval), x in zip(result.trace, result.x_history):
                record = {
                    "eval": idx,
                    "algo": name,
                    "f": fval,
                    "x": {v: float(xv) for v, xv in zip(var_names, x)},
                }
                fh.write(json.dumps(record) + "\n")
