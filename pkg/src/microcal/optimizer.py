"""Differential evolution (DE/rand/1/bin) for bound-constrained black-box minimization."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class DEConfig:
    """``tol`` stops a run once std(population objectives) <= tol * |mean|."""

    pop_size: int = 15
    F: float = 0.8
    CR: float = 0.9
    max_generations: int = 100
    tol: float = 0.01
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.pop_size < 4:
            raise ValidationError("de.pop_size", "needs at least 4 individuals")
        if not 0 < self.F <= 2:
            raise ValidationError("de.F", "must lie in (0, 2]")
        if not 0 <= self.CR <= 1:
            raise ValidationError("de.CR", "must lie in [0, 1]")
        if self.max_generations < 1:
            raise ValidationError("de.max_generations", "must be at least 1")
        if not self.tol >= 0:
            raise ValidationError("de.tol", "must be non-negative")
        if self.workers < 1:
            raise ValidationError("de.workers", "must be at least 1")

    def replace(self, **changes) -> "DEConfig":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass
class OptResult:
    x: np.ndarray
    fun: float
    generations: int
    evaluations: int
    converged: bool
    trace: list = field(default_factory=list)  # best objective after each generation, generation 0 first
    population: np.ndarray | None = None
    objectives: np.ndarray | None = None


_WORKER_FN = None


def _init_worker(fn):
    global _WORKER_FN
    _WORKER_FN = fn


def _call(x):
    return float(_WORKER_FN(x))


class Evaluator:
    """Evaluates batches of vectors, optionally on a process pool of ``width`` workers.

    Results come back in input order, so outcomes never depend on the width.
    Use as a context manager to reuse one pool across batches.
    """

    def __init__(self, f, width: int = 1):
        if width < 1:
            raise ValueError("width must be at least 1")
        self.f = f
        self.width = width
        self._pool = None

    def __enter__(self):
        if self.width > 1:
            import multiprocessing as mp

            ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
            self._pool = ProcessPoolExecutor(self.width, mp_context=ctx, initializer=_init_worker,
                                             initargs=(self.f,))
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __call__(self, vectors) -> list:
        vectors = [np.asarray(v, dtype=float) for v in vectors]
        if not vectors:
            return []
        if self._pool is None:
            return [float(self.f(v)) for v in vectors]
        chunk = max(1, len(vectors) // (4 * self.width))
        return list(self._pool.map(_call, vectors, chunksize=chunk))


def evaluate_population(f, vectors, width: int = 1) -> list:
    """Objective values of ``vectors`` in input order, using ``width`` processes."""
    with Evaluator(f, width) as ev:
        return ev(vectors)


def _check_bounds(bounds):
    b = np.asarray(bounds, dtype=float)
    if b.ndim != 2 or b.shape[1] != 2 or b.shape[0] < 1:
        raise ValidationError("bounds", "expected d >= 1 intervals (lower, upper)")
    if not np.all(np.isfinite(b)):
        raise ValidationError("bounds", "bounds must be finite")
    if np.any(b[:, 0] >= b[:, 1]):
        raise ValidationError("bounds", "every interval needs lower < upper")
    return b[:, 0], b[:, 1]


class _Ledger:
    def __init__(self, path, d):
        self.path = path
        if path is None:
            return
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        self.fh = open(path, "a", newline="")
        self.writer = csv.writer(self.fh)
        if new:
            self.writer.writerow(["generation", "eval_index", "objective"] + [f"x_{i + 1}" for i in range(d)])

    def write(self, gen, start, xs, fs):
        if self.path is None:
            return
        for k, (x, fx) in enumerate(zip(xs, fs)):
            self.writer.writerow([gen, start + k, repr(float(fx))] + [repr(float(v)) for v in x])
        self.fh.flush()

    def close(self):
        if self.path is not None:
            self.fh.close()


def differential_evolution(f, bounds, cfg: DEConfig = DEConfig(), x0=None, init=None,
                           ledger=None, callback=None) -> OptResult:
    """Minimize ``f`` over the box ``bounds`` with DE/rand/1/bin.

    ``x0`` (one vector or several rows) replaces the first individuals of the
    random initial population; ``init`` supplies the whole initial population.
    Selection is synchronous: all trials of a generation are evaluated before
    any replacement, and a trial wins ties. ``ledger`` is an optional CSV path
    receiving every evaluation. ``callback(generation, best_x, best_f)`` runs
    after each generation.
    """
    lo, hi = _check_bounds(bounds)
    d = lo.size
    n = cfg.pop_size
    rng = np.random.default_rng(cfg.seed)
    pop = lo + rng.random((n, d)) * (hi - lo)
    if init is not None:
        pop = np.array(init, dtype=float).reshape(n, d)
    if x0 is not None:
        seeds = np.atleast_2d(np.asarray(x0, dtype=float))
        if seeds.shape[1] != d or seeds.shape[0] > n:
            raise ValidationError("x0", f"expected at most {n} rows of length {d}")
        pop[: seeds.shape[0]] = seeds
    pop = np.clip(pop, lo, hi)

    log = _Ledger(ledger, d)
    evals = 0
    try:
        with Evaluator(f, cfg.workers) as ev:
            fit = np.array(ev(pop))
            log.write(0, evals, pop, fit)
            evals += n
            best = int(np.argmin(fit))
            trace = [float(fit[best])]
            if callback:
                callback(0, pop[best].copy(), float(fit[best]))
            converged = _spread_ok(fit, cfg.tol)
            gen = 0
            idx = np.arange(n)
            while not converged and gen < cfg.max_generations:
                gen += 1
                trials = np.empty_like(pop)
                for i in range(n):
                    r1, r2, r3 = rng.choice(idx[idx != i], 3, replace=False)
                    mutant = np.clip(pop[r1] + cfg.F * (pop[r2] - pop[r3]), lo, hi)
                    cross = rng.random(d) < cfg.CR
                    cross[rng.integers(d)] = True
                    trials[i] = np.where(cross, mutant, pop[i])
                tfit = np.array(ev(trials))
                log.write(gen, evals, trials, tfit)
                evals += n
                win = tfit <= fit
                pop[win] = trials[win]
                fit[win] = tfit[win]
                best = int(np.argmin(fit))
                trace.append(float(fit[best]))
                if callback:
                    callback(gen, pop[best].copy(), float(fit[best]))
                converged = _spread_ok(fit, cfg.tol)
    finally:
        log.close()
    return OptResult(pop[best].copy(), float(fit[best]), gen, evals, bool(converged), trace,
                     pop.copy(), fit.copy())


def _spread_ok(fit, tol) -> bool:
    if not np.all(np.isfinite(fit)):
        return False
    return bool(np.std(fit) <= tol * abs(np.mean(fit)))


__all__ = ["DEConfig", "Evaluator", "OptResult", "differential_evolution", "evaluate_population"]
