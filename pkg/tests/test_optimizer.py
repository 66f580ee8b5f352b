import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microcal.errors import ValidationError
from microcal.metrics import PENALTY
from microcal.optimizer import DEConfig, Evaluator, differential_evolution, evaluate_population


def sphere(x):
    return float(np.sum(np.asarray(x) ** 2))


def rosenbrock(x):
    return float(100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2)


def penalized(x):
    return PENALTY if x[0] > 0.5 else sphere(x)


def test_sphere_5d():
    r = differential_evolution(sphere, [(-5, 5)] * 5, DEConfig(pop_size=20, max_generations=200, seed=1))
    assert r.fun <= 1e-6
    assert np.all(np.abs(r.x) < 1e-2)


def test_rosenbrock_2d():
    r = differential_evolution(rosenbrock, [(-2, 2)] * 2, DEConfig(pop_size=20, max_generations=300, seed=1))
    assert r.fun <= 1e-3
    assert np.allclose(r.x, 1.0, atol=0.05)


def test_trace_non_increasing_and_counts():
    cfg = DEConfig(pop_size=12, max_generations=30, tol=0.0, seed=5)
    r = differential_evolution(rosenbrock, [(-2, 2)] * 2, cfg)
    assert len(r.trace) == r.generations + 1
    assert all(b <= a for a, b in zip(r.trace, r.trace[1:]))
    assert r.evaluations == cfg.pop_size * (1 + r.generations)
    assert r.trace[-1] == r.fun


def test_seed_determinism_and_width_independence():
    cfg = DEConfig(pop_size=10, max_generations=15, seed=9)
    a = differential_evolution(rosenbrock, [(-2, 2)] * 2, cfg)
    b = differential_evolution(rosenbrock, [(-2, 2)] * 2, cfg)
    c = differential_evolution(rosenbrock, [(-2, 2)] * 2, cfg.replace(workers=3))
    for other in (b, c):
        assert np.array_equal(a.x, other.x) and a.trace == other.trace
        assert np.array_equal(a.population, other.population)
    d = differential_evolution(rosenbrock, [(-2, 2)] * 2, cfg.replace(seed=10))
    assert d.trace != a.trace


def test_identical_population_is_invariant():
    common = np.array([0.3, -0.7, 1.1])
    init = np.tile(common, (6, 1))
    r = differential_evolution(sphere, [(-2, 2)] * 3, DEConfig(pop_size=6, max_generations=5, tol=0.0), init=init)
    assert np.all(r.population == common)


def test_converges_early_on_flat_objective():
    r = differential_evolution(lambda x: 1.0, [(0, 1)] * 2, DEConfig(pop_size=5, max_generations=50))
    assert r.converged and r.generations == 0 and r.evaluations == 5


def test_max_generations_is_not_an_error():
    r = differential_evolution(sphere, [(-5, 5)] * 3, DEConfig(pop_size=8, max_generations=2, tol=0.0))
    assert not r.converged and r.generations == 2


def test_x0_is_seeded_into_population():
    x0 = [0.0, 0.0]
    r = differential_evolution(sphere, [(-5, 5)] * 2, DEConfig(pop_size=8, max_generations=1), x0=x0)
    assert r.fun == 0.0 and r.trace[0] == 0.0


@settings(max_examples=20, deadline=None)
@given(lo=st.lists(st.floats(-10, 0), min_size=3, max_size=3), width=st.floats(0.1, 5), seed=st.integers(0, 99))
def test_every_evaluated_vector_is_in_bounds(lo, width, seed):
    lo = np.array(lo)
    hi = lo + width
    seen = []

    def f(x):
        seen.append(np.array(x))
        return sphere(x - 100.0)  # optimum far outside pushes mutants against the bounds

    differential_evolution(f, np.column_stack([lo, hi]), DEConfig(pop_size=6, max_generations=8, seed=seed))
    xs = np.array(seen)
    assert np.all(xs >= lo) and np.all(xs <= hi)


@pytest.mark.parametrize("bounds", [[], [(1, 1)], [(2, 1)], [(0, np.inf)], [[0, 1, 2]]])
def test_bad_bounds(bounds):
    with pytest.raises(ValidationError):
        differential_evolution(sphere, bounds, DEConfig(pop_size=5, max_generations=1))


@pytest.mark.parametrize("bad", [dict(pop_size=3), dict(F=0.0), dict(CR=1.5), dict(max_generations=0),
                                 dict(tol=-1.0), dict(workers=0)])
def test_bad_config(bad):
    with pytest.raises(ValidationError):
        DEConfig(**bad)


def test_ledger_records_every_evaluation(tmp_path):
    path = tmp_path / "ledger.csv"
    cfg = DEConfig(pop_size=5, max_generations=3, tol=0.0)
    r = differential_evolution(sphere, [(-1, 1)] * 2, cfg, ledger=str(path))
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["generation", "eval_index", "objective", "x_1", "x_2"]
    assert len(rows) - 1 == r.evaluations
    assert [int(row[1]) for row in rows[1:]] == list(range(r.evaluations))
    assert min(float(row[2]) for row in rows[1:]) == r.fun


# -- batch evaluation --------------------------------------------------------------------

VECTORS = [np.array([a, b]) for a in np.linspace(-1, 1, 5) for b in np.linspace(-1, 1, 4)]


def test_width_one_and_eight_agree():
    assert evaluate_population(rosenbrock, VECTORS, 1) == evaluate_population(rosenbrock, VECTORS, 8)


def test_empty_batch():
    assert evaluate_population(sphere, [], 4) == []


def test_penalty_slot_kept_in_place():
    out = evaluate_population(penalized, VECTORS, 4)
    for v, fx in zip(VECTORS, out):
        assert (fx == PENALTY) == (v[0] > 0.5)


def test_evaluator_reuses_pool():
    with Evaluator(sphere, 2) as ev:
        assert ev(VECTORS[:3]) == [sphere(v) for v in VECTORS[:3]]
        assert ev(VECTORS[3:5]) == [sphere(v) for v in VECTORS[3:5]]
    with pytest.raises(ValueError):
        Evaluator(sphere, 0)
