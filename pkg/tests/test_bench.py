import numpy as np
import pytest

from purigrad.bench import (
    CSV_COLUMNS,
    BenchModels,
    bench_kernels,
    build_bench_purifier,
    plot_data,
    run_equivalence_sweep,
    run_memory_sweep,
    time_ratio,
)


@pytest.fixture(scope="module")
def models():
    return BenchModels.random(0, hidden=16, batch=8)


@pytest.mark.parametrize("methods", [["checkpointed", "naive"], ["checkpointed"], ["naive", "bpda", "final_state"]])
def test_sweep_cardinality(models, methods):
    rows = run_memory_sweep("ddpm", [10, 50], methods, models=models, repeats=1)
    assert len(rows) == 2 * len(methods)
    assert {(r.method, r.steps) for r in rows} == {(m, s) for m in methods for s in (10, 50)}
    assert all(set(r.to_dict()) == set(CSV_COLUMNS) for r in rows)


def test_out_of_budget_rows_are_data(models):
    small = run_memory_sweep("ddpm", [10], ["naive"], models=models, repeats=1)[0].peak_graph_bytes
    rows = run_memory_sweep("ddpm", [5, 40], ["checkpointed", "naive"], cap_bytes=small, models=models, repeats=1)
    by = {(r.method, r.steps): r for r in rows}
    assert not by[("naive", 5)].out_of_budget
    assert by[("naive", 40)].out_of_budget
    assert by[("naive", 40)].peak_graph_bytes is None
    assert by[("checkpointed", 40)].grad_max_abs_diff_vs_naive is None
    assert by[("checkpointed", 5)].grad_max_abs_diff_vs_naive <= 1e-10


def test_sweep_input_errors(models):
    with pytest.raises(ValueError, match="no methods selected"):
        run_memory_sweep("ddpm", [10], [], models=models)
    with pytest.raises(ValueError, match="ascending"):
        run_memory_sweep("ddpm", [20, 10], models=models)
    with pytest.raises(ValueError, match="empty"):
        run_memory_sweep("ddpm", [], models=models)
    with pytest.raises(ValueError, match="unknown methods"):
        run_memory_sweep("ddpm", [10], ["adjoint"], models=models)


@pytest.mark.parametrize("kind,steps,n", [("ddpm", 10, 10), ("vpsde", 3, 3), ("langevin", 7, 7), ("identity", 4, 4)])
def test_bench_steps_count_transitions(models, kind, steps, n):
    assert build_bench_purifier(kind, steps, models).n_steps == n
    with pytest.raises(ValueError):
        build_bench_purifier(kind, 0, models)


def test_equivalence_rows(models):
    rows = run_equivalence_sweep(["identity", "ddpm", "langevin"], [5], models=models)
    for r in rows:
        if r.purifier_kind == "identity" or r.method == "checkpointed":
            assert r.grad_max_abs_diff_vs_naive <= (0.0 if r.purifier_kind == "identity" else 1e-10)
    bp = [r for r in rows if r.purifier_kind == "langevin" and r.method == "bpda"][0]
    assert bp.grad_max_abs_diff_vs_naive > 0


def test_identity_all_methods_exact(models):
    rows = run_equivalence_sweep(["identity"], [3], models=models)
    assert all(r.grad_max_abs_diff_vs_naive == 0.0 for r in rows)


def test_plot_data_and_ratio_shape(models):
    rows = run_memory_sweep("langevin", [2, 4], models=models, repeats=1)
    series = plot_data(rows)
    assert set(series) == {"langevin/checkpointed", "langevin/naive"}
    assert series["langevin/naive"]["steps"] == [2, 4]
    out = time_ratio("langevin", 3, models=models, repeats=3)
    assert len(out["ratios"]) == 3 and out["ratio"] > 0


def test_kernel_table():
    rows = bench_kernels((8, 8), number=2)
    assert {r["kernel"] for r in rows} >= {"soft_leaky_relu", "leaky_relu"}
    assert all(r["python_us"] > 0 for r in rows)
