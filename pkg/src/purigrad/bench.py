"""Memory and wall-time sweeps for the gradient methods.

``steps`` in a bench row always counts purifier transitions. Diffusion
purifiers get a noising depth of ``steps - 1`` (the extra transition is the
forward noising) on a schedule long enough to hold it.
"""

from __future__ import annotations

import gc
import time
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import streams
from .checkpoint import METHODS, OutOfBudget, compute_grad
from .models import (
    Classifier,
    EnergyModel,
    Mlp,
    MixtureSpec,
    NoisePredictor,
    make_dataset,
    make_schedule,
)
from .purifiers import DdpmPurifier, IdentityPurifier, LangevinPurifier, VpsdePurifier

CSV_COLUMNS = (
    "method",
    "purifier_kind",
    "steps",
    "peak_graph_bytes",
    "wall_time_ms",
    "grad_max_abs_diff_vs_naive",
    "out_of_budget",
    "seed",
)


@dataclass
class BenchRow:
    method: str
    purifier_kind: str
    steps: int
    peak_graph_bytes: Optional[int]
    wall_time_ms: Optional[float]
    grad_max_abs_diff_vs_naive: Optional[float]
    seed: int
    out_of_budget: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BenchModels:
    """Networks a bench purifier is built from; random ones by default."""

    classifier: object
    denoiser: Optional[object] = None
    energy: Optional[object] = None
    inputs: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    eta: float = 0.03

    @classmethod
    def random(cls, seed: int = 0, dim: int = 16, classes: int = 4, hidden: int = 64, batch: int = 64, **kw):
        rng = np.random.default_rng([seed, 606])
        clf = Classifier(Mlp.init([dim, hidden, hidden, classes], "silu", rng))
        # T is a placeholder; the bench rescales the time column per schedule
        den = Mlp.init([dim + 1, hidden, hidden, dim], "silu", rng)
        ebm = EnergyModel(Mlp.init([dim, hidden, hidden, 1], "soft_leaky_relu", rng))
        data = make_dataset(MixtureSpec(dim=dim, seed=seed), batch, "eval")
        return cls(clf, den, ebm, data.points, data.labels, **kw)


def build_bench_purifier(kind: str, steps: int, models: BenchModels, T: Optional[int] = None):
    if steps < 1:
        raise ValueError("bench steps must be >= 1")
    if kind == "identity":
        return IdentityPurifier(steps)
    if kind == "langevin":
        return LangevinPurifier(models.energy, steps, models.eta)
    if kind in ("ddpm", "vpsde"):
        if steps < 2:
            raise ValueError("diffusion bench purifiers need steps >= 2")
        sched = make_schedule(max(T or 0, steps - 1))
        net = models.denoiser.net if isinstance(models.denoiser, NoisePredictor) else models.denoiser
        pred = NoisePredictor(net, sched.T)
        cls = DdpmPurifier if kind == "ddpm" else VpsdePurifier
        return cls(pred, sched, steps - 1)
    raise ValueError(f"unknown purifier kind '{kind}'")


def _noise(purifier, x, seed, steps):
    rng = streams.substream(seed, streams.BENCH, steps, 0)
    return purifier.draw_noise(rng, x.shape)


def _timed(method, x, labels, purifier, models, noises, cap_bytes):
    gc.collect()
    if method == "naive":
        return compute_grad(method, x, purifier, models.classifier, labels, noises=noises, cap_bytes=cap_bytes)
    return compute_grad(method, x, purifier, models.classifier, labels, noises=noises)


def run_memory_sweep(
    purifier_kind: str,
    step_list: Sequence[int],
    methods: Sequence[str] = ("checkpointed", "naive"),
    cap_bytes: Optional[int] = None,
    *,
    models: Optional[BenchModels] = None,
    repeats: int = 3,
    seed: int = 0,
) -> list:
    """One row per (method, steps); time is the median over ``repeats``.

    Methods are interleaved within each repeat so drift in machine load
    affects them alike. Naive runs past ``cap_bytes`` become
    out-of-budget rows.
    """
    step_list = list(step_list)
    if not step_list:
        raise ValueError("step_list must not be empty")
    if step_list != sorted(step_list):
        raise ValueError("step_list must be ascending")
    methods = list(methods)
    if not methods:
        raise ValueError("no methods selected")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}")
    models = models or BenchModels.random(seed)
    x, labels = models.inputs, models.labels
    rows = []
    for steps in step_list:
        purifier = build_bench_purifier(purifier_kind, steps, models)
        noises = _noise(purifier, x, seed, steps)
        times = {m: [] for m in methods}
        reports = {}
        over = set()
        for _ in range(repeats):
            for m in methods:
                if m in over:
                    continue
                try:
                    rep = _timed(m, x, labels, purifier, models, noises, cap_bytes)
                except OutOfBudget:
                    over.add(m)
                    continue
                times[m].append(rep.wall_time)
                reports[m] = rep
        for m in methods:
            if m in over:
                rows.append(BenchRow(m, purifier_kind, steps, None, None, None, seed, out_of_budget=True))
                continue
            rep = reports[m]
            diff = None
            if "naive" in reports:
                diff = float(np.abs(rep.gradient - reports["naive"].gradient).max())
            rows.append(
                BenchRow(
                    m,
                    purifier_kind,
                    steps,
                    int(rep.peak_graph_bytes),
                    float(np.median(times[m]) * 1e3),
                    diff,
                    seed,
                )
            )
    return rows


def time_ratio(
    purifier_kind: str = "ddpm",
    steps: int = 50,
    *,
    models: Optional[BenchModels] = None,
    repeats: int = 9,
    seed: int = 0,
) -> dict:
    """Median over paired runs of checkpointed / naive wall time."""
    models = models or BenchModels.random(seed)
    x, labels = models.inputs, models.labels
    purifier = build_bench_purifier(purifier_kind, steps, models)
    noises = _noise(purifier, x, seed, steps)
    ratios, tc, tn = [], [], []
    for _ in range(repeats):
        c = _timed("checkpointed", x, labels, purifier, models, noises, None).wall_time
        n = _timed("naive", x, labels, purifier, models, noises, None).wall_time
        ratios.append(c / n)
        tc.append(c)
        tn.append(n)
    return {
        "ratio": float(np.median(ratios)),
        "checkpointed_ms": float(np.median(tc) * 1e3),
        "naive_ms": float(np.median(tn) * 1e3),
        "ratios": ratios,
    }


def run_equivalence_sweep(
    purifier_kinds: Sequence[str],
    step_list: Sequence[int],
    repeats: int = 1,
    seed: int = 0,
    *,
    models: Optional[BenchModels] = None,
    methods: Sequence[str] = ("checkpointed", "bpda", "final_state"),
) -> list:
    """Rows with max-abs gradient difference to the naive oracle.

    Each repeat draws fresh purification noise; the row keeps the largest
    difference over repeats.
    """
    models = models or BenchModels.random(seed)
    x, labels = models.inputs, models.labels
    rows = []
    for kind in purifier_kinds:
        for steps in step_list:
            purifier = build_bench_purifier(kind, steps, models)
            worst = {m: 0.0 for m in methods}
            for r in range(repeats):
                noises = purifier.draw_noise(streams.substream(seed, streams.BENCH, steps, r + 1), x.shape)
                ref = compute_grad("naive", x, purifier, models.classifier, labels, noises=noises).gradient
                for m in methods:
                    g = compute_grad(m, x, purifier, models.classifier, labels, noises=noises).gradient
                    worst[m] = max(worst[m], float(np.abs(g - ref).max()))
            for m in methods:
                rows.append(BenchRow(m, kind, steps, None, None, worst[m], seed))
    return rows


def plot_data(rows) -> dict:
    """Series keyed by ``kind/method`` for external plotting."""
    series = {}
    for r in rows:
        s = series.setdefault(f"{r.purifier_kind}/{r.method}", {"steps": [], "peak_graph_bytes": [], "wall_time_ms": []})
        s["steps"].append(r.steps)
        s["peak_graph_bytes"].append(r.peak_graph_bytes)
        s["wall_time_ms"].append(r.wall_time_ms)
    return series


def bench_kernels(shape=(256, 64), number: int = 200) -> list:
    """Time each activation kernel under both backends (compiled one if built)."""
    import timeit

    from .autodiff import _pykernels

    try:
        from .autodiff import _ckernels
    except ImportError:
        _ckernels = None
    x = np.random.default_rng(0).normal(size=shape)
    cases = [
        ("soft_leaky_relu", (0.49, 0.01)),
        ("soft_leaky_relu_grad", (0.49, 0.01)),
        ("soft_leaky_relu_grad2", (0.49, 0.01)),
        ("leaky_relu", (0.05,)),
        ("leaky_relu_grad", (0.05,)),
    ]
    out = []
    for name, args in cases:
        row = {"kernel": name, "python_us": None, "cython_us": None}
        f = getattr(_pykernels, name)
        row["python_us"] = timeit.timeit(lambda: f(x, *args), number=number) / number * 1e6
        if _ckernels is not None:
            g = getattr(_ckernels, name)
            row["cython_us"] = timeit.timeit(lambda: g(x, *args), number=number) / number * 1e6
        out.append(row)
    return out
