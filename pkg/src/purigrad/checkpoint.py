"""Input gradients of ``loss(f(clamp(T(x))))`` through a purifier chain.

``checkpointed_grad`` keeps only detached states during the forward pass and
rebuilds one transition at a time during the backward pass, so at most one
transition's graph is alive. ``naive_grad`` records the whole chain on one
tape and is the exactness oracle. ``bpda_grad`` and ``final_state_grad``
are the approximate baselines.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import GraphBudgetExceeded, MemoryMeter, Tape, Tensor
from .purifiers import Purifier, TrajectoryRecord, replay_step

METHODS = ("checkpointed", "naive", "bpda", "final_state")


class ReplayMismatch(RuntimeError):
    pass


class OutOfBudget(GraphBudgetExceeded):
    pass


@dataclass
class GradReport:
    gradient: np.ndarray
    loss: float
    sample_losses: np.ndarray
    peak_graph_bytes: int
    wall_time: float
    method: str
    logits: Optional[np.ndarray] = field(default=None, repr=False)


class ClassifierLoss:
    """Per-row cross-entropy of ``classifier`` on the purified output."""

    def __init__(self, classifier, labels):
        self.classifier = classifier
        self.labels = np.asarray(labels, dtype=np.int64)
        self.last_logits = None

    def __call__(self, y: Tensor) -> Tensor:
        logits = self.classifier(y)
        self.last_logits = logits.data
        return ad.softmax_cross_entropy(logits, self.labels)


class LinearLoss:
    """``sum_j c_j * y_j`` per row; closed-form oracle loss."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)
        self.last_logits = None

    def __call__(self, y: Tensor) -> Tensor:
        return ad.tsum(ad.mul(y, Tensor(np.broadcast_to(self.c, y.shape).copy())), axis=1)


def _resolve_loss(classifier, label, loss):
    if loss is not None:
        return loss
    if classifier is None or label is None:
        raise ValueError("need either (classifier, label) or an explicit loss")
    return ClassifierLoss(classifier, label)


def _output_grad(final_state: np.ndarray, loss_fn):
    """Gradient of the summed loss w.r.t. the pre-clamp final state."""
    y = Tensor(final_state, requires_grad=True)
    tape = Tape()
    try:
        with tape:
            per_row = loss_fn(ad.clamp(y, 0.0, 1.0))
            total = ad.tsum(per_row)
        g = ad.grad(tape, total, y)
    finally:
        tape.release()
    return g, per_row.data


def _replay_vjp(record: TrajectoryRecord, i: int, seed: Tensor, tol: float = 1e-12) -> Tensor:
    nxt, leaf, tape = replay_step(record, i)
    try:
        stored = record.states[i + 1]
        if not np.array_equal(nxt.data, stored):
            err = np.abs(nxt.data - stored).max()
            if err > tol:
                raise ReplayMismatch(f"replayed step {i} differs from stored state by {err:.3g}")
        g = ad.backward(tape, nxt, [leaf], seed=seed)[0]
    finally:
        tape.release()
    return g


def _prepare(x, purifier, rng, noises):
    x = np.asarray(x, dtype=np.float64)
    if noises is None:
        noises = purifier.draw_noise(rng, x.shape)
    return x, noises


def _report(g, per_row, meter, t0, method, loss_fn):
    return GradReport(
        gradient=g.data,
        loss=float(per_row.sum()),
        sample_losses=per_row,
        peak_graph_bytes=meter.peak_bytes,
        wall_time=time.perf_counter() - t0,
        method=method,
        logits=getattr(loss_fn, "last_logits", None),
    )


def checkpointed_grad(
    x,
    purifier: Purifier,
    classifier=None,
    label=None,
    rng=None,
    *,
    noises=None,
    loss: Optional[Callable] = None,
    tail_steps: Optional[int] = None,
    method: str = "checkpointed",
) -> GradReport:
    """Exact input gradient with one live transition graph at a time.

    Rows of ``x`` are independent samples; the loss is summed over rows so
    each row's gradient is its own. ``tail_steps`` limits backpropagation
    to the last transitions and copies the gradient through the rest.
    """
    loss_fn = _resolve_loss(classifier, label, loss)
    t0 = time.perf_counter()
    meter = MemoryMeter()
    with meter:
        x, noises = _prepare(x, purifier, rng, noises)
        _, record = purifier.run(x, noises)
        g, per_row = _output_grad(record.states[-1], loss_fn)
        n = record.n_steps
        tail = n if tail_steps is None else tail_steps
        if not 0 <= tail <= n:
            raise ValueError(f"tail_steps={tail} outside [0, {n}]")
        for i in range(n - 1, n - 1 - tail, -1):
            g = _replay_vjp(record, i, g)
    return _report(g, per_row, meter, t0, method, loss_fn)


def final_state_grad(x, purifier, classifier=None, label=None, rng=None, tail_steps=0, **kw) -> GradReport:
    return checkpointed_grad(
        x, purifier, classifier, label, rng, tail_steps=tail_steps, method="final_state", **kw
    )


def bpda_grad(x, purifier, classifier=None, label=None, rng=None, **kw) -> GradReport:
    """Treat the purification chain as the identity on the backward pass."""
    return checkpointed_grad(x, purifier, classifier, label, rng, tail_steps=0, method="bpda", **kw)


def naive_grad(
    x,
    purifier: Purifier,
    classifier=None,
    label=None,
    rng=None,
    *,
    noises=None,
    loss: Optional[Callable] = None,
    cap_bytes: Optional[int] = None,
) -> GradReport:
    """Whole chain on a single tape; raises :class:`OutOfBudget` past ``cap_bytes``."""
    loss_fn = _resolve_loss(classifier, label, loss)
    t0 = time.perf_counter()
    meter = MemoryMeter(cap_bytes)
    with meter:
        x, noises = _prepare(x, purifier, rng, noises)
        leaf = Tensor(x, requires_grad=True)
        tape = Tape()
        try:
            with tape:
                final = purifier.trace(leaf, noises)
                per_row = loss_fn(ad.clamp(final, 0.0, 1.0))
                total = ad.tsum(per_row)
            g = ad.grad(tape, total, leaf)
        except GraphBudgetExceeded as exc:
            raise OutOfBudget(f"naive gradient exceeded graph budget: {exc}") from None
        finally:
            tape.release()
    return _report(g, per_row.data, meter, t0, "naive", loss_fn)


def compute_grad(method: str, x, purifier, classifier=None, label=None, rng=None, **kw) -> GradReport:
    if method == "checkpointed":
        return checkpointed_grad(x, purifier, classifier, label, rng, **kw)
    if method == "naive":
        return naive_grad(x, purifier, classifier, label, rng, **kw)
    if method == "bpda":
        kw.pop("tail_steps", None)
        return bpda_grad(x, purifier, classifier, label, rng, **kw)
    if method == "final_state":
        tail = kw.pop("tail_steps", None)
        if tail is None:
            tail = purifier.n_steps // 2
        return final_state_grad(x, purifier, classifier, label, rng, tail_steps=tail, **kw)
    raise ValueError(f"unknown gradient method '{method}'")
