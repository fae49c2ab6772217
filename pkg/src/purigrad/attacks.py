"""PGD and simplified APGD attacks with EOT gradients through a purifier.

Attacks run batched over images: row ``i`` of ``x`` is image ``image_ids[i]``.
All randomness comes from substreams keyed by the image id and iteration.
Images are split into fixed chunks of ``chunk`` images; chunks may run on
several workers, and records depend on the chunk size (BLAS summation order
varies with batch shape in the last ulp) but never on the worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import streams
from .autodiff import Tensor
from .checkpoint import compute_grad
from .models import ConfigError
from .purifiers import Purifier

NORMS = ("linf", "l2")
GRAD_METHODS = ("checkpointed", "bpda", "final_state", "naive")
STEP_RULES = ("fixed", "adaptive")


class AttackDiverged(RuntimeError):
    def __init__(self, iteration):
        super().__init__(f"attack gradient is not finite at iteration {iteration}")
        self.iteration = iteration


@dataclass
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 0.1
    step_size: float = 0.025
    iterations: int = 40
    eot_replicates: int = 20
    grad_method: str = "checkpointed"
    step_rule: str = "fixed"
    momentum: float = 0.75
    random_start: bool = False
    tail_steps: Optional[int] = None
    seed: int = 0

    def validate(self) -> None:
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm '{self.norm}'")
        if self.grad_method not in GRAD_METHODS:
            raise ConfigError(f"unknown gradient method '{self.grad_method}'")
        if self.step_rule not in STEP_RULES:
            raise ConfigError(f"unknown step rule '{self.step_rule}'")
        # epsilon == 0 is accepted as the degenerate pinned attack
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.eot_replicates < 1:
            raise ConfigError("eot_replicates must be >= 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Defense:
    """A purifier followed by a classifier."""

    purifier: Purifier
    classifier: object

    def logits(self, x: np.ndarray, noises: np.ndarray) -> np.ndarray:
        out, _ = self.purifier.run(x, noises)
        with ad.no_record():
            return self.classifier(Tensor(out)).data


@dataclass
class AdversarialRecord:
    image_id: int
    original: np.ndarray
    label: int
    final: np.ndarray
    loss_optimized: np.ndarray
    loss_optimized_iter: int
    first_broken: Optional[np.ndarray] = None
    first_broken_iter: Optional[int] = None
    loss_trace: list = field(default_factory=list)
    check_losses: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    clamp_distorted: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def broken(self) -> bool:
        return self.first_broken is not None


# ------------------------------------------------------------------ projections


def project_linf(x, x0, epsilon):
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x.shape != x0.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x0.shape}")
    return np.clip(np.clip(x, x0 - epsilon, x0 + epsilon), 0.0, 1.0)


def _project_l2(x, x0, epsilon):
    d = x - x0
    norms = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
    factor = np.where(norms > epsilon, epsilon / np.where(norms > 0, norms, 1.0), 1.0)
    ball = x0 + d * factor
    out = np.clip(ball, 0.0, 1.0)
    return out, np.any(out != ball, axis=-1)


def project_l2(x, x0, epsilon, return_flag=False):
    """Rescale ``x - x0`` onto the ε-ball if it lies outside, then clamp to [0, 1].

    Operates on the last axis. With ``return_flag`` also returns a boolean per
    row telling whether the clamp moved the ball projection.
    """
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x.shape != x0.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x0.shape}")
    out, flag = _project_l2(x, x0, epsilon)
    return (out, flag) if return_flag else out


def _project(config, x, x0):
    if config.norm == "linf":
        return project_linf(x, x0, config.epsilon), np.zeros(x.shape[0], dtype=bool)
    return project_l2(x, x0, config.epsilon, return_flag=True)


def _direction(config, g):
    if config.norm == "linf":
        return np.sign(g)
    norms = np.sqrt(np.sum(g * g, axis=1, keepdims=True))
    return np.where(norms > 0, g / np.where(norms > 0, norms, 1.0), 0.0)


# ------------------------------------------------------------------ gradients


def eot_gradient(
    x,
    defense: Defense,
    label,
    H_adv: int,
    rng=None,
    grad_method: str = "checkpointed",
    *,
    image_ids: Optional[Sequence[int]] = None,
    round_idx: int = 0,
    seed: int = 0,
    tail_steps: Optional[int] = None,
    return_loss: bool = False,
):
    """Mean per-trajectory input gradient over ``H_adv`` purification replicates.

    ``x`` is (n, D) or (D,). With ``rng`` given, the replicate noises come
    from it; otherwise from the keyed substreams of ``image_ids`` at
    ``round_idx``. With ``return_loss`` also returns the mean replicate loss
    per image.
    """
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n, d = x.shape
    if H_adv < 1:
        raise ValueError("H_adv must be >= 1")
    purifier = defense.purifier
    if rng is not None:
        noises = purifier.draw_noise(rng, (n * H_adv, d))
    else:
        ids = list(range(n)) if image_ids is None else list(image_ids)
        noises = streams.replicate_noise(seed, streams.ATTACK_EOT, ids, round_idx, H_adv, purifier.n_steps, (d,))
        if not purifier.stochastic:
            noises = np.zeros_like(noises)
    rows = np.repeat(x, H_adv, axis=0)
    row_labels = np.repeat(labels, H_adv)
    kw = {"tail_steps": tail_steps} if grad_method == "final_state" else {}
    report = compute_grad(grad_method, rows, purifier, defense.classifier, row_labels, noises=noises, **kw)
    g = report.gradient.reshape(n, H_adv, d).mean(axis=1)
    loss = report.sample_losses.reshape(n, H_adv).mean(axis=1)
    if single:
        g, loss = g[0], loss[0]
    return (g, loss) if return_loss else g


def _check(defense: Defense, x, labels, image_ids, iteration, seed):
    """One fresh purification replicate per image; returns (wrong mask, loss)."""
    n, d = x.shape
    noises = streams.replicate_noise(
        seed, streams.ATTACK_CHECK, image_ids, iteration, 1, defense.purifier.n_steps, (d,)
    )
    if not defense.purifier.stochastic:
        noises = np.zeros_like(noises)
    logits = defense.logits(x, noises)
    with ad.no_record():
        loss = ad.softmax_cross_entropy(Tensor(logits), labels).data
    return np.argmax(logits, axis=1) != labels, loss


def _random_start(config, x0, image_ids):
    out = np.empty_like(x0)
    d = x0.shape[1]
    for r, img in enumerate(image_ids):
        g = streams.substream(config.seed, streams.ATTACK_INIT, img, 0)
        if config.norm == "linf":
            out[r] = x0[r] + g.uniform(-config.epsilon, config.epsilon, size=d)
        else:
            v = g.standard_normal(d)
            radius = config.epsilon * g.uniform() ** (1.0 / d)
            out[r] = x0[r] + radius * v / max(np.linalg.norm(v), 1e-300)
    return _project(config, out, x0)[0]


# ------------------------------------------------------------------ driver


class _Tracker:
    """Per-image bookkeeping of first-broken and loss-optimized states."""

    def __init__(self, x0):
        n, d = x0.shape
        self.first = np.full((n, d), np.nan)
        self.first_iter = np.full(n, -1)
        self.best_wrong = np.full(n, -np.inf)
        self.best_any = np.full(n, -np.inf)
        self.opt = x0.copy()
        self.opt_iter = np.zeros(n, dtype=np.int64)
        self.opt_any = x0.copy()
        self.opt_any_iter = np.zeros(n, dtype=np.int64)
        self.check_losses = []

    def update(self, x, wrong, loss, iteration):
        new_first = wrong & (self.first_iter < 0)
        self.first[new_first] = x[new_first]
        self.first_iter[new_first] = iteration
        better = wrong & (loss > self.best_wrong)
        self.opt[better] = x[better]
        self.opt_iter[better] = iteration
        self.best_wrong[better] = loss[better]
        better_any = loss > self.best_any
        self.opt_any[better_any] = x[better_any]
        self.opt_any_iter[better_any] = iteration
        self.best_any[better_any] = loss[better_any]
        self.check_losses.append(loss.copy())


def _run(x0, labels, defense, config, image_ids, adaptive):
    config.validate()
    n = x0.shape[0]
    x = _random_start(config, x0, image_ids) if config.random_start else x0.copy()
    distorted = np.zeros(n, dtype=bool)
    tracker = _Tracker(x0)
    loss_trace, step_trace = [], []
    N = config.iterations
    eta = np.full(n, 2.0 * config.epsilon if adaptive else config.step_size)
    window = max(math.ceil(0.22 * N), 1)
    prev = x.copy()
    best_x, best_loss = x.copy(), np.full(n, -np.inf)
    best_at_checkpoint = best_loss.copy()
    for k in range(N):
        g, loss = eot_gradient(
            x,
            defense,
            labels,
            config.eot_replicates,
            grad_method=config.grad_method,
            image_ids=image_ids,
            round_idx=k,
            seed=config.seed,
            tail_steps=config.tail_steps,
            return_loss=True,
        )
        if not np.all(np.isfinite(g)):
            raise AttackDiverged(k)
        loss_trace.append(loss.copy())
        step_trace.append(eta.copy())
        improved = loss > best_loss
        best_x[improved] = x[improved]
        best_loss[improved] = loss[improved]
        z, flag = _project(config, x + eta[:, None] * _direction(config, g), x0)
        distorted |= flag
        if adaptive and k > 0:
            a = config.momentum
            nxt, flag = _project(config, x + a * (z - x) + (1.0 - a) * (x - prev), x0)
            distorted |= flag
        else:
            nxt = z
        prev, x = x, nxt
        if adaptive and (k + 1) % window == 0 and k + 1 < N:
            stalled = (best_loss <= best_at_checkpoint) & np.any(x != best_x, axis=1)
            eta = np.where(stalled, eta / 2.0, eta)
            x = np.where(stalled[:, None], best_x, x)
            prev = np.where(stalled[:, None], best_x, prev)
            best_at_checkpoint = best_loss.copy()
        wrong, closs = _check(defense, x, labels, image_ids, k, config.seed)
        tracker.update(x, wrong, closs, k + 1)
    records = []
    trace = np.array(loss_trace)
    steps = np.array(step_trace)
    checks = np.array(tracker.check_losses)
    for r, img in enumerate(image_ids):
        fb = tracker.first_iter[r] >= 0
        ever_wrong = np.isfinite(tracker.best_wrong[r])
        records.append(
            AdversarialRecord(
                image_id=int(img),
                original=x0[r].copy(),
                label=int(labels[r]),
                final=x[r].copy(),
                loss_optimized=(tracker.opt[r] if ever_wrong else tracker.opt_any[r]).copy(),
                loss_optimized_iter=int(tracker.opt_iter[r] if ever_wrong else tracker.opt_any_iter[r]),
                first_broken=tracker.first[r].copy() if fb else None,
                first_broken_iter=int(tracker.first_iter[r]) if fb else None,
                loss_trace=trace[:, r].tolist(),
                check_losses=checks[:, r].tolist(),
                step_sizes=steps[:, r].tolist(),
                clamp_distorted=bool(distorted[r]),
                meta={"attack": config.to_dict(), "rule": "apgd" if adaptive else "pgd"},
            )
        )
    return records


def _dispatch(x, label, defense, config, image_ids, adaptive, workers, chunk):
    single = np.ndim(x) == 1
    x0 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape[0] != x0.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {x0.shape[0]} inputs")
    ids = list(range(x0.shape[0])) if image_ids is None else [int(i) for i in image_ids]
    chunk = chunk or x0.shape[0]
    parts = [slice(s, s + chunk) for s in range(0, x0.shape[0], chunk)]

    def job(sl):
        return _run(x0[sl], labels[sl], defense, config, ids[sl], adaptive)

    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, parts))
    else:
        results = [job(sl) for sl in parts]
    records = [r for part in results for r in part]
    return records[0] if single else records


def pgd_attack(x, label, defense: Defense, config: AttackConfig, image_ids=None, *, workers=1, chunk=None):
    """Fixed-step PGD with EOT gradients.

    Returns one :class:`AdversarialRecord` for a 1-D ``x`` and a list for a
    batch. ``chunk`` bounds the number of images purified together.
    """
    return _dispatch(x, label, defense, config, image_ids, False, workers, chunk)


def apgd_attack(x, label, defense: Defense, config: AttackConfig, image_ids=None, *, workers=1, chunk=None):
    """Momentum PGD starting at step 2ε, halving the step when the best loss stalls.

    The check runs every ``max(ceil(0.22 N), 1)`` iterations; a stalled image
    restarts from its best-loss iterate with half the step.
    """
    if config.step_rule != "adaptive":
        raise ConfigError("apgd_attack needs step_rule='adaptive'")
    return _dispatch(x, label, defense, config, image_ids, True, workers, chunk)


def run_attack(x, label, defense, config, image_ids=None, **kw):
    if config.step_rule == "adaptive":
        return apgd_attack(x, label, defense, config, image_ids, **kw)
    return pgd_attack(x, label, defense, config, image_ids, **kw)
