"""Toy differentiable models, noise schedules, synthetic data and trainers."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

logger = logging.getLogger(__name__)

ACTIVATIONS = ("silu", "leaky_relu", "soft_leaky_relu")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------ networks


@dataclass
class Mlp:
    """Fully connected network; activation after every layer but the last."""

    dims: list
    weights: list
    biases: list
    activation: str = "silu"
    slope: float = 0.05
    slr_a: float = 0.49
    slr_e: float = 0.01
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}'")
        if len(self.dims) < 2 or len(self.weights) != len(self.dims) - 1:
            raise ConfigError(f"layer dims {self.dims} do not match {len(self.weights)} weight matrices")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[i], self.dims[i + 1]) or b.shape != (self.dims[i + 1],):
                raise ConfigError(f"layer {i}: weight dims {list(w.shape)} incompatible with {self.dims}")
        if self.activation == "soft_leaky_relu":
            ad.check_soft_leaky_params(self.slr_a, self.slr_e)

    @classmethod
    def init(cls, dims, activation="silu", rng=None, **kwargs) -> "Mlp":
        rng = rng if rng is not None else np.random.default_rng(0)
        weights, biases = [], []
        for din, dout in zip(dims[:-1], dims[1:]):
            weights.append(Tensor(rng.normal(0.0, 1.0 / math.sqrt(din), size=(din, dout))))
            biases.append(Tensor(np.zeros(dout)))
        return cls(list(dims), weights, biases, activation, **kwargs)

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def set_parameters(self, arrays) -> None:
        arrays = list(arrays)
        self.weights = [Tensor(a) for a in arrays[0::2]]
        self.biases = [Tensor(a) for a in arrays[1::2]]

    def _act(self, h: Tensor) -> Tensor:
        if self.activation == "silu":
            return ad.silu(h)
        if self.activation == "leaky_relu":
            return ad.leaky_relu(h, self.slope)
        return ad.soft_leaky_relu(h, self.slr_a, self.slr_e)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.affine(h, w, b)
            if i < last:
                h = self._act(h)
        return h

    def to_config(self) -> dict:
        return {
            "dims": list(self.dims),
            "activation": self.activation,
            "slope": self.slope,
            "slr_a": self.slr_a,
            "slr_e": self.slr_e,
        }


class Classifier:
    """Logits ``f(x)`` of shape (n, classes)."""

    kind = "classifier"

    def __init__(self, net: Mlp):
        self.net = net

    @property
    def num_classes(self) -> int:
        return self.net.dims[-1]

    def __call__(self, x: Tensor) -> Tensor:
        return self.net(x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        with ad.no_record():
            return np.argmax(self.net(Tensor(x)).data, axis=1)


class NoisePredictor:
    """``eps_hat(x_t, t)``: the time index enters as an extra input column ``t / T``."""

    kind = "denoiser"

    def __init__(self, net: Mlp, T: int):
        self.net = net
        self.T = int(T)

    def __call__(self, x: Tensor, t) -> Tensor:
        n = x.shape[0]
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1) / self.T, (n, 1))
        return self.net(ad.concat([x, Tensor(np.array(tcol))], axis=1))


class EnergyModel:
    """Scalar energy ``U(x)`` per row; shape (n,)."""

    kind = "energy"

    def __init__(self, net: Mlp):
        if net.dims[-1] != 1:
            raise ConfigError("energy network must end in a single output")
        self.net = net

    def __call__(self, x: Tensor) -> Tensor:
        return ad.reshape(self.net(x), (x.shape[0],))


class QuadraticEnergy:
    """``U(x) = scale/2 * ||x - center||^2``; closed-form oracle energy."""

    kind = "energy"

    def __init__(self, scale: float = 1.0, center: float = 0.0):
        self.scale = float(scale)
        self.center = center

    def __call__(self, x: Tensor) -> Tensor:
        d = ad.sub(x, Tensor(np.broadcast_to(self.center, x.shape).copy())) if np.any(self.center) else x
        return ad.scale(ad.tsum(ad.mul(d, d), axis=1), 0.5 * self.scale)


class ZeroNoisePredictor:
    kind = "denoiser"

    def __call__(self, x: Tensor, t) -> Tensor:
        return ad.scale(x, 0.0)


class GaussianOraclePredictor:
    """Optimal predictor ``sqrt(1 - abar_t) * x_t`` for unit-normal data."""

    kind = "denoiser"

    def __init__(self, schedule: "NoiseSchedule"):
        self.schedule = schedule

    def __call__(self, x: Tensor, t) -> Tensor:
        return ad.scale(x, math.sqrt(1.0 - self.schedule.alpha_bar[int(t)]))


# ------------------------------------------------------------------ schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete variance schedule, indexed 1..T.

    ``beta``, ``alpha`` and ``sigma`` have length T+1 with an unused slot 0
    (holding 0, 1, 0); ``alpha_bar[0] == 1``.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError("schedule needs at least one beta")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("every beta must lie in (0, 1)")
        T = betas.size
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        sigma = np.zeros(T + 1)
        sigma[1:] = np.sqrt(beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
        return cls(T, beta, alpha, alpha_bar, sigma)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


# ------------------------------------------------------------------ data


@dataclass
class SyntheticDataset:
    points: np.ndarray
    labels: np.ndarray
    num_classes: int
    spec: dict

    def __len__(self):
        return self.points.shape[0]

    def subset(self, idx) -> "SyntheticDataset":
        return SyntheticDataset(self.points[idx], self.labels[idx], self.num_classes, self.spec)


@dataclass(frozen=True)
class MixtureSpec:
    """Gaussian mixture with low-rank component covariances, clipped to [0, 1]^D.

    Component ``k`` belongs to class ``k % num_classes``. Each component has
    ``rank`` principal directions with standard deviation ``std_on`` and
    isotropic residual noise ``std_off``.
    """

    dim: int = 16
    num_classes: int = 4
    num_components: int = 8
    rank: int = 2
    std_on: float = 0.06
    std_off: float = 0.015
    mean_low: float = 0.25
    mean_high: float = 0.75
    seed: int = 0


def mixture_parameters(spec: MixtureSpec):
    rng = np.random.default_rng([spec.seed, 9001])
    means = rng.uniform(spec.mean_low, spec.mean_high, size=(spec.num_components, spec.dim))
    bases = []
    for _ in range(spec.num_components):
        q, _ = np.linalg.qr(rng.normal(size=(spec.dim, spec.rank)))
        bases.append(q)
    return means, np.stack(bases)


def make_dataset(spec: MixtureSpec, n: int, split: str = "train", label_seed_offset: int = 0) -> SyntheticDataset:
    """Sample ``n`` class-balanced points; labels cycle so counts differ by at most one."""
    if spec.num_components % spec.num_classes != 0:
        raise ConfigError("num_components must be a multiple of num_classes")
    means, bases = mixture_parameters(spec)
    split_code = {"train": 1, "eval": 2}.get(split, 3)
    rng = np.random.default_rng([spec.seed, split_code, label_seed_offset])
    labels = np.arange(n) % spec.num_classes
    per_class = spec.num_components // spec.num_classes
    comp = labels + spec.num_classes * rng.integers(0, per_class, size=n)
    on = rng.normal(size=(n, spec.rank)) * spec.std_on
    off = rng.normal(size=(n, spec.dim)) * spec.std_off
    pts = means[comp] + np.einsum("nij,nj->ni", bases[comp], on) + off
    pts = np.clip(pts, 0.0, 1.0)
    order = rng.permutation(n)
    meta = {**spec.__dict__, "split": split, "n": n}
    return SyntheticDataset(pts[order], labels[order].astype(np.int64), spec.num_classes, meta)


def default_datasets(spec: Optional[MixtureSpec] = None, n_train: int = 2048, n_eval: int = 512):
    spec = spec or MixtureSpec()
    return make_dataset(spec, n_train, "train"), make_dataset(spec, n_eval, "eval")


# ------------------------------------------------------------------ optimisers


class Sgd:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p.data = p.data - self.lr * g.data


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g.data
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g.data**2
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def _param_grads(loss_fn, params):
    for p in params:
        p.requires_grad = True
    tape = Tape()
    try:
        with tape:
            loss = loss_fn()
        grads = ad.backward(tape, loss, params)
    finally:
        tape.release()
        for p in params:
            p.requires_grad = False
    return loss.item(), grads


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


# ------------------------------------------------------------------ trainers


def train_classifier(
    dataset: SyntheticDataset,
    epochs: int = 30,
    lr: float = 0.5,
    hidden: int = 64,
    depth: int = 2,
    batch_size: int = 64,
    seed: int = 0,
    activation: str = "silu",
    target_accuracy: float = 0.95,
) -> Classifier:
    """Softmax cross-entropy with plain minibatch SGD."""
    if len(dataset) == 0 or dataset.num_classes < 2:
        raise ConfigError("classifier training needs a nonempty dataset with >= 2 classes")
    rng = np.random.default_rng([seed, 101])
    d = dataset.points.shape[1]
    net = Mlp.init([d] + [hidden] * depth + [dataset.num_classes], activation, rng)
    params = net.parameters()
    opt = Sgd(params, lr)
    x_all, y_all = dataset.points, dataset.labels
    history = []
    for _ in range(epochs):
        total = 0.0
        for idx in _batches(len(dataset), batch_size, rng):
            xb, yb = Tensor(x_all[idx]), y_all[idx]
            loss, grads = _param_grads(lambda: ad.mean(ad.softmax_cross_entropy(net(xb), yb)), params)
            opt.step(grads)
            total += loss * len(idx)
        history.append(total / len(dataset))
    clf = Classifier(net)
    acc = float(np.mean(clf.predict(x_all) == y_all))
    net.info = {"train_accuracy": acc, "loss_history": history, "epochs": epochs, "lr": lr, "seed": seed}
    if acc < target_accuracy:
        warnings.warn(f"classifier reached train accuracy {acc:.3f} < {target_accuracy}", RuntimeWarning)
    return clf


def denoiser_loss(net: NoisePredictor, x0: np.ndarray, t: np.ndarray, eps: np.ndarray, schedule) -> Tensor:
    ab = schedule.alpha_bar[t][:, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    diff = ad.sub(Tensor(eps), net(Tensor(xt), t))
    return ad.mean(ad.tsum(ad.mul(diff, diff), axis=1))


def train_denoiser(
    dataset: SyntheticDataset,
    schedule: NoiseSchedule,
    epochs: int = 60,
    lr: float = 2e-3,
    hidden: int = 64,
    depth: int = 2,
    batch_size: int = 128,
    seed: int = 0,
) -> NoisePredictor:
    """Fit ``eps_hat`` by minimising ``E||eps - eps_hat(x_t, t)||^2`` with Adam."""
    rng = np.random.default_rng([seed, 202])
    d = dataset.points.shape[1]
    net = Mlp.init([d + 1] + [hidden] * depth + [d], "silu", rng)
    model = NoisePredictor(net, schedule.T)
    params = net.parameters()
    opt = Adam(params, lr)
    x_all = dataset.points
    history = []
    for _ in range(epochs):
        total = 0.0
        for idx in _batches(len(dataset), batch_size, rng):
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = rng.standard_normal((len(idx), d))
            loss, grads = _param_grads(lambda: denoiser_loss(model, x_all[idx], t, eps, schedule), params)
            if not np.isfinite(loss) or loss > 1e6:
                warnings.warn(f"denoiser training diverged (loss {loss})", RuntimeWarning)
                break
            if lr > 0:
                opt.step(grads)
            total += loss * len(idx)
        history.append(total / len(dataset))
    net.info = {"loss_history": history, "epochs": epochs, "lr": lr, "seed": seed, "T": schedule.T}
    return model


def energy_grad_x(energy, x: np.ndarray) -> np.ndarray:
    """``dU/dx`` per row, evaluated on a scratch tape."""
    xt = Tensor(x, requires_grad=True)
    tape = Tape()
    try:
        with tape:
            u = ad.tsum(energy(xt))
        g = ad.grad(tape, u, xt).data
    finally:
        tape.release()
    return g


def langevin_chain(energy, x0: np.ndarray, K: int, eta: float, rng) -> np.ndarray:
    x = x0
    for _ in range(K):
        x = x - 0.5 * eta * eta * energy_grad_x(energy, x) + eta * rng.standard_normal(x.shape)
    return x


def ebm_parameter_gradient(energy: EnergyModel, positives: np.ndarray, negatives: np.ndarray):
    """Contrastive-divergence estimate ``mean dU(x+)/dtheta - mean dU(x-)/dtheta``."""
    params = energy.net.parameters()

    def loss():
        return ad.sub(ad.mean(energy(Tensor(positives))), ad.mean(energy(Tensor(negatives))))

    return _param_grads(loss, params)


def train_ebm(
    dataset: SyntheticDataset,
    K: int = 40,
    eta: float = 0.05,
    epochs: int = 20,
    lr: float = 1e-3,
    hidden: int = 64,
    depth: int = 2,
    batch_size: int = 128,
    init_noise: float = 0.1,
    activation: str = "soft_leaky_relu",
    seed: int = 0,
) -> EnergyModel:
    """Train ``U(x)`` with data-initialised K-step Langevin negatives.

    Negatives start from each positive batch plus uniform noise in
    ``[-init_noise, init_noise]``.
    """
    rng = np.random.default_rng([seed, 303])
    d = dataset.points.shape[1]
    net = Mlp.init([d] + [hidden] * depth + [1], activation, rng)
    energy = EnergyModel(net)
    params = net.parameters()
    opt = Adam(params, lr, betas=(0.5, 0.999))
    x_all = dataset.points
    history = []
    for epoch in range(epochs):
        gaps = []
        for idx in _batches(len(dataset), batch_size, rng):
            pos = x_all[idx]
            init = pos + rng.uniform(-init_noise, init_noise, size=pos.shape)
            neg = langevin_chain(energy, init, K, eta, rng)
            gap, grads = ebm_parameter_gradient(energy, pos, neg)
            with ad.no_record():
                u_pos = energy(Tensor(pos)).data
            if not np.all(np.isfinite(u_pos)) or np.abs(u_pos).max() > 1e6:
                raise TrainingDiverged(f"energy diverged at epoch {epoch}: max |U| = {np.abs(u_pos).max():.3g}")
            opt.step(grads)
            gaps.append(gap)
        history.append(float(np.mean(gaps)))
    net.info = {
        "gap_history": history,
        "K": K,
        "eta": eta,
        "epochs": epochs,
        "lr": lr,
        "seed": seed,
        "init_noise": init_noise,
    }
    return energy
