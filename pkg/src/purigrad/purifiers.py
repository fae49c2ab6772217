"""Stochastic purification transformations with replayable trajectories.

Each purifier is a chain of ``n_steps`` transitions ``x_{i+1} = step(i, x_i, z_i)``.
``run`` evaluates the chain without building a graph and stores every state
and noise; ``step`` is the same arithmetic on tensors, so replaying a stored
transition on a fresh tape reproduces the stored next state bit for bit.
The final state is clamped to [0, 1]; intermediate states never are.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .models import ConfigError, NoiseSchedule
from .streams import draw

KINDS = ("ddpm", "vpsde", "langevin", "identity")


class PurificationInputError(ValueError):
    pass


class PurificationDiverged(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"purification diverged at step {step}: max |x| = {value:.3g}")
        self.step = step


@dataclass
class PurifierConfig:
    """``steps`` is the noising depth t* for diffusion kinds and K for Langevin."""

    kind: str = "langevin"
    steps: int = 60
    eta: float = 0.01
    stochastic: bool = True

    def validate(self, schedule: Optional[NoiseSchedule] = None) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown purifier kind '{self.kind}'")
        if self.steps < 0 or (self.kind != "langevin" and self.kind != "identity" and self.steps < 1):
            raise ConfigError(f"invalid step count {self.steps} for {self.kind}")
        if self.kind in ("ddpm", "vpsde"):
            if schedule is None:
                raise ConfigError(f"{self.kind} purifier needs a noise schedule")
            if self.steps > schedule.T:
                raise ConfigError(f"noising depth t*={self.steps} exceeds T={schedule.T}")
        if self.kind == "langevin" and not self.eta > 0:
            raise ConfigError("langevin step size eta must be positive")


@dataclass
class TrajectoryRecord:
    """Detached states ``x_0..x_n`` (pre-clamp) and per-step noises ``z_0..z_{n-1}``."""

    states: list
    noises: np.ndarray
    meta: list
    kind: str
    purifier: "Purifier" = field(repr=False)

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    @property
    def output(self) -> np.ndarray:
        return np.clip(self.states[-1], 0.0, 1.0)


def _check_input(x: np.ndarray) -> None:
    if x.min() < -1e-9 or x.max() > 1 + 1e-9:
        raise PurificationInputError(
            f"purifier input outside [0, 1]: range [{x.min():.3g}, {x.max():.3g}]"
        )


class Purifier:
    kind = "base"
    n_steps = 0

    def step(self, i: int, x: Tensor, z: np.ndarray) -> Tensor:
        raise NotImplementedError

    def step_meta(self, i: int) -> dict:
        return {"i": i}

    def draw_noise(self, rng, shape) -> np.ndarray:
        if not self.stochastic:
            return np.zeros((self.n_steps,) + tuple(shape))
        return draw(rng, self.n_steps, shape)

    def run(self, x: np.ndarray, noises: np.ndarray):
        """Evaluate the chain; returns (clamped output, record)."""
        x = np.asarray(x, dtype=np.float64)
        _check_input(x)
        noises = np.asarray(noises, dtype=np.float64)
        if noises.shape[0] != self.n_steps:
            raise ValueError(f"expected {self.n_steps} noise arrays, got {noises.shape[0]}")
        states = [x]
        cur = Tensor(x)
        with ad.no_record():
            for i in range(self.n_steps):
                cur = self.step(i, cur, noises[i])
                states.append(cur.data)
        rec = TrajectoryRecord(states, noises, [self.step_meta(i) for i in range(self.n_steps)], self.kind, self)
        return rec.output, rec

    def trace(self, x: Tensor, noises: np.ndarray) -> Tensor:
        """Full chain on the active tape; returns the pre-clamp final state."""
        h = x
        for i in range(self.n_steps):
            h = self.step(i, h, noises[i])
        return h

    def purify(self, x: np.ndarray, rng):
        x = np.asarray(x, dtype=np.float64)
        return self.run(x, self.draw_noise(rng, x.shape))


class IdentityPurifier(Purifier):
    kind = "identity"
    stochastic = False

    def __init__(self, steps: int = 1):
        self.n_steps = int(steps)

    def step(self, i, x, z):
        return x


class _DiffusionPurifier(Purifier):
    """Shared forward noising to depth t* (transition 0) for the diffusion kinds."""

    def __init__(self, predictor, schedule: NoiseSchedule, t_star: int, stochastic: bool = True):
        PurifierConfig(self.kind, t_star).validate(schedule)
        self.predictor = predictor
        self.schedule = schedule
        self.t_star = int(t_star)
        self.n_steps = self.t_star + 1
        self.stochastic = stochastic

    def time_index(self, i: int) -> int:
        return self.t_star - i + 1

    def step_meta(self, i):
        if i == 0:
            return {"i": 0, "op": "noise", "t": self.t_star}
        return {"i": i, "op": "reverse", "t": self.time_index(i)}

    def _noise_to_depth(self, x: Tensor, eps: np.ndarray) -> Tensor:
        ab = self.schedule.alpha_bar[self.t_star]
        return ad.add(ad.scale(x, math.sqrt(ab)), Tensor(math.sqrt(1.0 - ab) * eps))

    def step(self, i, x, z):
        if i == 0:
            return self._noise_to_depth(x, z)
        return self.reverse_step(x, self.time_index(i), z)


class DdpmPurifier(_DiffusionPurifier):
    kind = "ddpm"

    def reverse_step(self, x: Tensor, t: int, z: np.ndarray) -> Tensor:
        """``(x - (1-a_t)/sqrt(1-abar_t) * eps_hat) / sqrt(a_t) + sigma_t z``."""
        s = self.schedule
        eps = self.predictor(x, t)
        coef = (1.0 - s.alpha[t]) / math.sqrt(1.0 - s.alpha_bar[t])
        mean = ad.scale(ad.sub(x, ad.scale(eps, coef)), 1.0 / math.sqrt(s.alpha[t]))
        if s.sigma[t] == 0.0:
            return mean
        return ad.add(mean, Tensor(s.sigma[t] * z))


def vpsde_update(x: Tensor, score: Tensor, beta: float, dt: float, z: np.ndarray) -> Tensor:
    """One reverse-time Euler-Maruyama step of the VP SDE.

    ``x + (beta/2 * x + beta * score) * dt + sqrt(beta * dt) * z`` with
    continuous-time noise rate ``beta``.
    """
    drift = ad.add(ad.scale(x, 0.5 * beta), ad.scale(score, beta))
    out = ad.add(x, ad.scale(drift, dt))
    return ad.add(out, Tensor(math.sqrt(beta * dt) * z))


class VpsdePurifier(_DiffusionPurifier):
    kind = "vpsde"

    def score(self, x: Tensor, t: int) -> Tensor:
        return ad.scale(self.predictor(x, t), -1.0 / math.sqrt(1.0 - self.schedule.alpha_bar[t]))

    def reverse_step(self, x, t, z):
        # beta(t) * dt == beta_t with dt = 1/T
        T = self.schedule.T
        return vpsde_update(x, self.score(x, t), self.schedule.beta[t] * T, 1.0 / T, z)


class LangevinPurifier(Purifier):
    kind = "langevin"

    def __init__(self, energy, K: int, eta: float, stochastic: bool = True, max_abs: float = 1e3):
        PurifierConfig("langevin", K, eta).validate()
        self.energy = energy
        self.n_steps = int(K)
        self.eta = float(eta)
        self.stochastic = stochastic
        self.max_abs = max_abs

    def step_meta(self, i):
        return {"i": i, "op": "langevin", "k": i, "eta": self.eta}

    def energy_grad(self, x: Tensor) -> Tensor:
        tape = ad.active_tape()
        if tape is not None and x.requires_grad:
            u = ad.tsum(self.energy(x))
            return ad.grad(tape, u, x, record_second_order=True)
        leaf = Tensor(x.data, requires_grad=True)
        scratch = Tape()
        try:
            with scratch:
                u = ad.tsum(self.energy(leaf))
            g = ad.grad(scratch, u, leaf)
        finally:
            scratch.release()
        return g

    def step(self, i, x, z):
        g = self.energy_grad(x)
        out = ad.add(ad.sub(x, ad.scale(g, 0.5 * self.eta * self.eta)), Tensor(self.eta * z))
        peak = np.abs(out.data).max()
        if peak > self.max_abs:
            raise PurificationDiverged(i, peak)
        return out


def build_purifier(config: PurifierConfig, *, predictor=None, energy=None, schedule=None) -> Purifier:
    config.validate(schedule)
    if config.kind == "identity":
        return IdentityPurifier(max(config.steps, 1))
    if config.kind == "langevin":
        if energy is None:
            raise ConfigError("langevin purifier needs an energy model")
        return LangevinPurifier(energy, config.steps, config.eta, config.stochastic)
    if predictor is None:
        raise ConfigError(f"{config.kind} purifier needs a noise predictor")
    cls = DdpmPurifier if config.kind == "ddpm" else VpsdePurifier
    return cls(predictor, schedule, config.steps, config.stochastic)


def ddpm_purify(x, predictor, schedule, t_star, rng):
    return DdpmPurifier(predictor, schedule, t_star).purify(x, rng)


def vpsde_purify(x, predictor, schedule, t_star, rng):
    return VpsdePurifier(predictor, schedule, t_star).purify(x, rng)


def langevin_purify(x, energy, K, eta, rng):
    return LangevinPurifier(energy, K, eta).purify(x, rng)


def replay_step(record: TrajectoryRecord, i: int, tape: Optional[Tape] = None):
    """Recompute ``states[i+1]`` from ``states[i]`` on a fresh tape.

    Returns ``(next_state, reattached_state, tape)``; gradients flow from the
    first to the second. The caller releases the tape.
    """
    if not 0 <= i < record.n_steps:
        raise IndexError(f"replay index {i} out of range for {record.n_steps} steps")
    tape = tape if tape is not None else Tape()
    leaf = Tensor(record.states[i], requires_grad=True)
    with tape:
        nxt = record.purifier.step(i, leaf, record.noises[i])
    return nxt, leaf, tape
