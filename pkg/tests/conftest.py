import numpy as np
import pytest

from purigrad.attacks import Defense
from purigrad.models import (
    Classifier,
    EnergyModel,
    Mlp,
    NoisePredictor,
    default_datasets,
    make_schedule,
    train_classifier,
    train_ebm,
)
from purigrad.purifiers import DdpmPurifier, IdentityPurifier, LangevinPurifier, VpsdePurifier

# standard defended toy setup
LANGEVIN_K = 60
LANGEVIN_ETA = 0.03


@pytest.fixture(scope="session")
def datasets():
    return default_datasets()


@pytest.fixture(scope="session")
def trained_classifier(datasets):
    return train_classifier(datasets[0])


@pytest.fixture(scope="session")
def trained_ebm(datasets):
    return train_ebm(datasets[0])


@pytest.fixture(scope="session")
def leaky_ebm(datasets):
    return train_ebm(datasets[0], epochs=5, activation="leaky_relu")


@pytest.fixture(scope="session")
def standard_defense(trained_classifier, trained_ebm):
    return Defense(LangevinPurifier(trained_ebm, LANGEVIN_K, LANGEVIN_ETA), trained_classifier)


def random_models(seed=0, dim=16, classes=4, hidden=32, T=50):
    rng = np.random.default_rng([seed, 17])
    clf = Classifier(Mlp.init([dim, hidden, hidden, classes], "silu", rng))
    pred = NoisePredictor(Mlp.init([dim + 1, hidden, hidden, dim], "silu", rng), T)
    soft = EnergyModel(Mlp.init([dim, hidden, hidden, 1], "soft_leaky_relu", rng))
    return clf, pred, soft


def make_purifier(kind, steps, pred=None, energy=None, eta=0.05, T=50):
    """Diffusion kinds noise to depth ``steps``; Langevin runs ``steps`` updates."""
    if kind == "identity":
        return IdentityPurifier(steps)
    if kind == "langevin":
        return LangevinPurifier(energy, steps, eta)
    sched = make_schedule(T)
    cls = DdpmPurifier if kind == "ddpm" else VpsdePurifier
    return cls(pred, sched, steps)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
