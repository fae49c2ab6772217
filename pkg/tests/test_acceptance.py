"""End-to-end acceptance checks on the desk-scale toy setup.

Each test prints and records one ``criterion N: PASS|FAIL`` line; the
terminal summary repeats them. The attack-based criteria share one pair of
512-image attacks (checkpointed and BPDA gradients, paired seeds).
"""

import math
import time

import numpy as np
import pytest

from purigrad import streams
from purigrad.attacks import AttackConfig, Defense, pgd_attack
from purigrad.bench import BenchModels, run_memory_sweep, time_ratio
from purigrad.checkpoint import ClassifierLoss, LinearLoss, bpda_grad, checkpointed_grad, naive_grad
from purigrad.autodiff import Tensor
from purigrad import autodiff as ad
from purigrad.models import QuadraticEnergy
from purigrad.purifiers import LangevinPurifier
from purigrad.validation import ValidationConfig, expected_logits, select_state, stability_test, validate_records

from conftest import ACCEPTANCE, LANGEVIN_ETA, LANGEVIN_K, make_purifier, random_models

pytestmark = pytest.mark.acceptance

KINDS = ("ddpm", "vpsde", "langevin", "identity")


def verdict(n, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail} ({elapsed:.1f}s, limit {limit:.0f}s)"
    print(line)
    ACCEPTANCE.append(line)
    return ok


def _inputs(seed, n=4, d=16, lo=0.0, hi=1.0):
    rng = np.random.default_rng([seed, 99])
    return rng.uniform(lo, hi, size=(n, d)), rng.integers(0, 4, n)


# ------------------------------------------------------------------ 1: exactness


def test_criterion_1_checkpointed_equals_naive():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        clf, pred, energy = random_models(seed)
        x, y = _inputs(seed)
        for kind in KINDS:
            for steps in (5, 10, 20):
                p = make_purifier(kind, steps, pred, energy)
                noises = p.draw_noise(np.random.default_rng([seed, steps]), x.shape)
                a = checkpointed_grad(x, p, clf, y, noises=noises).gradient
                b = naive_grad(x, p, clf, y, noises=noises).gradient
                worst = max(worst, float(np.abs(a - b).max()))
    assert verdict(1, worst <= 1e-10, f"max |ckpt - naive| = {worst:.3g}", time.perf_counter() - t0, 120)


# ------------------------------------------------------------------ 2: finite differences


def test_criterion_2_finite_differences():
    t0 = time.perf_counter()
    h = 1e-5
    worst = 0.0
    for kind in KINDS:
        for seed in range(5):
            clf, pred, energy = random_models(seed + 100)
            p = make_purifier(kind, 10, pred, energy)
            x, y = _inputs(seed + 100, n=1, lo=0.1, hi=0.9)
            noises = p.draw_noise(np.random.default_rng(seed), x.shape)
            g = checkpointed_grad(x, p, clf, y, noises=noises).gradient[0]

            def loss(v):
                with ad.no_record():
                    out, _ = p.run(v, noises)
                    return ClassifierLoss(clf, y)(Tensor(out)).data.sum()

            coords = np.random.default_rng([seed, 5]).choice(x.shape[1], 10, replace=False)
            fd = np.empty(10)
            for k, j in enumerate(coords):
                e = np.zeros_like(x)
                e[0, j] = h
                fd[k] = (loss(x + e) - loss(x - e)) / (2 * h)
            rel = np.linalg.norm(g[coords] - fd) / np.linalg.norm(fd)
            worst = max(worst, float(rel))
    assert verdict(2, worst <= 1e-4, f"worst relative error {worst:.3g}", time.perf_counter() - t0, 120)


# ------------------------------------------------------------------ 3: closed form


def test_criterion_3_langevin_closed_form():
    t0 = time.perf_counter()
    eta = 0.1
    c = np.linspace(-2.0, 2.0, 8)
    x = np.full((1, 8), 0.5)
    worst = 0.0
    for K in (1, 10, 100):
        p = LangevinPurifier(QuadraticEnergy(), K, eta, stochastic=False)
        g = checkpointed_grad(x, p, loss=LinearLoss(c), noises=p.draw_noise(None, x.shape)).gradient[0]
        worst = max(worst, float(np.abs(g - c * (1 - eta**2 / 2) ** K).max()))
    assert verdict(3, worst <= 1e-12, f"max deviation {worst:.3g}", time.perf_counter() - t0, 10)


# ------------------------------------------------------------------ 4: memory


def test_criterion_4_memory_flatness():
    t0 = time.perf_counter()
    models = BenchModels.random(0)
    ck = run_memory_sweep("ddpm", [10, 50, 100, 500], ["checkpointed"], models=models, repeats=1)
    ck_peaks = [r.peak_graph_bytes for r in ck]
    spread = max(ck_peaks) / min(ck_peaks) - 1
    doubling = [10, 20, 40, 80, 160]
    nv = run_memory_sweep("ddpm", doubling, ["naive"], models=models, repeats=1)
    peaks = [r.peak_graph_bytes for r in nv]
    growth = min(b / a for a, b in zip(peaks, peaks[1:]))
    # linear model from the measured doublings predicts where the cap binds
    slope, icpt = np.polyfit(doubling, peaks, 1)
    cap = int(icpt + slope * 300)
    capped = run_memory_sweep("ddpm", [10, 50, 100, 500], ["naive"], cap_bytes=cap, models=models, repeats=1)
    over = [r.steps for r in capped if r.out_of_budget]
    expected = [s for s in (10, 50, 100, 500) if icpt + slope * s > cap]
    ok = spread < 0.10 and growth >= 1.8 and over == expected == [500]
    detail = f"ckpt spread {spread:.2%}, naive min growth/doubling {growth:.3f}, over cap at {over} (expected {expected})"
    assert verdict(4, ok, detail, time.perf_counter() - t0, 300)


# ------------------------------------------------------------------ 5: time


def test_criterion_5_time_ratio():
    t0 = time.perf_counter()
    out = time_ratio("ddpm", 50, models=BenchModels.random(0), repeats=15)
    r = out["ratio"]
    detail = f"median ckpt/naive ratio {r:.3f} ({out['checkpointed_ms']:.0f} ms vs {out['naive_ms']:.0f} ms)"
    assert verdict(5, 1.3 <= r <= 3.0, detail, time.perf_counter() - t0, 120)


# ------------------------------------------------------------------ 6: bpda equivalence and separation


def _per_input_bpda_gap(energy, classifier, x):
    p = LangevinPurifier(energy, LANGEVIN_K, LANGEVIN_ETA)
    noises = p.draw_noise(np.random.default_rng(6), x.shape)
    labels = classifier.predict(x)
    a = checkpointed_grad(x, p, classifier, labels, noises=noises).gradient
    b = bpda_grad(x, p, classifier, labels, noises=noises).gradient
    diff = np.abs(a - b).max(axis=1)
    rel = np.linalg.norm(a - b, axis=1) / np.linalg.norm(a, axis=1)
    return diff, rel


def test_criterion_6_bpda_equivalence_and_separation(trained_classifier, trained_ebm, leaky_ebm):
    t0 = time.perf_counter()
    x = np.random.default_rng(2024).uniform(size=(100, 16))
    leaky_diff, _ = _per_input_bpda_gap(leaky_ebm, trained_classifier, x)
    _, soft_rel = _per_input_bpda_gap(trained_ebm, trained_classifier, x)
    eq = float(np.mean(leaky_diff <= 1e-8))
    sep = float(np.mean(soft_rel > 1e-2))
    detail = f"leaky equal on {eq:.0%}, soft separated on {sep:.0%} (median gap {np.median(soft_rel):.3g})"
    assert verdict(6, eq >= 0.95 and sep >= 0.95, detail, time.perf_counter() - t0, 180)


# ------------------------------------------------------------------ shared 512-image attacks


@pytest.fixture(scope="module")
def eval_set(datasets):
    return datasets[1]


@pytest.fixture(scope="module")
def attacks(standard_defense, eval_set):
    out = {}
    for method in ("checkpointed", "bpda"):
        t0 = time.perf_counter()
        cfg = AttackConfig(grad_method=method, seed=0)
        recs = pgd_attack(eval_set.points, eval_set.labels, standard_defense, cfg, chunk=64)
        out[method] = (recs, time.perf_counter() - t0)
    return out


def test_criterion_7_attack_strength_ordering(attacks, standard_defense):
    t0 = time.perf_counter()
    cfg = ValidationConfig(H_d=10, trials=3)
    aa = {m: validate_records(recs, standard_defense, cfg).AA for m, (recs, _) in attacks.items()}
    gap = aa["bpda"] - aa["checkpointed"]
    elapsed = time.perf_counter() - t0 + sum(t for _, t in attacks.values())
    detail = f"AA checkpointed {aa['checkpointed']:.4f} vs bpda {aa['bpda']:.4f}, gap {gap * 100:.2f} pp"
    assert verdict(7, gap >= 0.05, detail, elapsed, 1800)


# ------------------------------------------------------------------ 8: replicate variance


def test_criterion_8_replicate_variance(attacks, standard_defense, eval_set):
    t0 = time.perf_counter()
    recs = attacks["checkpointed"][0]
    stds = [validate_records(recs, standard_defense, ValidationConfig(H_d=H, trials=3)).aa_std for H in (1, 10, 50)]
    rises = [b - a for a, b in zip(stds, stds[1:]) if b > a]
    std_ok = len(rises) <= 1 and all(r <= 0.005 for r in rises)
    # standard error of each class logit over 200 independent H_d-estimates of single images
    n = 200
    ratios = []
    for img in range(3):
        xs = np.tile(eval_set.points[img], (n, 1))
        ids = [img * 1000 + k for k in range(n)]
        se = {H: expected_logits(xs, standard_defense, H, image_ids=ids, seed=8).std(axis=0, ddof=1) for H in (1, 10, 50)}
        for H in (10, 50):
            ratios.extend((se[1] / se[H]) / math.sqrt(H))
    ratios = np.array(ratios)
    se_ok = bool(np.all((ratios >= 0.7) & (ratios <= 1.3)))
    detail = (
        f"AA std over H_d 1/10/50 = {stds[0]:.4f}/{stds[1]:.4f}/{stds[2]:.4f}, "
        f"SE ratio / sqrt(H_d) in [{ratios.min():.3f}, {ratios.max():.3f}]"
    )
    assert verdict(8, std_ok and se_ok, detail, time.perf_counter() - t0, 1200)


# ------------------------------------------------------------------ 9: stability fraction


def test_criterion_9_stability_fraction(attacks, standard_defense, eval_set):
    t0 = time.perf_counter()
    recs = attacks["checkpointed"][0]
    adv = np.array([select_state(r, "loss_optimized") for r in recs])
    ids = [r.image_id for r in recs]
    fracs = []
    for H in (1, 20, 50):
        p = stability_test(adv, standard_defense, H, 10, labels=eval_set.labels, image_ids=ids, seed=9)
        fracs.append(float(np.mean(p < 1e-4)))
    ok = all(b >= a for a, b in zip(fracs, fracs[1:]))
    detail = f"fraction p < 1e-4 over H_d 1/20/50 = {fracs[0]:.3f}/{fracs[1]:.3f}/{fracs[2]:.3f}"
    assert verdict(9, ok, detail, time.perf_counter() - t0, 900)


# ------------------------------------------------------------------ 10: reproducibility

REPRO = """
[run]
models_dir = "{models}"
[data]
seed = 0
n_train = 512
n_eval = 64
[classifier]
epochs = 10
[ebm]
epochs = 3
[train]
models = ["classifier", "ebm"]
[purifier]
kind = "langevin"
steps = 20
[attack]
n_images = 16
iterations = 4
eot_replicates = 4
chunk = 8
[validation]
H_d_sweep = [1, 5]
trials = 2
policies = ["loss_optimized", "first_broken", "final"]
"""


def test_criterion_10_reproducibility(tmp_path):
    from purigrad.cli import main

    t0 = time.perf_counter()
    models = tmp_path / "trained" / "models"
    cfg = tmp_path / "run.toml"
    cfg.write_text(REPRO.format(models=models))
    (tmp_path / "trained").mkdir()
    models.mkdir()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "trained")]) == 0
    outs = []
    for name, workers in (("a", "1"), ("b", "3")):
        out = tmp_path / name
        args = ["--config", str(cfg), "--out", str(out), "--workers", workers]
        assert main(["attack"] + args) == 0
        assert main(["validate"] + args) == 0
        outs.append(out)
    a, b = outs
    # manifests hold wall times and output paths; everything else must match
    files = sorted(
        p.relative_to(a)
        for p in a.rglob("*")
        if p.is_file() and p.suffix in (".mefa", ".csv", ".json") and not p.name.startswith("manifest")
    )
    same = [(a / f).read_bytes() == (b / f).read_bytes() for f in files]
    n_rec = sum(1 for f in files if f.parent.name == "records")
    n_csv = sum(1 for f in files if f.suffix == ".csv")
    ok = all(same) and n_rec == 32 and n_csv > 0
    detail = f"{sum(same)}/{len(files)} files identical ({n_rec} record files, {n_csv} CSVs; workers 1 vs 3)"
    assert verdict(10, ok, detail, time.perf_counter() - t0, 300)
