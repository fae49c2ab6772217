"""``purigrad`` command line: train | attack | validate | bench | report."""

from __future__ import annotations

import argparse
import csv
import logging
import subprocess
import sys
import time
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import config as cfgmod
from . import io
from .attacks import Defense, run_attack
from .autodiff import Tensor, no_record
from .bench import CSV_COLUMNS as BENCH_COLUMNS
from .bench import BenchModels, plot_data, run_equivalence_sweep, run_memory_sweep
from .models import (
    ConfigError,
    make_dataset,
    make_schedule,
    train_classifier,
    train_denoiser,
    train_ebm,
)
from .purifiers import PurifierConfig, build_purifier
from .validation import CSV_COLUMNS as VALIDATION_COLUMNS
from .validation import HashMismatch, ValidationConfig, validate_records

logger = logging.getLogger("purigrad")

MODEL_KINDS = ("classifier", "denoiser", "ebm")
TRAIN_SECTIONS = ("data", "schedule", "classifier", "denoiser", "ebm")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_manifest(out: Path, cfg: cfgmod.RunConfig, command: str, extra: Optional[dict] = None) -> None:
    manifest = {
        "command": command,
        "version": version_string(),
        "config": cfg.to_dict(),
        "config_toml": cfgmod.dumps(cfg),
        "seeds": {
            "run": cfg.run.seed,
            "data": cfg.data.seed,
            "attack": cfg.attack.seed,
            "validation": cfg.validation.seed,
        },
    }
    if extra:
        manifest.update(extra)
    io.write_json(out / f"manifest_{command}.json", manifest)


def train_hash(cfg: cfgmod.RunConfig) -> str:
    return cfg.section_hash(*TRAIN_SECTIONS)


# ------------------------------------------------------------------ shared setup


def _datasets(cfg):
    spec = cfg.data.spec()
    return make_dataset(spec, cfg.data.n_train, "train"), make_dataset(spec, cfg.data.n_eval, "eval")


def _models_dir(cfg, out: Path) -> Path:
    return Path(cfg.run.models_dir) if cfg.run.models_dir else out / "models"


def load_models(cfg, out: Path, force: bool = False) -> dict:
    """Load trained models and check them against their manifests and this config."""
    mdir = _models_dir(cfg, out)
    if not mdir.exists():
        raise ConfigError(f"models directory {mdir} does not exist; run 'purigrad train' first")
    expected = train_hash(cfg)
    models = {}
    for kind in MODEL_KINDS:
        d = mdir / kind
        if not (d / "manifest.json").exists():
            continue
        model, manifest = io.load_model(d)
        if manifest["config_hash"] != expected:
            msg = f"{kind} model was trained with config {manifest['config_hash']}, this config is {expected}"
            if not force:
                raise io.ModelHashMismatch(msg)
            logger.warning("%s (ignored: --force)", msg)
        models[kind] = (model, manifest)
    return models


def build_defense(cfg, models: dict) -> tuple:
    pc = PurifierConfig(cfg.purifier.kind, cfg.purifier.steps, cfg.purifier.eta, cfg.purifier.stochastic)
    if "classifier" not in models:
        raise ConfigError("no trained classifier found")
    need = {"langevin": "ebm", "ddpm": "denoiser", "vpsde": "denoiser"}.get(pc.kind)
    if need and need not in models:
        raise ConfigError(f"{pc.kind} purifier needs a trained {need}")
    schedule = make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    purifier = build_purifier(
        pc,
        predictor=models.get("denoiser", (None,))[0],
        energy=models.get("ebm", (None,))[0],
        schedule=schedule,
    )
    defense = Defense(purifier, models["classifier"][0])
    ident = {
        "purifier": cfg.to_dict()["purifier"],
        "schedule": cfg.to_dict()["schedule"],
        "models": {k: m[1]["model_hash"] for k, m in sorted(models.items()) if k in ("classifier", need)},
    }
    return defense, io.hash_obj(ident)


# ------------------------------------------------------------------ subcommands


def cmd_train(cfg, out: Path, args) -> int:
    kinds = list(cfg.train.models)
    bad = [k for k in kinds if k not in MODEL_KINDS]
    if bad or not kinds:
        raise ConfigError(f"[train] models must be a non-empty subset of {MODEL_KINDS}, got {kinds}")
    train, evalset = _datasets(cfg)
    chash = train_hash(cfg)
    mdir = _models_dir(cfg, out)
    metrics = {"config_hash": chash}
    seed = cfg.run.seed
    if "classifier" in kinds:
        c = cfg.classifier
        t0 = time.perf_counter()
        clf = train_classifier(train, c.epochs, c.lr, c.hidden, c.depth, c.batch_size, seed=seed)
        acc = float(np.mean(clf.predict(evalset.points) == evalset.labels))
        io.save_model(mdir / "classifier", clf, config_hash=chash)
        metrics["classifier"] = {"train_accuracy": clf.net.info["train_accuracy"], "eval_accuracy": acc}
        print(f"classifier: train accuracy {clf.net.info['train_accuracy']:.4f}, eval accuracy {acc:.4f}"
              f" ({time.perf_counter() - t0:.1f}s)")
    if "denoiser" in kinds:
        d = cfg.denoiser
        sched = make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
        den = train_denoiser(train, sched, d.epochs, d.lr, d.hidden, d.depth, d.batch_size, seed=seed)
        io.save_model(mdir / "denoiser", den, config_hash=chash)
        metrics["denoiser"] = {"final_loss": den.net.info["loss_history"][-1]}
        print(f"denoiser: final loss {metrics['denoiser']['final_loss']:.4f}")
    if "ebm" in kinds:
        e = cfg.ebm
        ebm = train_ebm(train, e.K, e.eta, e.epochs, e.lr, e.hidden, e.depth, e.batch_size, e.init_noise,
                        e.activation, seed=seed)
        io.save_model(mdir / "ebm", ebm, config_hash=chash)
        with no_record():
            u_data = float(ebm(Tensor(evalset.points)).data.mean())
            rng = np.random.default_rng([seed, 404])
            u_unif = float(ebm(Tensor(rng.uniform(size=evalset.points.shape))).data.mean())
        metrics["ebm"] = {"mean_energy_data": u_data, "mean_energy_uniform": u_unif,
                          "final_gap": ebm.net.info["gap_history"][-1]}
        print(f"ebm: mean energy on data {u_data:.3f}, on uniform points {u_unif:.3f}")
    io.write_json(out / "train_metrics.json", metrics)
    write_manifest(out, cfg, "train", {"models": kinds})
    return 0


def cmd_attack(cfg, out: Path, args) -> int:
    models = load_models(cfg, out, force=args.force)
    defense, dhash = build_defense(cfg, models)
    _, evalset = _datasets(cfg)
    a = cfg.attack
    acfg = a.attack_config()
    acfg.validate()
    lo = a.first_image
    hi = min(lo + a.n_images, len(evalset))
    ids = list(range(lo, hi))
    x, y = evalset.points[lo:hi], evalset.labels[lo:hi]
    t0 = time.perf_counter()
    records = run_attack(x, y, defense, acfg, ids, workers=max(1, args.workers or cfg.run.workers), chunk=a.chunk)
    rdir = out / "records"
    for rec in records:
        rec.meta["defense_hash"] = dhash
        rec.meta["config_hash"] = cfg.section_hash("purifier", "attack", *TRAIN_SECTIONS)
        io.save_record(rdir, rec)
    summary = {
        "n_images": len(records),
        "attack_process_broken": int(sum(r.broken for r in records)),
        "attack_process_success_rate": float(np.mean([r.broken for r in records])),
        "grad_method": acfg.grad_method,
        "defense_hash": dhash,
        "note": "attack-process counts come from single-replicate checks; use 'validate' for AA",
    }
    io.write_json(out / "attack_summary.json", summary)
    write_manifest(out, cfg, "attack", {"defense_hash": dhash, "wall_time_s": time.perf_counter() - t0})
    print(f"attacked {len(records)} images; attack-process success {summary['attack_process_broken']}"
          f"/{len(records)} (not authoritative)")
    return 0


def _load_records(rdir: Path):
    records, skipped = [], []
    for img in io.list_record_ids(rdir):
        try:
            records.append(io.load_record(rdir, img))
        except (FileNotFoundError, io.FormatError, KeyError, ValueError) as exc:
            warnings.warn(f"skipping incomplete record {img}: {exc}", RuntimeWarning)
            skipped.append(img)
    return records, skipped


def cmd_validate(cfg, out: Path, args) -> int:
    rdir = Path(args.records) if args.records else out / "records"
    if not rdir.exists():
        raise ConfigError(f"records directory {rdir} does not exist")
    models = load_models(cfg, out, force=args.force)
    defense, dhash = build_defense(cfg, models)
    records, skipped = _load_records(rdir)
    v = cfg.validation
    vdir = out / "validation"
    all_rows, summary = [], []
    for policy in v.policies:
        for H in v.H_d_sweep:
            vc = ValidationConfig(H, v.trials, v.aggregation, policy, v.seed, v.chunk)
            try:
                rep = validate_records(records, defense, vc, defense_hash=dhash, force=args.force)
            except HashMismatch as exc:
                print(f"error: {exc} (use --force to override)", file=sys.stderr)
                return 2
            rep.skipped += len(skipped)
            tag = f"Hd{H}_{policy}"
            io.write_json(vdir / f"report_{tag}.json", rep.to_dict())
            io.write_csv(vdir / f"report_{tag}.csv", rep.rows, VALIDATION_COLUMNS)
            all_rows.extend(rep.rows)
            summary.append(_summary_row(rep))
            print(f"H_d={H:<4d} policy={policy:<15s} OA={rep.OA:.4f} NA={rep.NA:.4f}±{rep.na_std:.4f}"
                  f" AA={rep.AA:.4f}±{rep.aa_std:.4f}")
    io.write_csv(vdir / "combined.csv", all_rows, VALIDATION_COLUMNS)
    io.write_csv(vdir / "summary.csv", summary, SUMMARY_COLUMNS)
    write_manifest(out, cfg, "validate", {"records_dir": str(rdir), "skipped": skipped})
    return 0


SUMMARY_COLUMNS = ("H_d", "policy", "aggregation", "trials", "n_images", "OA", "NA", "NA_std", "AA", "AA_std",
                   "AA_alt", "skipped")


def _summary_row(rep) -> dict:
    return {
        "H_d": rep.H_d,
        "policy": rep.policy,
        "aggregation": rep.aggregation,
        "trials": rep.trials,
        "n_images": rep.n_images,
        "OA": rep.OA,
        "NA": rep.NA,
        "NA_std": rep.na_std,
        "AA": rep.AA,
        "AA_std": rep.aa_std,
        "AA_alt": float(np.mean(rep.aa_alt_per_trial)),
        "skipped": rep.skipped,
    }


def cmd_bench(cfg, out: Path, args) -> int:
    b = cfg.bench
    if not b.methods:
        raise ConfigError("no methods selected")
    try:
        models = load_models(cfg, out, force=args.force)
    except ConfigError:
        models = {}
    bm = BenchModels.random(cfg.run.seed, dim=cfg.data.dim, classes=cfg.data.num_classes, batch=b.batch,
                            eta=cfg.purifier.eta)
    if "classifier" in models:
        bm.classifier = models["classifier"][0]
    if "denoiser" in models:
        bm.denoiser = models["denoiser"][0]
    if "ebm" in models:
        bm.energy = models["ebm"][0]
    rows = []
    for kind in b.purifier_kinds:
        rows += run_memory_sweep(kind, b.step_list, b.methods, b.cap_bytes, models=bm, repeats=b.repeats,
                                 seed=cfg.run.seed)
    eq = run_equivalence_sweep(b.equivalence_kinds, b.equivalence_steps, b.equivalence_repeats, cfg.run.seed,
                               models=bm) if b.equivalence_steps else []
    bdir = out / "bench"
    io.write_csv(bdir / "memory.csv", [r.to_dict() for r in rows], BENCH_COLUMNS)
    io.write_csv(bdir / "equivalence.csv", [r.to_dict() for r in eq], BENCH_COLUMNS)
    io.write_json(bdir / "plot.json", {"memory": plot_data(rows), "equivalence": [r.to_dict() for r in eq]})
    write_manifest(out, cfg, "bench")
    for r in rows:
        extra = "out of budget" if r.out_of_budget else f"{r.peak_graph_bytes} B, {r.wall_time_ms:.1f} ms"
        print(f"{r.purifier_kind:8s} {r.method:12s} steps={r.steps:<5d} {extra}")
    worst = max((r.grad_max_abs_diff_vs_naive for r in eq if r.method == "checkpointed"), default=None)
    if worst is not None:
        print(f"equivalence: worst checkpointed-vs-naive difference {worst:.3g}")
    return 0


def cmd_report(cfg, out: Path, args) -> int:
    """Merge validation summaries into one markdown table."""
    src = out
    paths = sorted(src.glob("**/validation/summary.csv"))
    if not paths:
        raise ConfigError(f"no validation/summary.csv found under {src}")
    lines = ["| run | H_d | policy | NA | AA | AA (alt. aggregation) |", "|---|---|---|---|---|---|"]
    merged = []
    for p in paths:
        with open(p, newline="") as fh:
            for row in csv.DictReader(fh):
                row["run"] = str(p.parent.parent.relative_to(src)) or "."
                merged.append(row)
                lines.append(
                    f"| {row['run']} | {row['H_d']} | {row['policy']} |"
                    f" {100 * float(row['NA']):.2f} ± {100 * float(row['NA_std']):.2f} |"
                    f" {100 * float(row['AA']):.2f} ± {100 * float(row['AA_std']):.2f} |"
                    f" {100 * float(row['AA_alt']):.2f} |"
                )
    io.write_csv(out / "report.csv", merged, ("run",) + SUMMARY_COLUMNS)
    io.atomic_write_text(out / "report.md", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "validate": cmd_validate,
    "bench": cmd_bench,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="purigrad", description=__doc__)
    parser.add_argument("--version", action="version", version=f"purigrad {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__doc__)
        p.add_argument("--config", required=False, help="TOML run configuration")
        p.add_argument("--out", help="output directory (overrides [run] out)")
        p.add_argument("--seed", type=int, help="base seed (overrides [run] seed and missing [data] seed)")
        p.add_argument("--workers", type=int, default=None, help="parallel workers for attack chunks")
        p.add_argument("--force", action="store_true", help="proceed despite hash mismatches")
        if name == "validate":
            p.add_argument("--records", help="records directory (default OUT/records)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
        if args.seed is not None:
            cfg.run.seed = args.seed
            if cfg.data.seed is None:
                cfg.data.seed = args.seed
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
        out = Path(args.out or cfg.run.out)
        if args.out:
            cfg.run.out = args.out
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except (ConfigError, io.ModelHashMismatch, io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
