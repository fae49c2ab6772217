import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from purigrad import config as cfgmod
from purigrad import io
from purigrad.attacks import AdversarialRecord
from purigrad.cli import main
from purigrad.models import ConfigError


# ------------------------------------------------------------------ tensor files


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_tensor_roundtrip(arr):
    back = io.decode_tensor(io.encode_tensor(arr))
    assert back.shape == arr.shape
    assert np.array_equal(back, arr, equal_nan=True)


def test_tensor_header_layout():
    blob = io.encode_tensor(np.arange(6.0).reshape(2, 3))
    assert blob[:4] == b"MEFA"
    assert struct.unpack_from("<IIIQQ", blob, 4) == (1, 1, 2, 2, 3)
    assert len(blob) == 4 + 12 + 16 + 48
    assert struct.unpack_from("<d", blob, 32 + 8)[0] == 1.0


@pytest.mark.parametrize(
    "mutate,msg",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
        (lambda b: b[:8] + struct.pack("<I", 7) + b[12:], "dtype"),
        (lambda b: b[:-8], "payload"),
    ],
)
def test_tensor_bad_files(mutate, msg):
    blob = io.encode_tensor(np.ones((2, 2)))
    with pytest.raises(io.FormatError, match=msg):
        io.decode_tensor(mutate(blob))


def test_atomic_write_leaves_no_temp(tmp_path):
    io.save_tensor(tmp_path / "a.mefa", np.zeros(3))
    io.save_tensor(tmp_path / "a.mefa", np.ones(3))
    assert [p.name for p in tmp_path.iterdir()] == ["a.mefa"]
    assert np.array_equal(io.load_tensor(tmp_path / "a.mefa"), np.ones(3))


def test_record_roundtrip(tmp_path):
    x = np.linspace(0, 1, 4)
    rec = AdversarialRecord(7, x, 2, x * 0.5, x * 0.25, 3, None, None, [0.1, 0.2], [0.3], [0.05], True, {"k": 1})
    io.save_record(tmp_path, rec)
    back = io.load_record(tmp_path, 7)
    assert back.first_broken is None and back.clamp_distorted
    assert np.array_equal(back.loss_optimized, rec.loss_optimized)
    assert back.meta == {"k": 1} and io.list_record_ids(tmp_path) == [7]


def test_model_hash_verified(tmp_path, trained_classifier):
    io.save_model(tmp_path, trained_classifier, config_hash="c")
    model, manifest = io.load_model(tmp_path)
    assert manifest["kind"] == "classifier"
    io.save_tensor(tmp_path / "b0.mefa", np.zeros(model.net.dims[1]))
    with pytest.raises(io.ModelHashMismatch):
        io.load_model(tmp_path)


# ------------------------------------------------------------------ config


def test_config_roundtrip():
    text = '[data]\nseed = 4\n[attack]\nnorm = "l2"\nepsilon = 0.5\n[validation]\nH_d_sweep = [1, 2]\n'
    cfg = cfgmod.loads(text)
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg
    assert cfg.attack.attack_config().norm == "l2"


@pytest.mark.parametrize(
    "text,msg",
    [
        ("[wat]\nx = 1\n", "unknown config sections"),
        ("[attack]\nepsilonn = 1\n", "unknown keys"),
        ("[attack\n", "not valid TOML"),
    ],
)
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        cfgmod.loads(text)


def test_missing_seed_is_an_error(tmp_path, capsys):
    path = tmp_path / "c.toml"
    path.write_text('[train]\nmodels = ["classifier"]\n')
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "seed is required" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.toml")]) == 2


# ------------------------------------------------------------------ CLI pipelines

SMALL = """
[data]
seed = 0
n_train = 512
n_eval = 64
[classifier]
epochs = 10
[ebm]
epochs = 3
[train]
models = {models}
[purifier]
kind = "langevin"
steps = 10
[attack]
n_images = 6
iterations = {iterations}
eot_replicates = {eot}
epsilon = {eps}
chunk = 4
[validation]
H_d_sweep = [1, 3]
trials = 2
policies = ["loss_optimized", "first_broken"]
"""


def write_config(tmp_path, name="run.toml", models='["classifier", "ebm"]', iterations=2, eot=2, eps=0.1):
    path = tmp_path / name
    path.write_text(SMALL.format(models=models, iterations=iterations, eot=eot, eps=eps))
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_config(base)
    assert main(["train", "--config", str(cfg), "--out", str(base / "run")]) == 0
    return base, cfg


def test_classifier_only_training(tmp_path):
    cfg = write_config(tmp_path, models='["classifier"]')
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert sorted(p.parent.name for p in out.glob("models/*/manifest.json")) == ["classifier"]
    manifest = json.loads((out / "manifest_train.json").read_text())
    assert manifest["seeds"]["data"] == 0 and manifest["version"].startswith("v")


def test_training_is_byte_identical(tmp_path, trained_run):
    base, cfg = trained_run
    out = tmp_path / "again"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    for f in sorted((base / "run" / "models").rglob("*.mefa")):
        rel = f.relative_to(base / "run")
        assert f.read_bytes() == (out / rel).read_bytes(), rel


def test_default_config_trains_three_models(tmp_path, capsys):
    cfg = tmp_path / "full.toml"
    cfg.write_text("[data]\nseed = 0\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert sorted(p.parent.name for p in (tmp_path / "o").glob("models/*/manifest.json")) == [
        "classifier",
        "denoiser",
        "ebm",
    ]
    metrics = json.loads((tmp_path / "o" / "train_metrics.json").read_text())
    assert metrics["classifier"]["eval_accuracy"] >= 0.95
    assert "eval accuracy" in capsys.readouterr().out


def _attack_validate(base, cfg, out):
    args = ["--config", str(cfg), "--out", str(out), "--force"]
    models = str(base / "run" / "models")
    text = cfg.read_text().replace("[data]", f'[run]\nmodels_dir = "{models}"\n[data]', 1)
    cfg2 = out.parent / f"{out.name}.toml"
    cfg2.write_text(text)
    args[1] = str(cfg2)
    assert main(["attack"] + args) == 0
    assert main(["validate"] + args) == 0
    return out


def test_attack_validate_rerun_byte_identical(tmp_path, trained_run):
    base, cfg = trained_run
    a = _attack_validate(base, cfg, tmp_path / "a")
    b = _attack_validate(base, cfg, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.suffix in (".mefa", ".csv") or p.parent.name == "records")
    assert any(f.suffix == ".csv" for f in files) and any(f.suffix == ".mefa" for f in files)
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_zero_epsilon_attack_via_cli(tmp_path, trained_run):
    base, _ = trained_run
    cfg = write_config(tmp_path, eps=0.0, iterations=1, eot=1)
    out = _attack_validate(base, cfg, tmp_path / "z")
    for i in io.list_record_ids(out / "records"):
        rec = io.load_record(out / "records", i)
        assert np.array_equal(rec.final, rec.original)
    rows = (out / "validation" / "combined.csv").read_text().splitlines()[1:]
    assert rows and all(r.split(",")[4] == r.split(",")[5] for r in rows)


def test_validate_refuses_foreign_records(tmp_path, trained_run):
    base, _ = trained_run
    cfg = write_config(tmp_path, iterations=1, eot=1)
    out = _attack_validate(base, cfg, tmp_path / "h")
    sidecar = out / "records" / "img_00000.json"
    side = json.loads(sidecar.read_text())
    side["meta"]["defense_hash"] = "0000000000000000"
    sidecar.write_text(json.dumps(side))
    cfg2 = out.parent / "h.toml"
    assert main(["validate", "--config", str(cfg2), "--out", str(out)]) == 2
    assert main(["validate", "--config", str(cfg2), "--out", str(out), "--force"]) == 0


def test_validate_skips_partial_records(tmp_path, trained_run):
    base, _ = trained_run
    cfg = write_config(tmp_path, iterations=1, eot=1)
    out = _attack_validate(base, cfg, tmp_path / "p")
    (out / "records" / "img_00002.mefa").unlink()
    with pytest.warns(RuntimeWarning, match="incomplete record 2"):
        assert main(["validate", "--config", str(out.parent / "p.toml"), "--out", str(out)]) == 0
    report = json.loads((out / "validation" / "report_Hd1_loss_optimized.json").read_text())
    assert report["skipped"] == 1 and report["n_images"] == 5


def test_bench_and_report(tmp_path, trained_run, capsys):
    cfg = tmp_path / "b.toml"
    cfg.write_text(
        "[bench]\npurifier_kinds = [\"ddpm\"]\nstep_list = [10, 50]\nrepeats = 1\nbatch = 8\n"
        "equivalence_kinds = [\"identity\", \"ddpm\"]\nequivalence_steps = [5]\n"
    )
    out = tmp_path / "bench"
    assert main(["bench", "--config", str(cfg), "--out", str(out)]) == 0
    lines = (out / "bench" / "memory.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 2
    for line in (out / "bench" / "equivalence.csv").read_text().splitlines()[1:]:
        method, _, _, _, _, diff = line.split(",")[:6]
        if method == "checkpointed":
            assert float(diff) <= 1e-10
    empty = tmp_path / "e.toml"
    empty.write_text("[bench]\nmethods = []\n")
    capsys.readouterr()
    assert main(["bench", "--config", str(empty), "--out", str(tmp_path / "e")]) == 2
    assert "no methods selected" in capsys.readouterr().err


def test_report_merges_summaries(tmp_path, trained_run):
    base, cfg = trained_run
    _attack_validate(base, write_config(tmp_path, iterations=1, eot=1), tmp_path / "r1")
    assert main(["report", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "report.md").read_text()
    assert "r1" in text and "AA" in text
