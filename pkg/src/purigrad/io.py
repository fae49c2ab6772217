"""Binary tensor files, atomic writes, and persistence of models and records.

TensorFile layout (all integers little-endian)::

    offset  size      field
    0       4         magic b"MEFA"
    4       4         format version, u32 (currently 1)
    8       4         dtype code, u32 (1 = float64)
    12      4         rank, u32
    16      8*rank    dims, u64 each
    ...     8*prod    payload, float64 little-endian, row-major
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .attacks import AdversarialRecord
from .autodiff import Tensor
from .models import Classifier, EnergyModel, Mlp, NoisePredictor

MAGIC = b"MEFA"
VERSION = 1
DTYPE_F64 = 1


class FormatError(ValueError):
    pass


# ------------------------------------------------------------------ atomic writes


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps_json(obj))


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def hash_obj(obj) -> str:
    """Stable short hash of a JSON-serialisable object."""
    return sha256_bytes(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode())[:16]


# ------------------------------------------------------------------ tensor files


def encode_tensor(arr) -> bytes:
    a = np.asarray(arr, dtype=np.float64)
    header = MAGIC + struct.pack("<III", VERSION, DTYPE_F64, a.ndim)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f8").tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("not a tensor file (bad magic)")
    version, dtype, rank = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor file version {version}")
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported dtype code {dtype}")
    off = 16 + 8 * rank
    if len(blob) < off:
        raise FormatError("truncated tensor header")
    dims = struct.unpack_from(f"<{rank}Q", blob, 16)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) - off != 8 * count:
        raise FormatError(f"payload holds {len(blob) - off} bytes, expected {8 * count}")
    return np.frombuffer(blob, dtype="<f8", offset=off).astype(np.float64).reshape(dims)


def save_tensor(path, arr) -> None:
    atomic_write_bytes(path, encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ------------------------------------------------------------------ models


def save_model(directory, model, *, config_hash: str, extra: Optional[dict] = None) -> dict:
    """Write one tensor file per parameter and a ``manifest.json``.

    Returns the manifest, which records the sha256 of every parameter file
    and a combined ``model_hash``.
    """
    directory = Path(directory)
    net = model.net
    files = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        for name, t in ((f"w{i}", w), (f"b{i}", b)):
            blob = encode_tensor(t.data)
            atomic_write_bytes(directory / f"{name}.mefa", blob)
            files[name] = sha256_bytes(blob)
    manifest = {
        "kind": model.kind,
        "net": net.to_config(),
        "files": files,
        "model_hash": hash_obj(files),
        "config_hash": config_hash,
        "info": net.info,
    }
    if hasattr(model, "T"):
        manifest["T"] = model.T
    if extra:
        manifest.update(extra)
    write_json(directory / "manifest.json", manifest)
    return manifest


class ModelHashMismatch(RuntimeError):
    pass


def load_model(directory, *, verify: bool = True):
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    cfg = manifest["net"]
    weights, biases = [], []
    for i in range(len(cfg["dims"]) - 1):
        for name, bucket in ((f"w{i}", weights), (f"b{i}", biases)):
            path = directory / f"{name}.mefa"
            if verify and sha256_file(path) != manifest["files"][name]:
                raise ModelHashMismatch(f"{path} does not match its manifest hash")
            bucket.append(Tensor(load_tensor(path)))
    net = Mlp(cfg["dims"], weights, biases, cfg["activation"], cfg["slope"], cfg["slr_a"], cfg["slr_e"])
    net.info = manifest.get("info", {})
    kind = manifest["kind"]
    if kind == "classifier":
        model = Classifier(net)
    elif kind == "denoiser":
        model = NoisePredictor(net, manifest["T"])
    elif kind == "energy":
        model = EnergyModel(net)
    else:
        raise FormatError(f"unknown model kind '{kind}'")
    return model, manifest


# ------------------------------------------------------------------ adversarial records

STATE_ORDER = ("original", "final", "loss_optimized", "first_broken")


def record_paths(directory, image_id: int):
    base = Path(directory) / f"img_{int(image_id):05d}"
    return base.with_suffix(".mefa"), base.with_suffix(".json")


def save_record(directory, record) -> None:
    """Stack the record's states into one tensor file; metadata goes to a JSON sidecar."""
    names = [n for n in STATE_ORDER if getattr(record, n) is not None]
    states = np.stack([getattr(record, n) for n in names])
    tpath, jpath = record_paths(directory, record.image_id)
    save_tensor(tpath, states)
    sidecar = {
        "image_id": record.image_id,
        "label": record.label,
        "states": names,
        "first_broken_iter": record.first_broken_iter,
        "loss_optimized_iter": record.loss_optimized_iter,
        "loss_trace": record.loss_trace,
        "check_losses": record.check_losses,
        "step_sizes": record.step_sizes,
        "clamp_distorted": record.clamp_distorted,
        "meta": record.meta,
        "tensor_sha256": sha256_file(tpath),
    }
    write_json(jpath, sidecar)


def load_record(directory, image_id: int):
    tpath, jpath = record_paths(directory, image_id)
    side = read_json(jpath)
    states = load_tensor(tpath)
    if len(side["states"]) != states.shape[0]:
        raise FormatError(f"record {image_id}: sidecar lists {len(side['states'])} states, file has {states.shape[0]}")
    by_name = dict(zip(side["states"], states))
    return AdversarialRecord(
        image_id=side["image_id"],
        original=by_name["original"],
        label=side["label"],
        final=by_name["final"],
        loss_optimized=by_name["loss_optimized"],
        loss_optimized_iter=side["loss_optimized_iter"],
        first_broken=by_name.get("first_broken"),
        first_broken_iter=side["first_broken_iter"],
        loss_trace=side["loss_trace"],
        check_losses=side["check_losses"],
        step_sizes=side["step_sizes"],
        clamp_distorted=side["clamp_distorted"],
        meta=side["meta"],
    )


def list_record_ids(directory) -> list:
    ids = set()
    for p in Path(directory).glob("img_*.json"):
        ids.add(int(p.stem.split("_")[1]))
    for p in Path(directory).glob("img_*.mefa"):
        ids.add(int(p.stem.split("_")[1]))
    return sorted(ids)


def write_csv(path, rows: Iterable[dict], columns) -> None:
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row.get(k)) for k in columns})
    atomic_write_text(path, buf.getvalue())


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v
