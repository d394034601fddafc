"""Bit-exact checkpoint files, training-history CSVs and report documents.

Checkpoint layout (all integers little-endian):

    bytes 0..3    magic b"TPCK"
    bytes 4..7    format version (u32)
    bytes 8..11   header length in bytes (u32)
    header        UTF-8 JSON: architecture descriptor, input shape,
                  class count, tensor index (name + shape, in order),
                  free-form training metadata
    payload       for each indexed tensor, raw little-endian float32

Payloads are written and read as explicit little-endian, so a checkpoint
loads to bit-identical predictions on any host byte order.
"""

from __future__ import annotations

import csv
import json
import os
import time

import numpy as np

from .nn import Model
from .training import EpochRecord, TrainHistory

MAGIC = b"TPCK"
VERSION = 1


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class BadVersionError(CheckpointError):
    pass


class PayloadShapeError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def save_checkpoint(model: Model, metadata: dict, path: str) -> None:
    """Write the model and metadata; fsyncs before returning."""
    names = list(model.params)
    header = {
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "tensors": [{"name": n, "shape": list(model.params[n].data.shape)} for n in names],
        "metadata": metadata,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(VERSION.to_bytes(4, "little"))
        f.write(len(header_bytes).to_bytes(4, "little"))
        f.write(header_bytes)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes())
        f.flush()
        os.fsync(f.fileno())


def load_checkpoint(path: str) -> tuple[Model, dict]:
    """Reconstruct a model; every structural defect gets its own error kind."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        raw = f.read(8)
        if len(raw) != 8:
            raise TruncatedError(f"{path}: truncated fixed header")
        version = int.from_bytes(raw[:4], "little")
        if version != VERSION:
            raise BadVersionError(f"{path}: unsupported checkpoint version {version}, expected {VERSION}")
        header_len = int.from_bytes(raw[4:], "little")
        header_bytes = f.read(header_len)
        if len(header_bytes) != header_len:
            raise TruncatedError(f"{path}: truncated JSON header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable header: {e}") from None
        state: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise TruncatedError(
                    f"{path}: tensor {name!r} truncated ({len(buf)} of {count * 4} bytes)")
            arr = np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(shape)
            state[name] = arr
        if f.read(1):
            raise PayloadShapeError(f"{path}: trailing bytes after the declared tensors")
    model = Model.build(header["arch"], tuple(header["input_shape"]),
                        header["num_classes"], seed=0)
    expected = {n: p.data.shape for n, p in model.params.items()}
    if set(state) != set(expected):
        raise PayloadShapeError(
            f"{path}: tensor names {sorted(state)} do not match the architecture {sorted(expected)}")
    for name, shape in expected.items():
        if state[name].shape != shape:
            raise PayloadShapeError(
                f"{path}: tensor {name!r} has shape {state[name].shape}, architecture needs {shape}")
    model.load_state(state)
    return model, header.get("metadata", {})


HISTORY_FIELDS = ["epoch", "lr", "mean_loss", "wall_seconds", "clean_train_acc",
                  "adv_train_acc", "clean_test_acc", "fgsm_test_acc", "pgd_test_acc"]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)  # round-trip precision
    return str(v)


def append_history_row(path: str, rec: EpochRecord) -> None:
    """Append one epoch; the file stays readable after a crash mid-write."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if fresh:
            writer.writerow(HISTORY_FIELDS)
        writer.writerow([_cell(getattr(rec, k)) for k in HISTORY_FIELDS])
        f.flush()
        os.fsync(f.fileno())


def read_history(path: str) -> TrainHistory:
    """Parse a history CSV; incomplete trailing rows are dropped, and a
    re-recorded epoch keeps only its last complete record."""
    by_epoch: dict[int, EpochRecord] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        rows = list(reader)
    for row in rows[1:]:
        if len(row) != len(HISTORY_FIELDS):
            continue
        try:
            rec = EpochRecord(
                epoch=int(row[0]), lr=float(row[1]), mean_loss=float(row[2]),
                wall_seconds=float(row[3]),
                **{k: (float(v) if v else None)
                   for k, v in zip(HISTORY_FIELDS[4:], row[4:])})
        except ValueError:
            continue
        by_epoch[rec.epoch] = rec
    history = TrainHistory()
    history.records = [by_epoch[e] for e in sorted(by_epoch)]
    return history


REPORT_VERSION = 1


def write_report_json(report, path: str) -> None:
    doc = {
        "version": REPORT_VERSION,
        "model_id": report.model_id,
        "dataset": report.dataset,
        "rows": [{"attack": r.attack, "purified": r.purified, "n": r.n,
                  "accuracy_pct": r.accuracy_pct, "mean_linf": r.mean_linf,
                  "wall_seconds": r.wall_seconds} for r in report.rows],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def read_report_json(path: str):
    from .evaluation import ReportRow, RunReport

    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != REPORT_VERSION:
        raise ValueError(f"{path}: unsupported report version {doc.get('version')}")
    report = RunReport(model_id=doc["model_id"], dataset=doc["dataset"])
    report.rows = [ReportRow(**row) for row in doc["rows"]]
    return report


def write_report_csv(report, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["attack", "purified", "n", "accuracy_pct", "mean_linf", "wall_seconds"])
        for r in report.rows:
            writer.writerow([r.attack, r.purified, r.n, r.accuracy_pct, r.mean_linf, r.wall_seconds])


def render_report(report) -> str:
    """Human-readable table for the report subcommand."""
    lines = [f"model {report.model_id} on {report.dataset}",
             f"{'attack':<12} {'purified':<9} {'n':>6} {'acc %':>8} {'mean linf':>10} {'wall s':>8}"]
    for r in report.rows:
        lines.append(f"{r.attack:<12} {str(r.purified):<9} {r.n:>6} "
                     f"{r.accuracy_pct:>8.2f} {r.mean_linf:>10.5f} {r.wall_seconds:>8.2f}")
    return "\n".join(lines)


def write_trace_jsonl(trace, path: str) -> None:
    """Per-image purification audit records."""
    with open(path, "w") as f:
        for i in range(len(trace.pre_labels)):
            rec = {"index": i,
                   "pre_label": int(trace.pre_labels[i]),
                   "post_label": None if trace.post_labels is None else int(trace.post_labels[i]),
                   "linf_delta": float(trace.linf_delta[i])}
            f.write(json.dumps(rec) + "\n")
