"""Checkpoints, metrics records and report emission.

Checkpoint layout (all integers little-endian uint32)::

    b"IADA1"  count
    repeat count times:
        name_len  name(utf-8)  rank  extent_0 .. extent_{rank-1}
        product(extents) float32 little-endian elements, row-major

Metrics are JSON lines with keys run_id, condition, seed, step, task, metric,
value. All file writes go to a temporary sibling first and are renamed into
place.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .harness import CONDITIONS, Metrics, TaxReport, resolve_condition

MAGIC = b"IADA1"
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


# -- atomic writes -------------------------------------------------------------------

def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
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


# -- checkpoints ------------------------------------------------------------------------

def encode_checkpoint(arrays: dict) -> bytes:
    parts = [MAGIC, _U32.pack(len(arrays))]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f4")  # tobytes() is row-major; keeps 0-d shapes
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(a.ndim)]
        parts += [_U32.pack(n) for n in a.shape]
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict:
    if blob[:5] != MAGIC:
        raise CheckpointError("not an IADA1 checkpoint (bad magic)")
    pos = 5

    def u32():
        nonlocal pos
        if pos + 4 > len(blob):
            raise CheckpointError("truncated checkpoint")
        (v,) = _U32.unpack_from(blob, pos)
        pos += 4
        return v

    out = {}
    for _ in range(u32()):
        n = u32()
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        shape = tuple(u32() for _ in range(u32()))
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + size > len(blob):
            raise CheckpointError(f"truncated data for entry {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=pos).reshape(shape).copy()
        pos += size
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return out


def model_arrays(model, aggregator=None) -> dict:
    arrays = {k: v.data for k, v in model.all_params().items()}
    if aggregator is not None:
        arrays.update({f"aggregator.{k}": v.data for k, v in aggregator.params.items()})
    return arrays


def save_checkpoint(path, model, aggregator=None, config_text: str | None = None) -> None:
    """Write the checkpoint, plus ``<path>.cfg`` holding the resolved config."""
    atomic_write(path, encode_checkpoint(model_arrays(model, aggregator)))
    if config_text is not None:
        atomic_write(str(path) + ".cfg", config_text)


def load_checkpoint(path) -> dict:
    return decode_checkpoint(Path(path).read_bytes())


def load_into(arrays: dict, model, aggregator=None) -> None:
    """Copy arrays into an already-built model; names and shapes must match exactly."""
    targets = dict(model.all_params())
    if aggregator is not None:
        targets.update({f"aggregator.{k}": v for k, v in aggregator.params.items()})
    missing = sorted(set(targets) - set(arrays))
    extra = sorted(set(arrays) - set(targets))
    if missing:
        raise CheckpointError(f"checkpoint lacks entry {missing[0]!r}")
    if extra:
        raise CheckpointError(f"checkpoint has unexpected entry {extra[0]!r}")
    for name, t in targets.items():
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {arrays[name].shape}, "
                                  f"model {t.shape}")
    for name, t in targets.items():
        t.data = arrays[name].astype(t.dtype)


# -- metrics records ----------------------------------------------------------------------

def metrics_records(m: Metrics, run_id: str, condition: str, seed: int, final_step: int,
                    config_text: str | None = None) -> list:
    def rec(step, task, metric, value):
        return {"run_id": run_id, "condition": condition, "seed": seed, "step": step,
                "task": task, "metric": metric, "value": value}

    out = []
    if config_text is not None:
        out.append(rec(-1, "*", "resolved_config", config_text))
    if m.eval_digest:
        out.append(rec(final_step, "*", "eval_digest", m.eval_digest))
    for t in sorted(m.accuracy):
        out.append(rec(final_step, t, "task_kind", m.task_kind.get(t, "")))
        out.append(rec(final_step, t, "accuracy", m.accuracy[t]))
    if m.accuracy:
        out.append(rec(final_step, "*", "composition_avg", m.composition_avg))
        out.append(rec(final_step, "*", "surface_avg", m.surface_avg))
        out.append(rec(final_step, "*", "overall_avg", m.overall_avg))
    for step, loss in m.loss_curve:
        out.append(rec(step, "train", "loss", loss))
    for k in sorted(m.params):
        out.append(rec(final_step, "*", f"params.{k}", m.params[k]))
    return out


def _dump(v):
    # NaN averages (a kind with no tasks) are written as null
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def dumps_records(records) -> str:
    return "".join(json.dumps({k: _dump(v) for k, v in r.items()}, sort_keys=False) + "\n"
                   for r in records)


def write_metrics(path, records) -> None:
    atomic_write(path, dumps_records(records))


def read_records(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def parse_metrics(records) -> dict:
    """Rebuild ``{(run_id, condition, seed): Metrics}`` from records."""
    out: dict = {}
    for r in records:
        key = (r["run_id"], r["condition"], r["seed"])
        m = out.setdefault(key, Metrics())
        metric, task, v = r["metric"], r["task"], r["value"]
        if metric == "accuracy":
            m.accuracy[task] = v
        elif metric == "task_kind":
            m.task_kind[task] = v
        elif metric == "loss":
            m.loss_curve.append((r["step"], v))
        elif metric.startswith("params."):
            m.params[metric[len("params."):]] = v
        elif metric == "eval_digest":
            m.eval_digest = v
    return out


# -- reports ---------------------------------------------------------------------------------

AVG_COLUMNS = ("composition_avg", "surface_avg", "overall_avg")


def _table(header, rows) -> str:
    cells = [list(map(str, header))] + [[_cell(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{100 * v:.1f}"
    return str(v)


def report_columns(metrics: dict) -> list:
    tasks = sorted({t for m in metrics.values() for t in m.accuracy})
    return tasks + list(AVG_COLUMNS)


def condition_table(metrics: dict, deltas: TaxReport | None = None) -> str:
    """Rows per condition (percent), then delta rows when a TaxReport is given."""
    cols = report_columns(metrics)
    rows = []
    for cond in sorted(metrics, key=lambda c: CONDITIONS.index(resolve_condition(c))):
        s = metrics[cond].summary()
        rows.append([cond] + [s.get(c, float("nan")) for c in cols])
    if deltas is not None:
        for name in ("D-A", "D-B"):
            d = deltas.deltas[name]
            rows.append([f"delta({name})"] + [_signed(d.get(c, float("nan"))) for c in cols])
    return _table(["condition"] + cols, rows)


def _signed(v: float) -> str:
    return "nan" if math.isnan(v) else f"{100 * v:+.1f}"


def sweep_table(axis: str, cells) -> str:
    """One row per sweep value; an empty sweep gives the header alone."""
    metric_cols = sorted({t for c in cells if c.metrics for t in c.metrics.accuracy})
    cols = metric_cols + (list(AVG_COLUMNS) if metric_cols else [])
    header = [axis, "aggregator_params", "adapter_params"] + cols
    rows = []
    for c in cells:
        s = c.metrics.summary() if c.metrics else {}
        rows.append([c.value, c.aggregator_params, c.adapter_params] + [s.get(k, float("nan")) for k in cols])
    return _table(header, rows)


def curve_text(points) -> str:
    return "".join(f"{int(s)} {float(v)!r}\n" for s, v in points)


def emit_report(out_dir, name: str, metrics: dict, report: TaxReport | None = None,
                config_text: str | None = None) -> str:
    """Write ``<name>.txt`` (table) and one ``<name>.<condition>.loss.dat`` per curve."""
    out_dir = Path(out_dir)
    text = condition_table(metrics, report)
    header = ""
    if config_text:
        header = "".join(f"# {line}\n" for line in config_text.rstrip().splitlines()) + "\n"
    atomic_write(out_dir / f"{name}.txt", header + text)
    for cond, m in metrics.items():
        if m.loss_curve:
            atomic_write(out_dir / f"{name}.{cond}.loss.dat", curve_text(m.loss_curve))
    return text
