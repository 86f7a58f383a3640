"""File formats: XYZ/PLY point clouds, OFF meshes, checkpoints, run configs, CSV."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .engine import AdamState
from .geometry import PointCloud, TriangleMesh
from .losses import LossConfig
from .network import EvaConfig, EvaParams


class ParseError(ValueError):
    """Malformed file content; the message names the offending line."""


class UnsupportedFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ------------------------------------------------------------------ point clouds


def read_xyz(path) -> PointCloud:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 3:
                raise ParseError(f"{path}: line {lineno}: expected 3 coordinates, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: not a number in {text!r}") from None
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def write_xyz(path, cloud) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        for x, y, z in pts:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: line 1: missing 'ply' magic or end_header")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end:].split(b"\n", 1)[1] if b"\n" in raw[end:] else b""
    n_vertex, props, fmt, in_vertex = None, [], None, False
    elements = []
    for lineno, line in enumerate(header, 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else ""
            if fmt != "ascii":
                raise UnsupportedFormatError(f"{path}: PLY encoding {fmt!r} is not supported (ASCII only)")
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            elements.append((parts[1], int(parts[2])))
            if in_vertex:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ParseError(f"{path}: line {lineno}: list property on vertex element")
            props.append(parts[-1])
    if fmt is None:
        raise ParseError(f"{path}: header has no format line")
    if n_vertex is None or not {"x", "y", "z"} <= set(props):
        raise ParseError(f"{path}: no vertex element with x/y/z properties")
    if elements and elements[0][0] != "vertex":
        raise ParseError(f"{path}: vertex element must come first")
    cols = [props.index(c) for c in "xyz"]
    lines = body.decode("ascii").splitlines()
    first = len(header) + 2
    rows = []
    for i in range(n_vertex):
        if i >= len(lines):
            raise ParseError(f"{path}: line {first + i}: expected {n_vertex} vertices, file ends after {i}")
        parts = lines[i].split()
        if len(parts) != len(props):
            raise ParseError(f"{path}: line {first + i}: expected {len(props)} values, got {len(parts)}")
        try:
            rows.append([float(parts[c]) for c in cols])
        except ValueError:
            raise ParseError(f"{path}: line {first + i}: not a number") from None
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def write_ply(path, cloud) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\nproperty double x\nproperty double y\nproperty double z\n")
        fh.write("end_header\n")
        for x, y, z in pts:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def read_off(path) -> TriangleMesh:
    """ASCII OFF; polygons with more than three corners are fan-triangulated."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [(i, ln.split("#", 1)[0].strip()) for i, ln in enumerate(fh, 1)]
    lines = [(i, t) for i, t in lines if t]
    if not lines:
        raise ParseError(f"{path}: empty file")
    lineno, first = lines[0]
    if not first.startswith("OFF"):
        raise ParseError(f"{path}: line {lineno}: missing OFF header")
    rest = first[3:].split()
    pos = 1
    if not rest:
        if len(lines) < 2:
            raise ParseError(f"{path}: missing counts line")
        lineno, text = lines[1]
        rest = text.split()
        pos = 2
    try:
        nv, nf = int(rest[0]), int(rest[1])
    except (ValueError, IndexError):
        raise ParseError(f"{path}: line {lineno}: bad counts line") from None
    if len(lines) < pos + nv + nf:
        raise ParseError(f"{path}: expected {nv} vertices and {nf} faces, file is truncated")
    verts = []
    for lineno, text in lines[pos:pos + nv]:
        parts = text.split()
        if len(parts) < 3:
            raise ParseError(f"{path}: line {lineno}: vertex needs 3 coordinates")
        try:
            verts.append([float(v) for v in parts[:3]])
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: not a number") from None
    tris = []
    for lineno, text in lines[pos + nv:pos + nv + nf]:
        try:
            parts = [int(v) for v in text.split()]
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: face indices must be integers") from None
        k = parts[0] if parts else 0
        if k < 3 or len(parts) < k + 1:
            raise ParseError(f"{path}: line {lineno}: face needs a count >= 3 and that many indices")
        idx = parts[1:k + 1]
        if min(idx) < 0 or max(idx) >= nv:
            raise ParseError(f"{path}: line {lineno}: vertex index out of range")
        tris.extend([idx[0], idx[j], idx[j + 1]] for j in range(1, k - 1))
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(tris, dtype=np.int64).reshape(-1, 3))


def write_off(path, mesh: TriangleMesh) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"OFF\n{len(mesh.vertices)} {len(mesh.triangles)} 0\n")
        for x, y, z in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")


# ------------------------------------------------------------------ checkpoints

MAGIC = b"PUEVACKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(path, state) -> None:
    """Write a :class:`~pueva.training.TrainState` (params, Adam moments, RNG, history)."""
    arrays, manifest = [], []
    offset = 0

    def add(section, name, a):
        nonlocal offset
        a = np.ascontiguousarray(a, dtype="<f8")
        manifest.append({"section": section, "name": name, "shape": list(a.shape), "offset": offset})
        arrays.append(a.tobytes())
        offset += a.nbytes

    for name, p in state.params.arrays.items():
        add("param", name, p.data)
    for i, (m, v) in enumerate(zip(state.adam.m, state.adam.v)):
        add("adam_m", str(i), m)
        add("adam_v", str(i), v)
    adam = {k: getattr(state.adam, k) for k in ("lr", "beta1", "beta2", "eps", "step")}
    meta = {
        "config": state.config.to_dict(),
        "manifest": manifest,
        "adam": adam,
        "epoch": state.epoch,
        "rng_seed": state.rng_seed,
        "rng_state": state.rng.bit_generator.state,
        "history": [dataclasses.asdict(r) for r in state.history],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = _PREFIX.pack(MAGIC, VERSION, len(meta_bytes)) + meta_bytes + b"".join(arrays)
    Path(path).write_bytes(payload + hashlib.sha256(payload).digest())


def load_checkpoint(path):
    from .training import EpochRecord, TrainState

    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size + 32:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    magic, version, meta_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not supported (expected {VERSION})")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch; file is corrupt")
    meta = json.loads(payload[_PREFIX.size:_PREFIX.size + meta_len])
    blob = payload[_PREFIX.size + meta_len:]
    sections: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in meta["manifest"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
        sections[entry["section"]][entry["name"]] = a.reshape(entry["shape"]).astype(np.float64)
    params = EvaParams.from_state_dict(sections["param"])
    n = len(sections["adam_m"])
    adam = AdamState(**meta["adam"])
    adam.m = [sections["adam_m"][str(i)] for i in range(n)]
    adam.v = [sections["adam_v"][str(i)] for i in range(n)]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(params, EvaConfig.from_dict(meta["config"]), adam, meta["epoch"], meta["rng_seed"], rng,
                      [EpochRecord(**r) for r in meta["history"]])


# ------------------------------------------------------------------ run configuration


@dataclasses.dataclass
class RunConfig:
    """Everything a training run needs, loadable from a key = value text file."""

    model: EvaConfig = dataclasses.field(default_factory=EvaConfig)
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    seed: int = 0
    lr: float = 1e-3
    epochs: int = 100
    batch: int = 8
    patch_size: int = 256
    augment: bool = True


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in value.replace(",", " ").split())
    if default is None:
        return None if value.lower() == "none" else float(value)
    return value


def apply_overrides(run: RunConfig, items: dict[str, str]) -> RunConfig:
    """Apply string key/values; keys may name fields of the run, model or loss config."""
    top = {f.name for f in dataclasses.fields(RunConfig)} - {"model", "loss"}
    model = {f.name: getattr(run.model, f.name) for f in dataclasses.fields(EvaConfig)}
    loss = {f.name: getattr(run.loss, f.name) for f in dataclasses.fields(LossConfig)}
    updates = {}
    for key, value in items.items():
        if key in top:
            updates[key] = _coerce(value, getattr(run, key))
        elif key in model:
            model[key] = _coerce(value, model[key])
        elif key in loss:
            loss[key] = _coerce(value, loss[key])
        else:
            raise KeyError(f"unknown run-config key {key!r}")
    return dataclasses.replace(run, model=EvaConfig(**model), loss=LossConfig(**loss), **updates)


def read_run_config(path, base: RunConfig | None = None) -> RunConfig:
    items = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ParseError(f"{path}: line {lineno}: expected 'key = value'")
            key, value = (t.strip() for t in text.split("=", 1))
            items[key] = value
    try:
        return apply_overrides(base or RunConfig(), items)
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from None


def write_run_config(path, run: RunConfig) -> None:
    lines = []
    for f in dataclasses.fields(RunConfig):
        if f.name in ("model", "loss"):
            continue
        lines.append(f"{f.name} = {getattr(run, f.name)}")
    for obj in (run.model, run.loss):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            lines.append(f"{f.name} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ CSV


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "cd"])
        for r in history:
            w.writerow([r.epoch, repr(r.loss), repr(r.cd)])


def write_report_csv(path, report) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["shape", "metric", "p", "value"])
        for shape, metric, p, value in report.rows:
            w.writerow([shape, metric, "" if p is None else p, repr(value)])


def write_rows_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
