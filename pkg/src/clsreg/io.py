"""Readers and writers for point clouds (ASCII PLY, CSV) and JSON documents."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from clsreg.geometry import as_cloud

_PLY_TYPES = {"float", "float32", "double", "float64"}


class FormatError(ValueError):
    """Input file could not be parsed."""


def read_ply(path) -> np.ndarray:
    """Read the ``x y z`` vertex coordinates of an ASCII PLY file."""
    path = Path(path)
    with path.open("r", encoding="ascii", errors="strict") as fh:
        try:
            lines = fh.read().splitlines()
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: not an ASCII PLY file") from exc
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: missing 'ply' magic line")
    n_vertex = None
    props: list[str] = []
    current = None
    end = None
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise FormatError(f"{path}: only ASCII PLY is supported (got {' '.join(tok[1:])})")
        elif tok[0] == "element":
            current = tok[1] if len(tok) > 1 else None
            if current == "vertex":
                try:
                    n_vertex = int(tok[2])
                except (IndexError, ValueError) as exc:
                    raise FormatError(f"{path}:{i + 1}: bad vertex element line") from exc
        elif tok[0] == "property" and current == "vertex":
            if tok[1] == "list" or tok[1] not in _PLY_TYPES | {"int", "uchar", "uint8", "int32"}:
                raise FormatError(f"{path}:{i + 1}: unsupported vertex property {line!r}")
            props.append(tok[-1])
        elif tok[0] == "end_header":
            end = i
            break
    if end is None or n_vertex is None:
        raise FormatError(f"{path}: incomplete header")
    try:
        cols = [props.index(a) for a in "xyz"]
    except ValueError:
        raise FormatError(f"{path}: vertex element lacks x/y/z properties") from None
    body = [ln for ln in lines[end + 1:end + 1 + n_vertex]]
    if len(body) < n_vertex:
        raise FormatError(f"{path}: expected {n_vertex} vertices, found {len(body)}")
    try:
        data = np.array([[float(v) for v in ln.split()] for ln in body], dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed vertex row ({exc})") from exc
    if n_vertex == 0:
        return np.zeros((0, 3))
    if data.ndim != 2 or data.shape[1] != len(props):
        raise FormatError(f"{path}: vertex rows do not match {len(props)} properties")
    try:
        return as_cloud(data[:, cols], 3)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_ply(path, cloud) -> None:
    pts = as_cloud(cloud, 3)
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
              "property double x", "property double y", "property double z", "end_header"]
    rows = [" ".join(repr(float(v)) for v in p) for p in pts]
    Path(path).write_text("\n".join(header + rows) + "\n", encoding="ascii")


def read_csv(path) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    try:
        return as_cloud(data)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_csv(path, cloud) -> None:
    np.savetxt(path, as_cloud(cloud), delimiter=",", fmt="%.17g")


def read_cloud(path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix in (".csv", ".txt"):
        return read_csv(path)
    raise FormatError(f"{path}: unknown point-cloud extension {suffix!r} (use .ply or .csv)")


def write_cloud(path, cloud) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        write_csv(path, cloud)
    else:
        write_ply(path, cloud)


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
