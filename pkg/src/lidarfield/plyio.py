"""Minimal PLY (ascii / binary_little_endian) and OBJ readers and writers."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class SceneLoadError(ValueError):
    """Raised when a scene file cannot be parsed or describes an invalid scene."""


@dataclass
class _Element:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, count_dtype, item_dtype)

    @property
    def has_list(self) -> bool:
        return any(len(p) == 3 for p in self.props)


def _parse_header(fh, path):
    first = fh.readline()
    if first.strip() != b"ply":
        raise SceneLoadError(f"{path}: line 1: missing 'ply' magic")
    fmt = None
    elements: list[_Element] = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise SceneLoadError(f"{path}: unexpected end of header")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        key = parts[0]
        if key == "format":
            fmt = parts[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise SceneLoadError(f"{path}: line {lineno}: unsupported PLY format '{fmt}'")
        elif key == "element":
            elements.append(_Element(parts[1], int(parts[2])))
        elif key == "property":
            if not elements:
                raise SceneLoadError(f"{path}: line {lineno}: property before element")
            try:
                if parts[1] == "list":
                    elements[-1].props.append((parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
                else:
                    elements[-1].props.append((parts[2], _PLY_TYPES[parts[1]]))
            except (KeyError, IndexError):
                raise SceneLoadError(f"{path}: line {lineno}: bad property '{raw.strip().decode()}'")
        elif key == "end_header":
            break
        else:
            raise SceneLoadError(f"{path}: line {lineno}: unknown header keyword '{key}'")
    if fmt is None:
        raise SceneLoadError(f"{path}: missing format line")
    return fmt, elements, lineno


def read_ply(path) -> dict:
    """Read a PLY file into ``{element: {property: array}}``; list properties become lists of arrays
    or a 2-D array when every list has the same length."""
    path = os.fspath(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise SceneLoadError(f"{path}: {exc.strerror}") from exc
    with fh:
        fmt, elements, header_lines = _parse_header(fh, path)
        out = {}
        if fmt == "ascii":
            lines = fh.read().decode("ascii", errors="replace").splitlines()
            pos = 0
            for el in elements:
                cols = {p[0]: [] for p in el.props}
                for k in range(el.count):
                    # skip blank lines
                    while pos < len(lines) and not lines[pos].strip():
                        pos += 1
                    if pos >= len(lines):
                        raise SceneLoadError(f"{path}: element '{el.name}' {k}: unexpected end of file")
                    tok = lines[pos].split()
                    lineno = header_lines + pos + 1
                    pos += 1
                    try:
                        i = 0
                        for p in el.props:
                            if len(p) == 3:
                                n = int(tok[i])
                                cols[p[0]].append(np.array(tok[i + 1:i + 1 + n], dtype=p[2]))
                                if len(cols[p[0]][-1]) != n:
                                    raise IndexError
                                i += 1 + n
                            else:
                                cols[p[0]].append(float(tok[i]) if p[1][0] == "f" else int(tok[i]))
                                i += 1
                    except (IndexError, ValueError):
                        raise SceneLoadError(f"{path}: line {lineno}: malformed '{el.name}' element {k}")
                out[el.name] = {n: _finish(v, dict((p[0], p) for p in el.props)[n]) for n, v in cols.items()}
        else:
            data = fh.read()
            off = 0
            for el in elements:
                if not el.has_list:
                    dt = np.dtype([(p[0], "<" + p[1]) for p in el.props])
                    nbytes = dt.itemsize * el.count
                    if off + nbytes > len(data):
                        raise SceneLoadError(f"{path}: element '{el.name}': truncated binary data")
                    arr = np.frombuffer(data, dtype=dt, count=el.count, offset=off)
                    off += nbytes
                    out[el.name] = {p[0]: np.array(arr[p[0]]) for p in el.props}
                else:
                    res, off = _read_binary_list_element(data, off, el, path)
                    out[el.name] = res
        return out


def _finish(values, prop):
    if len(prop) == 3:
        lens = {len(v) for v in values}
        if len(lens) == 1 and values:
            return np.stack(values)
        return values
    return np.asarray(values, dtype=prop[1])


def _read_binary_list_element(data, off, el, path):
    # fast path: every list has the same length as the first one
    if el.count == 0:
        return {p[0]: np.zeros((0,), p[-1]) for p in el.props}, off
    try:
        fixed = []
        probe = off
        for p in el.props:
            if len(p) == 3:
                n = int(np.frombuffer(data, "<" + p[1], 1, probe)[0])
                fixed.append((p[0] + "__n", "<" + p[1]))
                fixed.append((p[0], "<" + p[2], (n,)))
                probe += np.dtype(p[1]).itemsize + n * np.dtype(p[2]).itemsize
            else:
                fixed.append((p[0], "<" + p[1]))
                probe += np.dtype(p[1]).itemsize
        dt = np.dtype(fixed)
        if off + dt.itemsize * el.count <= len(data):
            arr = np.frombuffer(data, dt, el.count, off)
            ok = all(
                np.all(arr[p[0] + "__n"] == arr.dtype[p[0]].shape[0]) for p in el.props if len(p) == 3
            )
            if ok:
                return {p[0]: np.array(arr[p[0]]) for p in el.props}, off + dt.itemsize * el.count
    except (ValueError, IndexError):
        pass
    cols = {p[0]: [] for p in el.props}
    for k in range(el.count):
        for p in el.props:
            try:
                if len(p) == 3:
                    n = int(np.frombuffer(data, "<" + p[1], 1, off)[0])
                    off += np.dtype(p[1]).itemsize
                    cols[p[0]].append(np.frombuffer(data, "<" + p[2], n, off).copy())
                    off += n * np.dtype(p[2]).itemsize
                else:
                    cols[p[0]].append(np.frombuffer(data, "<" + p[1], 1, off)[0])
                    off += np.dtype(p[1]).itemsize
            except ValueError:
                raise SceneLoadError(f"{path}: element '{el.name}' {k}: truncated binary data")
    return {n: _finish(v, dict((p[0], p) for p in el.props)[n]) for n, v in cols.items()}, off


def write_ply(path, elements: dict, binary: bool = True, comments=()) -> None:
    """Write ``{element: {property: 1-D array or (N,k) int array for lists}}``.

    2-D integer arrays are written as ``list uchar int`` properties.
    """
    header = ["ply", "format " + ("binary_little_endian 1.0" if binary else "ascii 1.0")]
    header += [f"comment {c}" for c in comments]
    inv = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int", "u4": "uint",
           "f4": "float", "f8": "double"}
    blobs = []
    for name, props in elements.items():
        n = len(next(iter(props.values()))) if props else 0
        header.append(f"element {name} {n}")
        fields = []
        for pname, arr in props.items():
            arr = np.asarray(arr)
            code = arr.dtype.str[1:]
            if arr.ndim == 2:
                header.append(f"property list uchar {inv['i4']} {pname}")
                fields.append((pname + "__n", "<u1", None, arr.shape[1]))
                fields.append((pname, "<i4", (arr.shape[1],), arr.astype("<i4")))
            else:
                header.append(f"property {inv[code]} {pname}")
                fields.append((pname, "<" + code, None, arr))
        if binary:
            dt = np.dtype([(f[0], f[1]) if f[2] is None else (f[0], f[1], f[2]) for f in fields])
            rec = np.empty(n, dtype=dt)
            for f in fields:
                rec[f[0]] = f[3]
            blobs.append(rec.tobytes())
        else:
            rows = []
            for k in range(n):
                toks = []
                for f in fields:
                    if f[0].endswith("__n"):
                        toks.append(str(f[3]))
                    elif f[2] is not None:
                        toks.extend(str(int(x)) for x in f[3][k])
                    else:
                        v = f[3][k]
                        toks.append(repr(float(v)) if f[1][1] == "f" else str(int(v)))
                rows.append(" ".join(toks))
            blobs.append(("\n".join(rows) + ("\n" if rows else "")).encode("ascii"))
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for b in blobs:
            fh.write(b)


def read_obj(path):
    """Return (vertices (V,3), triangles (F,3)) from an OBJ file; polygons are fan-triangulated."""
    path = os.fspath(path)
    verts, faces = [], []
    try:
        fh = open(path, "r", encoding="utf-8", errors="replace")
    except OSError as exc:
        raise SceneLoadError(f"{path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        k = int(tok.split("/")[0])
                        idx.append(k - 1 if k > 0 else len(verts) + k)
                    if len(idx) < 3:
                        raise ValueError
                    for a in range(1, len(idx) - 1):
                        faces.append((idx[0], idx[a], idx[a + 1], lineno))
            except ValueError:
                raise SceneLoadError(f"{path}: line {lineno}: malformed '{parts[0]}' record")
    V = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    for a, b, c, lineno in faces:
        if min(a, b, c) < 0 or max(a, b, c) >= len(V):
            raise SceneLoadError(f"{path}: line {lineno}: vertex index out of range")
    F = np.asarray([f[:3] for f in faces], dtype=np.int64).reshape(-1, 3)
    return V, F


def write_obj(path, vertices, triangles) -> None:
    with open(path, "w") as fh:
        for v in np.asarray(vertices):
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in np.asarray(triangles):
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
