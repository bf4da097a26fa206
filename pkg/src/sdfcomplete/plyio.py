"""Minimal PLY reader/writer for point clouds and triangle meshes."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .core import PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _vertex_dtype(cloud: PointCloud) -> list[tuple[str, str, str]]:
    # (name, ply type, numpy type)
    props = [("x", "float", "f4"), ("y", "float", "f4"), ("z", "float", "f4")]
    if cloud.normals is not None:
        props += [("nx", "float", "f4"), ("ny", "float", "f4"), ("nz", "float", "f4")]
    if cloud.labels is not None:
        props.append(("label", "int", "i4"))
    return props


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    props = _vertex_dtype(cloud)
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(cloud)}"]
    header += [f"property {t} {n}" for n, t, _ in props]
    header.append("end_header")
    rec = np.zeros(len(cloud), dtype=[(n, "<" + d) for n, _, d in props])
    rec["x"], rec["y"], rec["z"] = cloud.points.T
    if cloud.normals is not None:
        rec["nx"], rec["ny"], rec["nz"] = cloud.normals.T
    if cloud.labels is not None:
        rec["label"] = cloud.labels
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            for row in rec:
                fh.write((" ".join(repr(v.item()) for v in row) + "\n").encode("ascii"))


def read_ply(path) -> PointCloud:
    """Read the vertex element of an ascii or binary little-endian PLY file."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii").splitlines()
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ValueError("property before any element")
            if tok[1] == "list":
                if elements[-1][0] == "vertex":
                    raise ValueError("list properties in the vertex element are not supported")
                continue                # later elements are never read
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"unsupported PLY format {fmt}")
    if not elements or elements[0][0] != "vertex":
        raise ValueError("first PLY element must be 'vertex'")
    _, n, props = elements[0]
    dtype = np.dtype([(name, "<" + t) for name, t in props])
    if fmt == "ascii":
        text = data[body_start:].decode("ascii").splitlines()[:n]
        table = np.loadtxt(io.StringIO("\n".join(text)), ndmin=2) if n else np.zeros((0, len(props)))
        rec = np.zeros(n, dtype=dtype)
        for i, (name, _) in enumerate(props):
            rec[name] = table[:, i]
    else:
        rec = np.frombuffer(data, dtype=dtype, count=n, offset=body_start)
    names = dtype.names
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    normals = None
    if {"nx", "ny", "nz"} <= set(names):
        normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float64)
    labels = rec["label"].astype(np.int64) if "label" in names else None
    return PointCloud(pts, normals, labels)


def write_mesh_ply(path, vertices: np.ndarray, triangles: np.ndarray, labels=None) -> None:
    """Binary little-endian mesh; per-vertex labels become ``label`` plus palette colors."""
    from .extract import LABEL_PALETTE

    v = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    f = np.asarray(triangles, dtype="<i4").reshape(-1, 3)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(v)}",
              "property float x", "property float y", "property float z"]
    vdt = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if labels is not None:
        header += ["property int label", "property uchar red", "property uchar green", "property uchar blue"]
        vdt += [("label", "<i4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    header += [f"element face {len(f)}", "property list uchar int vertex_indices", "end_header"]
    vrec = np.zeros(len(v), dtype=vdt)
    vrec["x"], vrec["y"], vrec["z"] = v.T
    if labels is not None:
        lab = np.asarray(labels, dtype=np.int64)
        colors = LABEL_PALETTE[lab % len(LABEL_PALETTE)]
        vrec["label"] = lab
        vrec["red"], vrec["green"], vrec["blue"] = colors.T
    frec = np.zeros(len(f), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    frec["n"] = 3
    frec["i"] = f
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(vrec.tobytes())
        fh.write(frec.tobytes())


def write_mesh_obj(path, vertices: np.ndarray, triangles: np.ndarray) -> None:
    with open(path, "w") as fh:
        for p in np.asarray(vertices, dtype=np.float64):
            fh.write(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
        for t in np.asarray(triangles, dtype=np.int64) + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")
