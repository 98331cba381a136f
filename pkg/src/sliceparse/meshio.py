"""File formats: OBJ/OFF meshes, flat binary grid dumps, and PGM images.

Mesh readers accept vertices and triangular faces only; any other record
makes the file invalid and raises with a diagnostic naming the offending
line.  The grid dump is three little-endian 32-bit dims followed by
row-major occupancy bytes (0 or 1).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geom import MeshError, TriMesh, VoxelGrid


def read_mesh(path) -> TriMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".off":
        return read_off(path)
    raise MeshError(f"unsupported mesh format '{suffix}' (expected .obj or .off)")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) != 4:
                raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
            verts.append([float(x) for x in parts[1:]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise MeshError(f"{path}:{lineno}: only triangular faces are supported")
            # tolerate v/vt/vn references but use the vertex index only
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
        else:
            raise MeshError(f"{path}:{lineno}: unsupported record '{parts[0]}'")
    return TriMesh(np.asarray(verts, dtype=float).reshape(-1, 3), faces)


def read_off(path) -> TriMesh:
    tokens: list[str] = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise MeshError(f"{path}: missing OFF header")
    it = iter(tokens[1:])
    try:
        nv, nf, _ne = int(next(it)), int(next(it)), int(next(it))
        verts = [[float(next(it)) for _ in range(3)] for _ in range(nv)]
        faces = []
        for _ in range(nf):
            arity = int(next(it))
            if arity != 3:
                raise MeshError(f"{path}: only triangular faces are supported (got {arity}-gon)")
            faces.append([int(next(it)) for _ in range(3)])
    except StopIteration:
        raise MeshError(f"{path}: truncated OFF file") from None
    return TriMesh(np.asarray(verts, dtype=float).reshape(-1, 3), faces)


def write_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def write_grid(path, grid: VoxelGrid) -> None:
    nx, ny, nz = grid.dims
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", nx, ny, nz))
        fh.write(grid.occupancy.astype(np.uint8).tobytes(order="C"))


def read_grid(path, voxel_size: float = 1.0, origin=(0.0, 0.0, 0.0)) -> VoxelGrid:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ValueError(f"{path}: truncated grid dump")
    nx, ny, nz = struct.unpack_from("<3I", data)
    body = np.frombuffer(data, dtype=np.uint8, offset=12)
    if len(body) != nx * ny * nz:
        raise ValueError(f"{path}: payload size {len(body)} does not match dims {(nx, ny, nz)}")
    return VoxelGrid(body.reshape(nx, ny, nz).astype(bool), voxel_size, origin)


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary (P5) PGM, true pixels white."""
    mask = np.asarray(mask)
    img = np.where(mask, 255, 0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1
    img = np.frombuffer(data, dtype=np.uint8, offset=pos, count=w * h).reshape(h, w)
    return img > maxval // 2
