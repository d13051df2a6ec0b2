"""Point-cloud and transform file formats (.xyz, .pcb, 12-number transforms)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geom import PointCloud, RigidTransform

PCB_MAGIC = b"PCB1"


def write_xyz(path, cloud: PointCloud) -> None:
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    np.savetxt(path, data, fmt="%.17g")


def read_xyz(path) -> PointCloud:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append([float(v) for v in line.split()])
    if not rows:
        raise ValueError(f"{path}: no points")
    width = {len(r) for r in rows}
    if width not in ({3}, {6}):
        raise ValueError(f"{path}: every line needs 3 or 6 numbers, found widths {sorted(width)}")
    data = np.array(rows, dtype=np.float64)
    return PointCloud(data[:, :3], data[:, 3:] if data.shape[1] == 6 else None)


def write_pcb(path, cloud: PointCloud) -> None:
    has_normals = cloud.normals is not None
    data = np.hstack([cloud.points, cloud.normals]) if has_normals else cloud.points
    with open(path, "wb") as fh:
        fh.write(PCB_MAGIC)
        fh.write(struct.pack("<IB", len(cloud), int(has_normals)))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_pcb(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if raw[:4] != PCB_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    n, has_normals = struct.unpack_from("<IB", raw, 4)
    width = 6 if has_normals else 3
    data = np.frombuffer(raw, dtype="<f4", count=n * width, offset=9).reshape(n, width)
    data = data.astype(np.float64)
    normals = None
    if has_normals:
        normals = data[:, 3:]
        # f32 storage loses unit length beyond 1e-7; renormalise
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(data[:, :3], normals)


def read_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix == ".pcb":
        return read_pcb(path)
    return read_xyz(path)


def write_cloud(path, cloud: PointCloud) -> None:
    path = Path(path)
    if path.suffix == ".pcb":
        write_pcb(path, cloud)
    else:
        write_xyz(path, cloud)


def write_transform(path, t: RigidTransform) -> None:
    Path(path).write_text(t.to_text())


def read_transform(path) -> RigidTransform:
    return RigidTransform.from_text(Path(path).read_text())


def read_keyvalue(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_keyvalue(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()))
