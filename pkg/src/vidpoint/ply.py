"""PLY import/export of point clouds for debugging in external viewers.

Coordinates are written as 32-bit floats. Extra channels become float
properties ``c0, c1, ...``. Both ``ascii`` and ``binary_little_endian``
encodings are supported.
"""

from __future__ import annotations

import numpy as np

from .errors import GeometryError
from .geometry import FrameTag, PointCloud


def write_ply(path, cloud: PointCloud, binary=False):
    k = len(cloud)
    n_ch = 0 if cloud.channels is None else cloud.channels.shape[1]
    names = ["x", "y", "z"] + [f"c{i}" for i in range(n_ch)]
    fmt = "binary_little_endian" if binary else "ascii"
    header = [
        "ply",
        f"format {fmt} 1.0",
        f"comment frame_tag {cloud.frame_tag.value}",
        f"element vertex {k}",
        *(f"property float {n}" for n in names),
        "end_header",
    ]
    data = cloud.points if n_ch == 0 else np.hstack([cloud.points, cloud.channels])
    data = data.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.tobytes())
        else:
            for row in data:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


def read_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise GeometryError(f"{path}: not a PLY file")
        fmt, count, props, tag = None, 0, [], FrameTag.WORLD
        while True:
            line = fh.readline()
            if not line:
                raise GeometryError(f"{path}: missing end_header")
            parts = line.decode("ascii").split()
            if not parts:
                continue
            if parts[0] == "end_header":
                break
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element" and parts[1] == "vertex":
                count = int(parts[2])
            elif parts[0] == "property":
                if parts[1] not in ("float", "float32"):
                    raise GeometryError(f"{path}: unsupported property type {parts[1]}")
                props.append(parts[2])
            elif parts[:2] == ["comment", "frame_tag"]:
                tag = FrameTag(parts[2])
        if props[:3] != ["x", "y", "z"]:
            raise GeometryError(f"{path}: first properties must be x, y, z")
        ncol = len(props)
        if fmt == "binary_little_endian":
            raw = fh.read(count * ncol * 4)
            if len(raw) != count * ncol * 4:
                raise GeometryError(f"{path}: truncated vertex data")
            data = np.frombuffer(raw, dtype="<f4").reshape(count, ncol)
        elif fmt == "ascii":
            rows = fh.read().split()
            data = np.array(rows, dtype=np.float32).reshape(count, ncol)
        else:
            raise GeometryError(f"{path}: unsupported PLY format {fmt}")
    data = data.astype(np.float64)
    channels = data[:, 3:] if ncol > 3 else None
    return PointCloud(data[:, :3], channels, tag)
