"""Framed binary record files for episodes and triplets.

File layout, all little-endian::

    offset  size  field
    0       4     magic b"VPDS"
    4       2     u16 format version (1)
    6       2     u16 record kind (1 = episodes, 2 = triplets)
    8       4     u32 record count
    12      4     u32 nominal points per cloud (0 = variable)
    16      4     u32 channels per point (0)
    20      8     u64 body length in bytes
    28      4     reserved, zero
    32      ...   body: records, each ``u32 payload length`` + payload
    end-32  32    SHA-256 of the body bytes

Payload building blocks:

* string: ``u16 n`` + n UTF-8 bytes
* pose: 8 x f32 ``(qw, qx, qy, qz, tx, ty, tz, scale)``
* cloud: ``u32 n``, ``u8 frame tag`` (0 camera, 1 world, 2 normalized),
  then ``n*3`` f32 coordinates
* camera: 4 x f32 ``(fx, fy, cx, cy)``, 2 x u32 ``(width, height)``, pose
* primitive: ``u8 kind`` (0 sphere, 1 box, 2 cylinder), string id, pose,
  ``u8 m`` + m x f32 extents
* scene: ``u8 has_table`` [+ 5 x f32 (height, cx, cy, hx, hy)],
  ``u16 n`` + n primitives, ``u8 has_effector`` [+ primitive],
  ``u8 has_target`` [+ string]
* episode record: ``i64 seed``, ``u8 has_ref_camera`` [+ camera],
  ``u32 frames``, then per frame ``u32 timestep``, scene, ref cloud,
  rand cloud, rand camera, 3 x f32 ``(yaw, pitch, distance scale)``
* triplet record: p_org cloud, p_world cloud, p_ref cloud, extrinsics pose

All floats are stored as 32-bit; values read back are the float32
roundings of what was written (quaternions are renormalized on read).
"""

from __future__ import annotations

import hashlib
import io
import struct

import numpy as np

from .errors import DataError
from .geometry import CameraModel, FrameTag, PointCloud, Sim3Transform
from .synthscene import (Episode, Frame, Primitive, PrimitiveKind, Scene, Table,
                         Triplet)

MAGIC = b"VPDS"
VERSION = 1
KIND_EPISODES = 1
KIND_TRIPLETS = 2
HEADER = struct.Struct("<4sHHIIIQI")
HEADER_SIZE = HEADER.size  # 32
HASH_SIZE = 32

_TAGS = [FrameTag.CAMERA, FrameTag.WORLD, FrameTag.NORMALIZED]
_KINDS = [PrimitiveKind.SPHERE, PrimitiveKind.BOX, PrimitiveKind.CYLINDER]


class DatastoreError(DataError):
    pass


class HeaderError(DatastoreError):
    pass


class VersionError(DatastoreError):
    pass


class TruncationError(DatastoreError):
    def __init__(self, path, expected, actual):
        super().__init__(f"{path}: truncated file, expected {expected} bytes, found {actual}")
        self.expected = expected
        self.actual = actual


class HashMismatchError(DatastoreError):
    pass


class CountMismatchError(DatastoreError):
    pass


# -- encoding -----------------------------------------------------------------------

class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt, *vals):
        self.buf.write(struct.pack("<" + fmt, *vals))

    def string(self, s):
        enc = s.encode("utf-8")
        self.pack("H", len(enc))
        self.buf.write(enc)

    def floats(self, arr):
        self.buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def pose(self, p: Sim3Transform):
        self.floats(np.concatenate([p.rotation, p.translation, [p.scale]]))

    def cloud(self, c: PointCloud):
        self.pack("IB", len(c), _TAGS.index(c.frame_tag))
        self.floats(c.points)

    def camera(self, cam: CameraModel):
        self.floats([cam.fx, cam.fy, cam.cx, cam.cy])
        self.pack("II", cam.width, cam.height)
        self.pose(cam.pose)

    def primitive(self, p: Primitive):
        self.pack("B", _KINDS.index(p.kind))
        self.string(p.id)
        self.pose(p.pose)
        self.pack("B", len(p.size))
        self.floats(p.size)

    def scene(self, s: Scene):
        self.pack("B", s.table is not None)
        if s.table is not None:
            t = s.table
            self.floats([t.height, *t.center, *t.half_extents])
        self.pack("H", len(s.objects))
        for o in s.objects:
            self.primitive(o)
        self.pack("B", s.effector is not None)
        if s.effector is not None:
            self.primitive(s.effector)
        self.pack("B", s.target_id is not None)
        if s.target_id is not None:
            self.string(s.target_id)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def unpack(self, fmt):
        st = struct.Struct("<" + fmt)
        if self.off + st.size > len(self.data):
            raise DatastoreError("record payload ends early")
        vals = st.unpack_from(self.data, self.off)
        self.off += st.size
        return vals

    def string(self):
        (n,) = self.unpack("H")
        s = self.data[self.off:self.off + n].decode("utf-8")
        self.off += n
        return s

    def floats(self, n):
        if self.off + 4 * n > len(self.data):
            raise DatastoreError("record payload ends early")
        arr = np.frombuffer(self.data, "<f4", n, self.off).astype(np.float64)
        self.off += 4 * n
        return arr

    def pose(self):
        v = self.floats(8)
        q = v[:4] / np.linalg.norm(v[:4])
        return Sim3Transform(q, v[4:7], v[7])

    def cloud(self):
        n, tag = self.unpack("IB")
        return PointCloud(self.floats(3 * n).reshape(n, 3), frame_tag=_TAGS[tag])

    def camera(self):
        fx, fy, cx, cy = self.floats(4)
        w, h = self.unpack("II")
        return CameraModel(fx, fy, cx, cy, w, h, self.pose())

    def primitive(self):
        (kind,) = self.unpack("B")
        pid = self.string()
        pose = self.pose()
        (m,) = self.unpack("B")
        return Primitive(_KINDS[kind], pose, tuple(self.floats(m)), pid)

    def scene(self):
        table = None
        if self.unpack("B")[0]:
            h, cx, cy, hx, hy = self.floats(5)
            table = Table(h, (cx, cy), (hx, hy))
        (n,) = self.unpack("H")
        objects = tuple(self.primitive() for _ in range(n))
        effector = self.primitive() if self.unpack("B")[0] else None
        target = self.string() if self.unpack("B")[0] else None
        return Scene(table, objects, effector, target)


def _episode_payload(ep: Episode) -> bytes:
    w = _Writer()
    w.pack("qB", ep.seed, ep.ref_camera is not None)
    if ep.ref_camera is not None:
        w.camera(ep.ref_camera)
    w.pack("I", len(ep.frames))
    for f in ep.frames:
        w.pack("I", f.timestep)
        w.scene(f.scene)
        w.cloud(f.ref_cloud)
        w.cloud(f.rand_cloud)
        w.camera(f.rand_camera)
        w.floats(f.rand_view)
    return w.buf.getvalue()


def _read_episode(r: _Reader) -> Episode:
    seed, has_ref = r.unpack("qB")
    ref = r.camera() if has_ref else None
    (n,) = r.unpack("I")
    frames = []
    for _ in range(n):
        (t,) = r.unpack("I")
        frames.append(Frame(t, r.scene(), r.cloud(), r.cloud(), r.camera(),
                            tuple(r.floats(3))))
    return Episode(tuple(frames), seed, ref)


def _triplet_payload(tr: Triplet) -> bytes:
    w = _Writer()
    w.cloud(tr.p_org)
    w.cloud(tr.p_world)
    w.cloud(tr.p_ref)
    w.pose(tr.extrinsics)
    return w.buf.getvalue()


def _read_triplet(r: _Reader) -> Triplet:
    return Triplet(r.cloud(), r.cloud(), r.cloud(), r.pose())


# -- files ----------------------------------------------------------------------------

def _write(path, kind, payloads, point_count) -> str:
    body = b"".join(struct.pack("<I", len(p)) + p for p in payloads)
    digest = hashlib.sha256(body).digest()
    header = HEADER.pack(MAGIC, VERSION, kind, len(payloads), point_count, 0, len(body), 0)
    try:
        with open(path, "wb") as fh:
            fh.write(header + body + digest)
    except OSError as exc:
        raise DatastoreError(f"cannot write {path}: {exc}") from exc
    return digest.hex()


def _nominal_points(clouds) -> int:
    sizes = {len(c) for c in clouds}
    return sizes.pop() if len(sizes) == 1 else 0


def write_episodes(episodes, path) -> str:
    """Write episodes; returns the SHA-256 fingerprint of the body."""
    episodes = list(episodes)
    clouds = [c for e in episodes for f in e.frames for c in (f.ref_cloud, f.rand_cloud)]
    return _write(path, KIND_EPISODES, [_episode_payload(e) for e in episodes],
                  _nominal_points(clouds))


def write_triplets(triplets, path) -> str:
    triplets = list(triplets)
    clouds = [c for t in triplets for c in (t.p_org, t.p_world, t.p_ref)]
    return _write(path, KIND_TRIPLETS, [_triplet_payload(t) for t in triplets],
                  _nominal_points(clouds))


def read_header(path):
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
    if len(head) < HEADER_SIZE:
        raise HeaderError(f"{path}: file too short for a header ({len(head)} bytes)")
    magic, version, kind, count, points, channels, body_len, _ = HEADER.unpack(head)
    if magic != MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported format version {version}")
    return {"kind": kind, "records": count, "point_count": points,
            "channel_count": channels, "body_length": body_len}


def _read(path, expect_kind):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DatastoreError(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise HeaderError(f"{path}: file too short for a header ({len(raw)} bytes)")
    hdr = read_header(path)
    if hdr["kind"] != expect_kind:
        raise HeaderError(f"{path}: record kind {hdr['kind']}, expected {expect_kind}")
    expected = HEADER_SIZE + hdr["body_length"] + HASH_SIZE
    if len(raw) != expected:
        raise TruncationError(path, expected, len(raw))
    body = raw[HEADER_SIZE:HEADER_SIZE + hdr["body_length"]]
    if hashlib.sha256(body).digest() != raw[-HASH_SIZE:]:
        raise HashMismatchError(f"{path}: body hash does not match footer")
    records, off = [], 0
    while off < len(body):
        (n,) = struct.unpack_from("<I", body, off)
        records.append(body[off + 4: off + 4 + n])
        off += 4 + n
    if len(records) != hdr["records"] or off != len(body):
        raise CountMismatchError(
            f"{path}: header declares {hdr['records']} records, body holds {len(records)}")
    return records


def read_episodes(path) -> list:
    return [_read_episode(_Reader(p)) for p in _read(path, KIND_EPISODES)]


def read_triplets(path) -> list:
    return [_read_triplet(_Reader(p)) for p in _read(path, KIND_TRIPLETS)]


def fingerprint(path) -> str:
    """Body hash stored in the file footer (validated)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    hdr = read_header(path)
    expected = HEADER_SIZE + hdr["body_length"] + HASH_SIZE
    if len(raw) != expected:
        raise TruncationError(path, expected, len(raw))
    return raw[-HASH_SIZE:].hex()
