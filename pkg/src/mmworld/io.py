"""On-disk formats: TNSR tensors, RIMG range images, ASCII PLY, binary PPM, JSON."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Malformed input file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


def atomic_write(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    atomic_write(path, dumps_json(obj).encode())


def read_json(path):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e.msg}", len(text[: e.pos].encode())) from None


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- TNSR

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1


def tnsr_bytes(arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = TNSR_MAGIC + struct.pack("<BBI", TNSR_VERSION, 0, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def tnsr_from_bytes(buf: bytes, name="<bytes>"):
    if buf[:4] != TNSR_MAGIC:
        raise FormatError(f"{name}: bad TNSR magic", 0)
    if len(buf) < 10:
        raise FormatError(f"{name}: truncated TNSR header", len(buf))
    version, dtype, ndim = struct.unpack_from("<BBI", buf, 4)
    if version != TNSR_VERSION:
        raise FormatError(f"{name}: unsupported TNSR version {version}", 4)
    if dtype != 0:
        raise FormatError(f"{name}: unsupported TNSR dtype {dtype}", 5)
    off = 10
    if len(buf) < off + 8 * ndim:
        raise FormatError(f"{name}: truncated TNSR extents", len(buf))
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    n = int(np.prod(shape)) if ndim else 1
    if len(buf) != off + 4 * n:
        raise FormatError(f"{name}: payload holds {len(buf) - off} bytes, expected {4 * n}", off)
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)


def save_tnsr(path, arr):
    atomic_write(path, tnsr_bytes(arr))


def load_tnsr(path):
    return tnsr_from_bytes(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- RIMG

RIMG_MAGIC = b"RIMG"
RIMG_VERSION = 1
_RIMG_HEAD = struct.Struct("<BIIfffI")


def rimg_bytes(img) -> bytes:
    s = img.spec
    ranges = np.ascontiguousarray(img.ranges, dtype="<f4")
    valid = np.ascontiguousarray(img.valid, dtype=np.uint8)
    h, w = ranges.shape
    head = RIMG_MAGIC + _RIMG_HEAD.pack(RIMG_VERSION, h, w, s.fov_up, s.fov_down, s.r_max, s.repeat_k)
    return head + ranges.tobytes() + valid.tobytes()


def rimg_from_bytes(buf: bytes, name="<bytes>"):
    from .rangeview import RangeImage, RangeSpec

    if buf[:4] != RIMG_MAGIC:
        raise FormatError(f"{name}: bad RIMG magic", 0)
    if len(buf) < 4 + _RIMG_HEAD.size:
        raise FormatError(f"{name}: truncated RIMG header", len(buf))
    version, h, w, fu, fd, rmax, k = _RIMG_HEAD.unpack_from(buf, 4)
    if version != RIMG_VERSION:
        raise FormatError(f"{name}: unsupported RIMG version {version}", 4)
    off = 4 + _RIMG_HEAD.size
    need = off + h * w * 5
    if len(buf) != need:
        raise FormatError(f"{name}: RIMG body is {len(buf) - off} bytes, expected {h * w * 5}", off)
    ranges = np.frombuffer(buf, "<f4", h * w, off).reshape(h, w).astype(np.float32)
    valid = np.frombuffer(buf, np.uint8, h * w, off + 4 * h * w).reshape(h, w).astype(bool)
    spec = RangeSpec(beams=h, azimuth_bins=w, fov_up=float(fu), fov_down=float(fd), r_max=float(rmax), repeat_k=int(k))
    return RangeImage(spec, ranges, valid)


def save_rimg(path, img):
    atomic_write(path, rimg_bytes(img))


def load_rimg(path):
    return rimg_from_bytes(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- PLY


def ply_bytes(points) -> bytes:
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in pts.tolist()]
    return ("\n".join(lines) + "\n").encode()


def ply_from_bytes(buf: bytes, name="<bytes>"):
    text = buf.decode("ascii", errors="replace")
    pos = 0
    lines = []
    for raw in text.splitlines(keepends=True):
        lines.append((pos, raw.strip()))
        pos += len(raw.encode())
    if not lines or lines[0][1] != "ply":
        raise FormatError(f"{name}: missing 'ply' signature", 0)
    n = None
    props = []
    i = 1
    while i < len(lines) and lines[i][1] != "end_header":
        off, line = lines[i]
        parts = line.split()
        if parts[:1] == ["format"] and parts[1:2] != ["ascii"]:
            raise FormatError(f"{name}: only ASCII PLY is supported", off)
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["property"] and n is not None:
            props.append(parts[-1])
        i += 1
    if i == len(lines):
        raise FormatError(f"{name}: missing end_header", pos)
    if n is None or props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{name}: need a vertex element with x, y, z properties", lines[i][0])
    body = lines[i + 1 : i + 1 + n]
    if len(body) < n:
        raise FormatError(f"{name}: expected {n} vertices, found {len(body)}", pos)
    pts = np.empty((n, 3), dtype=np.float64)
    for j, (off, line) in enumerate(body):
        try:
            pts[j] = [float(v) for v in line.split()[:3]]
        except ValueError:
            raise FormatError(f"{name}: bad vertex line {line!r}", off) from None
    return pts.astype(np.float32).astype(np.float64)


def save_ply(path, points):
    atomic_write(path, ply_bytes(points))


def load_ply(path):
    return ply_from_bytes(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- PPM


def ppm_bytes(img) -> bytes:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode() + arr.tobytes()


def ppm_from_bytes(buf: bytes, name="<bytes>"):
    if buf[:2] != b"P6":
        raise FormatError(f"{name}: bad PPM magic", 0)
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        try:
            fields.append(int(buf[start:pos]))
        except ValueError:
            raise FormatError(f"{name}: bad PPM header field", start) from None
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{name}: only 8-bit PPM supported", pos)
    pos += 1
    if len(buf) - pos != w * h * 3:
        raise FormatError(f"{name}: PPM body is {len(buf) - pos} bytes, expected {w * h * 3}", pos)
    return np.frombuffer(buf, np.uint8, offset=pos).reshape(h, w, 3).astype(np.float32) / 255.0


def save_ppm(path, img):
    atomic_write(path, ppm_bytes(img))


def load_ppm(path):
    return ppm_from_bytes(Path(path).read_bytes(), str(path))
