"""Independent implementations of the interchange file formats.

The simulator side reads and writes the same layouts; this module is kept
dependency-free of it on purpose, so the formats themselves are the contract.

FLD1 field file: magic 'FLD1', little-endian float64 header (nx, ny, Dx, Dy),
row-major float64 log_K and phi grids of shape (ny, nx), then uint8 labels.

DONW1 weight file: magic 'DONW1', u32 JSON config length + JSON, repeated
tensor records (u16 name length, name, u8 dtype code 1 = f32, u8 ndim,
ndim * u64 dims, raw data), trailing u64 checksum (low 8 bytes of SHA-256).

DOES1 stats file: magic 'DOES1', u64 MN, float64 error mean (MN), float64
covariance (MN*MN row-major), trailing u64 checksum as above.
"""

import hashlib
import json
import struct

import numpy as np


def checksum64(payload: bytes) -> int:
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def read_fld(path):
    """Returns (log_K, phi, labels, (Dx, Dy)) with grids shaped (ny, nx)."""
    with open(path, "rb") as fh:
        if fh.read(4) != b"FLD1":
            raise ValueError(f"{path}: not an FLD1 field file")
        nxf, nyf, Dx, Dy = struct.unpack("<4d", fh.read(32))
        nx, ny = int(nxf), int(nyf)
        count = nx * ny
        log_K = np.frombuffer(fh.read(8 * count), "<f8").reshape(ny, nx).copy()
        phi = np.frombuffer(fh.read(8 * count), "<f8").reshape(ny, nx).copy()
        labels = np.frombuffer(fh.read(count), np.uint8).reshape(ny, nx).copy()
    return log_K, phi, labels, (Dx, Dy)


def write_donw1(path, config: dict, tensors: dict) -> None:
    parts = [b"DONW1"]
    blob = json.dumps(config, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    for name in sorted(tensors):
        t = np.asarray(tensors[name], dtype="<f4")
        if t.ndim:
            t = np.ascontiguousarray(t)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", 1, t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape) if t.ndim else b"")
        parts.append(t.tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<Q", checksum64(payload)))


def read_donw1(path):
    """Returns (config dict, name -> float32 array). Verifies the checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != b"DONW1":
        raise ValueError("not a DONW1 weight file")
    payload, tail = blob[:-8], blob[-8:]
    if struct.unpack("<Q", tail)[0] != checksum64(payload):
        raise ValueError("weight file checksum mismatch")
    off = 5
    (jlen,) = struct.unpack_from("<I", payload, off)
    off += 4
    config = json.loads(payload[off:off + jlen].decode())
    off += jlen
    tensors = {}
    while off < len(payload):
        (nlen,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off:off + nlen].decode()
        off += nlen
        dtype, ndim = struct.unpack_from("<BB", payload, off)
        off += 2
        if dtype != 1:
            raise ValueError(f"{name}: unsupported dtype code {dtype}")
        dims = struct.unpack_from(f"<{ndim}Q", payload, off) if ndim else ()
        off += 8 * ndim
        count = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(payload, "<f4", count=count, offset=off).reshape(dims).copy()
        off += 4 * count
    return config, tensors


def write_does1(path, eps_mean: np.ndarray, Sigma: np.ndarray) -> None:
    eps_mean = np.asarray(eps_mean, float)
    Sigma = np.asarray(Sigma, float)
    mn = eps_mean.size
    if Sigma.shape != (mn, mn):
        raise ValueError("covariance shape does not match the error mean")
    payload = b"DOES1" + struct.pack("<Q", mn)
    payload += np.ascontiguousarray(eps_mean, "<f8").tobytes()
    payload += np.ascontiguousarray(Sigma, "<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<Q", checksum64(payload)))
