"""Little-endian binary checkpoint holding a posterior ensemble.

Layout::

    b"BSEG1"
    u32 header length, header (UTF-8 ``key = value`` lines: method, seed,
        snapshots, arch.input_channels, arch.widths, arch.side)
    per snapshot:
        i32 cycle, i32 epoch, f64 lr, u32 parameter count
        per parameter:
            u32 name length, name bytes (UTF-8), u32 rank,
            rank x u64 extents, f32 payload (row-major)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ArchConfig
from .sampler import PosteriorEnsemble, Snapshot

MAGIC = b"BSEG1"


class CheckpointError(ValueError):
    pass


def _header(ensemble: PosteriorEnsemble, method: str, seed: int) -> bytes:
    a = ensemble.arch
    lines = [f"method = {method}", f"seed = {seed}", f"snapshots = {len(ensemble)}",
             f"arch.input_channels = {a.input_channels}",
             f"arch.widths = {','.join(map(str, a.widths))}", f"arch.side = {a.side}"]
    return ("\n".join(lines) + "\n").encode()


def dumps(ensemble: PosteriorEnsemble, method: str, seed: int) -> bytes:
    head = _header(ensemble, method, seed)
    out = [MAGIC, struct.pack("<I", len(head)), head]
    for snap in ensemble.snapshots:
        out.append(struct.pack("<iidI", snap.cycle, snap.epoch, snap.lr, len(snap.params)))
        for name, arr in snap.params.items():
            raw = name.encode()
            out.append(struct.pack("<I", len(raw)) + raw)
            out.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save(path, ensemble: PosteriorEnsemble, method: str, seed: int) -> None:
    Path(path).write_bytes(dumps(ensemble, method, seed))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes, path="<bytes>") -> tuple[PosteriorEnsemble, dict]:
    """Return (ensemble, header dict)."""
    r = _Reader(data, path)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: unknown magic/version {magic!r}")
    (hlen,) = r.unpack("<I", "header length")
    header = {}
    for line in r.take(hlen, "header").decode().splitlines():
        key, _, value = line.partition("=")
        header[key.strip()] = value.strip()
    try:
        arch = ArchConfig(int(header["arch.input_channels"]),
                          tuple(int(w) for w in header["arch.widths"].split(",")),
                          int(header["arch.side"]))
        count = int(header["snapshots"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from None
    ensemble = PosteriorEnsemble(arch)
    for i in range(count):
        cycle, epoch, lr, nparams = r.unpack("<iidI", f"snapshot {i} metadata")
        params = {}
        for _ in range(nparams):
            (nlen,) = r.unpack("<I", "name length")
            name = r.take(nlen, "name").decode()
            (rank,) = r.unpack("<I", f"rank of {name}")
            dims = r.unpack(f"<{rank}Q", f"extents of {name}")
            size = int(np.prod(dims, dtype=np.int64))
            payload = r.take(4 * size, f"payload of {name}")
            params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        ensemble.snapshots.append(Snapshot(params, cycle, epoch, lr))
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    return ensemble, header


def load(path) -> tuple[PosteriorEnsemble, dict]:
    return loads(Path(path).read_bytes(), path)
