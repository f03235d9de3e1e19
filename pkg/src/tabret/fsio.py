"""Workspace file plumbing: atomic writes, hashing, JSONL, manifest, lock.

Every artifact write goes through atomic_write_* (temp file in the same
directory, fsync, os.replace) so an interrupted stage never leaves a
truncated file behind. The manifest records, per completed stage, the
hashes of its config slice and of its input and output files; a stage
whose recorded hashes all still match is skipped on re-run.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

# CRC-64/XZ (ECMA-182 polynomial, reflected, init/xorout all-ones), as used
# by xz and liblzma. Table-driven; stdlib has crc32 only.
_CRC64_POLY = 0xC96C5795D7870F42

_CRC64_TABLE: list[int] = []
for _i in range(256):
    _c = _i
    for _ in range(8):
        _c = (_c >> 1) ^ _CRC64_POLY if _c & 1 else _c >> 1
    _CRC64_TABLE.append(_c)
del _i, _c


def crc64(data: bytes, value: int = 0) -> int:
    """CRC-64/XZ of data; pass a previous value to continue a running CRC."""
    crc = value ^ 0xFFFFFFFFFFFFFFFF
    for b in data:
        crc = (crc >> 8) ^ _CRC64_TABLE[(crc ^ b) & 0xFF]
    return crc ^ 0xFFFFFFFFFFFFFFFF


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_json(obj: Any) -> str:
    """Hash of a canonical JSON rendering (sorted keys, no whitespace)."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return sha256_bytes(payload.encode("utf-8"))


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write data to path via a same-directory temp file and os.replace."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=p.parent, prefix=f".{p.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, p)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    """Atomically write records as JSON Lines (one compact object per line)."""
    lines = [
        json.dumps(rec, sort_keys=True, separators=(", ", ": "), ensure_ascii=False)
        for rec in records
    ]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise ValueError(f"{path}:{line_no}: expected a JSON object")
            yield obj


class Manifest:
    """Append-only record of completed stages keyed by content hashes.

    One JSON object per line: {"stage", "config_hash", "input_hashes",
    "output_hashes", "wall_time_s"}; hash maps go path -> sha256, with
    paths stored relative to the workspace when inside it and absolute
    otherwise (external corpus or gold files). The last entry for a
    stage wins. A stage is a cache hit when its config hash matches and
    every recorded input and output file still hashes the same.
    """

    def __init__(self, workspace: str | Path) -> None:
        self.workspace = Path(workspace)
        self.path = self.workspace / "manifest.jsonl"
        self._entries: dict[str, dict] = {}
        if self.path.exists():
            for obj in read_jsonl(self.path):
                stage = obj.get("stage")
                if isinstance(stage, str):
                    self._entries[stage] = obj

    def _key(self, p: str | Path) -> str:
        p = Path(p)
        try:
            return str(p.resolve().relative_to(self.workspace.resolve()))
        except ValueError:
            return str(p.resolve())

    def record(
        self,
        stage: str,
        config_hash: str,
        input_paths: Iterable[str | Path],
        output_paths: Iterable[str | Path],
        wall_time_s: float,
    ) -> None:
        entry = {
            "stage": stage,
            "config_hash": config_hash,
            "input_hashes": {self._key(p): sha256_file(p) for p in input_paths},
            "output_hashes": {self._key(p): sha256_file(p) for p in output_paths},
            "wall_time_s": round(wall_time_s, 3),
        }
        self._entries[stage] = entry
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True, separators=(", ", ": ")) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def is_fresh(self, stage: str, config_hash: str) -> bool:
        """True when the stage's recorded hashes all match the files on disk."""
        entry = self._entries.get(stage)
        if entry is None or entry.get("config_hash") != config_hash:
            return False
        for section in ("input_hashes", "output_hashes"):
            hashes = entry.get(section)
            if not isinstance(hashes, dict):
                return False
            for key, digest in hashes.items():
                f = Path(key) if Path(key).is_absolute() else self.workspace / key
                if not f.exists() or sha256_file(f) != digest:
                    return False
        return True


def write_matrix_bin(path: str | Path, matrix: np.ndarray) -> None:
    """u32 row count, u32 dim, row-major little-endian f64, trailing CRC-64."""
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    blob = struct.pack("<II", m.shape[0], m.shape[1]) + m.tobytes()
    atomic_write_bytes(path, blob + struct.pack("<Q", crc64(blob)))


def read_matrix_bin(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise ValueError(f"{path}: truncated matrix file")
    payload, tail = blob[:-8], blob[-8:]
    if crc64(payload) != struct.unpack("<Q", tail)[0]:
        raise ValueError(f"{path}: checksum mismatch (truncated or corrupt)")
    count, dim = struct.unpack_from("<II", payload)
    data = np.frombuffer(payload[8:], dtype="<f8")
    if data.size != count * dim:
        raise ValueError(f"{path}: payload size does not match header")
    return data.reshape(count, dim).copy()


class WorkspaceLock:
    """Exclusive advisory lock on a workspace directory via O_EXCL lock file."""

    def __init__(self, workspace: str | Path) -> None:
        self.lock_path = Path(workspace) / ".lock"
        self._fd: int | None = None

    def __enter__(self) -> "WorkspaceLock":
        self.lock_path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"workspace is locked by another run (remove {self.lock_path} "
                "if no other process is active)"
            ) from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            os.unlink(self.lock_path)
        except OSError:
            pass
