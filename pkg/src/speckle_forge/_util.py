"""Small shared helpers: atomic file writes, hashing, thread-count resolution."""
from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path

THREADS_ENV = "SPECKLE_FORGE_THREADS"


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file + rename in the same directory."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def resolve_threads(requested: int | None) -> int:
    """Worker count for parallel sections: 0 or None means auto (all cores).

    Falls back to the SPECKLE_FORGE_THREADS environment variable when no
    explicit request is given.
    """
    if requested is None:
        env = os.environ.get(THREADS_ENV, "").strip()
        requested = int(env) if env else 0
    if requested < 0:
        raise ValueError("thread count must be >= 0")
    if requested == 0:
        return os.cpu_count() or 1
    return requested
