"""Shared label encoding and crash-safe file writing."""
from __future__ import annotations

import enum
import os
import tempfile
from pathlib import Path

THRESHOLD = 0.5


class Label(enum.IntEnum):
    ATTACK = 0
    BONA_FIDE = 1

    @classmethod
    def parse(cls, text: str) -> "Label":
        key = text.strip().lower()
        if key in ("live", "bona_fide", "bonafide", "1"):
            return cls.BONA_FIDE
        if key in ("attack", "spoof", "0"):
            return cls.ATTACK
        raise ValueError(f"unknown label {text!r}")

    @property
    def manifest_name(self) -> str:
        return "live" if self is Label.BONA_FIDE else "attack"


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to a unique temp file next to ``path`` and rename it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
