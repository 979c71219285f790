"""Atomic artifact writes and the plain-text run manifest."""

from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path
from typing import Iterable

MANIFEST_NAME = "manifest.txt"


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, seed: int, config_lines: Iterable[str],
                   artifacts: Iterable[str]) -> Path:
    """Manifest lines: ``command=``, ``seed=``, ``config <key>=<value>``, then
    ``artifact <file> sha256=<hex>`` for every written file."""
    out_dir = Path(out_dir)
    lines = [f"command={command}", f"seed={seed}"]
    lines += [f"config {c}" for c in config_lines]
    lines += [f"artifact {name} sha256={sha256_file(out_dir / name)}" for name in sorted(artifacts)]
    path = out_dir / MANIFEST_NAME
    write_atomic(path, "\n".join(lines) + "\n")
    return path


def read_manifest_digests(path: Path) -> dict:
    digests = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("artifact "):
            _, name, digest = line.split(" ")
            digests[name] = digest.split("=", 1)[1]
    return digests
