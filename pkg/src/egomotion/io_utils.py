"""Small file helpers: atomic writes and flat key-value config files."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

from .errors import ConfigurationError


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines skip.

    Keys may be dotted (``stage1.lr``).  Duplicate keys are an error.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, value = line.split("=", 1)
        elif ":" in line:
            key, value = line.split(":", 1)
        else:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if not key:
            raise ConfigurationError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_kv(text, str(path))


def format_kv(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def write_kv(path, items: dict) -> None:
    atomic_write_text(path, format_kv(items))


def subsection(cfg: dict[str, str], prefix: str) -> dict[str, str]:
    """Keys under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}
