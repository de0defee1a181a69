"""Small file helpers shared by the pipeline stages."""

import contextlib
import hashlib
import os
import sys
import tempfile
from pathlib import Path


class DataError(Exception):
    """Input data is missing or unreadable."""


@contextlib.contextmanager
def atomic_write(path, mode="w", encoding="utf-8", newline=None):
    """Write to a temporary sibling file and rename it over `path` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        if "b" in mode:
            f = open(tmp, mode)
        else:
            f = open(tmp, mode, encoding=encoding, newline=newline)
        with f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def require_file(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"input not found: {path}")
    return path


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def escape_field(text):
    """Escape backslash, tab and newline so `text` fits in one TSV cell."""
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


def unescape_field(text):
    if "\\" not in text:
        return text
    out = []
    it = iter(text)
    for ch in it:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(it, "")
        out.append({"t": "\t", "n": "\n", "r": "\r", "\\": "\\"}.get(nxt, "\\" + nxt))
    return "".join(out)


def progress(stage, **fields):
    """One machine-readable progress line on stderr: ``ehrseq<TAB>stage=...<TAB>key=value``."""
    parts = ["ehrseq", f"stage={stage}"]
    for k, v in fields.items():
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    print("\t".join(parts), file=sys.stderr, flush=True)
