from __future__ import annotations

import json as _json
import os as _os
import sys as _sys
import tempfile
from pathlib import Path
from typing import Any, Callable

import numpy as np

__all__ = [
    "dumps_json",
    "jmespath_query",
    "load_json",
    "write_json",
    "write_text_atomic",
]


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def dumps_json(data: Any) -> str:
    """Canonical form: sorted keys, two-space indent, trailing newline."""
    return _json.dumps(data, sort_keys=True, indent=2, default=_jsonable) + "\n"


def write_text_atomic(path: str | _os.PathLike[str], text: str) -> Path:
    """Write through a sibling temp file so readers never see a partial file."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(
        prefix=f".{target.name}.", suffix=".tmp", dir=target.parent
    )
    try:
        with _os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        _os.replace(tmp_name, target)
    except BaseException:
        try:
            _os.unlink(tmp_name)
        except FileNotFoundError:
            pass
        raise
    return target


def write_json(path: str | _os.PathLike[str], data: Any) -> Path:
    return write_text_atomic(path, dumps_json(data))


def load_json(source: Any) -> Any:
    """Parse JSON from a path, ``"-"`` (stdin), a file object, or pass data through.

    Decoding errors are re-raised as ``ValueError`` naming the source.
    """
    if isinstance(source, (dict, list)):
        return source
    if isinstance(source, _os.PathLike):
        source = _os.fspath(source)
    if source == "-":
        source = _sys.stdin
    if isinstance(source, str):
        with open(source, "r", encoding="utf-8") as handle:
            content = handle.read()
        name = source
    elif hasattr(source, "read"):
        content = source.read()
        if isinstance(content, bytes):
            content = content.decode("utf-8")
        name = getattr(source, "name", "<stream>")
    else:
        raise TypeError(
            f"load_json() input must be a path or stream, got {type(source).__name__}"
        )
    try:
        return _json.loads(content)
    except _json.JSONDecodeError as exc:
        raise ValueError(
            f"{name}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc


def jmespath_query(query: str) -> Callable[[Any], Any]:
    """Compile a JMESPath expression into a callable applied to parsed JSON."""
    import jmespath as _jmespath

    try:
        compiled = _jmespath.compile(query)
    except _jmespath.exceptions.ParseError as exc:
        raise ValueError(f"invalid JMESPath expression {query!r}: {exc}") from exc

    def apply(data: Any) -> Any:
        return compiled.search(data)

    return apply
