"""Flat ``key = value`` configuration files and command-line overrides."""
from __future__ import annotations

from pathlib import Path


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    return parse_kv(path.read_text(), str(path))


def write_kv(path, values: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


def apply_overrides(values: dict[str, str], overrides, allowed=None) -> dict[str, str]:
    """Apply ``key=value`` strings on top of ``values``.

    With ``allowed`` (a predicate or a collection of keys), unknown keys are rejected,
    both in the overrides and in ``values`` itself.
    """
    out = dict(values)
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = (t.strip() for t in item.split("=", 1))
        out[key] = value
    if allowed is not None:
        ok = allowed if callable(allowed) else (lambda k: k in allowed)
        bad = sorted(k for k in out if not ok(k))
        if bad:
            raise ValueError(f"unknown configuration keys: {', '.join(bad)}")
    return out


def as_tuple(value: str, cast=str) -> tuple:
    return tuple(cast(v.strip()) for v in value.split(",") if v.strip())


def as_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")
