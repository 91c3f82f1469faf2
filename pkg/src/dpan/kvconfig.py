"""Plain-text key=value configuration with dotted key prefixes.

The format is deliberately trivial: one ``key=value`` per line, ``#`` starts
a comment, blank lines are ignored, keys use dots for grouping
(``train.lr=0.01``).  The same format is used for config files, checkpoint
headers, and the config echo in output files, so every artifact can be read
back with the same ten-line parser.
"""

from __future__ import annotations


def format_kv(items: dict[str, object]) -> str:
    """Serialize a flat mapping; keys are emitted sorted for determinism."""
    lines = []
    for key in sorted(items):
        value = items[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    """Parse key=value lines; later duplicates win."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def parse_int_tuple(value: str) -> tuple[int, ...]:
    value = value.strip()
    if not value:
        return ()
    return tuple(int(v) for v in value.split(","))


def parse_str_tuple(value: str) -> tuple[str, ...]:
    value = value.strip()
    if not value:
        return ()
    return tuple(v.strip() for v in value.split(","))
