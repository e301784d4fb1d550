"""Key-value config files: `name = value` lines, # comments, blank lines.

Values parse as int, then float, then comma-list of the same, else stay
strings. Used for both scenario overrides and training hyperparameters.
"""

from __future__ import annotations


def _parse_scalar(text: str):
    text = text.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    return text


def parse_kv(lines) -> dict:
    out = {}
    for i, raw in enumerate(lines):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {i + 1}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        val = val.strip()
        if "," in val:
            out[key.strip()] = [_parse_scalar(v) for v in val.split(",")]
        else:
            out[key.strip()] = _parse_scalar(val)
    return out


def load_kv_config(path) -> dict:
    with open(path) as fh:
        return parse_kv(fh)
