"""Key-value config files with dotted keys and CLI overrides.

Format: one ``key = value`` per line, ``#`` comments, blank lines ignored.
Values are auto-typed (int, float, true/false, comma list, else string);
CLI ``--set key=value`` entries take precedence over the file.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError, ParseError


def parse_value(raw: str):
    s = raw.strip()
    if "," in s:
        return [parse_value(p) for p in s.split(",") if p.strip()]
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def load_config(path) -> dict:
    cfg: dict = {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected 'key = value'", path=str(path), line=n)
            key, value = line.split("=", 1)
            cfg[key.strip()] = parse_value(value)
    return cfg


def apply_overrides(cfg: dict, overrides) -> dict:
    out = dict(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def section(cfg: dict, prefix: str) -> dict:
    """Keys under ``prefix.`` with the prefix stripped."""
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def take_fields(mapping: dict, allowed, where: str) -> dict:
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}")
    return mapping
