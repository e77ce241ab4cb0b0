"""Flat ``key = value`` configuration files with dot-namespaced keys."""

from __future__ import annotations

from dataclasses import fields

from .core import Profile
from .errors import ConfigurationError


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {ln}: expected key = value, got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def load_config(path: str) -> dict[str, str]:
    with open(path, "r") as fh:
        return parse_config(fh.read())


def _coerce(value: str, target_type):
    if target_type is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {value!r}")
    return target_type(value)


def profile_from_config(flat: dict[str, str]) -> Profile:
    """Build a profile from ``profile.*`` keys on top of a named preset."""
    base_name = flat.get("profile.name", "desk")
    presets = {"desk": Profile.desk, "tiny": Profile.tiny,
               "paper_reference": Profile.paper_reference}
    if base_name not in presets:
        raise ConfigurationError(f"unknown profile preset {base_name!r}")
    base = presets[base_name]()
    overrides = {}
    by_name = {f.name: f for f in fields(Profile)}
    for key, val in flat.items():
        if not key.startswith("profile.") or key == "profile.name":
            continue
        fname = key[len("profile."):]
        if fname not in by_name:
            raise ConfigurationError(f"unknown profile field {fname!r}")
        ftype = by_name[fname].type
        pytype = {"int": int, "float": float, "str": str, "bool": bool}.get(ftype, str)
        overrides[fname] = _coerce(val, pytype)
    if overrides:
        from dataclasses import replace
        base = replace(base, **overrides)
    return base
