"""Line-based run configuration: ``[section]`` headers and ``key = value`` lines.

Values may be quoted with double quotes; ``#`` starts a comment outside
quotes. Every value remembers the line it came from so errors can point
at ``file:line``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .errors import ConfigError

REQUIRED = object()
SECTIONS = ("model", "experiment", "output")


def _strip_comment(line: str) -> str:
    out = []
    quoted = False
    for ch in line:
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            break
        out.append(ch)
    return "".join(out).strip()


@dataclass
class RunConfig:
    path: str
    text: str
    values: Dict[str, Dict[str, Tuple[str, int]]] = field(default_factory=dict)
    overrides: Dict[Tuple[str, str], str] = field(default_factory=dict)

    # ---------------------------------------------------------- parsing

    @classmethod
    def parse(cls, text: str, path: str = "<config>") -> "RunConfig":
        cfg = cls(path, text, {s: {} for s in SECTIONS})
        section = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = _strip_comment(raw)
            if not line:
                continue
            if line.startswith("["):
                if not line.endswith("]"):
                    raise ConfigError("unterminated section header", path, lineno)
                section = line[1:-1].strip()
                if section not in SECTIONS:
                    raise ConfigError(f"unknown section [{section}]", path, lineno)
                continue
            if "=" not in line:
                raise ConfigError("expected 'key = value'", path, lineno)
            if section is None:
                raise ConfigError("key outside of any section", path, lineno)
            key, value = (p.strip() for p in line.split("=", 1))
            key = key.replace("_", "-")
            if not key:
                raise ConfigError("empty key", path, lineno)
            if value.startswith('"'):
                if len(value) < 2 or not value.endswith('"'):
                    raise ConfigError("unterminated string", path, lineno)
                value = value[1:-1]
            if key in cfg.values[section]:
                raise ConfigError(f"duplicate key '{key}' in [{section}]", path, lineno)
            cfg.values[section][key] = (value, lineno)
        return cfg

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
        return cls.parse(text, path)

    # ---------------------------------------------------------- access

    def set(self, section: str, key: str, value) -> None:
        self.overrides[(section, key)] = str(value)

    def has(self, section: str, key: str) -> bool:
        return (section, key) in self.overrides or key in self.values.get(section, {})

    def raw(self, section: str, key: str, default=REQUIRED) -> Tuple[Optional[str], Optional[int]]:
        if (section, key) in self.overrides:
            return self.overrides[(section, key)], None
        hit = self.values.get(section, {}).get(key)
        if hit is None:
            if default is REQUIRED:
                raise ConfigError(f"missing key '{key}' in section [{section}]", self.path)
            return default, None
        return hit

    def error(self, section, key, message) -> ConfigError:
        _, line = self.raw(section, key, None)
        return ConfigError(f"[{section}] {key}: {message}", self.path, line)

    def get_str(self, section, key, default=REQUIRED) -> str:
        v, _ = self.raw(section, key, default)
        return v

    def get_float(self, section, key, default=REQUIRED) -> float:
        v, _ = self.raw(section, key, default)
        if v is default and default is not REQUIRED:
            return default
        try:
            return float(v)
        except (TypeError, ValueError):
            raise self.error(section, key, f"expected a number, got {v!r}") from None

    def get_int(self, section, key, default=REQUIRED) -> int:
        v, _ = self.raw(section, key, default)
        if v is default and default is not REQUIRED:
            return default
        try:
            f = float(v)
        except (TypeError, ValueError):
            raise self.error(section, key, f"expected an integer, got {v!r}") from None
        if f != int(f):
            raise self.error(section, key, f"expected an integer, got {v!r}")
        return int(f)

    def get_bool(self, section, key, default=REQUIRED) -> bool:
        v, _ = self.raw(section, key, default)
        if isinstance(v, bool):
            return v
        s = str(v).strip().lower()
        if s in ("true", "yes", "on", "1"):
            return True
        if s in ("false", "no", "off", "0"):
            return False
        raise self.error(section, key, f"expected true or false, got {v!r}")

    def get_floats(self, section, key, default=REQUIRED) -> List[float]:
        v, _ = self.raw(section, key, default)
        if v is default and default is not REQUIRED:
            return list(default)
        try:
            return [float(p) for p in str(v).replace(";", ",").split(",") if p.strip()]
        except ValueError:
            raise self.error(section, key, f"expected a comma-separated list, got {v!r}") from None

    def get_ints(self, section, key, default=REQUIRED) -> List[int]:
        vals = self.get_floats(section, key, default)
        if any(x != int(x) for x in vals):
            raise self.error(section, key, "expected integers")
        return [int(x) for x in vals]

    def canonical(self) -> str:
        """Sorted, override-applied text used for the config hash."""
        lines = []
        for s in SECTIONS:
            keys = set(self.values.get(s, {})) | {k for (ss, k) in self.overrides if ss == s}
            if not keys:
                continue
            lines.append(f"[{s}]")
            for k in sorted(keys):
                lines.append(f"{k} = {self.get_str(s, k)}")
        return "\n".join(lines) + "\n"
