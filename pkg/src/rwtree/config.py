"""TOML configuration for environments and studies.

A file holds a ``[spec]`` table (with a nested ``[spec.increment]`` table)
and, for studies, a ``[study]`` table::

    [spec]
    offspring = 2                 # constant, or a probability list over 0..K
    [spec.increment]
    kind = "beta_rho"
    a = 3.0
    c = 1.0

    [study]
    kind = "exponent"
    n_grid = [1024, 2048, 4096]
    replicas = 50

Unknown keys are errors.  Diagnostics name the offending field and, where
it can be found, its line.
"""

from __future__ import annotations

import inspect
import re
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .env_model import FAMILIES, EnvSpec, Offspring
from .errors import ConfigError, RwtreeError
from .experiments import StudyConfig

SPEC_KEYS = {"offspring", "iid_children", "increment"}
STUDY_KEYS = {
    "kind", "n_grid", "theta_grid", "replicas", "seed", "backend", "out_dir",
    "z", "gamma", "budget", "cap", "ell", "samples", "step_limit", "censor",
}
TOP_KEYS = {"spec", "study"}


def _line_of(text: str, table: str, key: str) -> int | None:
    """Line number of ``key`` inside ``[table]`` (dotted tables flattened)."""
    current = ""
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        header = re.match(r"^\[\s*([^\]]+?)\s*\]$", line)
        if header:
            current = header.group(1)
            if current == f"{table}.{key}" if table else current == key:
                return no
            continue
        m = re.match(r"^([A-Za-z0-9_.\-]+)\s*=", line)
        if m:
            full = f"{current}.{m.group(1)}" if current else m.group(1)
            if full == (f"{table}.{key}" if table else key):
                return no
    return None


class _Reader:
    def __init__(self, text: str):
        self.text = text
        try:
            self.data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            m = re.search(r"line (\d+)", str(exc))
            raise ConfigError(f"malformed TOML: {exc}", line=int(m.group(1)) if m else None) from None

    def fail(self, message, table, key):
        name = f"{table}.{key}" if table else key
        raise ConfigError(message, line=_line_of(self.text, table, key), field=name)

    def check_keys(self, table: str, d: dict, allowed: set) -> None:
        for k in d:
            if k not in allowed:
                self.fail("unknown key", table, k)

    def table(self, table: str, key: str, d: dict) -> dict:
        if key not in d:
            raise ConfigError("missing table", field=f"{table}.{key}" if table else key)
        v = d[key]
        if not isinstance(v, dict):
            self.fail("expected a table", table, key)
        return v

    def spec(self) -> EnvSpec:
        self.check_keys("", self.data, TOP_KEYS)
        s = self.table("", "spec", self.data)
        self.check_keys("spec", s, SPEC_KEYS)
        if "offspring" not in s:
            raise ConfigError("missing field", field="spec.offspring")
        off = s["offspring"]
        try:
            if isinstance(off, int) and not isinstance(off, bool):
                offspring = Offspring.constant(off)
            elif isinstance(off, list):
                offspring = Offspring(tuple(float(p) for p in off))
            else:
                self.fail("expected an integer or a list of probabilities", "spec", "offspring")
        except (RwtreeError, ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            self.fail(str(exc), "spec", "offspring")
        inc = self.table("spec", "increment", s)
        if "kind" not in inc:
            raise ConfigError("missing field", field="spec.increment.kind")
        kind = inc["kind"]
        if kind not in FAMILIES:
            self.fail(f"unknown increment kind {kind!r}; expected one of {sorted(FAMILIES)}", "spec.increment", "kind")
        cls = FAMILIES[kind]
        names = [p for p in inspect.signature(cls).parameters]
        self.check_keys("spec.increment", inc, set(names) | {"kind"})
        for p in names:
            if p not in inc:
                raise ConfigError("missing field", field=f"spec.increment.{p}")
            if not isinstance(inc[p], (int, float)) or isinstance(inc[p], bool):
                self.fail("expected a number", "spec.increment", p)
        iid = s.get("iid_children", True)
        if not isinstance(iid, bool):
            self.fail("expected true or false", "spec", "iid_children")
        try:
            law = cls(**{p: float(inc[p]) for p in names})
            return EnvSpec(offspring, law, iid)
        except RwtreeError as exc:
            raise ConfigError(str(exc), line=_line_of(self.text, "", "spec.increment"), field="spec.increment") from None

    def study(self) -> StudyConfig:
        spec = self.spec()
        st = self.table("", "study", self.data)
        self.check_keys("study", st, STUDY_KEYS)
        if "kind" not in st:
            raise ConfigError("missing field", field="study.kind")
        kwargs = dict(st)
        for key in ("n_grid", "theta_grid"):
            if key in kwargs and not isinstance(kwargs[key], list):
                self.fail("expected a list", "study", key)
        try:
            return StudyConfig(spec=spec, **kwargs)
        except (TypeError, ValueError) as exc:
            bad = next((k for k in kwargs if k in str(exc)), "kind")
            self.fail(str(exc), "study", bad)


def _read(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None


def parse_spec(text: str) -> EnvSpec:
    return _Reader(text).spec()


def parse_study(text: str) -> StudyConfig:
    return _Reader(text).study()


def load_spec(path) -> EnvSpec:
    return parse_spec(_read(path))


def load_study(path) -> StudyConfig:
    return parse_study(_read(path))


def dump_spec(spec: EnvSpec) -> str:
    """TOML text that :func:`parse_spec` maps back to ``spec``."""
    inc = spec.increment.params()
    lines = ["[spec]", f"offspring = [{', '.join(repr(p) for p in spec.offspring.probs)}]",
             f"iid_children = {str(spec.iid_children).lower()}", "", "[spec.increment]",
             f'kind = "{inc.pop("kind")}"']
    lines += [f"{k} = {float(v)!r}" for k, v in inc.items()]
    return "\n".join(lines) + "\n"
