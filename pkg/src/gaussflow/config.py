"""Flat ``key = value`` experiment configs.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Fields are written ``family:p1,p2,...`` (``family`` alone when the family
takes no parameters) and lists of fields are separated by ``;``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fields import FieldEnsemble, FieldSpec, get_family

EXPERIMENTS = (
    "simulate",
    "density",
    "moments",
    "bounds",
    "check-condition",
    "stability",
    "cauchy",
    "mollify-check",
    "maximal",
    "lusin",
)


class ConfigError(ValueError):
    pass


def _float(s):
    return float(s)


def _int(s):
    v = float(s)
    if v != int(v):
        raise ValueError(f"{s!r} is not an integer")
    return int(v)


def _bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def _floats(s):
    return [float(t) for t in s.replace(";", ",").split(",") if t.strip()]


def _ints(s):
    return [_int(t) for t in s.replace(";", ",").split(",") if t.strip()]


def _str(s):
    return s.strip()


# key -> (parser, default)
SCHEMA = {
    "experiment": (_str, None),
    "d": (_int, 1),
    "drift": (_str, None),
    "diffusions": (_str, ""),
    "drift_b": (_str, None),
    "diffusions_b": (_str, None),
    "field": (_str, None),
    "T": (_float, 1.0),
    "N": (_int, 100),
    "seed": (_int, 0),
    "paths": (_int, 1000),
    "initials": (_int, 16),
    "path_index": (_int, 0),
    "x": (_floats, None),
    "t": (_float, None),
    "p": (_float, 2.0),
    "q": (_float, 2.0),
    "sigma": (_float, 0.1),
    "R": (_float, 4.0),
    "alpha": (_float, 2.0),
    "lambda0": (_float, 0.1),
    "condition": (_str, "1.2"),
    "epsilons": (_floats, [1.0, 0.5, 0.125]),
    "pairs": (_ints, [4, 8]),
    "quad_order": (_int, 32),
    "method": (_str, "inverse-flow"),
    "mode": (_str, "per-path"),
    "samples": (_int, 20000),
    "bandwidth": (_float, None),
    "points": (_str, "linspace:-2,2,41"),
    "box": (_float, 3.0),
    "spacing": (_float, 0.01),
    "offset": (_str, "node"),
    "radius": (_float, 1.0),
    "pair_samples": (_int, 100000),
    "with_lambda": (_bool, False),
    "output": (_str, "out"),
}


@dataclass
class ExperimentConfig:
    values: dict
    text: str
    source: str = "<string>"

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        v = self.values.get(key)
        return default if v is None else v

    @property
    def experiment(self) -> str:
        return self.values["experiment"]

    def ensemble(self, suffix: str = "") -> FieldEnsemble:
        d = self.values["d"]
        drift_key = "drift" + suffix
        diff_key = "diffusions" + suffix
        drift_txt = self.values.get(drift_key)
        if drift_txt is None:
            if suffix:
                return self.ensemble()
            raise ConfigError(f"missing key {drift_key!r}")
        diff_txt = self.values.get(diff_key)
        if diff_txt is None:
            diff_txt = self.values.get("diffusions", "")
        drift = parse_field(drift_txt, d, drift_key)
        diffs = tuple(parse_field(t, d, diff_key) for t in diff_txt.split(";") if t.strip())
        return FieldEnsemble(drift, diffs)

    def eval_points(self) -> np.ndarray:
        return parse_points(self.values["points"], self.values["d"])


def parse_field(text: str, d: int, key: str = "field") -> FieldSpec:
    text = text.strip()
    fam, _, params = text.partition(":")
    fam = fam.strip()
    try:
        get_family(fam)
    except KeyError:
        raise ConfigError(f"key {key!r}: unknown field family {fam!r}") from None
    try:
        vals = tuple(float(t) for t in params.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"key {key!r}: bad parameters in {text!r}") from None
    try:
        return FieldSpec(fam, d, vals)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {exc}") from None


def parse_points(text: str, d: int) -> np.ndarray:
    kind, _, rest = text.partition(":")
    if kind == "linspace":
        a, b, n = rest.split(",")
        axis = np.linspace(float(a), float(b), _int(n))
        grids = np.meshgrid(*([axis] * d), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)
    if kind == "list":
        vals = _floats(rest)
        if len(vals) % d:
            raise ConfigError(f"points list length {len(vals)} is not a multiple of d = {d}")
        return np.array(vals).reshape(-1, d)
    raise ConfigError(f"points must be 'linspace:a,b,n' or 'list:...', got {text!r}")


def parse_config(
    text: str,
    source: str = "<string>",
    overrides: dict | None = None,
    default_experiment: str | None = None,
) -> ExperimentConfig:
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, val = body.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = (val.strip(), lineno)
    for key, val in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"override: unknown key {key!r}")
        raw[key] = (val, 0)
    if "experiment" not in raw and default_experiment is not None:
        raw["experiment"] = (default_experiment, 0)
    values = {}
    for key, (parser, default) in SCHEMA.items():
        if key in raw:
            txt, lineno = raw[key]
            try:
                values[key] = parser(txt)
            except (ValueError, TypeError) as exc:
                where = f"{source}:{lineno}" if lineno else "override"
                raise ConfigError(f"{where}: key {key!r}: {exc}") from None
        else:
            values[key] = default
    if values["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"{source}: unknown experiment {values['experiment']!r}; must be one of {', '.join(EXPERIMENTS)}")
    _validate(values, source)
    return ExperimentConfig(values, text, source)


def _validate(v: dict, source: str) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(f"{source}: {msg}")

    need(v["d"] >= 1, "d must be positive")
    need(v["T"] > 0, "T must be positive")
    need(v["N"] >= 1, "N must be positive")
    need(v["paths"] >= 1 and v["initials"] >= 1, "paths and initials must be positive")
    need(v["p"] > 1, "p must exceed 1")
    need(v["q"] > 1, "q must exceed 1")
    need(v["sigma"] > 0 and v["R"] > 0, "sigma and R must be positive")
    need(v["lambda0"] > 0, "lambda0 must be positive")
    need(all(0 < e <= 1 for e in v["epsilons"]), "epsilons must lie in (0, 1]")
    need(v["spacing"] > 0 and v["box"] > 0, "spacing and box must be positive")
    need(v["method"] in ("inverse-flow", "kde"), "method is inverse-flow or kde")
    need(v["mode"] in ("per-path", "annealed"), "mode is per-path or annealed")
    if v["x"] is not None:
        need(len(v["x"]) == v["d"], f"x must have d = {v['d']} entries")


def load_config(
    path: str | Path, overrides: dict | None = None, default_experiment: str | None = None
) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse_config(text, str(p), overrides, default_experiment)
