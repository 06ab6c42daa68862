"""Run configuration: plain ``key = value`` text files plus flag overrides.

Lines starting with ``#`` are comments.  ``none`` stands for an unset
optional value.  Unknown keys are rejected.
"""
from __future__ import annotations

import types
import typing
from dataclasses import dataclass, fields

METHODS = ("fpfh", "sgrade", "lvi")
THRESHOLD_RULES = ("mad", "quantile", "value")
ORIENT_RULES = ("direction", "outward", "viewpoint")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    method: str = "sgrade"
    # neighborhoods; k=None picks the method default (fpfh 16, sgrade 8, lvi 8)
    k: int | None = None
    radius: float | None = None
    normal_k: int = 10
    orient: str = "direction"
    viewpoint: tuple[float, float, float] = (0.0, 0.0, 1.0)
    # fpfh
    bins: int = 11
    threshold_rule: str = "mad"
    threshold_value: float = 3.0
    # sgrade
    lam: float | None = None
    lam_ratio: float = 0.1
    eps: float | None = None
    max_fraction: float | None = None
    max_outer: int = 30
    max_inner: int = 200
    tol: float = 1e-6
    delta: float | None = None
    # lvi
    sigma0: float | None = None
    sigma1: float | None = None
    beta_s: float | None = None
    beta_d: float | None = None
    pi: float = 0.05
    update_pi: bool = False
    em_max_iter: int = 100
    # run / io
    seed: int = 0
    input: str | None = None
    output: str | None = None
    ply: str | None = None
    scores: str | None = None
    trace: str | None = None

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.method in METHODS, f"method must be one of {METHODS}, got {self.method!r}")
        need(self.k is None or self.k >= 3, "k must be >= 3")
        need(self.radius is None or self.radius > 0, "radius must be > 0")
        need(self.normal_k >= 3, "normal_k must be >= 3")
        need(self.orient in ORIENT_RULES, f"orient must be one of {ORIENT_RULES}")
        need(any(v != 0 for v in self.viewpoint), "viewpoint must be non-zero")
        need(self.bins >= 2, "bins must be >= 2")
        need(self.threshold_rule in THRESHOLD_RULES, f"threshold_rule must be one of {THRESHOLD_RULES}")
        if self.threshold_rule == "quantile":
            need(0 <= self.threshold_value <= 1, "quantile threshold must be in [0, 1]")
        need(self.lam is None or self.lam >= 0, "lam must be >= 0")
        need(self.lam_ratio >= 0, "lam_ratio must be >= 0")
        need(self.eps is None or self.eps > 0, "eps must be > 0")
        need(self.max_fraction is None or 0 < self.max_fraction < 1, "max_fraction must be in (0, 1)")
        need(self.max_outer >= 1 and self.max_inner >= 1, "iteration caps must be >= 1")
        need(self.tol > 0, "tol must be > 0")
        need(self.delta is None or self.delta > 0, "delta must be > 0")
        for name in ("sigma0", "sigma1", "beta_s", "beta_d"):
            v = getattr(self, name)
            need(v is None or v > 0, f"{name} must be > 0")
        if self.sigma0 is not None and self.sigma1 is not None:
            need(self.sigma1 > self.sigma0, "sigma1 must exceed sigma0")
        if self.beta_s is not None and self.beta_d is not None:
            need(self.beta_s > self.beta_d, "beta_s must exceed beta_d")
        need(0 < self.pi < 1, "pi must be in (0, 1)")
        need(self.em_max_iter >= 1, "em_max_iter must be >= 1")
        need(0 <= self.seed < 2 ** 64, "seed must be a 64-bit unsigned integer")
        return self


_HINTS = typing.get_type_hints(RunConfig)


def _base_type(hint):
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        return args[0], True
    return hint, False


def _parse_value(key: str, raw: str):
    hint, optional = _base_type(_HINTS[key])
    raw = raw.strip()
    if optional and raw.lower() == "none":
        return None
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if typing.get_origin(hint) is tuple:
            vals = tuple(float(x) for x in raw.replace(",", " ").split())
            if len(vals) != 3:
                raise ValueError(raw)
            return vals
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    return str(v)


def parse_pairs(pairs: dict, base: RunConfig | None = None) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(pairs) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = dict((base or RunConfig()).__dict__)
    for key, raw in pairs.items():
        values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    return RunConfig(**values).validate()


def read_pairs(text: str) -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    return parse_pairs(read_pairs(text), base)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(RunConfig))
