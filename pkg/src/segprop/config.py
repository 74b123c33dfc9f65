"""Flat ``key = value`` run configuration.

Every key is optional. Lines starting with ``#`` are comments. Unknown keys and
unparsable values raise ``ConfigError``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from typing import Any

from .core import SequenceSpec
from .errors import ConfigError
from .filter3d import FilterConfig
from .homography import HomographyConfig
from .propagate import INIT_MODES

TIE_RULES = ("lowest",)
DEFAULT_SOURCE_WEIGHT = 0.25


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _offsets(v: str) -> tuple[int, ...] | None:
    s = v.strip()
    if s in ("", "auto", "none"):
        return None
    return tuple(int(p) for p in s.replace(" ", "").split(",") if p)


@dataclass(frozen=True)
class RunConfig:
    lam: float = 0.05
    offsets: tuple[int, ...] | None = None
    f: int = 2
    stride: int = 5
    max_iters: int = 7
    epsilon: float = 1e-4
    total_vote_mass: float = 1.0
    tie_rule: str = "lowest"
    init: str = "pairwise"
    flow_votes: bool = True
    anchor_votes: bool = True
    threads: int = 1
    seed: int = 0
    source_weights: dict[str, float] = field(default_factory=dict)
    homography: HomographyConfig = HomographyConfig()
    filter: FilterConfig = FilterConfig()

    def validate(self) -> "RunConfig":
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.f < 1 or self.stride < 1:
            raise ConfigError("f and stride must be >= 1")
        if self.offsets is not None and (not self.offsets or 0 in self.offsets):
            raise ConfigError("offsets must be non-empty and exclude 0")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.total_vote_mass <= 0:
            raise ConfigError("total_vote_mass must be > 0")
        if self.tie_rule not in TIE_RULES:
            raise ConfigError(f"tie_rule must be one of {TIE_RULES}")
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {INIT_MODES}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if any(w < 0 for w in self.source_weights.values()) or self.homography.weight < 0:
            raise ConfigError("source weights must be >= 0")
        if self.homography.samples < 1 or self.homography.reject_px2 <= 0:
            raise ConfigError("homography.samples must be >= 1 and reject_px2 > 0")
        if min(self.filter.sigma_s, self.filter.sigma_t) < 0 or self.filter.radius < 0:
            raise ConfigError("filter sigmas and radius must be >= 0")
        return self

    def sequence_spec(self, num_frames: int, width: int, height: int, num_classes: int,
                      keyframes) -> SequenceSpec:
        return SequenceSpec(num_frames, width, height, num_classes, tuple(sorted(keyframes)), lam=self.lam,
                            f=self.f, stride=self.stride, max_iters=self.max_iters,
                            total_vote_mass=self.total_vote_mass, epsilon=self.epsilon, offsets=self.offsets)

    def resolved(self) -> dict[str, str]:
        """Every key with its effective value, as written by ``dumps``."""
        out = {
            "lambda": repr(self.lam),
            "offsets": ",".join(str(o) for o in self.offsets) if self.offsets else "auto",
            "f": str(self.f), "stride": str(self.stride), "max_iters": str(self.max_iters),
            "epsilon": repr(self.epsilon), "total_vote_mass": repr(self.total_vote_mass),
            "tie_rule": self.tie_rule, "init": self.init,
            "flow_votes": str(self.flow_votes).lower(), "anchor_votes": str(self.anchor_votes).lower(),
            "threads": str(self.threads), "seed": str(self.seed),
        }
        for name in sorted(self.source_weights):
            out[f"source.{name}.weight"] = repr(self.source_weights[name])
        for f_ in fields(HomographyConfig):
            v = getattr(self.homography, f_.name)
            out[f"homography.{f_.name}"] = str(v).lower() if isinstance(v, bool) else repr(v)
        for f_ in fields(FilterConfig):
            v = getattr(self.filter, f_.name)
            out[f"filter.{f_.name}"] = str(v).lower() if isinstance(v, bool) else repr(v)
        return out

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.resolved().items())


_TOP = {
    "lambda": ("lam", float), "offsets": ("offsets", _offsets), "f": ("f", int), "stride": ("stride", int),
    "max_iters": ("max_iters", int), "epsilon": ("epsilon", float),
    "total_vote_mass": ("total_vote_mass", float), "tie_rule": ("tie_rule", str), "init": ("init", str),
    "flow_votes": ("flow_votes", _bool), "anchor_votes": ("anchor_votes", _bool),
    "threads": ("threads", int), "seed": ("seed", int),
}


def _nested_parser(cls, name: str):
    for f_ in fields(cls):
        if f_.name == name:
            t = type(f_.default)
            return _bool if t is bool else t
    return None


def apply(config: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Return ``config`` with the given raw key/value overrides applied."""
    top: dict[str, Any] = {}
    hom: dict[str, Any] = {}
    filt: dict[str, Any] = {}
    weights = dict(config.source_weights)
    for key, raw in pairs.items():
        try:
            if key in _TOP:
                attr, conv = _TOP[key]
                top[attr] = conv(raw.strip()) if conv is not str else raw.strip()
            elif key.startswith("homography.") or key.startswith("filter."):
                group, _, name = key.partition(".")
                cls, dest = (HomographyConfig, hom) if group == "homography" else (FilterConfig, filt)
                conv = _nested_parser(cls, name)
                if conv is None:
                    raise ConfigError(f"unknown config key {key!r}")
                dest[name] = conv(raw.strip())
            elif key.startswith("source.") and key.endswith(".weight") and key.count(".") == 2:
                weights[key.split(".")[1]] = float(raw)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    out = replace(config, **top, source_weights=weights,
                  homography=replace(config.homography, **hom), filter=replace(config.filter, **filt))
    return out.validate()


def parse_pairs(text: str, origin: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {s!r}")
        k, _, v = s.partition("=")
        k = k.strip()
        if not k:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        pairs[k] = v.split("#", 1)[0].strip()
    return pairs


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    return apply(base or RunConfig(), parse_pairs(text))


def load(path: str | os.PathLike, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return apply(base or RunConfig(), parse_pairs(text, str(path)))
