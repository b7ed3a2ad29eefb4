"""Steering configurations: which experts to reinforce and by how much.

File format::

    {"renormalize":false,"entries":[[layer,expert,beta],...],"provenance":"..."}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable

from .npmi import CognitiveExpertSet
from .trace import ExpertKey, ModelShape, PathOrFile, _open

DEFAULT_BETA = 64.0
DEFAULT_L = 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SteeringConfig:
    entries: tuple[tuple[ExpertKey, float], ...] = ()
    renormalize: bool = False
    provenance: str | None = None

    def __post_init__(self):
        entries = tuple((ExpertKey(*k), float(b)) for k, b in self.entries)
        seen = set()
        for i, (key, beta) in enumerate(entries):
            if key in seen:
                raise ConfigError(f"entry {i} {key}: duplicate expert")
            seen.add(key)
            if not (beta > 0 and math.isfinite(beta)):
                raise ConfigError(f"entry {i} {key}: multiplier must be a finite value > 0, got {beta!r}")
        object.__setattr__(self, "entries", entries)

    @property
    def multipliers(self) -> dict[ExpertKey, float]:
        return dict(self.entries)

    @property
    def experts(self) -> tuple[ExpertKey, ...]:
        return tuple(k for k, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self, shape: ModelShape) -> None:
        bad = [k for k in self.experts if not shape.contains(k)]
        if bad:
            raise ConfigError(
                f"experts {[tuple(k) for k in bad]} outside shape L={shape.n_layers} N={shape.n_experts}"
            )

    def to_json(self) -> dict:
        return {
            "renormalize": self.renormalize,
            "entries": [[k.layer, k.expert, b] for k, b in self.entries],
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, obj) -> "SteeringConfig":
        if not isinstance(obj, dict) or "entries" not in obj:
            raise ConfigError("steering config must be an object with an 'entries' list")
        entries = []
        for i, e in enumerate(obj["entries"]):
            if not (isinstance(e, list) and len(e) == 3):
                raise ConfigError(f"entry {i}: expected [layer, expert, beta], got {e!r}")
            layer, expert, beta = e
            if type(layer) is not int or type(expert) is not int or layer < 0 or expert < 0:
                raise ConfigError(f"entry {i}: bad expert index {e!r}")
            if isinstance(beta, bool) or not isinstance(beta, (int, float)):
                raise ConfigError(f"entry {i}: multiplier must be a number, got {beta!r}")
            entries.append((ExpertKey(layer, expert), float(beta)))
        renorm = obj.get("renormalize", False)
        if not isinstance(renorm, bool):
            raise ConfigError(f"renormalize must be a boolean, got {renorm!r}")
        prov = obj.get("provenance")
        return cls(tuple(entries), renorm, prov)


def from_ranked(experts: CognitiveExpertSet, beta: float = DEFAULT_BETA, renormalize: bool = False) -> SteeringConfig:
    if not beta > 0:
        raise ConfigError(f"multiplier must be > 0, got {beta!r}")
    return SteeringConfig(
        tuple((k, beta) for k in experts.experts),
        renormalize,
        f"domain={experts.source_domain}; l={experts.l}",
    )


def uniform_config(keys: Iterable[ExpertKey], beta: float, renormalize: bool = False, provenance: str | None = None):
    return SteeringConfig(tuple((ExpertKey(*k), beta) for k in keys), renormalize, provenance)


def serialize_config(config: SteeringConfig, sink: PathOrFile) -> None:
    with _open(sink, "w") as f:
        json.dump(config.to_json(), f)
        f.write("\n")


def config_to_text(config: SteeringConfig) -> str:
    return json.dumps(config.to_json()) + "\n"


def parse_config(source) -> SteeringConfig:
    """Parse a config from a path, an open file, or a JSON string."""
    if isinstance(source, str) and source.lstrip().startswith("{"):
        text = source
    else:
        with _open(source, "r") as f:
            text = f.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed steering config: {exc}") from None
    return SteeringConfig.from_json(obj)
