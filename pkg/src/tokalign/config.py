"""Run configuration: flat ``section.key=value`` text files with strict parsing.

Blank lines and ``#`` comments are ignored.  Every key must name a known
field; values are parsed according to the field's default type.  A file may
start from another file or preset with ``include=<name>``; its own keys win.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from .aligners import AlignConfig
from .decoding import CfgConfig, SamplerConfig
from .model import ConfigError, ModelConfig
from .objectives import LossConfig
from .training import TrainConfig
from .world import WorldSpec

CONFIG_ENV = "TOKALIGN_CONFIG"
PRESETS = ("toy-base", "toy-dpo", "toy-rpo", "toy-cfg-sweep", "toy-gt-as-chosen", "paper-scale")


@dataclass
class DataConfig:
    trainTexts: int = 3000
    prefChallengingTexts: int = 80
    prefContextsPerChallenging: int = 10
    prefRegularTexts: int = 500
    samplesPerPrompt: int = 6
    prefTemperature: float = 0.7
    gtAsChosen: bool = False
    evalItems: int = 100
    evalRuns: int = 5
    evalSplit: str = "unseen"
    evalChallenging: bool = False

    def __post_init__(self):
        if self.evalSplit not in ("seen", "unseen"):
            raise ConfigError("data.evalSplit must be seen or unseen")
        if self.samplesPerPrompt < 1 or self.evalRuns < 1 or self.evalItems < 1 or self.trainTexts < 1:
            raise ConfigError("data counts must be positive")
        if self.prefTemperature <= 0:
            raise ConfigError("data.prefTemperature must be > 0")


@dataclass
class PathsConfig:
    datasets: str = "data"
    checkpoints: str = "checkpoints"
    logs: str = "logs"


# seeds come from rootSeed, never from the file
_DERIVED = {("train", "seed"), ("align", "seed"), ("sampler", "rngSeed")}


@dataclass
class RunConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    cfg: CfgConfig = field(default_factory=CfgConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    rootSeed: int = 0

    def __post_init__(self):
        w, m = self.world, self.model
        if (m.vocabText, m.V, m.N) != (w.alphabetSize, w.codebookSize, w.numCodebooks):
            raise ConfigError("model.vocabText/V/N must equal world.alphabetSize/codebookSize/numCodebooks")

    def seed(self, purpose: str) -> int:
        """Sub-seed for one consumer of randomness, derived from ``rootSeed``."""
        tag = [ord(c) for c in purpose]
        return int(np.random.SeedSequence([self.rootSeed, *tag]).generate_state(1)[0] >> 1)


SECTIONS = [f.name for f in dataclasses.fields(RunConfig) if f.name != "rootSeed"]


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(int(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _fields(section: str, obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if (section, f.name) not in _DERIVED}


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"{source}:{n}: expected key=value, got {s!r}")
        k, v = s.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply ``pairs`` on top of ``base`` (defaults when absent); unknown keys are errors."""
    base = base or RunConfig()
    sections = {s: _fields(s, getattr(base, s)) for s in SECTIONS}
    root = base.rootSeed
    for key, raw in pairs.items():
        if key == "rootSeed":
            root = _parse_value(raw, 0, key)
            continue
        sec, _, name = key.partition(".")
        if sec not in sections or name not in sections[sec]:
            raise ConfigError(f"unknown config key {key!r}")
        sections[sec][name] = _parse_value(raw, sections[sec][name], key)
    routing = {"model.textCrossAttnLayers", "model.contextCrossAttnLayers"}
    if {"model.decoderLayers", "model.conditioningMode"} & set(pairs) and not routing & set(pairs):
        # re-derive the default layer split for the new shape
        sections["model"]["textCrossAttnLayers"] = ()
        sections["model"]["contextCrossAttnLayers"] = ()
    try:
        parts = {}
        for s in SECTIONS:
            obj = getattr(base, s)
            kept = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if (s, f.name) in _DERIVED}
            parts[s] = type(obj)(**sections[s], **kept)
        return RunConfig(**parts, rootSeed=root)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def dumps(cfg: RunConfig) -> str:
    lines = [f"rootSeed={cfg.rootSeed}"]
    for s in SECTIONS:
        for k, v in _fields(s, getattr(cfg, s)).items():
            lines.append(f"{s}.{k}={_format_value(v)}")
    return "\n".join(lines) + "\n"


def loads(text: str, source: str = "<config>") -> RunConfig:
    return build(parse_pairs(text.splitlines(), source))


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("tokalign").joinpath("presets", f"{name}.cfg").read_text()


def load(path_or_preset: str | os.PathLike | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read a config file or a preset name, then apply ``key=value`` overrides.

    With no argument, the file named by ``$TOKALIGN_CONFIG`` is used if set.
    """
    if path_or_preset is None:
        path_or_preset = os.environ.get(CONFIG_ENV)
    pairs = _read_pairs(str(path_or_preset), ()) if path_or_preset is not None else {}
    pairs.update(parse_pairs(overrides, "<override>"))
    return build(pairs)


def _read_pairs(p: str, chain: tuple) -> dict[str, str]:
    """Pairs of one file or preset; an ``include=`` line pulls in another first."""
    if p in chain:
        raise ConfigError(f"include cycle: {' -> '.join(chain + (p,))}")
    if p in PRESETS and not Path(p).exists():
        text = preset_text(p)
    else:
        try:
            text = Path(p).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
    own = parse_pairs(text.splitlines(), p)
    inc = own.pop("include", None)
    if inc is None:
        return own
    if inc not in PRESETS and not Path(inc).is_absolute():
        inc = str(Path(p).parent / inc) if Path(p).exists() else inc
    pairs = _read_pairs(inc, chain + (p,))
    pairs.update(own)
    return pairs


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
