"""Pipeline configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json

from .experiment import SuiteConfig
from .scorer import ScorerConfig
from .world import WorldConfig


class ConfigError(ValueError):
    pass


SECTIONS = {"world": WorldConfig, "scorer": ScorerConfig}


def _check_keys(cls, d: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _plain(v):
    if dataclasses.is_dataclass(v):
        return {f.name: _plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    """Everything one pipeline run depends on; ``suite`` carries world and scorer settings."""
    seed: int = 0
    suite: SuiteConfig = SuiteConfig(seeds=(0,))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "suite": _plain(self.suite)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @property
    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        _check_keys(cls, d, "config")
        suite = dict(d.get("suite", {}))
        _check_keys(SuiteConfig, suite, "suite")
        for key, sub in SECTIONS.items():
            if key in suite:
                _check_keys(sub, suite[key], f"suite.{key}")
                vals = {k: tuple(v) if isinstance(v, list) else v for k, v in suite[key].items()}
                suite[key] = sub(**vals)
        suite = {k: tuple(v) if isinstance(v, list) else v for k, v in suite.items()}
        try:
            return cls(seed=int(d.get("seed", 0)), suite=SuiteConfig(**suite))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(d)

    def override(self, **changes) -> "PipelineConfig":
        """Apply flat overrides: ``seed`` or any SuiteConfig / ScorerConfig field."""
        suite_names = {f.name for f in dataclasses.fields(SuiteConfig)}
        scorer_names = {f.name for f in dataclasses.fields(ScorerConfig)}
        seed = self.seed
        suite_kw, scorer_kw = {}, {}
        for k, v in changes.items():
            if v is None:
                continue
            if k == "seed":
                seed = int(v)
            elif k in suite_names:
                suite_kw[k] = v
            elif k in scorer_names:
                scorer_kw[k] = v
            else:
                raise ConfigError(f"unknown override {k}")
        suite = dataclasses.replace(self.suite, **suite_kw)
        if scorer_kw:
            suite = dataclasses.replace(suite, scorer=dataclasses.replace(suite.scorer, **scorer_kw))
        return PipelineConfig(seed, suite)
