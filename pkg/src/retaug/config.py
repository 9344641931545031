"""Pipeline configuration: shipped defaults, JSON loading, manifest echo.

A run is fully determined by one JSON document plus a seed, and every
command writes a manifest that echoes the resolved configuration so an
artifact can always be traced back to the exact settings that produced it.
Manifests carry no timestamps and only relative paths; identical runs
produce identical bytes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import ConfigError
from .ral import RalHyperParams
from .augmenter import RafHyperParams

OUT_DIR_ENV = "RETAUG_OUT_DIR"

# per-dataset default for how many auxiliary logits are fused per proposal
DATASET_TRUNCATE_TOP = {"coco": 1, "lvis": 20}


@dataclass(frozen=True)
class RetrievalConfig:
    m: int = 2000
    keep_fraction: float = 0.5
    sample_mode: str = "random"

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"m must be positive, got {self.m}")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.sample_mode not in ("random", "similarity"):
            raise ConfigError(f"unknown sample_mode {self.sample_mode!r}")


@dataclass(frozen=True)
class EnsembleConfig:
    mode: str = "oadp"
    dataset: str = "lvis"
    truncate_top: int | None = None  # None = dataset default

    def __post_init__(self):
        if self.dataset not in DATASET_TRUNCATE_TOP:
            raise ConfigError(f"unknown dataset {self.dataset!r}")

    def resolved_truncate_top(self) -> int:
        if self.truncate_top is not None:
            return self.truncate_top
        return DATASET_TRUNCATE_TOP[self.dataset]


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    retrieval: RetrievalConfig
    ral: RalHyperParams
    raf: RafHyperParams
    ensemble: EnsembleConfig
    paths: dict[str, str]


def default_config(seed: int = 0) -> PipelineConfig:
    return PipelineConfig(
        seed=seed,
        retrieval=RetrievalConfig(),
        ral=RalHyperParams(),
        raf=RafHyperParams(),
        ensemble=EnsembleConfig(),
        paths={},
    )


def config_to_dict(cfg: PipelineConfig) -> dict:
    return {
        "seed": cfg.seed,
        "retrieval": {
            "m": cfg.retrieval.m,
            "keep_fraction": cfg.retrieval.keep_fraction,
            "sample_mode": cfg.retrieval.sample_mode,
        },
        "ral": {
            "lambda_hard": cfg.ral.lambda_hard,
            "lambda_easy": cfg.ral.lambda_easy,
            "alpha_hard": cfg.ral.alpha_hard,
            "alpha_easy": cfg.ral.alpha_easy,
            "beta_hard": cfg.ral.beta_hard,
            "beta_easy": cfg.ral.beta_easy,
            "n": cfg.ral.n,
        },
        "raf": {
            "k": cfg.raf.k,
            "layers": cfg.raf.layers,
            "heads": cfg.raf.heads,
            "ffn_dim": cfg.raf.ffn_dim,
            "beta_cls": cfg.raf.beta_cls,
            "beta_reg": cfg.raf.beta_reg,
            "learning_rate": cfg.raf.learning_rate,
            "iterations": cfg.raf.iterations,
            "activation": cfg.raf.activation,
        },
        "ensemble": {
            "mode": cfg.ensemble.mode,
            "dataset": cfg.ensemble.dataset,
            "truncate_top": cfg.ensemble.truncate_top,
        },
        "paths": dict(cfg.paths),
    }


def _section(data: dict, key: str, base):
    raw = data.get(key)
    if raw is None:
        return base
    if not isinstance(raw, dict):
        raise ConfigError(f"section {key!r} must be an object")
    known = set(base.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
    try:
        return replace(base, **raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {key!r} section: {exc}") from None


def config_from_dict(data: dict) -> PipelineConfig:
    if "seed" not in data:
        raise ConfigError("config requires an explicit seed")
    top_known = {"seed", "retrieval", "ral", "raf", "ensemble", "paths"}
    unknown = set(data) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    paths = data.get("paths", {})
    if not isinstance(paths, dict):
        raise ConfigError("paths must be an object of name -> path")
    return PipelineConfig(
        seed=int(data["seed"]),
        retrieval=_section(data, "retrieval", RetrievalConfig()),
        ral=_section(data, "ral", RalHyperParams()),
        raf=_section(data, "raf", RafHyperParams()),
        ensemble=_section(data, "ensemble", EnsembleConfig()),
        paths={str(k): str(v) for k, v in paths.items()},
    )


def load_config(path: str | Path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(data)


def resolve_out_dir(flag_value: str | None, default: str = ".") -> Path:
    """Output directory priority: explicit flag, then environment, then default."""
    if flag_value:
        return Path(flag_value)
    env = os.environ.get(OUT_DIR_ENV)
    return Path(env) if env else Path(default)


def write_manifest(
    out_dir: str | Path,
    command: str,
    cfg: PipelineConfig,
    inputs: dict[str, str],
    outputs: dict[str, str],
    extra: dict | None = None,
) -> Path:
    """Write <command>.manifest.json next to the command's artifacts.

    Paths are recorded relative to the manifest so two runs of the same
    configuration differ in zero bytes regardless of where they live.
    """
    out_dir = Path(out_dir)

    def rel(p: str) -> str:
        p = Path(p)
        try:
            return p.relative_to(out_dir).as_posix()
        except ValueError:
            return p.name

    doc = {
        "command": command,
        "config": config_to_dict(cfg),
        "inputs": {k: rel(v) for k, v in sorted(inputs.items())},
        "outputs": {k: rel(v) for k, v in sorted(outputs.items())},
    }
    if extra:
        doc["result"] = extra
    path = out_dir / f"{command}.manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
