"""Run configuration and artifact manifests.

One declarative YAML file configures field mapping, prompt variant, model
endpoint, and seeds; ``${VAR}`` references interpolate environment
variables so secrets stay out of the file. CLI flags override file values.

Every command writes a manifest next to its artifacts recording input
content hashes, the semantic config, the seed, and the tool version.
Execution knobs (parallelism, trace, output paths) are deliberately not
part of the manifest: they cannot change artifact bytes, and reruns across
different knob settings must stay byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import yaml

from . import __version__
from .corpus import DEFAULT_FIELD_MAP, FieldMap
from .gateway import ModelConfig
from .prompting import (
    COMMENT_ONLY,
    DEFAULT_DIFF_TOKEN_BUDGET,
    DEFINITION,
    PromptConfig,
)

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ConfigError(Exception):
    pass


def interpolate_env(value):
    """Replace ``${VAR}`` in strings (recursively in containers)."""
    if isinstance(value, str):
        def sub(match):
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable {name} is not set")
            return os.environ[name]

        return _ENV_REF.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate_env(v) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate_env(v) for v in value]
    return value


@dataclass
class RunConfig:
    fields: FieldMap = DEFAULT_FIELD_MAP
    prompt_variant: str = DEFINITION
    input_mode: str = COMMENT_ONLY
    diff_token_budget: int = DEFAULT_DIFF_TOKEN_BUDGET
    prompt_paths: dict = field(default_factory=dict)
    model: Optional[ModelConfig] = None
    seed: int = 0
    out_dir: Path = Path(".")
    parallelism: int = 1
    trace: bool = False

    def prompt_config(self) -> PromptConfig:
        paths = self.prompt_paths
        return PromptConfig.load(
            instruction_variant=self.prompt_variant,
            input_mode=self.input_mode,
            diff_token_budget=self.diff_token_budget,
            system_template_path=paths.get("system_template"),
            user_comment_template_path=paths.get("user_comment_template"),
            user_diff_template_path=paths.get("user_diff_template"),
            definitions_path=paths.get("definitions"),
            rules_path=paths.get("rules"),
        )

    def semantic_dict(self) -> dict:
        """The manifest-relevant view: everything that can change artifact bytes."""
        out = {
            "fields": {
                "id": self.fields.id,
                "patch": self.fields.patch,
                "comment": self.fields.comment,
                "lang": self.fields.lang,
                "split": self.fields.split,
                "gold_label": self.fields.gold_label,
            },
            "prompt": {
                "variant": self.prompt_variant,
                "input_mode": self.input_mode,
                "diff_token_budget": self.diff_token_budget,
                "paths": {k: str(v) for k, v in sorted(self.prompt_paths.items())},
            },
            "seed": self.seed,
        }
        if self.model is not None:
            out["model"] = {
                "endpoint": self.model.endpoint,
                "model_id": self.model.model_id,
                "temperature": self.model.temperature,
                "max_tokens": self.model.max_tokens,
            }
        return out


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping] = None) -> RunConfig:
    """Build a RunConfig from a YAML file plus flag overrides."""
    raw: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text("utf-8"))
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = interpolate_env(loaded)

    overrides = dict(overrides or {})
    cfg = RunConfig()

    fields_raw = raw.get("fields", {})
    if fields_raw:
        cfg.fields = FieldMap.from_mapping(fields_raw)

    prompt_raw = raw.get("prompt", {})
    cfg.prompt_variant = overrides.get("prompt_variant") or prompt_raw.get("variant", DEFINITION)
    cfg.input_mode = overrides.get("input_mode") or prompt_raw.get("input_mode", COMMENT_ONLY)
    cfg.diff_token_budget = int(
        prompt_raw.get("diff_token_budget", DEFAULT_DIFF_TOKEN_BUDGET)
    )
    cfg.prompt_paths = {
        key: prompt_raw[key]
        for key in (
            "system_template",
            "user_comment_template",
            "user_diff_template",
            "definitions",
            "rules",
        )
        if key in prompt_raw
    }

    model_raw = raw.get("model")
    if model_raw:
        cfg.model = ModelConfig(
            endpoint=model_raw["endpoint"],
            model_id=model_raw.get("model_id", "unknown-model"),
            temperature=float(model_raw.get("temperature", 0.1)),
            max_tokens=int(model_raw.get("max_tokens", 64)),
            timeout=float(model_raw.get("timeout", 60.0)),
            max_attempts=int(model_raw.get("max_attempts", 5)),
            backoff_base=float(model_raw.get("backoff_base", 1.0)),
            api_key_env=model_raw.get("api_key_env", "LLM_API_KEY"),
            trace=bool(overrides.get("trace", False)),
        )

    if overrides.get("seed") is not None:
        cfg.seed = int(overrides["seed"])
    else:
        cfg.seed = int(raw.get("seed", 0))
    if overrides.get("out") is not None:
        cfg.out_dir = Path(overrides["out"])
    else:
        cfg.out_dir = Path(raw.get("out_dir", "."))
    if overrides.get("parallelism") is not None:
        cfg.parallelism = int(overrides["parallelism"])
    else:
        cfg.parallelism = int(raw.get("parallelism", 1))
    cfg.trace = bool(overrides.get("trace", raw.get("trace", False)))
    return cfg


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    out_dir: Union[str, Path],
    command: str,
    inputs: Mapping[str, Union[str, Path]],
    config: RunConfig,
    extra: Optional[Mapping] = None,
) -> Path:
    """Write ``<command>.manifest.json`` describing how artifacts were made."""
    manifest = {
        "tool": {"name": "reviewclean", "version": __version__},
        "command": command,
        "inputs": {
            name: {"path": str(path), "sha256": sha256_file(path)}
            for name, path in sorted(inputs.items())
        },
        "config": config.semantic_dict(),
        "seed": config.seed,
    }
    if extra:
        manifest["extra"] = dict(extra)
    path = Path(out_dir) / f"{command}.manifest.json"
    path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    return path
