"""Run configuration: plain-text dotted-key files, overrides, typed builders.

Config files are lines of ``dotted.key = value`` (values parsed as JSON where
possible, bare strings otherwise; ``#`` starts a comment). ``--set key=value``
overrides compose on top with override-wins semantics. Unknown keys are
rejected before any work starts, and the effective config is echoed into
every output artifact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

from .errors import ValidationError
from .evalharness import BUILTIN_PROFILES, ToolchainProfile
from .infer import SamplingConfig
from .model import ModelConfig
from .train import TrainConfig

__all__ = [
    "default_config",
    "load_config_file",
    "apply_overrides",
    "validate_config",
    "canonical_dump",
    "config_digest",
    "build_model_config",
    "build_train_config",
    "build_sampling_config",
    "build_profiles",
]

_TOOLCHAIN_KEYS = ("compile_cmd", "run_cmd", "compile_timeout", "run_timeout",
                   "expected_exit")


def default_config() -> dict[str, Any]:
    cfg: dict[str, Any] = {
        "seed": 0,
        "model.vocab_size": 260,
        "model.d_model": 64,
        "model.n_layers": 2,
        "model.n_heads": 4,
        "model.d_ff": 256,
        "model.max_seq_len": 512,
        "model.adapter_targets": ["q", "v", "ff1", "ff2"],
        "model.adapter_rank": 8,
        "model.adapter_alpha": None,
        "model.quantize_base": False,
        "model.block_size_1": 64,
        "model.block_size_2": 256,
        "train.mode": "morepair",
        "train.lambda": 1.0,
        "train.neftune_alpha": 5.0,
        "train.learning_rate": 0.01,
        "train.adam_beta1": 0.9,
        "train.adam_beta2": 0.999,
        "train.weight_decay": 0.0,
        "train.steps": 200,
        "train.batch_size": 4,
        "train.loss_reduction": "mean",
        "train.objective_schedule": "paired",
        "train.strict": True,
        "train.train_embeddings": False,
        "train.warmup_steps": 0,
        "train.checkpoint_every": 0,
        "data.include_description": True,
        "data.guidance_position": "before",
        "teacher.kind": "mock",
        "teacher.url": "",
        "teacher.model_name": "gpt-4-1106-preview",
        "teacher.temperature": 1.0,
        "teacher.retries": 2,
        "teacher.strict": True,
        "sampling.temperature": 1.0,
        "sampling.top_p": 1.0,
        "sampling.do_sample": True,
        "sampling.max_new_tokens": 256,
        "sampling.num_candidates": 10,
        "eval.ks": [1, 5, 10],
        "eval.workers": 4,
        "eval.keep_scratch": False,
        "eval.strict": True,
    }
    for name, profile in BUILTIN_PROFILES.items():
        cfg[f"toolchain.{name}.compile_cmd"] = profile.compile_cmd
        cfg[f"toolchain.{name}.run_cmd"] = profile.run_cmd
        cfg[f"toolchain.{name}.compile_timeout"] = profile.compile_timeout
        cfg[f"toolchain.{name}.run_timeout"] = profile.run_timeout
        cfg[f"toolchain.{name}.expected_exit"] = profile.expected_exit
    return cfg


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config_file(path) -> dict[str, Any]:
    """Parse a dotted-key config file into a flat mapping."""
    out: dict[str, Any] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        out[key.strip()] = _parse_value(value)
    return out


def apply_overrides(cfg: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    merged = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"--set needs key=value, got {item!r}")
        key, _, value = item.partition("=")
        merged[key.strip()] = _parse_value(value)
    return merged


def validate_config(cfg: dict[str, Any]) -> dict[str, Any]:
    """Reject unknown keys; fill defaults for any missing ones."""
    defaults = default_config()
    for key in cfg:
        if key in defaults:
            continue
        parts = key.split(".")
        if len(parts) == 3 and parts[0] == "toolchain" and parts[2] in _TOOLCHAIN_KEYS:
            continue  # custom toolchain profiles are open-ended by name
        raise ValidationError(f"unknown config key {key!r}")
    resolved = defaults
    resolved.update(cfg)
    return resolved


def canonical_dump(cfg: dict[str, Any]) -> str:
    lines = [f"{key} = {json.dumps(cfg[key])}" for key in sorted(cfg)]
    return "\n".join(lines) + "\n"


def config_digest(cfg: dict[str, Any]) -> str:
    return hashlib.sha256(canonical_dump(cfg).encode("utf-8")).hexdigest()


def build_model_config(cfg: dict[str, Any]) -> ModelConfig:
    return ModelConfig(
        vocab_size=cfg["model.vocab_size"],
        d_model=cfg["model.d_model"],
        n_layers=cfg["model.n_layers"],
        n_heads=cfg["model.n_heads"],
        d_ff=cfg["model.d_ff"],
        max_seq_len=cfg["model.max_seq_len"],
        adapter_targets=tuple(cfg["model.adapter_targets"]),
        adapter_rank=cfg["model.adapter_rank"],
        adapter_alpha=cfg["model.adapter_alpha"],
    )


def build_train_config(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        mode=cfg["train.mode"],
        lambda_weight=float(cfg["train.lambda"]),
        neftune_alpha=float(cfg["train.neftune_alpha"]),
        learning_rate=float(cfg["train.learning_rate"]),
        adam_beta1=float(cfg["train.adam_beta1"]),
        adam_beta2=float(cfg["train.adam_beta2"]),
        weight_decay=float(cfg["train.weight_decay"]),
        steps=int(cfg["train.steps"]),
        batch_size=int(cfg["train.batch_size"]),
        seed=int(cfg["seed"]),
        loss_reduction=cfg["train.loss_reduction"],
        objective_schedule=cfg["train.objective_schedule"],
        strict=bool(cfg["train.strict"]),
        train_embeddings=bool(cfg["train.train_embeddings"]),
        warmup_steps=int(cfg["train.warmup_steps"]),
        include_description=bool(cfg["data.include_description"]),
        guidance_position=cfg["data.guidance_position"],
    )


def build_sampling_config(cfg: dict[str, Any]) -> SamplingConfig:
    return SamplingConfig(
        temperature=float(cfg["sampling.temperature"]),
        top_p=float(cfg["sampling.top_p"]),
        do_sample=bool(cfg["sampling.do_sample"]),
        max_new_tokens=int(cfg["sampling.max_new_tokens"]),
        seed=int(cfg["seed"]),
        num_candidates=int(cfg["sampling.num_candidates"]),
    )


def build_profiles(cfg: dict[str, Any]) -> dict[str, ToolchainProfile]:
    names = {key.split(".")[1] for key in cfg if key.startswith("toolchain.")}
    profiles = {}
    for name in sorted(names):
        fields = {}
        for fkey in _TOOLCHAIN_KEYS:
            full = f"toolchain.{name}.{fkey}"
            if full in cfg:
                fields[fkey] = cfg[full]
        base = BUILTIN_PROFILES.get(name)
        if base is not None:
            merged = {
                "compile_cmd": base.compile_cmd, "run_cmd": base.run_cmd,
                "compile_timeout": base.compile_timeout,
                "run_timeout": base.run_timeout,
                "expected_exit": base.expected_exit,
            }
            merged.update(fields)
            fields = merged
        if "run_cmd" not in fields:
            raise ValidationError(f"toolchain profile {name!r} needs run_cmd")
        fields.setdefault("compile_cmd", "")
        profiles[name] = ToolchainProfile(name=name, **fields)
    return profiles
