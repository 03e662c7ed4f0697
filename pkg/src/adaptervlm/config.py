"""Run configuration files: a named profile plus explicit overrides.

``paper`` keeps the published hyperparameters verbatim (including the
rising cosine triple); ``toy`` is the desk-scale profile the tests run.
A run is reproducible from its RunConfig alone: the single seed feeds
model init, batch sampling, and instruction sampling.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .model import ConfigError, ModelConfig
from .training import TrainConfig

TRAIN_PROFILES: dict[str, dict] = {
    "paper": dict(
        init_lr=1e-7, min_lr=8e-7, warmup_lr=1e-8, weight_decay=0.05,
        max_epochs=2, batch_size=32, warmup_steps=5000, iters_per_epoch=5000,
    ),
    "toy": dict(
        init_lr=5e-2, min_lr=5e-3, warmup_lr=1e-3, weight_decay=0.05,
        max_epochs=1, batch_size=4, warmup_steps=10, iters_per_epoch=50,
    ),
}


@dataclass(frozen=True)
class RunConfig:
    profile: str
    seed: int
    model: ModelConfig
    train: TrainConfig
    preset: str = "artgpt4"


def build_run_config(profile: str = "toy", seed: int = 0,
                     model_overrides: dict | None = None,
                     train_overrides: dict | None = None,
                     preset: str = "artgpt4") -> RunConfig:
    if profile not in TRAIN_PROFILES:
        raise ConfigError(f"unknown profile {profile!r}, expected one of "
                          f"{sorted(TRAIN_PROFILES)}")
    train_kwargs = dict(TRAIN_PROFILES[profile])
    train_kwargs.update(train_overrides or {})
    train_kwargs["seed"] = seed
    try:
        model = ModelConfig(**(model_overrides or {}))
        train = TrainConfig(**train_kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(profile=profile, seed=seed, model=model, train=train, preset=preset)


def load_run_config(path, preset: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    known = {"profile", "seed", "model", "train", "preset"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return build_run_config(
        profile=raw.get("profile", "toy"),
        seed=int(raw.get("seed", 0)),
        model_overrides=raw.get("model"),
        train_overrides=raw.get("train"),
        preset=preset if preset is not None else raw.get("preset", "artgpt4"),
    )
