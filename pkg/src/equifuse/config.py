"""Flat key-value experiment configuration.

The format is deliberately minimal for diff-friendly experiment
tracking: one ``section.key = value`` per line, ``#`` comments, no
nesting. Four schedule keys are required; everything else has a
documented default. The resolved configuration renders canonically
(sorted keys) and is content-hashed; run outputs carry that hash in
their header line so the report command can verify provenance.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Optional

from .disentangle import DisentangleConfig
from .energy import EnergyCoefficients
from .enhance import EnhanceConfig
from .errors import ConfigError
from .fusion import ObjectiveWeights
from .trust import DistillConfig

_REQUIRED = object()

# key -> (type, default). _REQUIRED marks keys a config file must set.
SCHEMA: Dict[str, tuple] = {
    "train.stage1_epochs": (int, _REQUIRED),
    "train.stage2_epochs": (int, _REQUIRED),
    "train.learning_rate": (float, _REQUIRED),
    "train.batch_size": (int, _REQUIRED),
    "train.momentum": (float, 0.0),
    "train.train_samples": (int, 1024),
    "train.stage2_freeze_stage1": (bool, False),
    "train.keep_stage1_losses": (bool, True),
    "train.mode": (str, "classification"),
    "train.log_eval_samples": (int, 512),
    "model.encoder_dim": (int, 16),
    "model.shared_dim": (int, 8),
    "model.specific_dim": (int, 8),
    "model.hidden": (int, 24),
    "model.fusion_hidden": (int, 24),
    "disentangle.tau": (float, 0.1),
    "disentangle.lambda_dis": (float, 0.1),
    "disentangle.lambda_uni": (float, 0.1),
    "enhance.noise_scale": (float, 0.1),
    "enhance.noise_dim": (int, 4),
    "enhance.gamma_task": (float, 0.1),
    "energy.alpha_e": (float, 0.25),
    "energy.beta_e": (float, 1.0),
    "energy.gamma_e": (float, 1.0),
    "energy.lambda_flow": (float, 0.05),
    "energy.delta_e": (float, 0.01),
    "distill.tau_kd": (float, 2.0),
    "distill.mc_passes": (int, 5),
    "distill.mc_noise": (float, 0.05),
    "objective.zeta": (float, 0.5),
    "objective.beta_w": (float, 0.1),
    "objective.gamma_w": (float, 0.1),
    "objective.eta_w": (float, 0.1),
}


def parse_flat_text(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; raises ConfigError with line numbers."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, value: str, typ):
    try:
        if typ is bool:
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return typ(value)
    except ValueError:
        raise ConfigError(
            f"key {key!r}: cannot parse {value!r} as {typ.__name__}"
        ) from None


@dataclass(frozen=True)
class TrainSettings:
    stage1_epochs: int
    stage2_epochs: int
    learning_rate: float
    batch_size: int
    momentum: float
    train_samples: int
    stage2_freeze_stage1: bool
    keep_stage1_losses: bool
    mode: str
    log_eval_samples: int


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainSettings
    disentangle: DisentangleConfig
    enhance: EnhanceConfig
    energy: EnergyCoefficients
    distill: DistillConfig
    objective: ObjectiveWeights
    fusion_hidden: int = 24
    seed: int = 0

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)


def resolve(raw: Dict[str, str]) -> Dict[str, object]:
    """Apply the schema: type-check, default, and reject unknown keys."""
    for key in raw:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
    resolved: Dict[str, object] = {}
    for key, (typ, default) in SCHEMA.items():
        if key in raw:
            resolved[key] = _coerce(key, raw[key], typ)
        elif default is _REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        else:
            resolved[key] = default
    return resolved


def build_config(resolved: Dict[str, object], seed: int) -> ExperimentConfig:
    g = resolved.get
    return ExperimentConfig(
        train=TrainSettings(
            stage1_epochs=g("train.stage1_epochs"),
            stage2_epochs=g("train.stage2_epochs"),
            learning_rate=g("train.learning_rate"),
            batch_size=g("train.batch_size"),
            momentum=g("train.momentum"),
            train_samples=g("train.train_samples"),
            stage2_freeze_stage1=g("train.stage2_freeze_stage1"),
            keep_stage1_losses=g("train.keep_stage1_losses"),
            mode=g("train.mode"),
            log_eval_samples=g("train.log_eval_samples"),
        ),
        disentangle=DisentangleConfig(
            encoder_dim=g("model.encoder_dim"),
            shared_dim=g("model.shared_dim"),
            specific_dim=g("model.specific_dim"),
            hidden=g("model.hidden"),
            tau=g("disentangle.tau"),
            lambda_dis=g("disentangle.lambda_dis"),
            lambda_uni=g("disentangle.lambda_uni"),
        ),
        enhance=EnhanceConfig(
            noise_scale=g("enhance.noise_scale"),
            noise_dim=g("enhance.noise_dim"),
            gamma_task=g("enhance.gamma_task"),
            hidden=g("model.hidden"),
        ),
        energy=EnergyCoefficients(
            alpha_e=g("energy.alpha_e"),
            beta_e=g("energy.beta_e"),
            gamma_e=g("energy.gamma_e"),
            lambda_flow=g("energy.lambda_flow"),
            delta_e=g("energy.delta_e"),
        ),
        distill=DistillConfig(
            tau_kd=g("distill.tau_kd"),
            mc_passes=g("distill.mc_passes"),
            mc_noise=g("distill.mc_noise"),
        ),
        objective=ObjectiveWeights(
            zeta=g("objective.zeta"),
            beta_w=g("objective.beta_w"),
            gamma_w=g("objective.gamma_w"),
            eta_w=g("objective.eta_w"),
        ),
        fusion_hidden=g("model.fusion_hidden"),
        seed=seed,
    )


def canonical_text(resolved: Dict[str, object], seed: Optional[int] = None) -> str:
    lines = [f"{key} = {resolved[key]}" for key in sorted(resolved)]
    if seed is not None:
        lines.append(f"seed = {seed}")
    return "\n".join(lines) + "\n"


def config_hash(resolved: Dict[str, object], seed: Optional[int] = None) -> str:
    return hashlib.sha256(canonical_text(resolved, seed).encode()).hexdigest()[:12]


def load_config_file(path, seed: int) -> tuple:
    """Returns (ExperimentConfig, resolved dict, canonical text, hash)."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    resolved = resolve(parse_flat_text(p.read_text()))
    cfg = build_config(resolved, seed)
    return cfg, resolved, canonical_text(resolved, seed), config_hash(resolved, seed)


def default_resolved() -> Dict[str, object]:
    """Schema defaults with the desk-scale schedule filled in."""
    out = {}
    for key, (_, default) in SCHEMA.items():
        out[key] = default if default is not _REQUIRED else None
    out["train.stage1_epochs"] = 60
    out["train.stage2_epochs"] = 60
    out["train.learning_rate"] = 0.05
    out["train.batch_size"] = 32
    return out


def default_config(seed: int = 0) -> ExperimentConfig:
    return build_config(default_resolved(), seed)


def default_config_text() -> str:
    return canonical_text(default_resolved())
