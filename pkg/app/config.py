"""
Configuration management for the malaria cell toolkit.
Uses pydantic-settings for environment variable and config file validation.
"""
import json
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

from pydantic import Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import ParameterError
from .models.malaria_models import AugmentPolicy, ExperimentConfig, TrainConfig

ENV_PREFIX = "MALARIA_"
MANIFEST_SCHEMA_VERSION = 1
LOG_SCHEMA_VERSION = 1

PRESETS: Dict[str, Dict[str, Any]] = {
    "custom": {"model": "custom", "epochs": 30, "batch_size": 64, "lr": 1.0, "freeze": None},
    "vgg-baseline": {"model": "vgg-baseline", "epochs": 50, "batch_size": 64, "lr": 0.01, "freeze": "L1-L16"},
    "vgg-baseline-128": {"model": "vgg-baseline", "epochs": 50, "batch_size": 128, "lr": 0.01, "freeze": "L1-L16"},
}

POLICIES = {
    "default": AugmentPolicy,
    "flips": AugmentPolicy.flips_only,
    "identity": AugmentPolicy.identity,
}


class Settings(BaseSettings):
    """Process-wide defaults loaded from environment variables."""

    app_name: str = "Malaria Cell Toolkit"
    app_version: str = "1.0.0"
    output_root: str = "runs"
    threads: int = Field(0, ge=0, description="Thread cap for numeric libraries, 0 = no cap")
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    default_seed: int = Field(0, ge=0)

    model_config = SettingsConfigDict(
        env_prefix=ENV_PREFIX,
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


class RunConfig(BaseSettings):
    """
    Effective configuration of one command.

    Sources, highest precedence first: CLI flags (init kwargs), MALARIA_*
    environment variables, the --config KEY=value file, field defaults.
    Fields left unset take their value from the preset.
    """

    preset: Literal["custom", "vgg-baseline", "vgg-baseline-128"] = "custom"
    model: Optional[Literal["custom", "vgg-baseline"]] = None
    input_size: int = Field(200, ge=2)
    width_divisor: int = Field(1, ge=1)
    epochs: Optional[int] = Field(None, ge=1)
    batch_size: Optional[int] = Field(None, ge=1)
    lr: Optional[float] = Field(None, gt=0)
    rho: float = Field(0.95, gt=0, lt=1)
    eps: float = Field(1e-6, gt=0)
    freeze: Optional[str] = None
    pretrained: Optional[str] = None
    dropout: bool = True

    preprocess: Literal["rescale", "standardize", "mean_normalize"] = "rescale"
    stain_normalize: bool = False
    augment: Literal["none", "online", "offline"] = "none"
    augment_copies: int = Field(4, ge=1)
    augment_policy: Literal["default", "flips", "identity"] = "default"
    featurewise_standardization: bool = False
    zca_whitening: bool = False

    head: Literal["softmax", "svm"] = "softmax"
    svm_c: float = Field(1.0, gt=0)
    svm_gamma: float = Field(0.1, gt=0)
    svm_tol: float = Field(1e-3, gt=0)

    seed: int = Field(0, ge=0)
    split_seed: int = Field(0, ge=0)
    patient_disjoint: bool = False
    folds: int = Field(5, ge=2)
    validation_fraction: Optional[float] = Field(None, gt=0, lt=1)
    repeats: int = Field(5, ge=1)
    tta_copies: int = Field(5, ge=1)

    manifest: Optional[str] = None
    out: str = "runs"
    threads: int = Field(0, ge=0)

    model_config = SettingsConfigDict(
        env_prefix=ENV_PREFIX,
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="forbid",
    )

    @model_validator(mode="after")
    def _apply_preset(self) -> "RunConfig":
        for key, value in PRESETS[self.preset].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        return self

    @classmethod
    def load(cls, config_file: Optional[Union[str, Path]] = None, **overrides) -> "RunConfig":
        """Build from an optional KEY=value file plus explicit overrides."""
        overrides = {key: value for key, value in overrides.items() if value is not None}
        if config_file is not None and not Path(config_file).exists():
            raise ParameterError(f"Config file not found: {config_file}")
        return cls(_env_file=config_file, **overrides)

    def policy(self) -> AugmentPolicy:
        return POLICIES[self.augment_policy]().model_copy(update={
            "featurewise_standardization": self.featurewise_standardization,
            "zca_whitening": self.zca_whitening,
        })

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            rho=self.rho, eps=self.eps, shuffle_seed=self.seed,
        )

    def to_experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig(
            model=self.model,
            input_size=self.input_size,
            width_divisor=self.width_divisor,
            train=self.train_config(),
            preprocess=self.preprocess,
            stain_normalize=self.stain_normalize,
            augment=self.augment,
            augment_copies=self.augment_copies,
            policy=self.policy(),
            freeze=self.freeze,
            pretrained=self.pretrained,
            head=self.head,
            svm_c=self.svm_c,
            svm_gamma=self.svm_gamma,
            svm_tol=self.svm_tol,
            dropout=self.dropout,
            seed=self.seed,
        )

    def to_env_lines(self) -> str:
        """Sorted MALARIA_KEY=value lines; unset optional keys are omitted."""
        lines = []
        for key, value in sorted(self.model_dump().items()):
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{ENV_PREFIX}{key.upper()}={value}")
        return "\n".join(lines) + "\n"


def write_provenance(run: RunConfig, out_dir: Union[str, Path], command: str) -> Path:
    """
    Write config.env (reloadable with --config) and provenance.json
    into an output directory. Neither file carries a timestamp.
    """
    from .services.checkpoint import FORMAT_VERSION

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.env").write_text(run.to_env_lines())
    provenance = {
        "command": command,
        "seed": run.seed,
        "split_seed": run.split_seed,
        "checkpoint_format_version": FORMAT_VERSION,
        "manifest_schema_version": MANIFEST_SCHEMA_VERSION,
        "log_schema_version": LOG_SCHEMA_VERSION,
        "package_version": settings.app_version,
        "config": run.model_dump(),
    }
    (out_dir / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    return out_dir


# Global settings instance
settings = Settings()
