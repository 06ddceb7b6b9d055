"""Flat run configuration shared by all CLI commands.

Values come from, in increasing priority: the defaults below, a YAML or
JSON file given with ``--config``, and command-line flags.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

from qlossbench.experiment import NoiseParams
from qlossbench.lattice import Basis
from qlossbench.stgnn.model import ModelConfig
from qlossbench.stgnn.train import OptimizerConfig

DECODERS = ("mwpm", "de-mwpm", "flicker", "stgnn")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class RunConfig:
    # experiment
    d: int = 3
    T: int = 5
    basis: str = "Z"
    p_pauli: float = 0.005
    p_meas: float = 0.005
    p_loss: float = 0.005
    shots: int = 1000
    seed: int = 0
    # decoding
    decoder: str = "mwpm"
    threshold: float = 0.5
    erasure_eps: float = 1e-3
    erasure_onset: str = "marginal"
    verdict_max: bool = False
    background_shots: int = 2000
    # model
    D: int = 32
    n_heads: int = 4
    N_l: int = 2
    kernel: int = 3
    distance_cap: int = 8
    lambda_logic: float = 1.0
    lambda_loss: float = 1.0
    dropout: float = 0.0
    # optimizer
    lr: float = 3e-3
    lr_schedule: str = "constant"
    epochs: int = 200
    batch_size: int = 64
    target_accuracy: float | None = None
    # benchmark
    repetitions: int = 100
    warmup: int = 5
    # paths
    dataset: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    resume: str | None = None

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def noise(self) -> NoiseParams:
        return NoiseParams(self.p_pauli, self.p_meas, self.p_loss)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            D=self.D, n_heads=self.n_heads, N_l=self.N_l, kernel=self.kernel,
            distance_cap=self.distance_cap, lambda_logic=self.lambda_logic,
            lambda_loss=self.lambda_loss, dropout=self.dropout, seed=self.seed,
        )

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
            schedule=self.lr_schedule,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self, command: str) -> None:
        if self.d < 3 or self.d % 2 == 0:
            raise ConfigError(f"d must be odd and >= 3, got {self.d}")
        if self.T < 1:
            raise ConfigError(f"T must be positive, got {self.T}")
        try:
            Basis.parse(self.basis)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for name in ("p_pauli", "p_meas", "p_loss"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.shots < 0:
            raise ConfigError("shots must be non-negative")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {', '.join(DECODERS)}, got {self.decoder!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if self.erasure_onset not in ("marginal", "flat"):
            raise ConfigError("erasure_onset must be 'marginal' or 'flat'")
        if command in ("decode", "train", "bench") and not self.dataset:
            raise ConfigError(f"{command} needs a dataset path")
        if command in ("decode", "bench") and self.decoder == "stgnn" and not self.checkpoint:
            raise ConfigError("the stgnn decoder needs a checkpoint path")
        if command in ("sample", "train") and not self.out:
            raise ConfigError(f"{command} needs an output path (--out)")
        try:
            self.model_config()
            self.optimizer()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def load_config_file(path: str | Path) -> dict:
    """Read a flat mapping from a YAML or JSON file."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a flat mapping of keys")
    unknown = sorted(set(raw) - set(RunConfig.keys()))
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return raw


def resolve(file_values: dict, overrides: dict) -> RunConfig:
    values = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    cfg = RunConfig()
    for f in fields(RunConfig):
        if f.name in values:
            setattr(cfg, f.name, values[f.name])
    return cfg
