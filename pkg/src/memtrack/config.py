"""Declarative run configuration: one TOML file drives every command.

Sections: [data], [model], [memory], [train], [synthetic], [sweep].
Unknown keys anywhere are rejected.  Defaults follow the reference
hyperparameters (300-dim GRU and MLPs, decay 0.98, lr 1e-3 halved on plateau
down to 1e-4, tau 1.0 halved every 10 epochs, loss weights 1/5/50, lambda 0.1).
"""

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .corpus import SyntheticSpec
from .memory import MemoryConfig
from .trainer import TrainConfig


class ConfigError(Exception):
    pass


@dataclass
class DataConfig:
    train_tsv: str = ""
    train_embed: str = ""
    val_tsv: str = ""
    val_embed: str = ""
    counts: str = ""


@dataclass
class ModelConfig:
    hidden_dim: int = 300
    dropout: float = 0.5
    mlp_hidden_dim: int = 300
    update_mlp_hidden_layers: int = 0
    init_seed: int = 0


@dataclass
class MemorySection:
    num_cells: int = 8
    variant: str = "vanilla"
    key_dim: int = 20
    decay: float = 0.98
    coref_usage_threshold: float = 0.0


@dataclass
class SyntheticSection:
    num_docs_train: int = 100
    num_docs_val: int = 20
    doc_length: list = field(default_factory=lambda: [35, 45])
    num_entities: list = field(default_factory=lambda: [2, 4])
    mentions_per_entity: list = field(default_factory=lambda: [2, 4])
    vocab_size: int = 20
    dim: int = 32
    noise_scale: float = 0.05
    distractor_noise: float = 0.0
    seed: int = 7


@dataclass
class SweepSection:
    cells: list = field(default_factory=lambda: [2, 4, 6, 8, 10, 12, 14, 16, 18, 20])
    runs: int = 5


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    memory: MemorySection = field(default_factory=MemorySection)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    config_hash: str = ""

    def memory_config(self):
        return MemoryConfig(
            num_cells=self.memory.num_cells,
            hidden_dim=self.model.hidden_dim,
            variant=self.memory.variant,
            key_dim=self.memory.key_dim,
            decay=self.memory.decay,
            coref_usage_threshold=self.memory.coref_usage_threshold,
            mlp_hidden_dim=self.model.mlp_hidden_dim,
            update_mlp_hidden_layers=self.model.update_mlp_hidden_layers,
        )

    def synthetic_spec(self, seed=None, num_docs=None):
        s = self.synthetic
        return SyntheticSpec(
            num_docs=num_docs if num_docs is not None else s.num_docs_train,
            doc_length=tuple(s.doc_length),
            num_entities=tuple(s.num_entities),
            mentions_per_entity=tuple(s.mentions_per_entity),
            vocab_size=s.vocab_size,
            dim=s.dim,
            noise_scale=s.noise_scale,
            distractor_noise=s.distractor_noise,
            seed=seed if seed is not None else s.seed,
        )


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "memory": MemorySection,
    "train": TrainConfig,
    "synthetic": SyntheticSection,
    "sweep": SweepSection,
}


def _build_section(name, cls, values):
    known = {f.name for f in fields(cls)}
    bad = sorted(set(values) - known)
    if bad:
        raise ConfigError(f"[{name}]: unknown keys {bad}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def load_config(path, seed_override=None):
    path = Path(path)
    raw = path.read_bytes()
    try:
        parsed = tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    bad_sections = sorted(set(parsed) - set(_SECTIONS))
    if bad_sections:
        raise ConfigError(f"unknown config sections {bad_sections}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build_section(name, cls, parsed.get(name, {}))
    config = RunConfig(config_hash=hashlib.sha256(raw).hexdigest(), **kwargs)
    if seed_override is not None:
        config.train.seed = seed_override
        config.synthetic.seed = seed_override
    return config
