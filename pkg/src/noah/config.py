"""Run configuration: one JSON document drives every pipeline stage.

Unknown keys are rejected up front so typos fail before any work starts, and
every command writes the fully resolved document (defaults filled in) next to
its outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .evolution import EvolutionSchedule
from .optim import OptimHyper
from .space import MODULES


class ConfigError(ValueError):
    pass


@dataclass
class BackboneSection:
    num_layers: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    mlp_hidden: int = 256
    patch_size: int = 4


@dataclass
class PretrainSection:
    epochs: int = 25
    samples: int = 1024
    num_classes: int = 16
    seed: int = 101
    base_lr: float = 1e-3
    weight_decay: float = 1e-3
    warmup_epochs: int = 2
    batch_size: int = 64
    noise: float = 8.0


@dataclass
class SpaceSection:
    depth_choices: list = field(default_factory=lambda: [1, 2, 3, 4])
    dim_choices: dict = field(default_factory=lambda: {m: [1, 5, 10] for m in MODULES})
    budget_fraction: float = 0.0075
    budget: int | None = None  # absolute override of the fraction
    budget_includes_head: bool = False


@dataclass
class HyperSection:
    base_lr: float
    total_epochs: int
    weight_decay: float = 1e-3
    warmup_epochs: int = 10
    batch_size: int = 64

    def to_hyper(self) -> OptimHyper:
        return OptimHyper(
            base_lr=self.base_lr,
            total_epochs=self.total_epochs,
            weight_decay=self.weight_decay,
            warmup_epochs=min(self.warmup_epochs, self.total_epochs),
            batch_size=self.batch_size,
        )


@dataclass
class EvolutionSection:
    generations: int = 5
    initial_population: int = 50
    parent_count: int = 10
    per_gen_random: int = 50
    per_gen_crossover: int = 50
    per_gen_mutation: int = 50
    mutation_prob: float = 0.2
    mutation_scope: str = "gene"
    workers: int = 1

    def to_schedule(self) -> EvolutionSchedule:
        fields = {f.name for f in dataclasses.fields(EvolutionSchedule)}
        return EvolutionSchedule(
            **{k: v for k, v in dataclasses.asdict(self).items() if k in fields}
        )


@dataclass
class RuntimeSection:
    adapter_skip: bool = False
    lora_scale: float = 1.0
    decay_vpt: bool = False
    debug_validation: bool = False
    retrain_from_scratch: bool = False


@dataclass
class DatasetSection:
    path: str | None = None  # CLI --data overrides


@dataclass
class RunConfig:
    seed: int = 0
    backbone: BackboneSection = field(default_factory=BackboneSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    search_space: SpaceSection = field(default_factory=SpaceSection)
    supernet_hyper: HyperSection = field(
        default_factory=lambda: HyperSection(base_lr=5e-4, total_epochs=100)
    )
    subnet_hyper: HyperSection = field(
        default_factory=lambda: HyperSection(base_lr=1e-3, total_epochs=100)
    )
    evolution: EvolutionSection = field(default_factory=EvolutionSection)
    runtime: RuntimeSection = field(default_factory=RuntimeSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {
    "backbone": BackboneSection,
    "pretrain": PretrainSection,
    "search_space": SpaceSection,
    "supernet_hyper": HyperSection,
    "subnet_hyper": HyperSection,
    "evolution": EvolutionSection,
    "runtime": RuntimeSection,
    "dataset": DatasetSection,
}


def _build_section(cls, payload: dict, where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected an object, got {type(payload).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(doc) - (set(_SECTIONS) | {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kwargs = {}
    if "seed" in doc:
        if not isinstance(doc["seed"], int):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = doc["seed"]
    for name, cls in _SECTIONS.items():
        if name in doc:
            kwargs[name] = _build_section(cls, doc[name], name)
    run = RunConfig(**kwargs)
    _validate(run)
    return run


def _validate(run: RunConfig) -> None:
    bb = run.backbone
    if bb.embed_dim % bb.num_heads != 0:
        raise ConfigError(
            f"backbone.embed_dim {bb.embed_dim} not divisible by num_heads {bb.num_heads}"
        )
    sp = run.search_space
    if not sp.depth_choices or max(sp.depth_choices) > bb.num_layers:
        raise ConfigError(
            f"search_space.depth_choices {sp.depth_choices} exceed {bb.num_layers} layers"
        )
    if isinstance(sp.dim_choices, list):
        sp.dim_choices = {m: list(sp.dim_choices) for m in MODULES}
    if set(sp.dim_choices) != set(MODULES):
        raise ConfigError(f"search_space.dim_choices must cover {MODULES}")
    if sp.budget is None and not 0 < sp.budget_fraction <= 1:
        raise ConfigError("search_space.budget_fraction outside (0, 1]")
    for section in (run.supernet_hyper, run.subnet_hyper):
        section.to_hyper()  # OptimHyper raises on bad values
    run.evolution.to_schedule()
    if run.pretrain.epochs < 0 or run.pretrain.samples < run.pretrain.num_classes:
        raise ConfigError("pretrain section invalid")


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(doc)


def write_resolved(run: RunConfig, out_dir) -> Path:
    """Persist the defaults-filled config next to a command's outputs."""
    out = Path(out_dir) / "config.json"
    out.write_text(run.to_json())
    return out
