"""End-to-end stages wiring the run config to the model machinery.

Each stage is a plain function over (RunConfig, Dataset, seeds) so the CLI,
the tests, and notebook use all share one code path.
"""

from __future__ import annotations

import logging

import numpy as np

from . import space as S
from .backbone import (
    BackboneConfig,
    RuntimeOpts,
    init_backbone,
    pseudo_pretrain,
    reinit_head,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import Dataset, gen_mixed_base_task
from .evolution import SearchTrace, evolve
from .optim import OptimHyper
from .prompts import PromptContext
from .supernet import (
    SubnetModel,
    Supernet,
    build_supernet,
    evaluate,
    extract_subnet,
    fresh_subnet,
    train_subnet,
    train_supernet,
    _evaluate_forward,
)
from .tensor import Tensor, set_debug_validation

log = logging.getLogger("noah.pipeline")


def backbone_config(run: RunConfig, dataset: Dataset) -> BackboneConfig:
    bb = run.backbone
    return BackboneConfig(
        num_layers=bb.num_layers,
        embed_dim=bb.embed_dim,
        num_heads=bb.num_heads,
        mlp_hidden=bb.mlp_hidden,
        patch_size=bb.patch_size,
        image_shape=dataset.image_shape,
        num_classes=dataset.num_classes,
    )


def runtime_opts(run: RunConfig) -> RuntimeOpts:
    set_debug_validation(run.runtime.debug_validation)
    return RuntimeOpts(adapter_skip=run.runtime.adapter_skip, lora_scale=run.runtime.lora_scale)


def backbone_param_count(weights: dict[str, Tensor]) -> int:
    return sum(t.size for n, t in weights.items() if n.startswith("backbone."))


def head_param_count(weights: dict[str, Tensor]) -> int:
    return sum(t.size for n, t in weights.items() if n.startswith("head."))


def search_spec(run: RunConfig, weights: dict[str, Tensor]) -> S.SearchSpaceSpec:
    sp = run.search_space
    budget = sp.budget
    if budget is None:
        budget = S.budget_from_fraction(backbone_param_count(weights), sp.budget_fraction)
    extra = head_param_count(weights) if sp.budget_includes_head else 0
    return S.SearchSpaceSpec(
        num_layers=run.backbone.num_layers,
        depth_choices=tuple(sp.depth_choices),
        dim_choices={m: tuple(v) for m, v in sp.dim_choices.items()},
        embed_dim=run.backbone.embed_dim,
        budget=budget,
        extra_budget_params=extra,
    )


def build_frozen_backbone(run: RunConfig, cfg: BackboneConfig) -> tuple[dict, list[dict]]:
    """Initialize, pseudo-pretrain on the mixed synthetic base task, freeze,
    and re-point the head at the downstream class count."""
    pt = run.pretrain
    rng = np.random.default_rng(pt.seed)
    pre_cfg = BackboneConfig(
        num_layers=cfg.num_layers,
        embed_dim=cfg.embed_dim,
        num_heads=cfg.num_heads,
        mlp_hidden=cfg.mlp_hidden,
        patch_size=cfg.patch_size,
        image_shape=cfg.image_shape,
        num_classes=pt.num_classes,
    )
    weights = init_backbone(pre_cfg, rng)
    pretrain_log: list[dict] = []
    if pt.epochs > 0:
        images, labels = gen_mixed_base_task(
            pt.num_classes, pt.samples, pt.seed, cfg.image_shape, pt.noise
        )
        hyper = OptimHyper(
            base_lr=pt.base_lr,
            total_epochs=pt.epochs,
            weight_decay=pt.weight_decay,
            warmup_epochs=min(pt.warmup_epochs, pt.epochs),
            batch_size=pt.batch_size,
        )
        log.info("pseudo-pretraining backbone: %d samples, %d epochs", len(labels), pt.epochs)
        pretrain_log = pseudo_pretrain(weights, pre_cfg, images, labels, hyper, rng)
    else:
        from .backbone import freeze_backbone

        freeze_backbone(weights)
    reinit_head(weights, cfg, cfg.num_classes, rng)
    return weights, pretrain_log


def train_supernet_stage(
    run: RunConfig, dataset: Dataset
) -> tuple[Supernet, dict[str, list[dict]]]:
    cfg = backbone_config(run, dataset)
    weights, pretrain_log = build_frozen_backbone(run, cfg)
    spec = search_spec(run, weights)
    rng = np.random.default_rng(run.seed)
    sn = build_supernet(weights, cfg, spec, rng, runtime_opts(run))
    images, labels = dataset.normalized("train")
    log.info(
        "training supernet: budget %d params, %d train samples, %d epochs",
        spec.budget, len(labels), run.supernet_hyper.total_epochs,
    )
    decay_filter = None
    if run.runtime.decay_vpt:
        decay_filter = lambda name, t: t.data.ndim >= 2  # noqa: E731
    train_log = train_supernet(
        sn, images, labels, run.supernet_hyper.to_hyper(), rng, decay_filter
    )
    return sn, {"pretrain": pretrain_log, "train": train_log}


def evolve_stage(
    run: RunConfig, sn: Supernet, dataset: Dataset
) -> tuple[S.SubnetConfig, SearchTrace]:
    images, labels = dataset.normalized("val")
    rng = np.random.default_rng(run.seed + 1)

    def fitness(config: S.SubnetConfig) -> float:
        return evaluate(sn, images, labels, config)

    return evolve(
        fitness,
        sn.spec,
        run.evolution.to_schedule(),
        rng,
        workers=run.evolution.workers,
        seed_note=run.seed + 1,
    )


def retrain_stage(
    run: RunConfig, sn: Supernet, config: S.SubnetConfig, dataset: Dataset
) -> tuple[SubnetModel, list[dict]]:
    """Fixed-architecture training; warm-starts from inherited weights unless
    the config asks for a from-scratch run."""
    rng = np.random.default_rng(run.seed + 2)
    if run.runtime.retrain_from_scratch:
        model = fresh_subnet(sn.weights, sn.cfg, config, rng, sn.opts)
    else:
        model = extract_subnet(sn, config)
    images, labels = dataset.normalized("train")
    val = dataset.normalized("val")
    train_log = train_subnet(model, images, labels, run.subnet_hyper.to_hyper(), rng, val=val)
    return model, train_log


def matched_budget_single_module(spec: S.SearchSpaceSpec, module: str) -> tuple[int, int]:
    """Largest (dim, depth) single-module design that fits the budget,
    preferring full depth like the hand-designed baselines."""
    for depth in range(spec.num_layers, 0, -1):
        for dim in sorted(spec.dim_choices[module], reverse=True):
            cfg = S.SubnetConfig.uniform(module, dim, depth, spec.num_layers)
            if S.spec_count(spec, cfg) <= spec.budget:
                return dim, depth
    raise ConfigError(f"budget {spec.budget} admits no {module} design")


def baseline_stage(
    run: RunConfig,
    dataset: Dataset,
    module: str,
    dim: int | None = None,
    depth: int | None = None,
    backbone_weights: dict | None = None,
) -> tuple[SubnetModel, list[dict], S.SubnetConfig]:
    """Train one fixed prompt module from scratch on the frozen backbone."""
    cfg = backbone_config(run, dataset)
    if backbone_weights is None:
        backbone_weights, _ = build_frozen_backbone(run, cfg)
    spec = search_spec(run, backbone_weights)
    if dim is None or depth is None:
        auto_dim, auto_depth = matched_budget_single_module(spec, module)
        dim = dim if dim is not None else auto_dim
        depth = depth if depth is not None else auto_depth
    config = S.SubnetConfig.uniform(module, dim, depth, spec.num_layers)
    violations = [v for v in S.validate(config, spec) if v.code != "over_budget"]
    if violations:
        raise ConfigError("; ".join(f"{v.code}: {v.message}" for v in violations))
    rng = np.random.default_rng(run.seed + 3)
    model = fresh_subnet(backbone_weights, cfg, config, rng, runtime_opts(run))
    images, labels = dataset.normalized("train")
    val = dataset.normalized("val")
    train_log = train_subnet(model, images, labels, run.subnet_hyper.to_hyper(), rng, val=val)
    return model, train_log, config


# ---------------------------------------------------------------------------
# checkpoint IO for whole models


def save_model_weights(path, weights: dict[str, Tensor]) -> None:
    save_checkpoint(path, weights)


def load_model_weights(path) -> dict[str, Tensor]:
    arrays = load_checkpoint(path)
    return {
        name: Tensor(arr, requires_grad=not name.startswith("backbone."))
        for name, arr in arrays.items()
    }


def supernet_from_checkpoint(path, run: RunConfig, dataset: Dataset) -> Supernet:
    weights = load_model_weights(path)
    cfg = backbone_config(run, dataset)
    _check_shapes(weights, cfg)
    return Supernet(cfg=cfg, spec=search_spec(run, weights), weights=weights,
                    opts=runtime_opts(run))


def _check_shapes(weights: dict[str, Tensor], cfg: BackboneConfig) -> None:
    pos = weights.get("backbone.pos_embed")
    if pos is None:
        raise ConfigError("checkpoint holds no backbone tensors")
    if pos.shape != (cfg.num_tokens, cfg.embed_dim):
        raise ConfigError(
            f"checkpoint positional embedding {pos.shape} does not match "
            f"backbone config {(cfg.num_tokens, cfg.embed_dim)}"
        )
    head = weights.get("head.w")
    if head is not None and head.shape[1] != cfg.num_classes:
        raise ConfigError(
            f"checkpoint head has {head.shape[1]} classes, dataset has {cfg.num_classes}"
        )


def evaluate_checkpoint(
    path, config: S.SubnetConfig, run: RunConfig, dataset: Dataset, split: str
) -> float:
    """Inherited- or retrained-weight evaluation: works on supernet and
    extracted checkpoints alike, slicing whatever bank sizes are stored."""
    weights = load_model_weights(path)
    cfg = backbone_config(run, dataset)
    _check_shapes(weights, cfg)
    for t in weights.values():
        t.requires_grad = False
    images, labels = dataset.normalized(split)
    opts = runtime_opts(run)
    ctx = PromptContext(weights, config, opts.lora_scale)
    from .backbone import model_forward

    return _evaluate_forward(
        lambda x: model_forward(weights, cfg, x, ctx, opts), images, labels, 256
    )
