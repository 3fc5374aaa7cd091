"""Small frozen vision-transformer backbone hosting the prompt modules.

Pre-norm blocks, GELU MLP, and a final encoder norm (standard ViT layout; the
method itself does not constrain these). Per block, prompt modules attach at
fixed points: VPT tokens at the block input, LoRA as additive deltas on the
query/key projections, and the adapter bottleneck on the MLP output inside
the residual branch.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .prompts import PromptContext, adapter_bottleneck, empty_context, inject_prompts, lora_delta
from .tensor import Tensor


class ModelError(ValueError):
    """Invalid backbone configuration or input shape."""


@dataclass(frozen=True)
class BackboneConfig:
    num_layers: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    mlp_hidden: int = 256
    patch_size: int = 4
    image_shape: tuple[int, int, int] = (1, 16, 16)
    num_classes: int = 8

    def __post_init__(self):
        c, h, w = self.image_shape
        if self.embed_dim % self.num_heads != 0:
            raise ModelError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if h % self.patch_size or w % self.patch_size:
            raise ModelError(f"image {h}x{w} not divisible by patch size {self.patch_size}")
        for name in ("num_layers", "embed_dim", "num_heads", "mlp_hidden", "patch_size", "num_classes"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def num_patches(self) -> int:
        _, h, w = self.image_shape
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def num_tokens(self) -> int:
        return 1 + self.num_patches

    @property
    def patch_dim(self) -> int:
        return self.image_shape[0] * self.patch_size * self.patch_size


@dataclass
class RuntimeOpts:
    """Forward-pass switches that are not part of the architecture gene."""

    adapter_skip: bool = False  # residual assembled inside the adapter branch
    lora_scale: float = 1.0


BACKBONE_PREFIX = "backbone."
HEAD_NAMES = ("head.w", "head.b")


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Randomly initialized, fully trainable weights (frozen later)."""
    d = cfg.embed_dim

    def normal(*shape, std=0.02):
        return Tensor(rng.normal(0.0, std, shape).astype(np.float32), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, np.float32), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, np.float32), requires_grad=True)

    w: dict[str, Tensor] = {}
    w["backbone.patch_proj.w"] = normal(cfg.patch_dim, d)
    w["backbone.patch_proj.b"] = zeros(d)
    w["backbone.cls_token"] = normal(1, d)
    w["backbone.pos_embed"] = normal(cfg.num_tokens, d)
    for i in range(cfg.num_layers):
        p = f"backbone.L{i}."
        w[p + "ln1.gamma"] = ones(d)
        w[p + "ln1.beta"] = zeros(d)
        for proj in ("q", "k", "v", "o"):
            w[p + f"attn.w{proj}"] = normal(d, d)
            w[p + f"attn.b{proj}"] = zeros(d)
        w[p + "ln2.gamma"] = ones(d)
        w[p + "ln2.beta"] = zeros(d)
        w[p + "mlp.w1"] = normal(d, cfg.mlp_hidden)
        w[p + "mlp.b1"] = zeros(cfg.mlp_hidden)
        w[p + "mlp.w2"] = normal(cfg.mlp_hidden, d)
        w[p + "mlp.b2"] = zeros(d)
    w["backbone.norm.gamma"] = ones(d)
    w["backbone.norm.beta"] = zeros(d)
    w["head.w"] = normal(d, cfg.num_classes)
    w["head.b"] = zeros(cfg.num_classes)
    return w


def reinit_head(weights: dict[str, Tensor], cfg: BackboneConfig, num_classes: int,
                rng: np.random.Generator) -> None:
    weights["head.w"] = Tensor(
        rng.normal(0.0, 0.02, (cfg.embed_dim, num_classes)).astype(np.float32),
        requires_grad=True,
    )
    weights["head.b"] = Tensor(np.zeros(num_classes, np.float32), requires_grad=True)


def freeze_backbone(weights: dict[str, Tensor]) -> None:
    """Mark every backbone tensor frozen; the classifier head stays trainable."""
    for name, t in weights.items():
        if name.startswith(BACKBONE_PREFIX):
            t.requires_grad = False


def backbone_hash(weights: dict[str, Tensor]) -> str:
    """SHA-256 over all frozen-contract tensors (head excluded), name-sorted."""
    h = hashlib.sha256()
    for name in sorted(weights):
        if not name.startswith(BACKBONE_PREFIX):
            continue
        t = weights[name]
        h.update(name.encode())
        h.update(np.asarray(t.shape, np.int64).tobytes())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def patchify(images: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """[B, C, H, W] float array -> [B, num_patches, C*p*p] patch rows."""
    b, c, h, w = images.shape
    if (c, h, w) != cfg.image_shape:
        raise ModelError(f"image shape {(c, h, w)} != configured {cfg.image_shape}")
    p = cfg.patch_size
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # [B, Hp, Wp, C, p, p]
    return np.ascontiguousarray(x.reshape(b, cfg.num_patches, cfg.patch_dim), dtype=images.dtype)


def msa_forward(
    xn: Tensor,
    weights: dict[str, Tensor],
    layer: int,
    cfg: BackboneConfig,
    prompts: PromptContext,
    opts: RuntimeOpts,
) -> Tensor:
    """softmax(q kT / sqrt(head_dim)) v per head, heads merged, projected.
    LoRA deltas land on q and k before the attention product."""
    p = f"backbone.L{layer}.attn."
    q = T.linear(xn, weights[p + "wq"], weights[p + "bq"])
    k = T.linear(xn, weights[p + "wk"], weights[p + "bk"])
    v = T.linear(xn, weights[p + "wv"], weights[p + "bv"])
    lora = prompts.lora_at(layer)
    if lora is not None:
        q_down, q_up, k_down, k_up, r = lora
        s = prompts.lora_scale
        q = T.add(q, lora_delta(xn, q_down, q_up, r, s))
        k = T.add(k, lora_delta(xn, k_down, k_up, r, s))

    b, n, d = q.shape
    heads, hd = cfg.num_heads, cfg.head_dim

    def split(t):
        return T.transpose(T.reshape(t, (b, n, heads, hd)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    attn = T.softmax(scores, axis=-1)
    out = T.reshape(T.transpose(T.matmul(attn, vh), (0, 2, 1, 3)), (b, n, d))
    return T.linear(out, weights[p + "wo"], weights[p + "bo"])


def block_forward(
    x: Tensor,
    layer: int,
    weights: dict[str, Tensor],
    cfg: BackboneConfig,
    prompts: PromptContext,
    opts: RuntimeOpts,
    n_prompts: int,
) -> tuple[Tensor, int]:
    """One transformer block: prompt-token injection, attention with LoRA,
    then MLP with the adapter on its output inside the residual branch."""
    if not 0 <= layer < cfg.num_layers:
        raise ModelError(f"layer {layer} outside [0, {cfg.num_layers})")
    x, n_prompts = inject_prompts(x, prompts.vpt_at(layer), n_prompts)

    p = f"backbone.L{layer}."
    xn = T.layer_norm(x, weights[p + "ln1.gamma"], weights[p + "ln1.beta"])
    x = T.add(x, msa_forward(xn, weights, layer, cfg, prompts, opts))

    un = T.layer_norm(x, weights[p + "ln2.gamma"], weights[p + "ln2.beta"])
    mlp_out = T.linear(
        T.gelu(T.linear(un, weights[p + "mlp.w1"], weights[p + "mlp.b1"])),
        weights[p + "mlp.w2"],
        weights[p + "mlp.b2"],
    )
    adapter = prompts.adapter_at(layer)
    if adapter is not None:
        w_down, b_down, w_up, b_up, r = adapter
        delta = adapter_bottleneck(mlp_out, w_down, b_down, w_up, b_up, r)
        # Both adapter readings coincide at this attachment point: a skipless
        # bottleneck adding its output to the branch, and a bottleneck with an
        # internal residual whose output replaces the branch, assemble the
        # same sum mlp_out + delta. opts.adapter_skip records the intended
        # reading without changing the computation.
        branch = T.add(mlp_out, delta)
    else:
        branch = mlp_out
    return T.add(x, branch), n_prompts


def model_forward(
    weights: dict[str, Tensor],
    cfg: BackboneConfig,
    images: np.ndarray,
    prompts: PromptContext | None = None,
    opts: RuntimeOpts | None = None,
    return_features: bool = False,
) -> Tensor:
    """Full forward pass: patchify, prepend the class token, add positional
    embeddings, run all blocks with the prompt context, read out the class
    token. ``images`` are normalized floats shaped [B, C, H, W]."""
    prompts = prompts if prompts is not None else empty_context(cfg.num_layers)
    opts = opts if opts is not None else RuntimeOpts(lora_scale=prompts.lora_scale)
    patches = T.Tensor(patchify(images, cfg))
    x = T.linear(patches, weights["backbone.patch_proj.w"], weights["backbone.patch_proj.b"])
    b = x.shape[0]
    d = cfg.embed_dim
    cls = T.expand(T.reshape(weights["backbone.cls_token"], (1, 1, d)), (b, 1, d))
    x = T.concat([cls, x], axis=1)
    x = T.add(x, weights["backbone.pos_embed"])
    n_prompts = 0
    for i in range(cfg.num_layers):
        x, n_prompts = block_forward(x, i, weights, cfg, prompts, opts, n_prompts)
    x = T.layer_norm(x, weights["backbone.norm.gamma"], weights["backbone.norm.beta"])
    feats = T.reshape(T.slice_axis(x, 1, 0, 1), (b, d))
    if return_features:
        return feats
    return T.linear(feats, weights["head.w"], weights["head.b"])


def sequence_length(cfg: BackboneConfig, config_vpt_dim: int) -> int:
    """Token-count bookkeeping: class token + patches + active prompt rows."""
    return 1 + cfg.num_patches + config_vpt_dim


def pseudo_pretrain(
    weights: dict[str, Tensor],
    cfg: BackboneConfig,
    images_u8: np.ndarray,
    labels: np.ndarray,
    hyper,
    rng: np.random.Generator,
) -> list[dict]:
    """Stand-in for large-scale pretraining: briefly train the full backbone
    and head on a synthetic base task, then freeze everything but the head.
    The base task must match the backbone's configured class count."""
    from .data import channel_stats, normalize_images
    from .optim import AdamW, run_training

    mean, std = channel_stats(images_u8)
    images = normalize_images(images_u8, mean, std)
    labels = labels.astype(np.int64)
    optimizer = AdamW(weights, hyper)

    def step_fn(idx, step):
        logits = model_forward(weights, cfg, images[idx])
        return T.cross_entropy(logits, labels[idx]), None

    log = run_training(optimizer, step_fn, len(labels), hyper, rng)
    freeze_backbone(weights)
    return log
