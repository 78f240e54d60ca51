"""Pre-LN transformer encoder that classifies square grayscale glyph rasters.

Images are cut into non-overlapping patches, linearly embedded, given learned
positional embeddings, run through ``n_layers`` attention + MLP blocks, mean
pooled and fed to a linear head.  The six matrices of each block
(q, k, v, o, ff1, ff2) are the attachment points for adapters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .adapter import DynLoraAdapter, init_adapter, merge
from .tensor import Tensor

ATTENTION = ("q", "k", "v", "o")
MLP = ("ff1", "ff2")


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GlyphTransformerConfig:
    image_side: int = 48
    patch_side: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    n_classes: int = 10

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ModelConfigError(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.d_model % self.n_heads:
            raise ModelConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_classes < 2:
            raise ModelConfigError("need at least 2 classes")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_side ** 2

    def as_dict(self) -> dict:
        return asdict(self)


def patchify(images: np.ndarray, patch_side: int) -> np.ndarray:
    """Split ``(..., S, S)`` images into row-major patches, each flattened row-major.

    Returns shape ``(..., n_patches, patch_side**2)``.
    """
    images = np.asarray(images)
    s = images.shape[-1]
    if images.ndim < 2 or images.shape[-2] != s or s % patch_side:
        raise ModelConfigError(f"image shape {images.shape[-2:]} incompatible with patch side {patch_side}")
    g = s // patch_side
    lead = images.shape[:-2]
    x = images.reshape(lead + (g, patch_side, g, patch_side))
    nl = len(lead)
    x = x.transpose(tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3))
    return x.reshape(lead + (g * g, patch_side * patch_side))


class Linear:
    """Bias-free linear map ``y = x @ W.T`` with an optional adapter."""

    def __init__(self, weight: Tensor, name: str):
        self.weight = weight
        self.name = name
        self.adapter: DynLoraAdapter | None = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.adapter is not None:
            return self.adapter.forward(x)
        return T.matmul(x, T.transpose(self.weight))


class GlyphTransformer:
    def __init__(self, config: GlyphTransformerConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.linears: dict[str, Linear] = {}
        for l in range(config.n_layers):
            for m in ATTENTION + MLP:
                lid = f"{l}.{m}"
                self.linears[lid] = Linear(params[f"layer.{lid}"], lid)

    @property
    def n_classes(self) -> int:
        return self.params["head"].shape[0]

    @property
    def adapters(self) -> dict[str, DynLoraAdapter]:
        return {k: lin.adapter for k, lin in self.linears.items() if lin.adapter is not None}

    def backbone_names(self) -> list[str]:
        return [k for k in self.params if k != "head"]

    def n_backbone_parameters(self) -> int:
        return sum(self.params[k].data.size for k in self.backbone_names())

    def attach_adapters(self, r_max: int = 8, alpha: float = 16.0, seed: int = 0,
                        targets: tuple[str, ...] = ATTENTION + MLP,
                        train_importance: bool = True) -> dict[str, DynLoraAdapter]:
        out = {}
        for i, (lid, lin) in enumerate(self.linears.items()):
            if lid.split(".")[1] not in targets:
                continue
            if lin.adapter is not None:
                raise ModelConfigError(f"layer {lid} already carries an adapter")
            lin.adapter = init_adapter(lin.weight, r_max, alpha, seed=seed * 1000 + i,
                                       name=lid, train_importance=train_importance)
            out[lid] = lin.adapter
        return out

    def detach_adapters(self) -> dict[str, DynLoraAdapter]:
        out = self.adapters
        for lin in self.linears.values():
            lin.adapter = None
        return out

    def merge_adapters(self) -> None:
        """Fold every attached adapter into its base matrix and drop the adapter."""
        for lin in self.linears.values():
            if lin.adapter is not None:
                lin.weight.data = merge(lin.adapter)
                lin.adapter = None

    def forward(self, images: np.ndarray, n_classes: int | None = None) -> Tensor:
        cfg = self.config
        if n_classes is not None and n_classes != self.n_classes:
            raise ModelConfigError(f"data has {n_classes} classes but the head has {self.n_classes}")
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        if images.shape[0] == 0:
            raise ModelConfigError("empty batch")
        if images.shape[1:] != (cfg.image_side, cfg.image_side):
            raise ModelConfigError(f"expected {cfg.image_side}x{cfg.image_side} images, got {images.shape[1:]}")
        p = self.params
        B, N, d, H = images.shape[0], cfg.n_patches, cfg.d_model, cfg.n_heads
        dh = d // H
        patches = Tensor(patchify(images, cfg.patch_side).reshape(B * N, cfg.patch_dim))
        x = T.matmul(patches, T.transpose(p["patch"]))
        x = T.add(T.reshape(x, (B, N, d)), T.tile(p["pos"], B))
        for l in range(cfg.n_layers):
            lin = lambda m: self.linears[f"{l}.{m}"]
            h = T.reshape(T.layernorm(x, p[f"layer.{l}.ln1.gamma"], p[f"layer.{l}.ln1.beta"]), (B * N, d))

            def heads(t):
                return T.transpose(T.reshape(t, (B, N, H, dh)), (0, 2, 1, 3))

            q, k, v = heads(lin("q")(h)), heads(lin("k")(h)), heads(lin("v")(h))
            scores = T.mul_scalar(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
            att = T.matmul(T.softmax(scores), v)
            att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (B * N, d))
            x = T.add(x, T.reshape(lin("o")(att), (B, N, d)))
            h = T.reshape(T.layernorm(x, p[f"layer.{l}.ln2.gamma"], p[f"layer.{l}.ln2.beta"]), (B * N, d))
            h = lin("ff2")(T.gelu(lin("ff1")(h)))
            x = T.add(x, T.reshape(h, (B, N, d)))
        x = T.layernorm(x, p["final_ln.gamma"], p["final_ln.beta"])
        pooled = T.mean(x, axis=1)
        return T.matmul(pooled, T.transpose(p["head"]))

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i:i + batch_size]).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(T.default_dtype()))


def init_params(config: GlyphTransformerConfig, seed: int = 0) -> GlyphTransformer:
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ff
    dt = T.default_dtype()
    p: dict[str, Tensor] = {
        "patch": _normal(rng, (d, config.patch_dim)),
        "pos": _normal(rng, (config.n_patches, d)),
    }
    for l in range(config.n_layers):
        for ln in ("ln1", "ln2"):
            p[f"layer.{l}.{ln}.gamma"] = Tensor(np.ones(d, dtype=dt))
            p[f"layer.{l}.{ln}.beta"] = Tensor(np.zeros(d, dtype=dt))
        for m in ATTENTION:
            p[f"layer.{l}.{m}"] = _normal(rng, (d, d))
        p[f"layer.{l}.ff1"] = _normal(rng, (f, d))
        p[f"layer.{l}.ff2"] = _normal(rng, (d, f))
    p["final_ln.gamma"] = Tensor(np.ones(d, dtype=dt))
    p["final_ln.beta"] = Tensor(np.zeros(d, dtype=dt))
    p["head"] = _normal(rng, (config.n_classes, d))
    for name, t in p.items():
        t.name = name
    return GlyphTransformer(config, p)


def reset_head(model: GlyphTransformer, n_classes: int, seed: int = 0) -> None:
    """Replace only the classifier head with a fresh ``n_classes x d_model`` matrix."""
    if n_classes < 2:
        raise ModelConfigError("need at least 2 classes")
    rng = np.random.default_rng([seed, n_classes, 0x4EAD])
    head = _normal(rng, (n_classes, model.config.d_model))
    head.name = "head"
    head.requires_grad = model.params["head"].requires_grad
    model.params["head"] = head
    model.config = GlyphTransformerConfig(**{**model.config.as_dict(), "n_classes": n_classes})
