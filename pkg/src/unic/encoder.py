"""Tiny pre-norm ViT encoder returning CLS and patch tokens at every layer."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("image_size", "channels", "patch_size", "dim", "depth", "heads", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid ** 2

    @property
    def num_tokens(self):
        return self.num_patches + 1

    @property
    def patch_dim(self):
        return self.channels * self.patch_size ** 2

    @property
    def hidden(self):
        return self.mlp_ratio * self.dim

    def to_dict(self):
        return asdict(self)


@dataclass
class EncoderOutput:
    """Batched encoder output. ``per_layer[l]`` is (B, |P|+1, d)."""

    per_layer: List[Tensor]
    final_cls: Tensor  # (B, d)
    final_patches: Tensor  # (B, |P|, d)


def param_shapes(config: EncoderConfig) -> Dict[str, tuple]:
    d, h = config.dim, config.hidden
    shapes = {
        "patch_embed/w": (config.patch_dim, d),
        "patch_embed/b": (d,),
        "cls": (d,),
        "pos": (config.num_tokens, d),
    }
    for i in range(config.depth):
        p = f"blocks/{i}/"
        shapes.update({
            p + "ln1/g": (d,), p + "ln1/b": (d,),
            p + "attn/qkv/w": (d, 3 * d), p + "attn/qkv/b": (3 * d,),
            p + "attn/proj/w": (d, d), p + "attn/proj/b": (d,),
            p + "ln2/g": (d,), p + "ln2/b": (d,),
            p + "mlp/fc1/w": (d, h), p + "mlp/fc1/b": (h,),
            p + "mlp/fc2/w": (h, d), p + "mlp/fc2/b": (d,),
        })
    shapes["norm/g"] = (d,)
    shapes["norm/b"] = (d,)
    return shapes


def build_encoder(config: EncoderConfig) -> Dict[str, np.ndarray]:
    """Fresh parameters: N(0, 0.02) for weights, CLS and positions; zero biases; unit LN gains."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit("/", 1)[-1]
        if name in ("cls", "pos") or leaf == "w":
            params[name] = rng.normal(0.0, INIT_STD, size=shape)
        elif leaf == "g":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def patchify(images, patch_size):
    """(B, C, H, W) -> (B, num_patches, C*p*p), patches in row-major grid order."""
    b, c, hgt, wid = images.shape
    g_h, g_w = hgt // patch_size, wid // patch_size
    x = images.reshape(b, c, g_h, patch_size, g_w, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, g_h * g_w, c * patch_size * patch_size))


def _linear(x, params, prefix):
    return T.add(T.matmul(x, params[prefix + "/w"]), params[prefix + "/b"])


def _attention(x, params, prefix, heads):
    b, n, d = x.shape
    dh = d // heads
    qkv = _linear(x, params, prefix + "/qkv")
    qkv = qkv.reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.scale(T.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(dh))
    ctx = T.matmul(T.softmax(scores), v)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, n, d)
    return _linear(ctx, params, prefix + "/proj")


def _block(x, params, prefix, heads):
    h = T.layer_norm(x, params[prefix + "ln1/g"], params[prefix + "ln1/b"])
    x = T.add(x, _attention(h, params, prefix + "attn", heads))
    h = T.layer_norm(x, params[prefix + "ln2/g"], params[prefix + "ln2/b"])
    h = _linear(T.gelu(_linear(h, params, prefix + "mlp/fc1")), params, prefix + "mlp/fc2")
    return T.add(x, h)


def as_tensors(params, requires_grad=False):
    return {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=requires_grad)
            for k, v in params.items()}


def forward(config: EncoderConfig, params, images) -> EncoderOutput:
    """Encode a batch of images.

    ``params`` maps names to arrays (treated as constants) or Tensors. The
    last entry of ``per_layer`` carries the final LayerNorm; earlier entries
    are the raw residual stream after each block.
    """
    images = np.asarray(images, dtype=np.float64)
    expected = (config.channels, config.image_size, config.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise DimensionError(f"images of shape {images.shape} do not match (B, *{expected})")
    params = as_tensors(params)
    b = images.shape[0]
    x = _linear(Tensor(patchify(images, config.patch_size)), params, "patch_embed")
    cls = T.add(Tensor(np.zeros((b, 1, config.dim))), params["cls"])
    x = T.add(T.concat([cls, x], axis=1), params["pos"])
    per_layer = []
    for i in range(config.depth):
        x = _block(x, params, f"blocks/{i}/", config.heads)
        per_layer.append(x)
    per_layer[-1] = T.layer_norm(x, params["norm/g"], params["norm/b"])
    z = per_layer[-1]
    return EncoderOutput(per_layer, z[:, 0, :], z[:, 1:, :])


@dataclass
class ClassifierHead:
    """Linear map over CLS, GAP-of-patches, or each patch token."""

    source: str
    w: np.ndarray
    b: np.ndarray

    @property
    def dense(self):
        return self.source == "patch"

    @property
    def num_classes(self):
        return self.w.shape[1]


HEAD_SOURCES = ("cls", "gap", "patch")


def attach_head(dim, num_classes, source="cls", seed=0) -> ClassifierHead:
    if source not in HEAD_SOURCES:
        raise ConfigError(f"head source must be one of {HEAD_SOURCES}, got {source!r}")
    rng = np.random.default_rng(seed)
    return ClassifierHead(source, rng.normal(0.0, INIT_STD, size=(dim, num_classes)), np.zeros(num_classes))


def head_features(output: EncoderOutput, source):
    if source == "cls":
        return output.final_cls
    if source == "gap":
        return T.mean(output.final_patches, axis=1)
    if source == "patch":
        return output.final_patches
    raise ConfigError(f"unknown feature source {source!r}")


def apply_head(head: ClassifierHead, features, w=None, b=None):
    """Logits for (B, d) features, or (B, |P|, d) for a dense head."""
    w = Tensor(head.w) if w is None else w
    b = Tensor(head.b) if b is None else b
    features = T.as_tensor(features)
    if features.shape[-1] != w.shape[0]:
        raise DimensionError(f"head expects width {w.shape[0]}, got features of shape {features.shape}")
    return T.add(T.matmul(features, w) if features.ndim > 1 else T.matmul(features.reshape(1, -1), w), b)


class Encoder:
    """Config plus parameter arrays; convenience wrapper for frozen use."""

    def __init__(self, config: EncoderConfig, params=None):
        self.config = config
        self.params = build_encoder(config) if params is None else dict(params)

    def encode(self, images) -> EncoderOutput:
        with T.no_grad():
            return forward(self.config, self.params, images)

    def encode_batched(self, images, batch_size=256):
        """Frozen forward in chunks; returns numpy (cls (N, d), patches (N, P, d))."""
        cls, patches = [], []
        for start in range(0, len(images), batch_size):
            out = self.encode(images[start:start + batch_size])
            cls.append(out.final_cls.numpy())
            patches.append(out.final_patches.numpy())
        return np.concatenate(cls), np.concatenate(patches)

    def num_parameters(self):
        return int(sum(v.size for v in self.params.values()))
