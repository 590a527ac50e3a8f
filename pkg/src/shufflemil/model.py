"""Toy pre-norm Vision Transformer with two task heads.

The backbone embeds row-major image patches, prepends a learned CLS token,
adds learned position embeddings and runs pre-norm blocks (multi-head self
attention + GELU MLP). The soft-label head maps every patch token through a
shared two-layer MLP to nonnegative per-category contributions and sums them
over tokens, so its output cannot depend on patch order. The class head is a
single affine map on the CLS token. Position embeddings are applied after
bag composition: a patch inherits the embedding of the slot it lands in.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .rand import make_rng

__all__ = [
    "ModelConfig", "TokenSequence", "Predictions", "MILTransformer",
    "attention_rollout", "save_checkpoint", "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"MILSI1"


@dataclass
class ModelConfig:
    image_side: int = 96
    patch_side: int = 32
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    num_categories: int = 2  # K mask categories; soft labels have K + 1 components
    num_classes: int = 2
    mil_hidden: int = 64
    mil_aggregate: str = "sum"  # "sum" (order-free, additive) or "mean"

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ValueError(
                f"image side {self.image_side} not divisible by patch side {self.patch_side}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.mil_aggregate not in ("sum", "mean"):
            raise ValueError(f"unknown mil_aggregate {self.mil_aggregate!r}")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side * 3

    @property
    def soft_dim(self) -> int:
        return self.num_categories + 1

    def param_count(self) -> int:
        """Closed-form parameter count.

        patch embed: patch_dim*D + D; cls token: D; positions: (n+1)*D;
        each block: 2D (ln1) + 3D^2+3D (qkv) + D^2+D (proj) + 2D (ln2)
        + r*D^2 + r*D (fc1) + r*D^2 + D (fc2); final norm: 2D;
        soft head: D*H + H + H*(K+1) + (K+1); class head: D*C + C.
        """
        d, n, r = self.embed_dim, self.num_patches, self.mlp_ratio
        block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d \
            + (r * d * d + r * d) + (r * d * d + d)
        return (self.patch_dim * d + d) + d + (n + 1) * d + self.depth * block + 2 * d \
            + (d * self.mil_hidden + self.mil_hidden) \
            + (self.mil_hidden * self.soft_dim + self.soft_dim) \
            + (d * self.num_classes + self.num_classes)


@dataclass
class TokenSequence:
    """Backbone output: CLS token(s) and patch tokens, batched along axis 0."""

    cls: T.Tensor         # (B, D)
    patch_tokens: T.Tensor  # (B, n, D)

    @property
    def token_count(self) -> int:
        return 1 + self.patch_tokens.shape[1]


@dataclass
class Predictions:
    soft: np.ndarray    # (B, K+1) soft-label estimates
    logits: np.ndarray  # (B, num_classes)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two sigma by resampling."""
    x = rng.standard_normal(shape)
    for _ in range(8):
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    np.clip(x, -2.0, 2.0, out=x)
    return x * std


def _init_params(cfg: ModelConfig, seed: int, dtype) -> dict[str, T.Tensor]:
    rng = make_rng(seed, 7)  # stream 7: weight init
    d, n = cfg.embed_dim, cfg.num_patches

    spec: list[tuple[str, tuple, str]] = [
        ("patch_embed.w", (cfg.patch_dim, d), "tn"),
        ("patch_embed.b", (d,), "zeros"),
        ("cls_token", (1, 1, d), "tn"),
        ("pos_embed", (n + 1, d), "tn"),
    ]
    for i in range(cfg.depth):
        spec += [
            (f"blocks.{i}.ln1.g", (d,), "ones"),
            (f"blocks.{i}.ln1.b", (d,), "zeros"),
            (f"blocks.{i}.attn.qkv.w", (d, 3 * d), "tn"),
            (f"blocks.{i}.attn.qkv.b", (3 * d,), "zeros"),
            (f"blocks.{i}.attn.proj.w", (d, d), "tn"),
            (f"blocks.{i}.attn.proj.b", (d,), "zeros"),
            (f"blocks.{i}.ln2.g", (d,), "ones"),
            (f"blocks.{i}.ln2.b", (d,), "zeros"),
            (f"blocks.{i}.mlp.fc1.w", (d, cfg.mlp_ratio * d), "tn"),
            (f"blocks.{i}.mlp.fc1.b", (cfg.mlp_ratio * d,), "zeros"),
            (f"blocks.{i}.mlp.fc2.w", (cfg.mlp_ratio * d, d), "tn"),
            (f"blocks.{i}.mlp.fc2.b", (d,), "zeros"),
        ]
    spec += [
        ("norm.g", (d,), "ones"),
        ("norm.b", (d,), "zeros"),
        ("mil_head.fc1.w", (d, cfg.mil_hidden), "tn"),
        ("mil_head.fc1.b", (cfg.mil_hidden,), "zeros"),
        ("mil_head.fc2.w", (cfg.mil_hidden, cfg.soft_dim), "tn"),
        ("mil_head.fc2.b", (cfg.soft_dim,), "zeros"),
        ("cls_head.w", (d, cfg.num_classes), "tn"),
        ("cls_head.b", (cfg.num_classes,), "zeros"),
    ]

    params = {}
    for name, shape, kind in spec:
        if kind == "tn":
            arr = _trunc_normal(rng, shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = T.Tensor(arr.astype(dtype), requires_grad=True)
    return params


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(B, S, S, C) -> (B, n, p*p*C) flat patches in the bag splitter's row-major order."""
    b, s, _, c = images.shape
    g = s // p
    return (images.reshape(b, g, p, g, p, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, g * g, p * p * c))


class MILTransformer:
    """Backbone plus soft-label and class heads sharing one parameter set."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                 params: dict[str, T.Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else _init_params(cfg, seed, dtype)

    @property
    def dtype(self):
        return self.params["patch_embed.w"].dtype

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def astype(self, dtype) -> "MILTransformer":
        """Copy of the model with every parameter cast (e.g. float64 for gradient checks)."""
        cast = {k: T.Tensor(v.data.astype(dtype), requires_grad=True)
                for k, v in self.params.items()}
        return MILTransformer(self.cfg, params=cast)

    def _affine_norm(self, x, prefix: str):
        w = self.params
        return T.add(T.mul(T.layernorm(x), w[f"{prefix}.g"]), w[f"{prefix}.b"])

    def _attention(self, x, i: int, attn_sink):
        w = self.params
        b, t, d = x.shape
        nh = self.cfg.heads
        dh = d // nh
        qkv = T.add(T.matmul(x, w[f"blocks.{i}.attn.qkv.w"]), w[f"blocks.{i}.attn.qkv.b"])
        q = T.slice_axis(qkv, 2, 0, d)
        k = T.slice_axis(qkv, 2, d, 2 * d)
        v = T.slice_axis(qkv, 2, 2 * d, 3 * d)
        # (B, T, D) -> (B, H, T, dh)
        q = T.transpose(T.reshape(q, (b, t, nh, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, (b, t, nh, dh)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(v, (b, t, nh, dh)), (0, 2, 1, 3))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = T.softmax(scores, axis=-1)  # (B, H, T, T)
        if attn_sink is not None:
            attn_sink.append(attn.data.copy())
        ctx = T.matmul(attn, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return T.add(T.matmul(ctx, w[f"blocks.{i}.attn.proj.w"]), w[f"blocks.{i}.attn.proj.b"])

    def _mlp(self, x, i: int):
        w = self.params
        h = T.gelu(T.add(T.matmul(x, w[f"blocks.{i}.mlp.fc1.w"]), w[f"blocks.{i}.mlp.fc1.b"]))
        return T.add(T.matmul(h, w[f"blocks.{i}.mlp.fc2.w"]), w[f"blocks.{i}.mlp.fc2.b"])

    def backbone_forward(self, images: np.ndarray, attn_sink: list | None = None) -> TokenSequence:
        """Token sequence for a batch of composed images (B, S, S, C) or one (S, S, C)."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        cfg = self.cfg
        if images.shape[1] != cfg.image_side or images.shape[2] != cfg.image_side:
            raise T.ShapeError(
                f"backbone expects {cfg.image_side}x{cfg.image_side} images, got {images.shape}")
        w = self.params
        flat = patchify(images.astype(self.dtype, copy=False), cfg.patch_side)
        b, n = flat.shape[0], cfg.num_patches

        h = T.add(T.matmul(T.Tensor(flat), w["patch_embed.w"]), w["patch_embed.b"])
        tok = T.concat([T.repeat0(w["cls_token"], b), h], axis=1)  # (B, 1+n, D)
        tok = T.add(tok, w["pos_embed"])
        for i in range(cfg.depth):
            tok = T.add(tok, self._attention(self._affine_norm(tok, f"blocks.{i}.ln1"), i, attn_sink))
            tok = T.add(tok, self._mlp(self._affine_norm(tok, f"blocks.{i}.ln2"), i))
        tok = self._affine_norm(tok, "norm")

        cls = T.reshape(T.slice_axis(tok, 1, 0, 1), (b, cfg.embed_dim))
        patch_tokens = T.slice_axis(tok, 1, 1, 1 + n)
        return TokenSequence(cls=cls, patch_tokens=patch_tokens)

    def mil_head(self, patch_tokens: T.Tensor) -> T.Tensor:
        """Aggregate per-token nonnegative contributions into a (B, K+1) soft-label estimate."""
        w = self.params
        h = T.gelu(T.add(T.matmul(patch_tokens, w["mil_head.fc1.w"]), w["mil_head.fc1.b"]))
        h = T.add(T.matmul(h, w["mil_head.fc2.w"]), w["mil_head.fc2.b"])
        contrib = T.softplus(h)  # (B, n, K+1)
        if self.cfg.mil_aggregate == "mean":
            return T.mean(contrib, axis=1)
        return T.sum(contrib, axis=1)

    def cls_head(self, cls: T.Tensor) -> T.Tensor:
        """(B, D) CLS tokens -> (B, num_classes) logits; softmax lives in the loss."""
        w = self.params
        return T.add(T.matmul(cls, w["cls_head.w"]), w["cls_head.b"])

    def forward(self, images: np.ndarray) -> Predictions:
        ts = self.backbone_forward(images)
        return Predictions(soft=self.mil_head(ts.patch_tokens).data,
                           logits=self.cls_head(ts.cls).data)

    def predict(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Argmax class per image; ties resolve toward class 0."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        out = []
        for lo in range(0, images.shape[0], batch_size):
            ts = self.backbone_forward(images[lo:lo + batch_size])
            out.append(np.argmax(self.cls_head(ts.cls).data, axis=1))
        return np.concatenate(out)


def attention_rollout(model: MILTransformer, image: np.ndarray) -> np.ndarray:
    """Grid heatmap of CLS-to-patch attention, rolled across layers.

    Per layer the head-averaged attention is mixed half-and-half with the
    identity (residual path), row-normalized, and multiplied into the running
    rollout. The CLS row over patch positions is min-max scaled to [0, 1].
    A constant map degenerates to all 0.5 with a warning.
    """
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    sink: list = []
    model.backbone_forward(image, attn_sink=sink)
    t = 1 + model.cfg.num_patches
    eye = np.eye(t)
    roll = eye
    for layer_attn in sink:
        a = layer_attn[0].mean(axis=0)  # average heads: (T, T)
        a = 0.5 * a + 0.5 * eye
        a = a / a.sum(axis=-1, keepdims=True)
        roll = a @ roll
    g = model.cfg.grid
    heat = roll[0, 1:].reshape(g, g)
    lo, hi = float(heat.min()), float(heat.max())
    if hi - lo < 1e-12:
        warnings.warn("attention rollout is constant; emitting a flat 0.5 heatmap")
        return np.full((g, g), 0.5)
    return (heat - lo) / (hi - lo)


def save_checkpoint(path, model: MILTransformer) -> None:
    """Flat binary container: magic, config JSON, then named float32 blocks."""
    cfg_json = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        for name, t in model.params.items():
            name_b = name.encode()
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> MILTransformer:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        cfg = ModelConfig(**json.loads(fh.read(cfg_len).decode()))
        params: dict[str, T.Tensor] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode()
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            params[name] = T.Tensor(data.astype(np.float32), requires_grad=True)
    return MILTransformer(cfg, params=params)
