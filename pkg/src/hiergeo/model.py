"""Hierarchy x scene query decoder.

A learned array of ``H * S`` queries (row ``h * S + s`` belongs to hierarchy
``h`` and scene ``s``) is refined against image tokens by ``N`` decoder layers
whose self-attention spans every query, followed by ``E`` layers whose
self-attention and feed-forward weights are private to each hierarchy.
Each hierarchy's rows then go through that hierarchy's linear classifier;
channel 0 of every refined query doubles as a scene-confidence score.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import (
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    ShapeError,
    StackedFeedForward,
    Tensor,
)


class ConfigError(ValueError):
    pass


class MissingLabelError(ValueError):
    pass


@dataclass
class EncoderConfig:
    kind: str = "image"  # "image" or "precomputed"
    image_size: int = 224
    patch_size: int = 32
    channels: int = 3
    depth: int = 2
    token_dim: int = 0  # input width of precomputed tokens

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2 if self.kind == "image" else 0


@dataclass
class ModelConfig:
    classes_per_hierarchy: list[int]
    S: int = 16
    D: int = 64
    heads: int = 4
    N: int = 6
    E: int = 2
    ffn_mult: int = 4
    values_equal_keys: bool = False
    head_init: str = "zero"  # "zero" or "uniform"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.classes_per_hierarchy = [int(c) for c in self.classes_per_hierarchy]
        self.validate()

    @property
    def H(self) -> int:
        return len(self.classes_per_hierarchy)

    @property
    def scene_rows(self) -> int:
        """Query rows per hierarchy; the no-scene mode keeps one row."""
        return max(self.S, 1)

    @property
    def num_queries(self) -> int:
        return self.H * self.scene_rows

    def validate(self) -> None:
        problems = []
        if self.H < 1:
            problems.append("at least one hierarchy is required")
        if any(c < 1 for c in self.classes_per_hierarchy):
            problems.append(f"every hierarchy needs >= 1 class, got {self.classes_per_hierarchy}")
        if self.S < 0:
            problems.append("S must be >= 0")
        if self.N < 0 or self.E < 0 or self.N + self.E < 1:
            problems.append(f"need N >= 0, E >= 0, N + E >= 1 (got N={self.N}, E={self.E})")
        if self.heads < 1 or self.D % self.heads:
            problems.append(f"D={self.D} is not divisible by heads={self.heads}")
        if self.head_init not in ("zero", "uniform"):
            problems.append(f"unknown head_init {self.head_init!r}")
        enc = self.encoder
        if enc.kind not in ("image", "precomputed"):
            problems.append(f"unknown encoder kind {enc.kind!r}")
        elif enc.kind == "image" and (enc.patch_size < 1 or enc.image_size % enc.patch_size):
            problems.append(f"image_size {enc.image_size} is not a multiple of patch_size {enc.patch_size}")
        elif enc.kind == "precomputed" and enc.token_dim < 1:
            problems.append("precomputed encoder needs token_dim >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ForwardOutput:
    geo_logits: list[Tensor]  # per hierarchy [B, scene_rows, C_h]
    scene_logits: Tensor | None  # [B, S], None when S == 0
    queries: Tensor  # [B, H * scene_rows, D] refined queries
    attention: list[np.ndarray] | None  # per decoder layer [B, H * scene_rows, T], first head
    H: int
    S: int
    grid: tuple[int, int] | None = None


def _patchify(images: np.ndarray, patch: int) -> np.ndarray:
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


class EncoderLayer(Module):
    def __init__(self, dim, heads, hidden, rng):
        self.ln_sa = LayerNorm(dim)
        self.sa = MultiHeadAttention(dim, heads, rng)
        self.ln_ff = LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln_sa(x)
        x = self.sa(h, h)[0] + x
        return self.ffn(self.ln_ff(x)) + x


class TokenEncoder(Module):
    """Patch embedding + positional embedding + pre-norm self-attention stack,
    or a single learned projection for precomputed tokens."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        enc = cfg.encoder
        self.kind = enc.kind
        self.cfg = enc
        if enc.kind == "precomputed":
            self.proj = Linear(enc.token_dim, cfg.D, rng)
            return
        self.patch_embed = Linear(enc.channels * enc.patch_size ** 2, cfg.D, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(enc.num_tokens, cfg.D)))
        self.layers = [EncoderLayer(cfg.D, cfg.heads, cfg.D * cfg.ffn_mult, rng) for _ in range(enc.depth)]
        self.ln_out = LayerNorm(cfg.D)

    def __call__(self, inputs) -> Tensor:
        data = inputs.data if isinstance(inputs, Tensor) else np.asarray(inputs, dtype=nx.get_default_dtype())
        enc = self.cfg
        if self.kind == "precomputed":
            if data.ndim != 3 or data.shape[-1] != enc.token_dim:
                raise ShapeError(f"expected precomputed tokens [B, T, {enc.token_dim}], got {data.shape}")
            return self.proj(Tensor(data))
        expected = (enc.channels, enc.image_size, enc.image_size)
        if data.ndim != 4 or data.shape[1:] != expected:
            raise ShapeError(f"expected images [B, {', '.join(map(str, expected))}], got {data.shape}")
        x = self.patch_embed(Tensor(_patchify(data, enc.patch_size))) + self.pos
        for layer in self.layers:
            x = layer(x)
        return self.ln_out(x)


class IndependentLayer(Module):
    """Decoder layer whose self-attention spans every query row."""

    def __init__(self, dim, heads, hidden, rng, values_equal_keys=False):
        self.ln_sa = LayerNorm(dim)
        self.sa = MultiHeadAttention(dim, heads, rng)
        self.ln_q = LayerNorm(dim)
        self.ln_mem = LayerNorm(dim)
        self.ca = MultiHeadAttention(dim, heads, rng, values_equal_keys)
        self.ln_ff = LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden, rng)

    def __call__(self, gq: Tensor, x: Tensor) -> tuple[Tensor, np.ndarray]:
        h = self.ln_sa(gq)
        y_sa = self.sa(h, h)[0] + gq
        ca, attn = self.ca(self.ln_q(y_sa), self.ln_mem(x))
        y_ca = ca + y_sa
        return self.ffn(self.ln_ff(y_ca)) + y_ca, attn


class DependentLayer(Module):
    """Decoder layer with self-attention restricted to one hierarchy's rows
    and a separate feed-forward network per hierarchy.

    Rows are viewed as ``[B, H, S, D]`` so the hierarchy axis acts as a batch
    axis; no arithmetic ever mixes two hierarchies.
    """

    def __init__(self, H, S, dim, heads, hidden, rng, values_equal_keys=False):
        self.H, self.S = H, S
        self.ln_sa = LayerNorm(dim)
        self.sa = MultiHeadAttention(dim, heads, rng)
        self.ln_q = LayerNorm(dim)
        self.ln_mem = LayerNorm(dim)
        self.ca = MultiHeadAttention(dim, heads, rng, values_equal_keys)
        self.ln_ff = LayerNorm(dim)
        self.ffn = StackedFeedForward(H, dim, hidden, rng)

    def __call__(self, gq: Tensor, x: Tensor) -> tuple[Tensor, np.ndarray]:
        b, rows, d = gq.shape
        if rows != self.H * self.S:
            raise ShapeError(f"dependent layer expects {self.H * self.S} query rows, got {rows}")
        g = gq.reshape(b, self.H, self.S, d)
        mem = self.ln_mem(x).reshape(b, 1, x.shape[1], d)
        h = self.ln_sa(g)
        y_sa = self.sa(h, h)[0] + g
        ca, attn = self.ca(self.ln_q(y_sa), mem)
        y_ca = ca + y_sa
        out = self.ffn(self.ln_ff(y_ca)) + y_ca
        # attn: [B, H, heads, S, T] -> [B, heads, H*S, T]
        attn = np.swapaxes(attn, 1, 2).reshape(b, attn.shape[2], rows, -1)
        return out.reshape(b, rows, d), attn


class GeoDecoderModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        hidden = c.D * c.ffn_mult
        self.encoder = TokenEncoder(c, rng)
        self.queries = Parameter(rng.normal(0.0, 0.02, size=(c.num_queries, c.D)))
        self.independent = [IndependentLayer(c.D, c.heads, hidden, rng, c.values_equal_keys) for _ in range(c.N)]
        self.dependent = [DependentLayer(c.H, c.scene_rows, c.D, c.heads, hidden, rng, c.values_equal_keys)
                          for _ in range(c.E)]
        self.heads = [Linear(c.D, n, rng) for n in c.classes_per_hierarchy]
        if c.head_init == "zero":
            for head in self.heads:
                head.weight.assign(np.zeros_like(head.weight.data))
                head.bias.assign(np.zeros_like(head.bias.data))
        for name, p in self.named_parameters():
            p.name = name

    def check_classes(self, classes_per_hierarchy) -> None:
        if list(classes_per_hierarchy) != self.config.classes_per_hierarchy:
            raise ConfigError(f"model heads {self.config.classes_per_hierarchy} do not match "
                              f"partition classes {list(classes_per_hierarchy)}")

    def encode(self, inputs) -> Tensor:
        return self.encoder(inputs)

    def decode(self, tokens: Tensor, keep_attention: bool = False) -> ForwardOutput:
        c = self.config
        if tokens.ndim != 3 or tokens.shape[-1] != c.D:
            raise ShapeError(f"expected tokens [B, T, {c.D}], got {tokens.shape}")
        b = tokens.shape[0]
        gq = self.queries.reshape(1, c.num_queries, c.D) * Tensor(np.ones((b, 1, 1)))
        maps = []
        for layer in [*self.independent, *self.dependent]:
            gq, attn = layer(gq, tokens)
            if keep_attention:
                maps.append(attn[:, 0].copy())
        rows = c.scene_rows
        per_h = gq.reshape(b, c.H, rows, c.D)
        geo = [head(per_h[:, h]) for h, head in enumerate(self.heads)]
        scene = per_h[:, :, :, 0].mean(axis=1) if c.S > 0 else None
        grid = (c.encoder.grid, c.encoder.grid) if c.encoder.kind == "image" else None
        return ForwardOutput(geo, scene, gq, maps if keep_attention else None, c.H, c.S, grid)

    def forward(self, inputs, keep_attention: bool = False) -> ForwardOutput:
        return self.decode(self.encode(inputs), keep_attention)

    __call__ = forward


def loss(out: ForwardOutput, labels, scenes=None) -> Tensor:
    """Sum over hierarchies of cross-entropy at the ground-truth scene row,
    plus cross-entropy of the scene logits (omitted when ``S == 0``)."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[None]
    b = labels.shape[0]
    if labels.shape[1] != out.H:
        raise MissingLabelError(f"expected {out.H} labels per image, got {labels.shape[1]}")
    if (labels < 0).any():
        raise MissingLabelError("incomplete label chain: every hierarchy needs a class label")
    if out.S > 0:
        if scenes is None:
            raise MissingLabelError("scene labels are required when S > 0")
        scenes = np.asarray(scenes, dtype=np.int64).reshape(-1)
        if scenes.shape[0] != b:
            raise MissingLabelError(f"{b} label rows but {scenes.shape[0]} scenes")
        if scenes.min() < 0 or scenes.max() >= out.S:
            raise MissingLabelError(f"scene label outside [0, {out.S})")
        rows = scenes
    else:
        rows = np.zeros(b, dtype=np.int64)
    batch = np.arange(b)
    total = None
    for h, logits in enumerate(out.geo_logits):
        term = nx.cross_entropy(logits[batch, rows], labels[:, h])
        total = term if total is None else total + term
    if out.S > 0:
        total = total + nx.cross_entropy(out.scene_logits, scenes)
    return total


def attention_map(out: ForwardOutput, layer: int, h: int, s: int, item: int = 0) -> np.ndarray:
    """First-head cross-attention of query (h, s) over image tokens, on the patch grid."""
    if out.attention is None:
        raise ValueError("attention was not retained; run forward with keep_attention=True")
    if not 0 <= layer < len(out.attention):
        raise IndexError(f"layer {layer} out of range (model has {len(out.attention)})")
    rows = max(out.S, 1)
    if not (0 <= h < out.H and 0 <= s < rows):
        raise IndexError(f"query ({h}, {s}) out of range for H={out.H}, S={out.S}")
    row = out.attention[layer][item, h * rows + s]
    if out.grid is not None and out.grid[0] * out.grid[1] == row.size:
        return row.reshape(out.grid)
    return row


def export_attention(out: ForwardOutput, layer: int, item: int = 0) -> np.ndarray:
    """All query maps of one layer as ``[H, S, ...grid]`` (rows: hierarchies, columns: scenes)."""
    rows = max(out.S, 1)
    return np.stack([np.stack([attention_map(out, layer, h, s, item) for s in range(rows)])
                     for h in range(out.H)])


def uniform_loss(classes_per_hierarchy, S: int) -> float:
    """Loss of all-equal logits: sum of ln C_h plus ln S."""
    return float(sum(math.log(c) for c in classes_per_hierarchy) + (math.log(S) if S > 0 else 0.0))
