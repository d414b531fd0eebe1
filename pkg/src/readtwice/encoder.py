"""Token embedding and the two transformer readers.

The first reader encodes every segment independently; the second reader
(two layers by default) re-reads each segment after the memory merge. Both
use post-LayerNorm blocks with GELU feed-forward layers.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted paths so
every tensor can be addressed by the gradient checker and the checkpoint
writer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


@dataclass
class EncoderConfig:
    vocab_size: int = 4096
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    layers_first: int = 2
    layers_second: int = 2
    max_segment_len: int = 512
    dropout: float = 0.0
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12
    tie_mlm_output: bool = True

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.max_segment_len < 1:
            raise ValueError("max_segment_len must be >= 1")
        if self.layers_first < 0 or self.layers_second < 0:
            raise ValueError("layer counts must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: Mapping) -> EncoderConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def base_scale_config(vocab_size: int = 50265) -> EncoderConfig:
    """RoBERTa-base sized readers (12 + 2 layers)."""
    return EncoderConfig(
        vocab_size=vocab_size, hidden_dim=768, num_heads=12, ffn_dim=3072, layers_first=12, layers_second=2, max_segment_len=514
    )


def layer_shapes(prefix: str, cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.hidden_dim, cfg.ffn_dim
    shapes = {}
    for name in ("query", "key", "value", "output"):
        shapes[f"{prefix}.attn.{name}.weight"] = (d, d)
        shapes[f"{prefix}.attn.{name}.bias"] = (d,)
    shapes[f"{prefix}.attn_norm.gamma"] = (d,)
    shapes[f"{prefix}.attn_norm.beta"] = (d,)
    shapes[f"{prefix}.ffn.in.weight"] = (d, f)
    shapes[f"{prefix}.ffn.in.bias"] = (f,)
    shapes[f"{prefix}.ffn.out.weight"] = (f, d)
    shapes[f"{prefix}.ffn.out.bias"] = (d,)
    shapes[f"{prefix}.ffn_norm.gamma"] = (d,)
    shapes[f"{prefix}.ffn_norm.beta"] = (d,)
    return shapes


def encoder_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes = {
        "embed.token": (cfg.vocab_size, cfg.hidden_dim),
        "embed.position": (cfg.max_segment_len, cfg.hidden_dim),
    }
    for k in range(cfg.layers_first):
        shapes.update(layer_shapes(f"first.layer{k}", cfg))
    for k in range(cfg.layers_second):
        shapes.update(layer_shapes(f"second.layer{k}", cfg))
    return shapes


def init_from_shapes(shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator, std: float) -> Params:
    """Normal(0, std) weights; zero biases and betas; unit gammas."""
    params = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta"):
            arr = np.zeros(shape)
        elif leaf == "gamma":
            arr = np.ones(shape)
        else:
            arr = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> Params:
    return init_from_shapes(encoder_shapes(cfg), rng, cfg.init_std)


def count_parameters(shapes: Mapping[str, tuple[int, ...]], prefix: str = "") -> int:
    return int(sum(np.prod(s, dtype=np.int64) for k, s in shapes.items() if k.startswith(prefix)))


def linear(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def embed(token_ids: np.ndarray, params: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Token embedding plus absolute position embedding; positions restart at 0 per segment."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
        squeeze = True
    else:
        squeeze = False
    length = ids.shape[-1]
    if length > cfg.max_segment_len:
        raise ValueError(f"segment length {length} exceeds max_segment_len {cfg.max_segment_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        bad = ids[(ids < 0) | (ids >= cfg.vocab_size)]
        raise ValueError(f"token id {int(bad[0])} outside vocabulary of size {cfg.vocab_size}")
    tok = params["embed.token"][ids]
    pos = params["embed.position"][np.arange(length)]
    h0 = tok + pos
    return h0[0] if squeeze else h0


def self_attention(x: Tensor, mask: np.ndarray, params, prefix: str, cfg: EncoderConfig, rng=None) -> Tensor:
    s, n, d = x.shape
    h = cfg.num_heads
    dh = d // h

    def heads(t: Tensor) -> Tensor:
        return t.reshape(s, n, h, dh).transpose(0, 2, 1, 3)

    q = heads(linear(x, params, f"{prefix}.query"))
    k = heads(linear(x, params, f"{prefix}.key"))
    v = heads(linear(x, params, f"{prefix}.value"))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    probs = ad.softmax(scores, axis=-1, mask=mask[:, None, None, :])
    probs = ad.dropout(probs, cfg.dropout, rng)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(s, n, d)
    return linear(ctx, params, f"{prefix}.output")


def transformer_layer(x: Tensor, mask: np.ndarray, params, prefix: str, cfg: EncoderConfig, rng=None) -> Tensor:
    eps = cfg.layer_norm_eps
    a = ad.dropout(self_attention(x, mask, params, f"{prefix}.attn", cfg, rng), cfg.dropout, rng)
    x = ad.layer_norm(x + a, params[f"{prefix}.attn_norm.gamma"], params[f"{prefix}.attn_norm.beta"], eps)
    f = linear(ad.gelu(linear(x, params, f"{prefix}.ffn.in")), params, f"{prefix}.ffn.out")
    f = ad.dropout(f, cfg.dropout, rng)
    return ad.layer_norm(x + f, params[f"{prefix}.ffn_norm.gamma"], params[f"{prefix}.ffn_norm.beta"], eps)


def _encode(h: Tensor, attention_mask, params, stage: str, n_layers: int, cfg: EncoderConfig, rng) -> Tensor:
    mask = np.asarray(attention_mask, dtype=bool)
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
        mask = mask[None, :]
    if mask.shape != h.shape[:2]:
        raise ValueError(f"attention mask {mask.shape} does not match states {h.shape[:2]}")
    if not mask.any(axis=-1).all():
        raise ValueError("segment consists only of padding")
    for k in range(n_layers):
        h = transformer_layer(h, mask, params, f"{stage}.layer{k}", cfg, rng)
    return h.reshape(*h.shape[1:]) if squeeze else h


def encode_first(h0: Tensor, attention_mask, params, cfg: EncoderConfig, rng=None) -> Tensor:
    """First read: ``layers_first`` blocks, each segment attending only to itself."""
    return _encode(h0, attention_mask, params, "first", cfg.layers_first, cfg, rng)


def encode_second(h3: Tensor, attention_mask, params, cfg: EncoderConfig, rng=None) -> Tensor:
    return _encode(h3, attention_mask, params, "second", cfg.layers_second, cfg, rng)
