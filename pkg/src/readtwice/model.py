"""The full two-pass reader: embed, first read, extract + gather memories,
memory attention and merge, second read."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor
from .checkpoint import load_arrays, save_arrays
from .corpus import Segment, Vocab
from .encoder import (
    EncoderConfig,
    Params,
    embed,
    encode_first,
    encode_second,
    encoder_shapes,
    init_from_shapes,
)
from .memory import (
    MemoryConfig,
    MemoryTable,
    SegmentInfo,
    extract_memories,
    gather,
    memory_attention,
    memory_shapes,
    merge,
    token_eligibility,
)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        unknown = set(d) - {"encoder", "memory"}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(EncoderConfig.from_dict(d.get("encoder", {})), MemoryConfig.from_dict(d.get("memory", {})))

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "memory": self.memory.to_dict()}


def head_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.hidden_dim
    shapes = {
        "mlm.transform.weight": (d, d),
        "mlm.transform.bias": (d,),
        "mlm.norm.gamma": (d,),
        "mlm.norm.beta": (d,),
        "mlm.output_bias": (cfg.vocab_size,),
        "coref.bias": (1,),
        "qa.ffn.weight": (d, d),
        "qa.ffn.bias": (d,),
        "qa.begin.weight": (d, 1),
        "qa.end.weight": (d, 1),
        "qa.option.weight": (d, 3),
        "qa.option.bias": (3,),
    }
    if not cfg.tie_mlm_output:
        shapes["mlm.output.weight"] = (d, cfg.vocab_size)
    return shapes


def model_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = encoder_shapes(cfg.encoder)
    shapes.update(memory_shapes(cfg.encoder.hidden_dim, cfg.memory.clip))
    shapes.update(head_shapes(cfg.encoder))
    return shapes


@dataclass
class SegmentBatch:
    """Encoded segments, padded to a common length.

    Row ``s`` is ``[CLS] (question [SEP])? segment-tokens [PAD]*``; ``prefix_len``
    counts the tokens before the segment content.
    """

    token_ids: np.ndarray  # [S, L]
    attention_mask: np.ndarray  # [S, L] bool, True on real tokens
    seg_index: np.ndarray  # [S]
    doc_ids: list[str]
    mentions: list[list[tuple[int, int, str | None]]]  # encoded coordinates
    prefix_len: int
    segments: list[Segment] = field(default_factory=list)

    @property
    def num_segments(self) -> int:
        return self.token_ids.shape[0]

    @property
    def length(self) -> int:
        return self.token_ids.shape[1]

    def lengths(self) -> np.ndarray:
        return self.attention_mask.sum(axis=1)

    def info(self, s: int) -> SegmentInfo:
        return SegmentInfo(self.doc_ids[s], int(self.seg_index[s]), int(self.lengths()[s]), self.prefix_len, self.mentions[s])

    def entity_flags(self) -> np.ndarray:
        flags = np.zeros_like(self.attention_mask)
        for s, ms in enumerate(self.mentions):
            for a, b, _ in ms:
                flags[s, a:b] = True
        return flags

    def content_mask(self) -> np.ndarray:
        """Real tokens that belong to the segment text (not CLS, question or SEP)."""
        m = self.attention_mask.copy()
        m[:, : self.prefix_len] = False
        return m


def pack_segments(
    segments: Sequence[Segment],
    vocab: Vocab,
    question: Sequence[str] | None = None,
    token_ids: Sequence[np.ndarray] | None = None,
) -> SegmentBatch:
    """Build a padded batch; ``token_ids`` may override each segment's content ids."""
    prefix = [vocab.cls_id]
    if question is not None:
        prefix += list(vocab.encode(question)) + [vocab.sep_id]
    p = len(prefix)
    contents = [vocab.encode(s.tokens) if token_ids is None else np.asarray(token_ids[i]) for i, s in enumerate(segments)]
    length = p + max((len(c) for c in contents), default=0)
    ids = np.full((len(segments), length), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((len(segments), length), dtype=bool)
    for i, c in enumerate(contents):
        ids[i, :p] = prefix
        ids[i, p : p + len(c)] = c
        mask[i, : p + len(c)] = True
    mentions = [[(m.start + p, m.end + p, m.entity_id) for m in s.mentions] for s in segments]
    return SegmentBatch(
        token_ids=ids,
        attention_mask=mask,
        seg_index=np.array([s.index for s in segments], dtype=np.int64),
        doc_ids=[s.doc_id for s in segments],
        mentions=mentions,
        prefix_len=p,
        segments=list(segments),
    )


@dataclass
class ReadOutput:
    h0: Tensor
    h1: Tensor
    h2: Tensor
    h3: Tensor
    h4: Tensor
    table: MemoryTable
    alpha: np.ndarray
    token_mask: np.ndarray


class ReadTwice:
    """Parameters plus the forward pass over a :class:`SegmentBatch`."""

    def __init__(self, config: ModelConfig, params: Params):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> ReadTwice:
        params = init_from_shapes(model_shapes(config), rng, config.encoder.init_std)
        params["memory.omega"].data[:] = 0.0
        return cls(config, params)

    # -- persistence ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def save(self, path, meta: dict | None = None, extra: Mapping[str, np.ndarray] | None = None) -> None:
        arrays = {f"params/{k}": v for k, v in self.state_dict().items()}
        for k, v in (extra or {}).items():
            arrays[k] = v
        save_arrays(path, arrays, {"config": self.config.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path) -> tuple[ReadTwice, dict[str, np.ndarray], dict]:
        arrays, meta = load_arrays(path)
        config = ModelConfig.from_dict(meta["config"])
        params = {}
        for k, v in arrays.items():
            if k.startswith("params/"):
                name = k[len("params/") :]
                params[name] = Tensor(v.copy(), requires_grad=True, name=name, dtype=v.dtype)
        expected = set(model_shapes(config))
        missing = expected - set(params)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        extra = {k: v for k, v in arrays.items() if not k.startswith("params/")}
        return cls(config, params), extra, meta

    def astype(self, dtype) -> ReadTwice:
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k, dtype=dtype) for k, v in self.params.items()}
        return ReadTwice(self.config, params)

    # -- forward -------------------------------------------------------------
    def first_read(self, batch: SegmentBatch, rng=None) -> tuple[Tensor, Tensor]:
        h0 = embed(batch.token_ids, self.params, self.config.encoder)
        h1 = encode_first(h0, batch.attention_mask, self.params, self.config.encoder, rng)
        return h0, h1

    def build_table(self, h1: Tensor, batch: SegmentBatch) -> MemoryTable:
        mcfg = self.config.memory
        blocks = [
            extract_memories(h1[s], batch.info(s), mcfg.mode, self.params, mcfg.span_len) for s in range(batch.num_segments)
        ]
        return gather(blocks, self.params["memory.noop"], self.config.encoder.hidden_dim)

    def token_mask(self, batch: SegmentBatch) -> np.ndarray:
        lengths = batch.lengths()
        return np.stack(
            [
                token_eligibility(int(lengths[s]), self.config.memory.mode, batch.mentions[s], batch.length)
                for s in range(batch.num_segments)
            ]
        )

    def forward(self, batch: SegmentBatch, rng=None) -> ReadOutput:
        cfg = self.config
        s, n, d = batch.num_segments, batch.length, cfg.encoder.hidden_dim
        h0, h1 = self.first_read(batch, rng)
        table = self.build_table(h1, batch)
        tmask = self.token_mask(batch)
        flat_seg = np.repeat(batch.seg_index, n)
        flat_doc = [doc for doc in batch.doc_ids for _ in range(n)]
        att = memory_attention(h1.reshape(s * n, d), flat_seg, flat_doc, table, self.params, cfg.memory, tmask.reshape(-1))
        h2 = att.output.reshape(s, n, d)
        h3 = merge(h1, h2, self.params, cfg.encoder.layer_norm_eps)
        h4 = encode_second(h3, batch.attention_mask, self.params, cfg.encoder, rng)
        return ReadOutput(h0, h1, h2, h3, h4, table, att.alpha, tmask)
