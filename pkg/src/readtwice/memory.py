"""Memory extraction, gathering and memory attention.

After the first read each segment contributes entries to a flat memory
table: its CLS vector, one vector per fixed-length span, or one vector per
entity mention. Span and mention vectors are a learned linear projection of
the concatenated first and last token states. During the merge every
eligible token attends over the table entries of its own document plus a
learnable no-op entry; each entry's logit gets a learned bias that depends on
the clipped segment distance. The no-op absorbs probability mass but adds
nothing to the output.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import Params, linear

MODES = ("CLS", "STS", "E", "off")
SCOPES = ("document", "segment", "global")


@dataclass
class MemoryConfig:
    mode: str = "E"
    scope: str = "document"  # "segment" is the single-segment (SS) ablation
    clip: int = 10
    span_len: int = 32
    top_k: int | None = None
    scaled_logits: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"memory mode must be one of {MODES}, got {self.mode!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"memory scope must be one of {SCOPES}, got {self.scope!r}")
        if self.clip < 0 or self.span_len < 1:
            raise ValueError("clip must be >= 0 and span_len >= 1")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be positive when set")

    @classmethod
    def from_dict(cls, d: Mapping) -> MemoryConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown memory config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def memory_shapes(hidden_dim: int, clip: int) -> dict[str, tuple[int, ...]]:
    return {
        "memory.span_proj.weight": (2 * hidden_dim, hidden_dim),
        "memory.span_proj.bias": (hidden_dim,),
        "memory.omega": (2 * clip + 1,),
        "memory.noop": (hidden_dim,),
        "memory.norm.gamma": (hidden_dim,),
        "memory.norm.beta": (hidden_dim,),
    }


@dataclass(frozen=True)
class MemoryEntry:
    doc_id: str
    source_segment: int
    kind: str
    span: tuple[int, int]  # [start, end) within the encoded source segment
    entity_id: str | None = None


@dataclass
class SegmentMemories:
    """Entries extracted from one segment; row r of ``vectors`` belongs to ``entries[r]``."""

    vectors: Tensor
    entries: list[MemoryEntry]


@dataclass
class MemoryTable:
    vectors: Tensor  # [K, d]
    entries: list[MemoryEntry] = field(default_factory=list)
    noop: Tensor | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def vector(self, k: int) -> np.ndarray:
        return self.vectors.data[k]

    def permuted(self, order: Sequence[int]) -> MemoryTable:
        order = np.asarray(order, dtype=np.int64)
        return MemoryTable(self.vectors[order], [self.entries[i] for i in order], self.noop)

    def dump(self, path: str | Path) -> None:
        """Debug dump: one JSON line per entry with metadata and the vector."""
        with open(path, "w", encoding="utf-8") as fh:
            for e, v in zip(self.entries, self.vectors.data):
                rec = {
                    "doc_id": e.doc_id,
                    "m_s": e.source_segment,
                    "kind": e.kind,
                    "span": list(e.span),
                    "entity_id": e.entity_id,
                    "vector": [float(x) for x in v],
                }
                fh.write(json.dumps(rec) + "\n")


@dataclass
class SegmentInfo:
    """What extraction needs to know about one encoded segment."""

    doc_id: str
    index: int
    length: int  # real (non-padding) tokens, including any prefix
    prefix_len: int = 1  # CLS, optionally question + SEP
    mentions: Sequence = ()  # (start, end, entity_id) in encoded coordinates


def span_vectors(h1: Tensor, spans: Sequence[tuple[int, int]], params: Params) -> Tensor:
    first = np.array([s for s, _ in spans], dtype=np.int64)
    last = np.array([e - 1 for _, e in spans], dtype=np.int64)
    both = ad.concat([h1[first], h1[last]], axis=-1)
    return linear(both, params, "memory.span_proj")


def sts_spans(info: SegmentInfo, span_len: int) -> list[tuple[int, int]]:
    return [(s, min(s + span_len, info.length)) for s in range(info.prefix_len, info.length, span_len)]


def extract_memories(h1: Tensor, info: SegmentInfo, mode: str, params: Params, span_len: int = 32) -> SegmentMemories:
    """Memory entries for one segment from its first-read states ``h1`` [L, d]."""
    d = h1.shape[-1]
    if mode == "off":
        spans, kind, ents = [], "none", []
    elif mode == "CLS":
        return SegmentMemories(h1[np.array([0])], [MemoryEntry(info.doc_id, info.index, "CLS", (0, 1))])
    elif mode == "STS":
        spans = sts_spans(info, span_len)
        kind, ents = "STS", [None] * len(spans)
    elif mode == "E":
        spans = [(int(m[0]), int(m[1])) for m in info.mentions]
        kind, ents = "E", [m[2] for m in info.mentions]
    else:
        raise ValueError(f"unknown memory mode {mode!r}")
    for s, e in spans:
        if not 0 <= s < e <= info.length:
            raise ValueError(f"span {(s, e)} outside segment of length {info.length}")
    if not spans:
        return SegmentMemories(ad.zeros((0, d)), [])
    vecs = span_vectors(h1, spans, params)
    entries = [MemoryEntry(info.doc_id, info.index, kind, sp, ent) for sp, ent in zip(spans, ents)]
    return SegmentMemories(vecs, entries)


def gather(per_segment: Iterable[SegmentMemories], noop: Tensor | None = None, hidden_dim: int | None = None) -> MemoryTable:
    """Concatenate per-segment memories into one flat table."""
    blocks = [b for b in per_segment]
    entries = [e for b in blocks for e in b.entries]
    nonempty = [b.vectors for b in blocks if b.entries]
    if nonempty:
        vectors = nonempty[0] if len(nonempty) == 1 else ad.concat(nonempty, axis=0)
    else:
        if hidden_dim is None:
            hidden_dim = noop.shape[-1] if noop is not None else (blocks[0].vectors.shape[-1] if blocks else 0)
        vectors = ad.zeros((0, hidden_dim))
    return MemoryTable(vectors, entries, noop)


def clip_distance(i: int | np.ndarray, m_s: int | np.ndarray, clip: int):
    return np.clip(np.asarray(i) - np.asarray(m_s), -clip, clip)


def relative_distance_score(i: int, m_s: int, omega: Tensor | np.ndarray, clip: int, same_document: bool = True) -> float:
    """The learned bias ``omega[clip(i - m_s)]``; index 0 of ``omega`` is distance ``-clip``."""
    if not same_document:
        raise ValueError("relative distance is only defined between segments of one document")
    w = omega.data if isinstance(omega, Tensor) else np.asarray(omega)
    if w.shape != (2 * clip + 1,):
        raise ValueError(f"omega must have {2 * clip + 1} entries, got {w.shape}")
    return float(w[int(clip_distance(i, m_s, clip)) + clip])


def eligibility(
    seg_index: np.ndarray, doc_keys: np.ndarray, table: MemoryTable, doc_lookup: Mapping[str, int], scope: str
) -> np.ndarray:
    """[N, K] mask of which table entries each token may attend to."""
    if not len(table):
        return np.zeros((len(seg_index), 0), dtype=bool)
    ent_doc = np.array([doc_lookup.get(e.doc_id, -1) for e in table.entries])
    ent_seg = np.array([e.source_segment for e in table.entries])
    if scope == "global":
        return np.ones((len(seg_index), len(table)), dtype=bool)
    same_doc = doc_keys[:, None] == ent_doc[None, :]
    if scope == "segment":
        return same_doc & (seg_index[:, None] == ent_seg[None, :])
    return same_doc


@dataclass
class AttentionResult:
    output: Tensor  # [N, d]
    alpha: np.ndarray  # [N, K + 1]; last column is the no-op
    eligible: np.ndarray  # [N, K]


def memory_attention(
    h: Tensor,
    seg_index: Sequence[int],
    doc_ids: Sequence[str],
    table: MemoryTable,
    params: Params,
    cfg: MemoryConfig,
    token_mask: np.ndarray | None = None,
) -> AttentionResult:
    """Attention of token states ``h`` [N, d] over ``table`` plus the no-op entry.

    ``seg_index[n]`` and ``doc_ids[n]`` locate token n. Tokens with
    ``token_mask`` False bypass the layer (zero output).
    """
    n, d = h.shape
    seg_index = np.asarray(seg_index, dtype=np.int64)
    doc_lookup = {k: i for i, k in enumerate(dict.fromkeys(list(doc_ids) + [e.doc_id for e in table.entries]))}
    doc_keys = np.array([doc_lookup[k] for k in doc_ids], dtype=np.int64)
    elig = eligibility(seg_index, doc_keys, table, doc_lookup, cfg.scope)
    k = len(table)
    noop = table.noop if table.noop is not None else params["memory.noop"]
    scale = 1.0 / np.sqrt(d) if cfg.scaled_logits else 1.0
    mem = table.vectors
    dots = (h @ mem.T) * scale if k else ad.zeros((n, 0))
    if cfg.top_k is not None and k > cfg.top_k:
        masked = np.where(elig, dots.data, -np.inf)
        keep = np.argpartition(-masked, cfg.top_k - 1, axis=1)[:, : cfg.top_k]
        top = np.zeros_like(elig)
        np.put_along_axis(top, keep, True, axis=1)
        elig = elig & top
    if k:
        ent_seg = np.array([e.source_segment for e in table.entries])
        idx = clip_distance(seg_index[:, None], ent_seg[None, :], cfg.clip) + cfg.clip
        r = params["memory.omega"][idx]
        if cfg.scope == "global":
            ent_doc = np.array([doc_lookup[e.doc_id] for e in table.entries])
            r = ad.where(doc_keys[:, None] == ent_doc[None, :], r, 0.0)
        mem_logits = dots + r
    else:
        mem_logits = dots
    noop_logit = (h @ noop.reshape(d, 1)) * scale
    logits = ad.concat([mem_logits, noop_logit], axis=1)
    full_mask = np.concatenate([elig, np.ones((n, 1), dtype=bool)], axis=1)
    alpha = ad.softmax(logits, axis=1, mask=full_mask)
    out = alpha[:, :k] @ mem if k else ad.zeros((n, d))
    if token_mask is not None:
        out = out * np.asarray(token_mask, dtype=h.dtype)[:, None]
    return AttentionResult(out, alpha.data, elig)


def token_eligibility(length: int, mode: str, mentions: Sequence = (), padded_length: int | None = None) -> np.ndarray:
    """Which of a segment's tokens run memory attention.

    Entity mode touches only tokens inside mention spans; CLS and STS modes
    touch every real token. Padding is never eligible.
    """
    total = length if padded_length is None else padded_length
    flags = np.zeros(total, dtype=bool)
    if mode == "E":
        for m in mentions:
            flags[int(m[0]) : int(m[1])] = True
    elif mode in ("CLS", "STS"):
        flags[:length] = True
    return flags


def merge(h1: Tensor, h2: Tensor, params: Params, eps: float = 1e-12) -> Tensor:
    """Residual sum followed by LayerNorm."""
    if h1.shape != h2.shape:
        raise ValueError(f"merge shape mismatch {h1.shape} vs {h2.shape}")
    return ad.layer_norm(h1 + h2, params["memory.norm.gamma"], params["memory.norm.beta"], eps)
