"""Extractive QA heads and the yes/no/span option classifier.

Span scores come from a shared feed-forward layer followed by two scalar
maps, one for answer begins and one for answer ends. The span loss is the
"OR" model with global normalization: every gold begin (end) position in
every segment counts as correct, and the softmax runs over all tokens of all
segments of the example at once. Decoding picks the single most confident
legal (begin, end) pair over all segments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import AnnotatedDocument, QAExample, Segment, SegmentationMap, SegmentProfile, Vocab, segment_document
from .encoder import Params, linear
from .model import ReadTwice, SegmentBatch, pack_segments

MAX_ANSWER_LEN = 30
OPTIONS = ("span", "yes", "no")  # index order doubles as the tie-break priority


@dataclass
class QAStats:
    skipped_empty_gold: int = 0
    dropped_spans: int = 0


@dataclass
class SpanScores:
    """Begin/end scores for a padded batch of segments.

    ``valid`` marks answer-candidate tokens (segment text, never CLS, the
    question, separators or padding). ``segment_ids`` identify segments for
    tie-breaking so that results do not depend on row order.
    """

    begin: Tensor  # [S, L]
    end: Tensor  # [S, L]
    valid: np.ndarray  # [S, L] bool
    prefix_len: int = 0
    segment_ids: np.ndarray | None = None

    def __post_init__(self):
        if self.segment_ids is None:
            self.segment_ids = np.arange(self.valid.shape[0])
        self.segment_ids = np.asarray(self.segment_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


@dataclass
class AnswerSpanSet:
    """Gold spans as ``(row, begin, end)`` with inclusive ``end``, in content coordinates."""

    spans: list[tuple[int, int, int]] = field(default_factory=list)
    dropped: int = 0

    def __bool__(self) -> bool:
        return bool(self.spans)

    def begins(self) -> list[tuple[int, int]]:
        return sorted({(i, b) for i, b, _ in self.spans})

    def ends(self) -> list[tuple[int, int]]:
        return sorted({(i, e) for i, _, e in self.spans})

    def rows(self) -> list[int]:
        return sorted({i for i, _, _ in self.spans})

    def to_document(self, smap: SegmentationMap) -> list[tuple[int, int]]:
        """Inverse projection: document ``[start, end)`` spans."""
        return sorted({(smap.to_document(i, b), smap.to_document(i, e) + 1) for i, b, e in self.spans})


def project_gold_spans(doc_spans: Iterable[tuple[int, int]], smap: SegmentationMap, stats: QAStats | None = None) -> AnswerSpanSet:
    """Map document ``[start, end)`` token spans into every window that fully contains them."""
    out = AnswerSpanSet()
    for start, end in doc_spans:
        hits = [
            (i, start - sp.offset, end - 1 - sp.offset)
            for i, sp in enumerate(smap.spans)
            if sp.offset <= start and end <= sp.offset + sp.length and start < end
        ]
        if hits:
            out.spans.extend(hits)
        else:
            out.dropped += 1
    out.spans = sorted(set(out.spans))
    if stats is not None:
        stats.dropped_spans += out.dropped
    return out


# ---------------------------------------------------------------------------
# heads and losses
# ---------------------------------------------------------------------------


def qa_features(h4: Tensor, params: Params) -> Tensor:
    return ad.gelu(linear(h4, params, "qa.ffn"))


def qa_scores(h4: Tensor, params: Params, valid: np.ndarray, prefix_len: int = 0, segment_ids=None) -> SpanScores:
    """``h4`` is [S, L, d]; returns begin and end scores per token."""
    f = qa_features(h4, params)
    s, n = h4.shape[:2]
    begin = (f @ params["qa.begin.weight"]).reshape(s, n)
    end = (f @ params["qa.end.weight"]).reshape(s, n)
    return SpanScores(begin, end, np.asarray(valid, dtype=bool), prefix_len, segment_ids)


def _or_model_term(z: Tensor, valid: np.ndarray, gold: Sequence[tuple[int, int]], prefix_len: int) -> Tensor:
    gold_mask = np.zeros_like(valid)
    for i, j in gold:
        gold_mask[i, j + prefix_len] = True
    if (gold_mask & ~valid).any():
        raise ValueError("gold position falls outside the answer-candidate tokens")
    return ad.logsumexp(z, axis=None, mask=valid) - ad.logsumexp(z, axis=None, mask=gold_mask)


def span_loss(scores: SpanScores, gold: AnswerSpanSet, stats: QAStats | None = None) -> Tensor | None:
    """Globally normalized OR-model loss, begin and end terms summed.

    Returns None (and counts the skip) when ``gold`` is empty.
    """
    if not gold:
        if stats is not None:
            stats.skipped_empty_gold += 1
        return None
    b = _or_model_term(scores.begin, scores.valid, gold.begins(), scores.prefix_len)
    e = _or_model_term(scores.end, scores.valid, gold.ends(), scores.prefix_len)
    return b + e


@dataclass(frozen=True)
class DecodedSpan:
    row: int
    segment_id: int
    begin: int  # content coordinates, inclusive
    end: int
    score: float


def decode_answer(scores: SpanScores, max_answer_len: int = MAX_ANSWER_LEN) -> DecodedSpan:
    """Best legal pair by ``Z_b + Z_e``; ties go to the smallest (segment, begin, end)."""
    if max_answer_len < 1:
        raise ValueError("max_answer_len must be >= 1")
    zb, ze, valid = scores.begin.data, scores.end.data, scores.valid
    if not valid.any():
        raise ValueError("no answer-candidate tokens to decode from")
    n = valid.shape[1]
    offs = np.arange(n)
    legal_shape = (offs[None, :] >= offs[:, None]) & (offs[None, :] - offs[:, None] < max_answer_len)
    best = None
    for row in np.argsort(scores.segment_ids, kind="stable"):
        v = valid[row]
        if not v.any():
            continue
        pair = zb[row][:, None] + ze[row][None, :]
        legal = legal_shape & v[:, None] & v[None, :]
        pair = np.where(legal, pair, -np.inf)
        flat = int(np.argmax(pair))  # first maximum = lexicographic (begin, end)
        score = float(pair.reshape(-1)[flat])
        if best is None or score > best[0]:
            b, e = divmod(flat, n)
            best = (score, int(row), b, e)
    score, row, b, e = best
    p = scores.prefix_len
    return DecodedSpan(row, int(scores.segment_ids[row]), b - p, e - p, score)


def option_logits(h4: Tensor, params: Params) -> Tensor:
    """[S, 3] scores (span, yes, no) from each segment's CLS state."""
    return linear(h4[:, 0, :], params, "qa.option")


def option_loss(logits: Tensor, option: str, supporting: Sequence[int]) -> Tensor:
    """NLL of ``option`` summed over supporting segments, normalized over all segments and options."""
    if option not in OPTIONS:
        raise ValueError(f"option must be one of {OPTIONS}, got {option!r}")
    if not len(supporting):
        raise ValueError("option loss needs at least one supporting segment")
    num = np.zeros(logits.shape, dtype=bool)
    num[np.asarray(supporting, dtype=np.int64), OPTIONS.index(option)] = True
    return ad.logsumexp(logits, axis=None) - ad.logsumexp(logits, axis=None, mask=num)


@dataclass(frozen=True)
class OptionDecision:
    option: str
    score: float
    row: int


def option_classifier(logits: Tensor | np.ndarray, segment_ids=None) -> OptionDecision:
    """Max-scoring option over all segments; ties prefer span > yes > no, then the earlier segment."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    ids = np.arange(z.shape[0]) if segment_ids is None else np.asarray(segment_ids)
    top = z.max()
    rows, cols = np.nonzero(z == top)
    k = min(range(len(rows)), key=lambda t: (cols[t], ids[rows[t]]))
    return OptionDecision(OPTIONS[int(cols[k])], float(top), int(rows[k]))


# ---------------------------------------------------------------------------
# examples -> batches -> predictions
# ---------------------------------------------------------------------------


@dataclass
class QAInstance:
    example: QAExample
    batch: SegmentBatch
    segments: list[Segment]
    smap: SegmentationMap
    gold: AnswerSpanSet

    def supporting_rows(self) -> list[int]:
        """Rows holding a gold span; every row when there is none (yes/no questions)."""
        return self.gold.rows() or list(range(self.batch.num_segments))

    def answer_mask(self) -> np.ndarray:
        return self.batch.content_mask()


def build_instance(
    example: QAExample,
    doc: AnnotatedDocument,
    vocab: Vocab,
    profile: SegmentProfile,
    max_question_len: int = 32,
    stats: QAStats | None = None,
) -> QAInstance:
    """Segment ``doc``, prepend the (truncated) question to every segment and project gold spans."""
    segments, smap = segment_document(doc, profile)
    question, _ = vocab.tokenize(example.question)
    batch = pack_segments(segments, vocab, question=question[:max_question_len])
    gold = project_gold_spans(example.spans, smap, stats)
    return QAInstance(example, batch, segments, smap, gold)


def _segment_keys(inst: QAInstance) -> np.ndarray:
    return np.arange(inst.batch.num_segments)  # windows are in document order


@dataclass
class QALosses:
    total: Tensor
    span: Tensor | None
    option: Tensor | None


def qa_losses(model: ReadTwice, inst: QAInstance, use_options: bool = False, stats: QAStats | None = None, rng=None) -> QALosses | None:
    """Span loss (+ option loss when enabled); None when nothing is trainable."""
    out = model.forward(inst.batch, rng=rng if model.config.encoder.dropout > 0 else None)
    span = None
    option_l = None
    answer_option = inst.example.option or "span"
    if answer_option == "span":
        scores = qa_scores(out.h4, model.params, inst.answer_mask(), inst.batch.prefix_len, _segment_keys(inst))
        span = span_loss(scores, inst.gold, stats)
    elif stats is not None and not use_options:
        stats.skipped_empty_gold += 1
    if use_options and (answer_option != "span" or span is not None):
        option_l = option_loss(option_logits(out.h4, model.params), answer_option, inst.supporting_rows())
    parts = [t for t in (span, option_l) if t is not None]
    if not parts:
        return None
    total = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return QALosses(total, span, option_l)


def answer_text(doc: AnnotatedDocument, start: int, end: int) -> str:
    """Surface text of document tokens ``[start, end)``."""
    if doc.text and doc.offsets:
        return doc.text[doc.offsets[start][0] : doc.offsets[end - 1][1]]
    return Vocab.detokenize(doc.tokens[start:end])


def predict(
    model: ReadTwice,
    inst: QAInstance,
    doc: AnnotatedDocument,
    max_answer_len: int = MAX_ANSWER_LEN,
    use_options: bool = False,
) -> dict:
    """One prediction record for ``inst``."""
    with ad.no_grad():
        out = model.forward(inst.batch)
        rec = {"question_id": inst.example.question_id}
        if use_options:
            decision = option_classifier(option_logits(out.h4, model.params), _segment_keys(inst))
            rec["option"] = decision.option
            if decision.option != "span":
                rec.update(answer=decision.option, span=None, score=decision.score)
                return rec
        scores = qa_scores(out.h4, model.params, inst.answer_mask(), inst.batch.prefix_len, _segment_keys(inst))
        best = decode_answer(scores, max_answer_len)
    start = inst.smap.to_document(best.row, best.begin)
    end = inst.smap.to_document(best.row, best.end) + 1
    rec.update(answer=answer_text(doc, start, end), span=[start, end], score=best.score)
    return rec


def finite_or_raise(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite {what}: {value}")
    return value
