"""Tokenization, annotated-document ingestion, windowed segmentation,
ROUGE-L oracle labels and the synthetic cross-segment probe corpus."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .metrics import normalize_for_eval, rouge_l_tokens

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, MASK, UNK)
_BYTE_RE = re.compile(r"^<0x([0-9A-F]{2})>$")


def byte_token(b: int) -> str:
    return f"<0x{b:02X}>"


class Vocab:
    """Token inventory with greedy longest-match tokenization and byte fallback.

    Ids 0-4 are the special tokens; the 256 byte tokens ``<0xNN>`` are always
    present so any string can be tokenized.
    """

    def __init__(self, tokens: Iterable[str] = ()):
        ordered = list(SPECIAL_TOKENS)
        seen = set(ordered)
        for t in tokens:
            if t not in seen:
                ordered.append(t)
                seen.add(t)
        for b in range(256):
            t = byte_token(b)
            if t not in seen:
                ordered.append(t)
                seen.add(t)
        self.tokens = ordered
        self.index = {t: i for i, t in enumerate(ordered)}
        self._pieces = {t for t in ordered if t not in SPECIAL_TOKENS and not _BYTE_RE.match(t) and t}
        self._max_len = max((len(t) for t in self._pieces), default=1)
        regular = [i for i, t in enumerate(ordered) if t not in SPECIAL_TOKENS and not _BYTE_RE.match(t)]
        self._replacement = np.array(regular or [self.index[UNK]], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.tokens)

    pad_id = property(lambda self: self.index[PAD])
    cls_id = property(lambda self: self.index[CLS])
    sep_id = property(lambda self: self.index[SEP])
    mask_id = property(lambda self: self.index[MASK])

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.index[t] for t in SPECIAL_TOKENS)

    @property
    def replacement_ids(self) -> np.ndarray:
        """Ids eligible as random substitutes during masking."""
        return self._replacement

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.index[t] for t in tokens], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"token {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def tokenize(self, text: str) -> tuple[list[str], list[tuple[int, int]]]:
        """Split ``text`` into vocabulary pieces; returns tokens and character offsets.

        Characters no piece covers become one byte token per UTF-8 byte, each
        carrying the character's offsets.
        """
        tokens: list[str] = []
        offsets: list[tuple[int, int]] = []
        pos, n = 0, len(text)
        while pos < n:
            for length in range(min(self._max_len, n - pos), 0, -1):
                piece = text[pos : pos + length]
                if piece in self._pieces:
                    tokens.append(piece)
                    offsets.append((pos, pos + length))
                    pos += length
                    break
            else:
                for b in text[pos].encode("utf-8"):
                    tokens.append(byte_token(b))
                    offsets.append((pos, pos + 1))
                pos += 1
        return tokens, offsets

    @staticmethod
    def detokenize(tokens: Sequence[str]) -> str:
        buf = bytearray()
        for t in tokens:
            m = _BYTE_RE.match(t)
            buf.extend(bytes([int(m.group(1), 16)]) if m else t.encode("utf-8"))
        return buf.decode("utf-8", errors="replace")

    def save(self, path: str | Path) -> None:
        """One token per line, in id order; byte tokens are implicit and not written."""
        lines = [t for t in self.tokens[len(SPECIAL_TOKENS) :] if not _BYTE_RE.match(t)]
        if any("\n" in t for t in lines):
            raise ValueError("vocabulary tokens cannot contain newlines")
        Path(path).write_text("".join(t + "\n" for t in lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        text = Path(path).read_text(encoding="utf-8")
        return cls(line for line in text.split("\n")[:-1] if line)


def build_vocab(texts: Iterable[str], max_size: int = 4096) -> Vocab:
    """Frequency-ranked words (with and without a leading space) plus single characters."""
    counts: Counter = Counter()
    chars: set[str] = set()
    for text in texts:
        counts.update(re.findall(r" ?\w+| ?[^\w\s]|\s+", text))
        chars.update(text)
    budget = max_size - len(SPECIAL_TOKENS) - 256
    singles = sorted(c for c in chars if c != "\n")
    words = [w for w, _ in counts.most_common() if len(w) > 1 and "\n" not in w]
    return Vocab((singles + words)[: max(budget, 0)])


# ---------------------------------------------------------------------------
# annotated documents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mention:
    start: int
    end: int
    entity_id: str | None = None

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class AnnotatedDocument:
    doc_id: str
    tokens: list[str]
    mentions: list[Mention] = field(default_factory=list)
    text: str | None = None
    offsets: list[tuple[int, int]] | None = None
    metadata: dict = field(default_factory=dict)


def resolve_overlaps(mentions: Iterable[Mention]) -> list[Mention]:
    """Keep the longer of two overlapping mentions (earlier one on ties); sort by start."""
    kept: list[Mention] = []
    for m in sorted(mentions, key=lambda m: (-len(m), m.start)):
        if all(m.end <= k.start or k.end <= m.start for k in kept):
            kept.append(m)
    return sorted(kept, key=lambda m: m.start)


def char_span_to_tokens(offsets: Sequence[tuple[int, int]], start: int, end: int) -> tuple[int, int] | None:
    """Smallest token range covering characters ``[start, end)``."""
    hit = [i for i, (s, e) in enumerate(offsets) if s < end and e > start]
    if not hit:
        return None
    return hit[0], hit[-1] + 1


@dataclass
class LoadStats:
    documents: int = 0
    rejected: int = 0
    overlaps_resolved: int = 0


class CorpusFormatError(ValueError):
    pass


def load_annotated_corpus(path: str | Path, vocab: Vocab | None = None, stats: LoadStats | None = None) -> Iterator[AnnotatedDocument]:
    """Stream documents from a JSON-lines corpus file.

    A record carries either ``text`` (mention offsets are characters; needs
    ``vocab`` for tokenization) or ``tokens`` (mention offsets are tokens).
    Records with out-of-bounds mentions are skipped and counted in ``stats``.
    """
    stats = stats if stats is not None else LoadStats()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc_id = str(rec["doc_id"])
                raw_mentions = [(int(m["start"]), int(m["end"]), m.get("entity_id")) for m in rec.get("mentions", [])]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
            if "tokens" in rec:
                tokens, text, offsets = [str(t) for t in rec["tokens"]], None, None
                limit = len(tokens)
            elif "text" in rec:
                if vocab is None:
                    raise CorpusFormatError(f"{path}:{lineno}: text record needs a vocabulary")
                text = rec["text"]
                tokens, offsets = vocab.tokenize(text)
                limit = len(text)
            else:
                raise CorpusFormatError(f"{path}:{lineno}: record has neither 'text' nor 'tokens'")
            if any(s < 0 or e > limit or s >= e for s, e, _ in raw_mentions):
                stats.rejected += 1
                continue
            mentions = []
            for s, e, ent in raw_mentions:
                if offsets is not None:
                    span = char_span_to_tokens(offsets, s, e)
                    if span is None:
                        continue
                    s, e = span
                mentions.append(Mention(s, e, None if ent is None else str(ent)))
            resolved = resolve_overlaps(mentions)
            stats.overlaps_resolved += len(mentions) - len(resolved)
            stats.documents += 1
            yield AnnotatedDocument(doc_id, tokens, resolved, text=text, offsets=offsets, metadata=rec.get("metadata", {}))


def write_annotated_corpus(path: str | Path, docs: Iterable[AnnotatedDocument]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            rec = {
                "doc_id": d.doc_id,
                "tokens": d.tokens,
                "mentions": [
                    {"start": m.start, "end": m.end, **({"entity_id": m.entity_id} if m.entity_id is not None else {})}
                    for m in d.mentions
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def gazetteer_annotate(text: str, gazetteer: dict[str, str]) -> list[dict]:
    """Exact, word-bounded string matches of gazetteer phrases (character offsets)."""
    found = []
    for phrase, entity in gazetteer.items():
        for m in re.finditer(r"(?<!\w)" + re.escape(phrase) + r"(?!\w)", text):
            found.append(Mention(m.start(), m.end(), entity))
    return [{"start": m.start, "end": m.end, "entity_id": m.entity_id} for m in resolve_overlaps(found)]


# ---------------------------------------------------------------------------
# QA records
# ---------------------------------------------------------------------------


@dataclass
class QAExample:
    question_id: str
    question: str
    doc_id: str
    answers: list[str]
    spans: list[tuple[int, int]] = field(default_factory=list)
    option: str | None = None


def load_qa_file(path: str | Path) -> list[QAExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    QAExample(
                        question_id=str(rec["question_id"]),
                        question=rec["question"],
                        doc_id=str(rec["doc_id"]),
                        answers=list(rec.get("answers", [])),
                        spans=[(int(s["start"]), int(s["end"])) for s in rec.get("spans", [])],
                        option=rec.get("option"),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed QA record ({exc})") from None
    return out


def write_qa_file(path: str | Path, examples: Iterable[QAExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {"question_id": ex.question_id, "question": ex.question, "doc_id": ex.doc_id, "answers": ex.answers}
            if ex.spans:
                rec["spans"] = [{"start": s, "end": e} for s, e in ex.spans]
            if ex.option is not None:
                rec["option"] = ex.option
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentProfile:
    """Window arithmetic: ``window`` tokens per segment, ``overlap`` shared with the next."""

    window: int = 512
    overlap: int = 0
    max_segments: int = 128

    def __post_init__(self):
        if self.window < 1 or not 0 <= self.overlap < self.window or self.max_segments < 1:
            raise ValueError(f"invalid segment profile {self}")

    @property
    def stride(self) -> int:
        return self.window - self.overlap

    @property
    def max_document_tokens(self) -> int:
        return self.max_segments * self.stride


PRETRAIN_PROFILE = SegmentProfile(window=512, overlap=0, max_segments=128)
FINETUNE_PROFILE = SegmentProfile(window=512, overlap=128, max_segments=128)


@dataclass
class Segment:
    doc_id: str  # memory-sharing unit (sub-document key)
    index: int  # position within that unit
    offset: int  # first token's index in the source document
    tokens: list[str]
    mentions: list[Mention]  # segment-local offsets
    source_doc_id: str = ""
    subdoc: int = 0

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class SegmentSpan:
    doc_id: str
    index: int
    offset: int
    length: int
    overlap_prev: int
    overlap_next: int


@dataclass
class SegmentationMap:
    spans: list[SegmentSpan] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.spans)

    def to_document(self, segment: int, position: int) -> int:
        return self.spans[segment].offset + position

    def to_segment(self, segment: int, doc_position: int) -> int:
        return doc_position - self.spans[segment].offset


def _windows(n: int, profile: SegmentProfile) -> list[tuple[int, int]]:
    out = []
    start = 0
    while True:
        out.append((start, min(start + profile.window, n)))
        if start + profile.window >= n:
            return out
        start += profile.stride


def segment_document(doc: AnnotatedDocument, profile: SegmentProfile) -> tuple[list[Segment], SegmentationMap]:
    """Cut ``doc`` into fixed windows; documents longer than the profile's cap
    become sub-documents (distinct ``doc_id`` keys) that never share memory."""
    n = len(doc.tokens)
    if n == 0:
        raise ValueError(f"document {doc.doc_id!r} is empty")
    cap = profile.max_document_tokens
    n_sub = -(-n // cap)
    segments: list[Segment] = []
    smap = SegmentationMap()
    for sub in range(n_sub):
        lo, hi = sub * cap, min((sub + 1) * cap, n)
        key = doc.doc_id if n_sub == 1 else f"{doc.doc_id}#{sub}"
        wins = _windows(hi - lo, profile)
        for idx, (ws, we) in enumerate(wins):
            start, end = lo + ws, lo + we
            local = [
                Mention(max(m.start, start) - start, min(m.end, end) - start, m.entity_id)
                for m in doc.mentions
                if m.start < end and m.end > start
            ]
            segments.append(Segment(key, idx, start, doc.tokens[start:end], local, doc.doc_id, sub))
            prev_ov = 0 if idx == 0 else max(0, wins[idx - 1][1] - ws)
            next_ov = 0 if idx + 1 == len(wins) else max(0, we - wins[idx + 1][0])
            smap.spans.append(SegmentSpan(key, idx, start, end - start, prev_ov, next_ov))
    return segments, smap


# ---------------------------------------------------------------------------
# ROUGE-L oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleLabel:
    start: int
    end: int  # exclusive
    score: float


def _norm_token(t: str) -> str:
    return t.strip().lower()


def rouge_oracle_label(doc_tokens: Sequence[str], answer: str, max_span_len: int = 30) -> OracleLabel | None:
    """Document span (length <= ``max_span_len``) with the highest ROUGE-L
    against ``answer``; ties go to the earliest start, then the shortest span.
    Returns None when no span scores above zero."""
    ans = normalize_for_eval(answer).split()
    if not ans:
        raise ValueError("answer is empty after normalization")
    toks = [_norm_token(t) for t in doc_tokens]
    best: OracleLabel | None = None
    m = len(ans)
    for start in range(len(toks)):
        row = [0] * (m + 1)
        for end in range(start + 1, min(start + max_span_len, len(toks)) + 1):
            tok = toks[end - 1]
            new = [0]
            for j in range(m):
                new.append(row[j] + 1 if tok == ans[j] else max(row[j + 1], new[j]))
            row = new
            lcs = row[m]
            if lcs == 0:
                continue
            p, r = lcs / (end - start), lcs / m
            b2 = 1.2**2
            score = (1 + b2) * p * r / (r + b2 * p)
            if best is None or score > best.score + 1e-12:
                best = OracleLabel(start, end, score)
    return best


def rouge_oracle_brute(doc_tokens: Sequence[str], answer: str, max_span_len: int = 30) -> OracleLabel | None:
    """Exhaustive reference implementation used to check the incremental search."""
    ans = normalize_for_eval(answer).split()
    toks = [_norm_token(t) for t in doc_tokens]
    best = None
    for start in range(len(toks)):
        for end in range(start + 1, min(start + max_span_len, len(toks)) + 1):
            s = rouge_l_tokens(toks[start:end], ans)
            if s > 0 and (best is None or s > best.score + 1e-12):
                best = OracleLabel(start, end, s)
    return best


# ---------------------------------------------------------------------------
# probe corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbePosition:
    doc_id: str
    position: int  # document token index of the attribute to recover
    answer: str
    entity_id: str
    fact_segment: int
    query_segment: int


@dataclass
class ProbeCorpus:
    documents: list[AnnotatedDocument]
    manifest: list[ProbePosition]
    segment_len: int
    n_attribute_values: int
    token_inventory: list[str]

    @property
    def chance(self) -> float:
        return 1.0 / self.n_attribute_values

    @property
    def profile(self) -> SegmentProfile:
        return SegmentProfile(window=self.segment_len, overlap=0, max_segments=128)

    def vocab(self) -> Vocab:
        return Vocab(self.token_inventory)

    def probes_for(self, doc_id: str) -> list[ProbePosition]:
        return [p for p in self.manifest if p.doc_id == doc_id]


def _filler_walk(n: int, successors: np.ndarray | None, rng: np.random.Generator, n_filler: int) -> np.ndarray:
    if successors is None:
        return rng.integers(0, n_filler, size=n)
    out = np.empty(n, dtype=np.int64)
    out[0] = rng.integers(n_filler)
    picks = rng.integers(successors.shape[1], size=n)
    for t in range(1, n):
        out[t] = successors[out[t - 1], picks[t]]
    return out


def generate_probe_corpus(
    n_docs: int,
    n_entities: int,
    segments_per_doc: int,
    rng: np.random.Generator,
    segment_len: int = 16,
    entities_per_doc: int = 2,
    n_attribute_values: int = 8,
    n_filler: int = 32,
    filler_branching: int | None = 2,
    grammar_seed: int = 0,
) -> ProbeCorpus:
    """Documents whose masked attribute tokens can only be recovered from another segment.

    For each entity in a document an attribute value is drawn uniformly at
    random (so it cannot be memorized in the weights). The phrase
    ``attr ent`` is written in a *fact* segment and again in a different
    *query* segment, where the attribute is the probe position. The whole
    phrase is annotated as one mention of ``ent``, so the attribute is the
    first token of the fact mention's memory. Entity ids are scoped to the
    document because the attribute is redrawn per document. Nothing else
    in the query segment depends on the attribute, so a reader without
    cross-segment memory is at chance, ``1 / n_attribute_values``.

    Filler text follows a fixed first-order Markov chain in which every word
    has ``filler_branching`` possible successors (i.i.d. words when None), so
    ordinary span masking rewards attending to neighboring tokens. The chain
    depends only on ``grammar_seed``, so corpora drawn with different ``rng``
    share it.
    """
    if segments_per_doc < 2:
        raise ValueError("probe documents need at least two segments")
    per_doc = min(entities_per_doc, n_entities)
    slots_per_segment = segment_len // 2
    if 2 * per_doc > slots_per_segment * segments_per_doc:
        raise ValueError("segments too short for the requested facts")
    entities = [f"ent{k}" for k in range(n_entities)]
    attrs = [f"attr{k}" for k in range(n_attribute_values)]
    filler = [f"w{k}" for k in range(n_filler)]
    successors = None
    if filler_branching is not None:
        g = np.random.default_rng(grammar_seed)
        successors = np.stack([g.choice(n_filler, size=filler_branching, replace=False) for _ in range(n_filler)])
    docs, manifest = [], []
    for d in range(n_docs):
        doc_id = f"probe{d}"
        tokens = [filler[i] for i in _filler_walk(segments_per_doc * segment_len, successors, rng, n_filler)]
        free = {s: list(rng.permutation(slots_per_segment)) for s in range(segments_per_doc)}
        mentions = []
        chosen = rng.choice(n_entities, size=per_doc, replace=False)
        for e in chosen:
            value = attrs[int(rng.integers(n_attribute_values))]
            open_segments = [k for k in range(segments_per_doc) if free[k]]
            if len(open_segments) < 2:
                raise ValueError("segments too short for the requested facts")
            fact, query = (int(x) for x in rng.choice(open_segments, size=2, replace=False))
            placed = []
            for seg in (fact, query):
                pos = seg * segment_len + 2 * int(free[seg].pop())
                tokens[pos], tokens[pos + 1] = value, entities[e]
                mentions.append(Mention(pos, pos + 2, f"{doc_id}:{entities[e]}"))
                placed.append(pos)
            manifest.append(ProbePosition(doc_id, placed[1], value, f"{doc_id}:{entities[e]}", fact, query))
        docs.append(AnnotatedDocument(doc_id, tokens, sorted(mentions, key=lambda m: m.start)))
    return ProbeCorpus(docs, manifest, segment_len, n_attribute_values, entities + attrs + filler)
