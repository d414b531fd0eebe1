"""Masked-LM pretraining on the second reader's output, with the optional
coreference auxiliary loss over entity memories."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import AnnotatedDocument, Mention, SegmentProfile, Vocab, segment_document
from .encoder import EncoderConfig, Params, linear
from .memory import MemoryTable
from .model import ReadTwice, SegmentBatch, pack_segments

logger = logging.getLogger(__name__)

IGNORE = -1


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


@dataclass
class MaskedTokens:
    input_ids: np.ndarray
    labels: np.ndarray  # IGNORE where not masked
    masked: np.ndarray
    is_entity: np.ndarray


def _stochastic_round(x: float, rng: np.random.Generator) -> int:
    base = math.floor(x)
    return base + int(rng.random() < x - base)


def _span_length(rng: np.random.Generator, p: float = 0.25, max_len: int = 10) -> int:
    return int(min(max(rng.geometric(p), 1), max_len))


def mask_tokens(
    token_ids: np.ndarray,
    mentions: Sequence[Mention],
    rng: np.random.Generator,
    vocab: Vocab,
    entity_rate: float = 0.25,
    span_rate: float = 0.15,
    force_positions: Iterable[int] = (),
) -> MaskedTokens:
    """Pick positions to predict and corrupt them.

    Each mention is masked as a whole with probability ``entity_rate``.
    Outside mentions, contiguous spans (geometric lengths, p=0.25, clipped to
    [1, 10]) are masked until ``span_rate`` of the non-entity tokens are
    covered. Masked tokens become [MASK] 80% of the time, a random token 10%,
    and stay unchanged 10%. ``force_positions`` are always masked with [MASK].
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    n = len(ids)
    masked = np.zeros(n, dtype=bool)
    is_entity = np.zeros(n, dtype=bool)
    for m in mentions:
        is_entity[m.start : m.end] = True
    for m in mentions:
        if rng.random() < entity_rate:
            masked[m.start : m.end] = True

    free = ~is_entity
    budget = _stochastic_round(span_rate * int(free.sum()), rng)
    while budget > 0:
        length = min(_span_length(rng), budget)
        while length > 0:
            # starts whose whole span is free
            window = np.convolve(free.astype(np.int64), np.ones(length, dtype=np.int64), mode="valid")
            starts = np.flatnonzero(window == length)
            if len(starts):
                break
            length -= 1
        if length == 0:
            break
        s = int(starts[rng.integers(len(starts))])
        masked[s : s + length] = True
        free[s : s + length] = False
        budget -= length

    out = ids.copy()
    choice = rng.random(n)
    replacement = vocab.replacement_ids
    rand_tok = replacement[rng.integers(len(replacement), size=n)]
    out = np.where(masked & (choice < 0.8), vocab.mask_id, out)
    out = np.where(masked & (choice >= 0.8) & (choice < 0.9), rand_tok, out)
    forced = np.zeros(n, dtype=bool)
    forced[list(force_positions)] = True
    out[forced] = vocab.mask_id
    masked |= forced
    labels = np.where(masked, ids, IGNORE)
    return MaskedTokens(out, labels, masked, is_entity)


@dataclass
class MaskedBatch:
    input_ids: np.ndarray  # [S, L]
    labels: np.ndarray  # [S, L], IGNORE off the masked positions
    masked: np.ndarray  # [S, L] bool
    is_entity: np.ndarray  # [S, L] bool
    is_probe: np.ndarray  # [S, L] bool

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())

    def apply(self, batch: SegmentBatch) -> SegmentBatch:
        return SegmentBatch(
            token_ids=self.input_ids,
            attention_mask=batch.attention_mask,
            seg_index=batch.seg_index,
            doc_ids=batch.doc_ids,
            mentions=batch.mentions,
            prefix_len=batch.prefix_len,
            segments=batch.segments,
        )


def mask_batch(
    batch: SegmentBatch,
    vocab: Vocab,
    rng: np.random.Generator,
    entity_rate: float = 0.25,
    span_rate: float = 0.15,
    forced: Mapping[int, Sequence[int]] | None = None,
) -> MaskedBatch:
    """Mask the content tokens of every segment; ``forced[s]`` lists content positions."""
    shape = batch.token_ids.shape
    input_ids = batch.token_ids.copy()
    labels = np.full(shape, IGNORE, dtype=np.int64)
    masked = np.zeros(shape, dtype=bool)
    is_entity = np.zeros(shape, dtype=bool)
    is_probe = np.zeros(shape, dtype=bool)
    p = batch.prefix_len
    lengths = batch.lengths()
    for s in range(batch.num_segments):
        n = int(lengths[s]) - p
        content = batch.token_ids[s, p : p + n]
        local = [Mention(a - p, b - p, e) for a, b, e in batch.mentions[s]]
        force = list((forced or {}).get(s, ()))
        mt = mask_tokens(content, local, rng, vocab, entity_rate, span_rate, force)
        input_ids[s, p : p + n] = mt.input_ids
        labels[s, p : p + n] = mt.labels
        masked[s, p : p + n] = mt.masked
        is_entity[s, p : p + n] = mt.is_entity
        is_probe[s, [p + f for f in force]] = True
    return MaskedBatch(input_ids, labels, masked, is_entity, is_probe)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mlm_logits(h: Tensor, params: Params, cfg: EncoderConfig) -> Tensor:
    t = ad.gelu(linear(h, params, "mlm.transform"))
    t = ad.layer_norm(t, params["mlm.norm.gamma"], params["mlm.norm.beta"], cfg.layer_norm_eps)
    out_w = params["embed.token"].T if cfg.tie_mlm_output else params["mlm.output.weight"]
    return t @ out_w + params["mlm.output_bias"]


def masked_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax of ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = ad.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean()


@dataclass
class MLMResult:
    loss: Tensor
    logits: Tensor | None
    positions: np.ndarray  # flat indices of masked positions
    empty: bool = False


def mlm_loss(h4: Tensor, masked: MaskedBatch, params: Params, cfg: EncoderConfig) -> MLMResult:
    """Cross-entropy averaged over masked positions only.

    With nothing masked the loss is defined as 0 and ``empty`` is set.
    """
    flat_pos = np.flatnonzero(masked.masked.reshape(-1))
    if not len(flat_pos):
        return MLMResult(ad.zeros(()), None, flat_pos, empty=True)
    d = h4.shape[-1]
    rows = h4.reshape(-1, d)[flat_pos]
    logits = mlm_logits(rows, params, cfg)
    labels = masked.labels.reshape(-1)[flat_pos]
    return MLMResult(masked_cross_entropy(logits, labels), logits, flat_pos)


@dataclass(frozen=True)
class CorefPair:
    m: int
    m2: int
    label: bool


def coref_pairs(
    table: MemoryTable,
    rng: np.random.Generator | None = None,
    negatives_per_positive: int = 10,
    exhaustive: bool = False,
) -> list[CorefPair]:
    """Training pairs over entries that carry an entity id.

    Positives: same entity id, different source segment. Negatives: different
    entity ids. ``exhaustive`` keeps every negative; otherwise at most
    ``negatives_per_positive`` per positive (or that many in total when there
    are no positives) are sampled.
    """
    linked = [k for k, e in enumerate(table.entries) if e.entity_id is not None]
    pos, neg = [], []
    for a_i, a in enumerate(linked):
        ea = table.entries[a]
        for b in linked[a_i + 1 :]:
            eb = table.entries[b]
            if ea.entity_id == eb.entity_id:
                if (ea.doc_id, ea.source_segment) != (eb.doc_id, eb.source_segment):
                    pos.append(CorefPair(a, b, True))
            else:
                neg.append(CorefPair(a, b, False))
    if not exhaustive:
        cap = negatives_per_positive * max(len(pos), 1)
        if len(neg) > cap:
            if rng is None:
                raise ValueError("sampling negatives needs an rng")
            keep = np.sort(rng.choice(len(neg), size=cap, replace=False))
            neg = [neg[i] for i in keep]
    return pos + neg


def _softplus(z: Tensor) -> Tensor:
    zero = ad.zeros(z.shape)
    return ad.logsumexp(ad.stack([zero, z], axis=-1), axis=-1)


def coref_loss(table: MemoryTable, bias: Tensor, pairs: Sequence[CorefPair]) -> Tensor:
    """Mean logistic loss of ``sigmoid(M_m . M_m' + b0)`` against same-entity labels."""
    if not pairs:
        return ad.zeros(())
    a = np.array([p.m for p in pairs])
    b = np.array([p.m2 for p in pairs])
    sign = np.array([-1.0 if p.label else 1.0 for p in pairs], dtype=table.vectors.dtype)
    z = (table.vectors[a] * table.vectors[b]).sum(axis=-1) + bias.reshape(())
    return _softplus(z * sign).mean()


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    """Adam with linear warmup and global-norm clipping."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    clip_norm: float | None = 1.0
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def learning_rate(self) -> float:
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, (self.step_count + 1) / self.warmup_steps)

    def step(self, params: Mapping[str, Tensor]) -> float:
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        lr = self.learning_rate()
        self.step_count += 1
        t = self.step_count
        for k, g in grads.items():
            p = params[k]
            g = g * scale
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p.data)
                self.v[k] = np.zeros_like(p.data)
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt/step": np.array(self.step_count, dtype=np.int64)}
        for k in self.m:
            out[f"opt/m/{k}"] = self.m[k]
            out[f"opt/v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.step_count = int(arrays.get("opt/step", 0))
        self.m = {k[len("opt/m/") :]: v.copy() for k, v in arrays.items() if k.startswith("opt/m/")}
        self.v = {k[len("opt/v/") :]: v.copy() for k, v in arrays.items() if k.startswith("opt/v/")}


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# training step and evaluation
# ---------------------------------------------------------------------------


@dataclass
class StepMetrics:
    loss: float
    mlm: float
    coref: float
    masked: int
    grad_norm: float = 0.0


def compute_losses(
    model: ReadTwice,
    batch: SegmentBatch,
    masked: MaskedBatch,
    lambda_coref: float = 1.0,
    rng: np.random.Generator | None = None,
    negatives_per_positive: int = 10,
    exhaustive_coref: bool = False,
) -> tuple[Tensor, Tensor, Tensor]:
    """(total, mlm, coref) with total = mlm + lambda_coref * coref."""
    out = model.forward(masked.apply(batch), rng=rng if model.config.encoder.dropout > 0 else None)
    mlm = mlm_loss(out.h4, masked, model.params, model.config.encoder).loss
    use_coref = lambda_coref > 0 and model.config.memory.mode == "E"
    if use_coref:
        pairs = coref_pairs(out.table, rng, negatives_per_positive, exhaustive_coref)
        coref = coref_loss(out.table, model.params["coref.bias"], pairs)
        total = mlm + coref * lambda_coref
    else:
        coref = ad.zeros(())
        total = mlm
    return total, mlm, coref


def pretrain_step(
    model: ReadTwice,
    batch: SegmentBatch,
    masked: MaskedBatch,
    optimizer: Adam,
    lambda_coref: float = 1.0,
    rng: np.random.Generator | None = None,
) -> StepMetrics:
    """One forward/backward pass and one optimizer update."""
    zero_grad(model.params)
    total, mlm, coref = compute_losses(model, batch, masked, lambda_coref, rng)
    value = total.item()
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at step {optimizer.step_count}")
    if total.requires_grad:
        total.backward()
    norm = optimizer.step(model.params)
    return StepMetrics(value, mlm.item(), coref.item(), masked.num_masked, norm)


def predict_masked(model: ReadTwice, batch: SegmentBatch, masked: MaskedBatch) -> np.ndarray:
    """Argmax predictions at every position of ``masked`` (IGNORE elsewhere)."""
    with ad.no_grad():
        out = model.forward(masked.apply(batch))
        res = mlm_loss(out.h4, masked, model.params, model.config.encoder)
    pred = np.full(masked.labels.shape, IGNORE, dtype=np.int64)
    if not res.empty:
        pred.reshape(-1)[res.positions] = res.logits.data.argmax(axis=-1)
    return pred


def mlm_accuracy(model: ReadTwice, batches: Iterable[tuple[SegmentBatch, MaskedBatch]]) -> dict[str, float]:
    """Argmax accuracy at masked positions: all, entity-token and probe-token subsets."""
    hits = {"all_tokens": [0, 0], "entity_tokens": [0, 0], "probe_tokens": [0, 0]}
    for batch, masked in batches:
        pred = predict_masked(model, batch, masked)
        correct = (pred == masked.labels) & masked.masked
        for key, sel in (
            ("all_tokens", masked.masked),
            ("entity_tokens", masked.masked & masked.is_entity),
            ("probe_tokens", masked.masked & masked.is_probe),
        ):
            hits[key][0] += int(correct[sel].sum())
            hits[key][1] += int(sel.sum())
    out = {k: (h / n if n else float("nan")) for k, (h, n) in hits.items()}
    out["counts"] = {k: n for k, (_, n) in hits.items()}
    return out


# ---------------------------------------------------------------------------
# document batches and the training loop
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 200
    docs_per_batch: int = 8
    lr: float = 1e-3
    warmup_steps: int = 20
    clip_norm: float | None = 1.0
    entity_rate: float = 0.25
    span_rate: float = 0.15
    lambda_coref: float = 1.0
    eval_every: int = 0
    checkpoint_every: int = 0
    seed: int = 0


def make_batch(
    docs: Sequence[AnnotatedDocument],
    vocab: Vocab,
    profile: SegmentProfile,
    rng: np.random.Generator,
    entity_rate: float,
    span_rate: float,
    forced_doc_positions: Mapping[str, Sequence[int]] | None = None,
) -> tuple[SegmentBatch, MaskedBatch]:
    """Segment, pack and mask a group of documents.

    ``forced_doc_positions[doc_id]`` lists document token indices that must be
    masked (probe positions).
    """
    segments = []
    for d in docs:
        segs, _ = segment_document(d, profile)
        segments.extend(segs)
    batch = pack_segments(segments, vocab)
    forced: dict[int, list[int]] = {}
    if forced_doc_positions:
        for s, seg in enumerate(segments):
            for pos in forced_doc_positions.get(seg.source_doc_id, ()):
                if seg.offset <= pos < seg.offset + len(seg):
                    forced.setdefault(s, []).append(pos - seg.offset)
    return batch, mask_batch(batch, vocab, rng, entity_rate, span_rate, forced)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def train(
    model: ReadTwice,
    docs: Sequence[AnnotatedDocument],
    vocab: Vocab,
    profile: SegmentProfile,
    cfg: PretrainConfig,
    optimizer: Adam | None = None,
    forced_doc_positions: Mapping[str, Sequence[int]] | None = None,
    log_path: str | Path | None = None,
    evaluate: Callable[[ReadTwice, int], dict] | None = None,
    checkpoint: Callable[[ReadTwice, Adam, int], None] | None = None,
) -> tuple[Adam, list[dict]]:
    """Run ``cfg.steps`` updates (continuing from ``optimizer.step_count``).

    Batch composition and masking for step t depend only on (seed, t), so a
    resumed run reproduces an uninterrupted one exactly.
    """
    if optimizer is None:
        optimizer = Adam(lr=cfg.lr, warmup_steps=cfg.warmup_steps, clip_norm=cfg.clip_norm)
    history = []
    log = open(log_path, "a", encoding="utf-8") if log_path else None
    start = time.time()
    try:
        while optimizer.step_count < cfg.steps:
            t = optimizer.step_count
            rng = step_rng(cfg.seed, t)
            pick = rng.choice(len(docs), size=min(cfg.docs_per_batch, len(docs)), replace=False)
            batch, masked = make_batch(
                [docs[i] for i in sorted(pick)], vocab, profile, rng, cfg.entity_rate, cfg.span_rate, forced_doc_positions
            )
            m = pretrain_step(model, batch, masked, optimizer, cfg.lambda_coref, rng)
            rec = {"step": t + 1, "loss": m.loss, "mlm": m.mlm, "coref": m.coref, "masked": m.masked,
                   "grad_norm": m.grad_norm, "wall": round(time.time() - start, 3)}
            if evaluate is not None and cfg.eval_every and (t + 1) % cfg.eval_every == 0:
                rec["eval"] = evaluate(model, t + 1)
            history.append(rec)
            if log:
                log.write(json.dumps(rec) + "\n")
            if checkpoint is not None and cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
                checkpoint(model, optimizer, t + 1)
    finally:
        if log:
            log.close()
    return optimizer, history
