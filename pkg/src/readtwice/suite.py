"""Finite-difference checks of every training loss on tiny double-precision fixtures."""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import AnnotatedDocument, Mention, SegmentProfile, Vocab, segment_document
from .encoder import EncoderConfig
from .gradcheck import corrupted_backward, grad_check
from .memory import MemoryConfig
from .model import ModelConfig, ReadTwice, pack_segments
from .pretrain import coref_loss, coref_pairs, mask_batch, mlm_loss, zero_grad
from .qa import AnswerSpanSet, option_logits, option_loss, qa_scores, span_loss

TOLERANCE = 1e-4


@dataclass
class SuiteRow:
    loss: str
    max_rel_error: float
    groups: list[str]
    seconds: float
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_rel_error < tol


def param_group(name: str) -> str:
    return name.rsplit(".", 1)[0]


def tiny_fixture(seed: int = 0):
    """Two segments of at most 16 tokens with linked mentions, plus a float64 model."""
    words = [f"w{k}" for k in range(8)]
    vocab = Vocab(words + ["A", "B"])
    rng = np.random.default_rng(seed)
    tokens = [words[i] for i in rng.integers(0, 8, size=30)]
    tokens[2], tokens[9], tokens[17], tokens[24] = "A", "B", "A", "B"
    mentions = [Mention(2, 3, "A"), Mention(9, 10, "B"), Mention(17, 18, "A"), Mention(24, 25, "B")]
    doc = AnnotatedDocument("fx", tokens, mentions)
    segments, _ = segment_document(doc, SegmentProfile(window=15, overlap=0, max_segments=4))
    batch = pack_segments(segments, vocab)
    cfg = ModelConfig(
        EncoderConfig(vocab_size=len(vocab), hidden_dim=8, num_heads=2, ffn_dim=8, layers_first=1, layers_second=1, max_segment_len=16),
        MemoryConfig(mode="E"),
    )
    with ad.precision(np.float64):
        model = ReadTwice.init(cfg, np.random.default_rng(seed)).astype(np.float64)
        for name, p in model.params.items():
            # non-trivial values everywhere so no gradient path is silently zero
            if name.endswith(("bias", "beta", "omega", "noop")):
                p.data[:] = rng.normal(0.0, 0.1, size=p.shape)
            elif name.endswith("gamma"):
                p.data[:] = 1.0 + rng.normal(0.0, 0.1, size=p.shape)
            else:
                p.data[:] = rng.normal(0.0, 0.3, size=p.shape)
    masked = mask_batch(batch, vocab, np.random.default_rng(seed + 1), 0.5, 0.3, {0: [5], 1: [3]})
    return model, vocab, batch, masked


def _touched(model: ReadTwice, f: Callable[[], Tensor]) -> dict[str, Tensor]:
    zero_grad(model.params)
    f().backward()
    touched = {k: p for k, p in model.params.items() if p.grad is not None and np.any(p.grad)}
    zero_grad(model.params)
    return touched


def loss_functions(model: ReadTwice, batch, masked) -> dict[str, Callable[[], Tensor]]:
    params = model.params
    enc = model.config.encoder

    def mlm():
        out = model.forward(masked.apply(batch))
        return mlm_loss(out.h4, masked, params, enc).loss

    def coref():
        h0, h1 = model.first_read(batch)
        table = model.build_table(h1, batch)
        return coref_loss(table, params["coref.bias"], coref_pairs(table, exhaustive=True))

    valid = batch.content_mask()
    gold = AnswerSpanSet([(0, 3, 5), (1, 1, 1), (1, 4, 6)])

    def span():
        out = model.forward(batch)
        return span_loss(qa_scores(out.h4, params, valid, batch.prefix_len), gold)

    def option():
        out = model.forward(batch)
        return option_loss(option_logits(out.h4, params), "yes", [1])

    return {"mlm_loss": mlm, "coref_loss": coref, "span_loss": span, "option_loss": option}


def gradient_suite(corrupt: str | None = None, seed: int = 0) -> list[SuiteRow]:
    """Grad-check every loss; ``corrupt`` names an op whose backward is deliberately broken."""
    rows = []
    hook = corrupted_backward(corrupt) if corrupt else contextlib.nullcontext()
    with ad.precision(np.float64), hook:
        model, _, batch, masked = tiny_fixture(seed)
        for name, f in loss_functions(model, batch, masked).items():
            start = time.perf_counter()
            params = _touched(model, f)
            res = grad_check(f, params)
            groups = sorted({param_group(k) for k in params})
            rows.append(SuiteRow(name, res.max_rel_error, groups, time.perf_counter() - start, res.per_param))
    return rows


def format_table(rows: list[SuiteRow], tol: float = TOLERANCE) -> str:
    lines = [f"{'loss':<12} {'max rel err':>12} {'result':>6} {'time':>7}  parameter groups"]
    for r in rows:
        verdict = "PASS" if r.passed(tol) else "FAIL"
        lines.append(f"{r.loss:<12} {r.max_rel_error:>12.3e} {verdict:>6} {r.seconds:>6.1f}s  {', '.join(r.groups)}")
    return "\n".join(lines)
