"""Answer-quality metrics: token F1 / exact match, ROUGE-L and BLEU-n."""

from __future__ import annotations

import json
import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

ROUGE_BETA = 1.2
BLEU_EPSILON = 1e-9
PREPROCESSING_TAG = f"lower+strip-trailing-period/rougeL-beta{ROUGE_BETA}/bleu-eps{BLEU_EPSILON:g}/squad-norm"


def normalize_for_eval(text: str) -> str:
    """Lowercase and drop a single trailing period."""
    text = text.strip().lower()
    if text.endswith("."):
        text = text[:-1]
    return text


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_tokens(hyp: Sequence, ref: Sequence, beta: float = ROUGE_BETA) -> float:
    if not hyp or not ref:
        return 0.0
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(hypothesis: str, reference: str, beta: float = ROUGE_BETA) -> float:
    """LCS-based F-measure over whitespace tokens (inputs already normalized)."""
    return rouge_l_tokens(hypothesis.split(), reference.split(), beta)


def _ngrams(tokens: Sequence[str], k: int) -> Counter:
    return Counter(tuple(tokens[i : i + k]) for i in range(len(tokens) - k + 1))


def bleu(hypothesis: str, references: Sequence[str] | str, n: int = 4, epsilon: float = BLEU_EPSILON) -> float:
    """Sentence BLEU with clipped k-gram precisions for k = 1..n and brevity penalty.

    A zero match count at some order is replaced by ``epsilon``. An order at
    which neither the hypothesis nor any reference has k-grams counts as a
    perfect match, so a one-word hypothesis equal to its reference scores 1.
    """
    if isinstance(references, str):
        references = [references]
    hyp = hypothesis.split()
    refs = [r.split() for r in references]
    if not hyp or not refs:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        h = _ngrams(hyp, k)
        total = sum(h.values())
        ref_counts = [_ngrams(r, k) for r in refs]
        if total == 0:
            if all(sum(rc.values()) == 0 for rc in ref_counts):
                continue
            log_p += math.log(epsilon)
            continue
        best = Counter()
        for rc in ref_counts:
            best |= rc
        matched = sum(min(c, best[g]) for g, c in h.items())
        log_p += math.log(matched / total if matched else epsilon)
    c = len(hyp)
    r = min((abs(len(x) - c), len(x)) for x in refs)[1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / n)


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def qa_f1_em(prediction: str, golds: Iterable[str]) -> tuple[float, float]:
    """Best token-multiset F1 and exact match of ``prediction`` against any gold answer."""
    pred = normalize_answer(prediction).split()
    best_f1 = best_em = 0.0
    for gold in golds:
        g = normalize_answer(gold).split()
        em = float(pred == g)
        if not pred or not g:
            f1 = em
        else:
            common = sum((Counter(pred) & Counter(g)).values())
            if common == 0:
                f1 = 0.0
            else:
                p, r = common / len(pred), common / len(g)
                f1 = 2 * p * r / (p + r)
        best_f1, best_em = max(best_f1, f1), max(best_em, em)
    return best_f1, best_em


@dataclass
class EvalReport:
    example_ids: list[str] = field(default_factory=list)
    per_example: dict[str, list[float]] = field(default_factory=dict)
    preprocessing: str = PREPROCESSING_TAG
    absent: tuple[str, ...] = ("meteor",)

    @property
    def count(self) -> int:
        return len(self.example_ids)

    @property
    def aggregate(self) -> dict[str, float]:
        return {k: (sum(v) / len(v) if v else 0.0) for k, v in self.per_example.items()}

    def add(self, example_id: str, values: dict[str, float]) -> None:
        self.example_ids.append(example_id)
        for k, v in values.items():
            self.per_example.setdefault(k, []).append(float(v))

    def sorted(self) -> EvalReport:
        order = sorted(range(self.count), key=lambda i: self.example_ids[i])
        return EvalReport(
            example_ids=[self.example_ids[i] for i in order],
            per_example={k: [v[i] for i in order] for k, v in self.per_example.items()},
            preprocessing=self.preprocessing,
            absent=self.absent,
        )

    def write(self, path: str | Path) -> None:
        """One JSON line per example (sorted by id) followed by an aggregate line."""
        rep = self.sorted()
        with open(path, "w", encoding="utf-8") as fh:
            for i, ex in enumerate(rep.example_ids):
                rec = {"type": "example", "id": ex}
                rec.update({k: v[i] for k, v in rep.per_example.items()})
                fh.write(json.dumps(rec) + "\n")
            fh.write(
                json.dumps(
                    {
                        "type": "aggregate",
                        "count": rep.count,
                        "metrics": rep.aggregate,
                        "absent": list(rep.absent),
                        "preprocessing": rep.preprocessing,
                    }
                )
                + "\n"
            )


def score_answer(prediction: str, golds: Sequence[str]) -> dict[str, float]:
    """Every metric for one example; generation metrics take the best gold."""
    f1, em = qa_f1_em(prediction, golds)
    hyp = normalize_for_eval(prediction)
    refs = [normalize_for_eval(g) for g in golds]
    return {
        "f1": f1,
        "em": em,
        "rouge_l": max((rouge_l(hyp, r) for r in refs), default=0.0),
        "bleu1": bleu(hyp, refs, 1) if refs else 0.0,
        "bleu4": bleu(hyp, refs, 4) if refs else 0.0,
    }
