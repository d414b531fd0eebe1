"""Command-line entry points.

Subcommands: ``pretrain``, ``finetune``, ``predict``, ``evaluate``,
``gradcheck`` and ``gen-probe``. Runs are driven by a JSON config whose
unknown keys are rejected before any work starts; every run writes the fully
resolved config next to its outputs. The only environment variable read is
``READTWICE_THREADS`` (BLAS thread count).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .corpus import (
    QAExample,
    SegmentProfile,
    Vocab,
    generate_probe_corpus,
    load_annotated_corpus,
    load_qa_file,
    rouge_oracle_label,
    write_annotated_corpus,
)
from .metrics import EvalReport, score_answer
from .model import ModelConfig, ReadTwice
from .pretrain import Adam, PretrainConfig, make_batch, mlm_accuracy, step_rng, train, zero_grad
from .qa import QAStats, build_instance, predict, qa_losses
from .suite import TOLERANCE, format_table, gradient_suite

logger = logging.getLogger("readtwice")

THREADS_ENV = "READTWICE_THREADS"
PROFILES = ("pretrain", "probe", "hotpot", "trivia", "narrative")
MEMORY_MODES = ("E", "CLS", "STS", "off", "SS")
CHECKPOINT = "checkpoint.ckpt"
RESOLVED_CONFIG = "config.resolved.json"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class SegmentationConfig:
    window: int = 512
    overlap: int = 0
    max_segments: int = 128

    def profile(self) -> SegmentProfile:
        return SegmentProfile(self.window, self.overlap, self.max_segments)


@dataclass
class FinetuneConfig:
    steps: int = 200
    lr: float = 3e-5
    lr_sweep: list[float] | None = None
    warmup_steps: int = 10
    clip_norm: float | None = 1.0
    eval_every: int = 50
    patience: int = 3
    max_answer_len: int = 30
    max_question_len: int = 32
    use_options: bool = False
    oracle_labels: bool = False
    seed: int = 0


@dataclass
class PathsConfig:
    corpus: str | None = None
    heldout: str | None = None
    manifest: str | None = None
    vocab: str | None = None
    train_qa: str | None = None
    dev_qa: str | None = None


@dataclass
class RunConfig:
    profile: str = "pretrain"
    memory_mode: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.to_dict()
        return out


LR_SWEEP = [5e-6, 1e-5, 3e-5]

PROFILE_DEFAULTS: dict[str, dict] = {
    "pretrain": {
        "segmentation": {"window": 512, "overlap": 0, "max_segments": 128},
        "pretrain": {"entity_rate": 0.25, "span_rate": 0.15, "lambda_coref": 1.0},
    },
    "probe": {
        "segmentation": {"window": 16, "overlap": 0, "max_segments": 128},
        "model": {"encoder": {"ffn_dim": 64}, "memory": {"mode": "E"}},
        "pretrain": {
            "steps": 1000,
            "docs_per_batch": 16,
            "lr": 1e-3,
            "warmup_steps": 50,
            "entity_rate": 0.25,
            "span_rate": 0.15,
            "lambda_coref": 0.0,
            "eval_every": 250,
        },
    },
    "hotpot": {"segmentation": {"window": 512, "overlap": 128, "max_segments": 128}, "finetune": {"use_options": True}},
    "trivia": {"segmentation": {"window": 512, "overlap": 128, "max_segments": 128}},
    "narrative": {
        "segmentation": {"window": 512, "overlap": 128, "max_segments": 128},
        "model": {"memory": {"top_k": 100}},
        "finetune": {"oracle_labels": True},
    },
}


def _strict(cls, data: Mapping, where: str):
    if not isinstance(data, Mapping):
        raise ValueError(f"config section {where!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys in {where}: {sorted(unknown)}")
    return cls(**data)


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw: Mapping[str, Any]) -> RunConfig:
    """Validate ``raw`` and fill in profile defaults."""
    top = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - top
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    profile = raw.get("profile", "pretrain")
    if profile not in PROFILES:
        raise ValueError(f"profile must be one of {PROFILES}, got {profile!r}")
    d = _merge(PROFILE_DEFAULTS[profile], raw)
    mode = d.get("memory_mode")
    if mode is not None:
        if mode not in MEMORY_MODES:
            raise ValueError(f"memory_mode must be one of {MEMORY_MODES}, got {mode!r}")
        mem = d.setdefault("model", {}).setdefault("memory", {})
        mem["mode"] = "E" if mode == "SS" else mode
        mem["scope"] = "segment" if mode == "SS" else mem.get("scope", "document")
    cfg = RunConfig(
        profile=profile,
        memory_mode=mode,
        model=ModelConfig.from_dict(d.get("model", {})),
        pretrain=_strict(PretrainConfig, d.get("pretrain", {}), "pretrain"),
        finetune=_strict(FinetuneConfig, d.get("finetune", {}), "finetune"),
        segmentation=_strict(SegmentationConfig, d.get("segmentation", {}), "segmentation"),
        paths=_strict(PathsConfig, d.get("paths", {}), "paths"),
    )
    cfg.segmentation.profile()  # validates window arithmetic
    # positions must cover [CLS], the optional question + [SEP], and the window
    prefix = 1 + (cfg.finetune.max_question_len + 1 if profile in ("hotpot", "trivia", "narrative") else 0)
    need = cfg.segmentation.window + prefix
    enc_raw = d.get("model", {}).get("encoder", {})
    if "max_segment_len" not in enc_raw:
        cfg.model.encoder.max_segment_len = need
    elif cfg.model.encoder.max_segment_len < need:
        raise ValueError(f"encoder.max_segment_len {cfg.model.encoder.max_segment_len} < {need} needed by the segmentation window")
    return cfg


def load_config(path: str | None, overrides: Sequence[str] = ()) -> RunConfig:
    raw: dict = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    for item in overrides:
        key, _, value = item.partition("=")
        if not _:
            raise ValueError(f"override {item!r} is not key=value")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = parsed
    return resolve_config(raw)


def write_resolved(cfg: RunConfig, out: Path, extra: Mapping | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rec = cfg.to_dict()
    if extra:
        rec.update(extra)
    (out / RESOLVED_CONFIG).write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# data helpers
# ---------------------------------------------------------------------------


def _need(path: str | None, what: str) -> str:
    if not path:
        raise SystemExit(f"error: config paths.{what} is required")
    if not Path(path).exists():
        raise SystemExit(f"error: {what} file {path} does not exist")
    return path


def load_vocab(cfg: RunConfig, docs_path: str | None = None) -> Vocab:
    if cfg.paths.vocab:
        return Vocab.load(_need(cfg.paths.vocab, "vocab"))
    if docs_path is None:
        raise SystemExit("error: config paths.vocab is required")
    counts: dict[str, int] = {}
    for doc in load_annotated_corpus(docs_path):
        for t in doc.tokens:
            counts[t] = counts.get(t, 0) + 1
    return Vocab(sorted(counts, key=lambda t: (-counts[t], t)))


def load_manifest(path: str | None) -> dict[str, list[int]]:
    forced: dict[str, list[int]] = {}
    if not path:
        return forced
    with open(_need(path, "manifest"), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                forced.setdefault(rec["doc_id"], []).append(int(rec["position"]))
    return forced


def evaluate_mlm(model: ReadTwice, docs, vocab, cfg: RunConfig, forced) -> dict:
    """MLM accuracy on held-out docs at the training masking rates, plus probe-only accuracy."""
    profile = cfg.segmentation.profile()
    out = {}
    chunks = [docs[i : i + 32] for i in range(0, len(docs), 32)]
    batches = [make_batch(c, vocab, profile, np.random.default_rng([cfg.pretrain.seed, 10**6, k]), cfg.pretrain.entity_rate, cfg.pretrain.span_rate) for k, c in enumerate(chunks)]
    acc = mlm_accuracy(model, batches)
    out["all_tokens"], out["entity_tokens"] = acc["all_tokens"], acc["entity_tokens"]
    if forced:
        probe_batches = [make_batch(c, vocab, profile, np.random.default_rng(0), 0.0, 0.0, forced) for c in chunks]
        out["probe_tokens"] = mlm_accuracy(model, probe_batches)["probe_tokens"]
    return {k: (None if v != v else round(float(v), 6)) for k, v in out.items()}


def save_checkpoint(model: ReadTwice, optimizer: Adam, path: Path, meta: Mapping | None = None) -> None:
    model.save(path, meta={"step": optimizer.step_count, **(meta or {})}, extra=optimizer.state_arrays())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    corpus = _need(cfg.paths.corpus, "corpus")
    vocab = load_vocab(cfg, corpus)
    docs = list(load_annotated_corpus(corpus, vocab))
    heldout = list(load_annotated_corpus(_need(cfg.paths.heldout, "heldout"), vocab)) if cfg.paths.heldout else []
    forced = load_manifest(cfg.paths.manifest)
    cfg.model.encoder.vocab_size = len(vocab)
    write_resolved(cfg, out)
    vocab.save(out / "vocab.txt")
    ckpt = out / CHECKPOINT
    if args.resume:
        if not ckpt.exists():
            raise SystemExit(f"error: --resume given but {ckpt} does not exist")
        model, extra, meta = ReadTwice.load(ckpt)
        if model.config.to_dict() != cfg.model.to_dict():
            raise SystemExit("error: checkpoint model config differs from the resolved config")
        optimizer = Adam(lr=cfg.pretrain.lr, warmup_steps=cfg.pretrain.warmup_steps, clip_norm=cfg.pretrain.clip_norm)
        optimizer.load_state_arrays(extra)
        logger.info("resuming from step %d", optimizer.step_count)
    else:
        model = ReadTwice.init(cfg.model, np.random.default_rng(cfg.pretrain.seed))
        optimizer = Adam(lr=cfg.pretrain.lr, warmup_steps=cfg.pretrain.warmup_steps, clip_norm=cfg.pretrain.clip_norm)
        (out / "metrics.jsonl").write_text("", encoding="utf-8")

    def evaluate(m, step):
        if not heldout:
            return None
        res = evaluate_mlm(m, heldout, vocab, cfg, forced)
        logger.info("step %d held-out accuracy %s", step, res)
        return res

    def checkpoint(m, opt, step):
        save_checkpoint(m, opt, ckpt)

    _, history = train(
        model,
        docs,
        vocab,
        cfg.segmentation.profile(),
        cfg.pretrain,
        optimizer,
        forced_doc_positions=forced,
        log_path=out / "metrics.jsonl",
        evaluate=evaluate,
        checkpoint=checkpoint,
    )
    save_checkpoint(model, optimizer, ckpt)
    report = {"steps": optimizer.step_count}
    if heldout:
        report["heldout"] = evaluate_mlm(model, heldout, vocab, cfg, forced)
    if history:
        report["final_loss"] = history[-1]["loss"]
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(report, sort_keys=True))
    return 0


def _qa_data(cfg: RunConfig, vocab: Vocab, path: str, stats: QAStats):
    docs = {d.doc_id: d for d in load_annotated_corpus(_need(cfg.paths.corpus, "corpus"), vocab)}
    examples = load_qa_file(path)
    missing = sorted({ex.doc_id for ex in examples} - set(docs))
    if missing:
        raise SystemExit(f"error: QA file {path} references unknown documents: {missing[:10]}")
    profile = cfg.segmentation.profile()
    instances = []
    for ex in examples:
        doc = docs[ex.doc_id]
        if cfg.finetune.oracle_labels and not ex.spans and ex.option is None and ex.answers:
            label = rouge_oracle_label(doc.tokens, ex.answers[0], cfg.finetune.max_answer_len)
            if label is not None:
                ex = QAExample(ex.question_id, ex.question, ex.doc_id, ex.answers, [(label.start, label.end)], ex.option)
        instances.append((build_instance(ex, doc, vocab, profile, cfg.finetune.max_question_len, stats), doc))
    return instances


def dev_metric_name(cfg: RunConfig) -> str:
    return "rouge_l" if cfg.profile == "narrative" else "f1"


def score_predictions(model: ReadTwice, instances, cfg: RunConfig) -> tuple[list[dict], EvalReport]:
    preds, report = [], EvalReport()
    for inst, doc in instances:
        rec = predict(model, inst, doc, cfg.finetune.max_answer_len, cfg.finetune.use_options)
        preds.append(rec)
        report.add(inst.example.question_id, score_answer(rec["answer"], inst.example.answers))
    return preds, report


def finetune_run(base: ReadTwice, train_set, dev_set, cfg: RunConfig, lr: float, log) -> tuple[ReadTwice, float, list[dict]]:
    """Train QA heads from ``base`` at ``lr``; returns the best-on-dev model, its score and the history."""
    ft = cfg.finetune
    model = ReadTwice(base.config, {k: ad.Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in base.params.items()})
    optimizer = Adam(lr=lr, warmup_steps=ft.warmup_steps, clip_norm=ft.clip_norm)
    metric = dev_metric_name(cfg)
    best_score = score_predictions(model, dev_set, cfg)[1].aggregate.get(metric, 0.0) if dev_set else 0.0
    best_state = {k: v.data.copy() for k, v in model.params.items()}
    history = [{"lr": lr, "step": 0, f"dev_{metric}": best_score}]
    log.write(json.dumps(history[-1]) + "\n")
    stats = QAStats()
    bad_evals = 0
    for t in range(ft.steps):
        rng = step_rng(ft.seed, t)
        inst, _ = train_set[int(rng.integers(len(train_set)))]
        zero_grad(model.params)
        losses = qa_losses(model, inst, ft.use_options, stats, rng)
        rec = {"lr": lr, "step": t + 1, "loss": None}
        if losses is not None:
            value = losses.total.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite fine-tuning loss at step {t + 1}")
            losses.total.backward()
            optimizer.step(model.params)
            rec["loss"] = value
        if dev_set and ft.eval_every and (t + 1) % ft.eval_every == 0:
            score = score_predictions(model, dev_set, cfg)[1].aggregate.get(metric, 0.0)
            rec[f"dev_{metric}"] = score
            if score > best_score:
                best_score, bad_evals = score, 0
                best_state = {k: v.data.copy() for k, v in model.params.items()}
            else:
                bad_evals += 1
        history.append(rec)
        log.write(json.dumps(rec) + "\n")
        if ft.patience and bad_evals >= ft.patience:
            logger.info("early stop at step %d (lr %g)", t + 1, lr)
            break
    for k, v in best_state.items():
        model.params[k].data[...] = v
    log.write(json.dumps({"lr": lr, "skipped_empty_gold": stats.skipped_empty_gold, "dropped_spans": stats.dropped_spans}) + "\n")
    return model, best_score, history


def cmd_finetune(args) -> int:
    cfg = load_config(args.config, args.set)
    if not args.checkpoint or not Path(args.checkpoint).exists():
        raise SystemExit(f"error: checkpoint {args.checkpoint} does not exist")
    base, _, _ = ReadTwice.load(args.checkpoint)
    # task-profile memory settings (e.g. top_k) apply on top of the pretrained weights
    base.config.memory = cfg.model.memory
    if base.config.encoder.max_segment_len < cfg.model.encoder.max_segment_len:
        raise SystemExit(
            f"error: checkpoint supports {base.config.encoder.max_segment_len} positions; "
            f"the fine-tuning window needs {cfg.model.encoder.max_segment_len}"
        )
    cfg.model.encoder = base.config.encoder
    out = Path(args.out)
    vocab = load_vocab(cfg)
    stats = QAStats()
    train_set = _qa_data(cfg, vocab, _need(cfg.paths.train_qa, "train_qa"), stats)
    dev_set = _qa_data(cfg, vocab, _need(cfg.paths.dev_qa, "dev_qa"), stats) if cfg.paths.dev_qa else []
    sweep = LR_SWEEP if args.lr_sweep else (cfg.finetune.lr_sweep or [cfg.finetune.lr])
    write_resolved(cfg, out, {"lr_runs": sweep})
    metric = dev_metric_name(cfg)
    results = []
    best = None
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as log:
        log.write(json.dumps({"event": "config", "profile": cfg.profile, "memory_top_k": cfg.model.memory.top_k}) + "\n")
        if cfg.model.memory.top_k is not None:
            logger.info("memory attention restricted to top_k=%d entries", cfg.model.memory.top_k)
        for lr in sweep:
            model, score, _ = finetune_run(base, train_set, dev_set, cfg, lr, log)
            model.save(out / f"lr_{lr:g}.ckpt", meta={"lr": lr, f"dev_{metric}": score})
            results.append({"lr": lr, f"dev_{metric}": score})
            if best is None or score > best[1]:
                best = (lr, score, model)
    best[2].save(out / "finetuned.ckpt", meta={"lr": best[0], f"dev_{metric}": best[1]})
    report = {"runs": results, "best_lr": best[0], f"best_dev_{metric}": best[1], "dropped_spans": stats.dropped_spans}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    cfg = load_config(args.config, args.set)
    model, _, _ = ReadTwice.load(_need(args.checkpoint, "checkpoint"))
    model.config.memory = cfg.model.memory
    vocab = load_vocab(cfg)
    instances = _qa_data(cfg, vocab, _need(args.data, "data"), QAStats())
    preds, _ = score_predictions(model, instances, cfg)
    preds.sort(key=lambda r: r["question_id"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for rec in preds:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    write_resolved(cfg, out.parent)
    print(f"wrote {len(preds)} predictions to {out}")
    return 0


def evaluate_predictions(pred_path: str, gold_path: str) -> EvalReport:
    preds = {}
    with open(pred_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                preds[str(rec["question_id"])] = rec
    gold = {ex.question_id: ex for ex in load_qa_file(gold_path)}
    missing, extra = sorted(set(gold) - set(preds)), sorted(set(preds) - set(gold))
    if missing or extra:
        raise ValueError(f"prediction/gold id mismatch; missing predictions: {missing}; unknown ids: {extra}")
    report = EvalReport()
    for qid in sorted(gold):
        report.add(qid, score_answer(str(preds[qid].get("answer", "")), gold[qid].answers))
    return report


def cmd_evaluate(args) -> int:
    if args.predictions:
        try:
            report = evaluate_predictions(args.predictions, _need(args.gold, "gold"))
        except ValueError as exc:
            raise SystemExit(f"error: {exc}") from None
        report.write(args.out)
        print(json.dumps({"count": report.count, **report.aggregate}, sort_keys=True))
        return 0
    # MLM evaluation of a pretrained checkpoint (all / entity / probe tokens)
    cfg = load_config(args.config, args.set)
    model, _, _ = ReadTwice.load(_need(args.checkpoint, "checkpoint"))
    vocab = load_vocab(cfg)
    docs = list(load_annotated_corpus(_need(cfg.paths.heldout or cfg.paths.corpus, "heldout"), vocab))
    res = evaluate_mlm(model, docs, vocab, cfg, load_manifest(cfg.paths.manifest))
    Path(args.out).write_text(json.dumps(res, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(res, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    rows = gradient_suite(corrupt=args.corrupt, seed=args.seed)
    print(format_table(rows, TOLERANCE))
    return 0 if all(r.passed() for r in rows) else 1


def cmd_gen_probe(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    kw = dict(
        segment_len=args.segment_len,
        entities_per_doc=args.entities_per_doc,
        n_attribute_values=args.attributes,
    )
    corpus = generate_probe_corpus(args.docs + args.heldout, args.entities, args.segments, rng, **kw)
    split = {d.doc_id: ("train" if k < args.docs else "heldout") for k, d in enumerate(corpus.documents)}
    write_annotated_corpus(out / "corpus.jsonl", [d for d in corpus.documents if split[d.doc_id] == "train"])
    write_annotated_corpus(out / "heldout.jsonl", [d for d in corpus.documents if split[d.doc_id] == "heldout"])
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for p in corpus.manifest:
            fh.write(json.dumps({"split": split[p.doc_id], **asdict(p)}) + "\n")
    corpus.vocab().save(out / "vocab.txt")
    config = {
        "profile": "probe",
        "segmentation": {"window": args.segment_len},
        "paths": {
            "corpus": str(out / "corpus.jsonl"),
            "heldout": str(out / "heldout.jsonl"),
            "manifest": str(out / "manifest.jsonl"),
            "vocab": str(out / "vocab.txt"),
        },
    }
    (out / "probe_config.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    print(json.dumps({"documents": args.docs, "heldout": args.heldout, "chance": corpus.chance, "config": str(out / "probe_config.json")}))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="readtwice", description="Two-pass segmented reader with cross-segment memory.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (dotted path, JSON value)")

    p = sub.add_parser("pretrain", help="masked-LM pretraining")
    with_config(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", action="store_true", help=f"continue from OUT/{CHECKPOINT}")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train QA heads from a pretrained checkpoint")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr-sweep", action="store_true", help=f"run every learning rate in {LR_SWEEP} and keep the best on dev")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="answer questions with a fine-tuned checkpoint")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="QA file")
    p.add_argument("--out", required=True, help="predictions JSONL")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against gold, or MLM accuracy of a checkpoint")
    with_config(p)
    p.add_argument("--predictions")
    p.add_argument("--gold")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--corrupt", metavar="OP", help="break OP's backward rule (negative control)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-probe", help="write a synthetic memory-probe corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--docs", type=int, default=4000)
    p.add_argument("--heldout", type=int, default=200)
    p.add_argument("--entities", type=int, default=16)
    p.add_argument("--segments", type=int, default=2)
    p.add_argument("--entities-per-doc", type=int, default=1)
    p.add_argument("--segment-len", type=int, default=16)
    p.add_argument("--attributes", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_probe)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(levelname)s %(message)s")
    threads = os.environ.get(THREADS_ENV)
    try:
        if threads:
            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
