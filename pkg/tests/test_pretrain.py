import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from readtwice import autodiff as ad
from readtwice.corpus import AnnotatedDocument, Mention, SegmentProfile, Vocab, generate_probe_corpus, segment_document
from readtwice.encoder import EncoderConfig
from readtwice.memory import MemoryConfig, MemoryEntry, MemoryTable
from readtwice.model import ModelConfig, ReadTwice, pack_segments
from readtwice.pretrain import (
    IGNORE,
    Adam,
    MaskedBatch,
    PretrainConfig,
    coref_loss,
    coref_pairs,
    compute_losses,
    make_batch,
    mask_batch,
    mask_tokens,
    masked_cross_entropy,
    mlm_accuracy,
    mlm_logits,
    mlm_loss,
    train,
)

VOCAB = Vocab([f"w{i}" for i in range(20)])


def mentions_fixture(n=200, seed=0):
    rng = np.random.default_rng(seed)
    ms, pos = [], 0
    while pos < n - 4:
        pos += int(rng.integers(1, 6))
        length = int(rng.integers(1, 4))
        if pos + length <= n:
            ms.append(Mention(pos, pos + length, f"e{len(ms) % 5}"))
        pos += length
    return ms


# -- masking ------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 0.5))
def test_mentions_are_masked_whole(seed, entity_rate, span_rate):
    rng = np.random.default_rng(seed)
    ids = VOCAB.encode([f"w{i}" for i in rng.integers(0, 20, 120)])
    ms = mentions_fixture(120, seed)
    mt = mask_tokens(ids, ms, rng, VOCAB, entity_rate, span_rate)
    for m in ms:
        assert mt.masked[m.start : m.end].all() or not mt.masked[m.start : m.end].any()
    assert (mt.labels[mt.masked] == ids[mt.masked]).all()
    assert (mt.labels[~mt.masked] == IGNORE).all()
    assert (mt.input_ids[~mt.masked] == ids[~mt.masked]).all()


def test_span_budget_is_exact_on_non_entity_tokens():
    rng = np.random.default_rng(0)
    ids = VOCAB.encode(["w1"] * 200)
    ms = mentions_fixture(200)
    free = 200 - sum(m.end - m.start for m in ms)
    for _ in range(20):
        mt = mask_tokens(ids, ms, rng, VOCAB, 0.0, 0.15)
        assert not mt.masked[mt.is_entity].any()
        assert abs(int(mt.masked.sum()) - 0.15 * free) < 1


def test_corruption_split():
    rng = np.random.default_rng(0)
    ids = VOCAB.encode(["w3"] * 20000)
    mt = mask_tokens(ids, [], rng, VOCAB, 0.0, 0.5)
    sel = mt.input_ids[mt.masked]
    frac_mask = np.mean(sel == VOCAB.mask_id)
    frac_same = np.mean(sel == VOCAB.encode(["w3"])[0])
    # random replacements can coincide with the original token (1 in 20)
    assert frac_mask == pytest.approx(0.8, abs=0.015)
    assert frac_same == pytest.approx(0.1 + 0.1 / 20, abs=0.015)
    assert not np.isin(sel, list(VOCAB.special_ids - {VOCAB.mask_id})).any()


def test_forced_positions_always_masked():
    ids = VOCAB.encode(["w1"] * 10)
    mt = mask_tokens(ids, [], np.random.default_rng(0), VOCAB, 0.0, 0.0, [2, 7])
    assert mt.masked.tolist() == [i in (2, 7) for i in range(10)]
    assert (mt.input_ids[[2, 7]] == VOCAB.mask_id).all()


def test_mask_batch_skips_prefix_and_padding():
    vocab = Vocab([f"w{i}" for i in range(20)] + ["q"])
    doc = AnnotatedDocument("d", [f"w{i % 20}" for i in range(23)], [Mention(3, 5, "E")])
    segs, _ = segment_document(doc, SegmentProfile(10, 0, 8))
    batch = pack_segments(segs, vocab, question="q")
    mb = mask_batch(batch, vocab, np.random.default_rng(0), 1.0, 0.5)
    assert not mb.masked[:, : batch.prefix_len].any()
    assert not mb.masked[~batch.attention_mask].any()
    assert mb.is_entity.sum() == 2 and mb.masked[mb.is_entity].all()


# -- MLM loss -------------------------------------------------------------------


def small_model(mode="E", **enc):
    base = dict(vocab_size=len(VOCAB), hidden_dim=8, num_heads=2, ffn_dim=16, layers_first=1, layers_second=1, max_segment_len=24)
    base.update(enc)
    return ReadTwice.init(ModelConfig(EncoderConfig(**base), MemoryConfig(mode=mode)), np.random.default_rng(0))


def test_mlm_loss_matches_manual_cross_entropy():
    with ad.precision(np.float64):
        model = small_model().astype(np.float64)
        h4 = ad.Tensor(np.random.default_rng(1).normal(size=(2, 6, 8)), dtype=np.float64)
        masked = np.zeros((2, 6), bool)
        masked[0, 2] = masked[1, 5] = True
        labels = np.full((2, 6), IGNORE)
        labels[0, 2], labels[1, 5] = 7, 11
        mb = MaskedBatch(np.zeros((2, 6), int), labels, masked, np.zeros((2, 6), bool), np.zeros((2, 6), bool))
        got = mlm_loss(h4, mb, model.params, model.config.encoder).loss.item()
        logits = mlm_logits(ad.Tensor(h4.data[masked], dtype=np.float64), model.params, model.config.encoder).data
        want = np.mean([np.log(np.exp(row).sum()) - row[y] for row, y in zip(logits, [7, 11])])
        assert got == pytest.approx(want, abs=1e-10)
        empty = MaskedBatch(mb.input_ids, np.full((2, 6), IGNORE), np.zeros((2, 6), bool), mb.is_entity, mb.is_probe)
        res = mlm_loss(h4, empty, model.params, model.config.encoder)
        assert res.empty and res.loss.item() == 0.0


# -- coreference ----------------------------------------------------------------


def table_fixture(k, seed):
    rng = np.random.default_rng(seed)
    entries = [MemoryEntry("d", int(rng.integers(3)), "E", (0, 1), rng.choice(["a", "b", "c", None])) for _ in range(k)]
    return MemoryTable(ad.Tensor(rng.normal(size=(k, 4)), dtype=np.float64), entries), rng


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10), st.integers(0, 2**31 - 1))
def test_coref_loss_matches_exhaustive_pairs(k, seed):
    with ad.precision(np.float64):
        table, rng = table_fixture(k, seed)
        b0 = float(rng.normal())
        pairs = coref_pairs(table, exhaustive=True)
        got = coref_loss(table, ad.Tensor(np.array([b0]), dtype=np.float64), pairs).item()
    terms = []
    e, v = table.entries, table.vectors.data
    for i in range(k):
        for j in range(i + 1, k):
            if e[i].entity_id is None or e[j].entity_id is None:
                continue
            same = e[i].entity_id == e[j].entity_id
            if same and e[i].source_segment == e[j].source_segment:
                continue
            p = 1 / (1 + math.exp(-(v[i] @ v[j] + b0)))
            terms.append(-math.log(p if same else 1 - p))
    want = sum(terms) / len(terms) if terms else 0.0
    assert got == pytest.approx(want, abs=1e-9)


def test_coref_negative_sampling_cap():
    entries = [MemoryEntry("d", s, "E", (0, 1), eid) for s, eid in enumerate(["a", "a"] + [f"x{i}" for i in range(30)])]
    table = MemoryTable(ad.Tensor(np.zeros((32, 4))), entries)
    pairs = coref_pairs(table, np.random.default_rng(0), negatives_per_positive=5)
    assert sum(p.label for p in pairs) == 1 and len(pairs) == 6
    with pytest.raises(ValueError):
        coref_pairs(table, None, 5)


# -- optimizer -------------------------------------------------------------------


def test_adam_first_step_and_warmup():
    p = {"w": ad.Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)}
    p["w"].grad = np.array([0.5, -0.25])
    opt = Adam(lr=0.1, warmup_steps=4, clip_norm=None)
    opt.step(p)
    # the bias-corrected first update is lr * sign(g) at warmup fraction 1/4
    np.testing.assert_allclose(p["w"].data, [1.0 - 0.025, -2.0 + 0.025], atol=1e-7)
    assert opt.learning_rate() == pytest.approx(0.05)


def test_adam_clips_global_norm():
    p = {"w": ad.Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)}
    p["w"].grad = np.array([30.0, 40.0])
    opt = Adam(lr=1.0, clip_norm=1.0)
    assert opt.step(p) == pytest.approx(50.0)
    np.testing.assert_allclose(opt.m["w"], 0.1 * np.array([0.6, 0.8]))


def test_adam_state_round_trip():
    p = {"w": ad.Tensor(np.ones(3), requires_grad=True, dtype=np.float64)}
    opt = Adam()
    for _ in range(3):
        p["w"].grad = np.arange(3.0)
        opt.step(p)
    other = Adam()
    other.load_state_arrays(opt.state_arrays())
    assert other.step_count == 3
    np.testing.assert_array_equal(other.v["w"], opt.v["w"])


# -- training loop ---------------------------------------------------------------


@pytest.fixture(scope="module")
def probe():
    return generate_probe_corpus(40, 8, 2, np.random.default_rng(0), segment_len=12, entities_per_doc=1)


def probe_model(probe, mode="E"):
    cfg = ModelConfig(EncoderConfig(vocab_size=len(probe.vocab()), hidden_dim=16, num_heads=2, ffn_dim=32, max_segment_len=13),
                      MemoryConfig(mode=mode))
    return ReadTwice.init(cfg, np.random.default_rng(0))


def test_training_is_deterministic_and_reduces_loss(probe):
    cfg = PretrainConfig(steps=30, docs_per_batch=8, lr=3e-3, warmup_steps=5, lambda_coref=0.5)
    runs = []
    for _ in range(2):
        model = probe_model(probe)
        _, hist = train(model, probe.documents, probe.vocab(), probe.profile, cfg)
        runs.append((model, hist))
    (a, ha), (b, hb) = runs
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    assert [r["loss"] for r in ha] == [r["loss"] for r in hb]
    first = np.mean([r["mlm"] for r in ha[:5]])
    last = np.mean([r["mlm"] for r in ha[-5:]])
    assert last < first
    assert all(r["coref"] >= 0 for r in ha)


def test_train_continues_from_optimizer_step(probe):
    cfg = PretrainConfig(steps=6, docs_per_batch=4)
    ref = probe_model(probe)
    train(ref, probe.documents, probe.vocab(), probe.profile, cfg)
    model = probe_model(probe)
    opt, _ = train(model, probe.documents, probe.vocab(), probe.profile, PretrainConfig(steps=3, docs_per_batch=4))
    train(model, probe.documents, probe.vocab(), probe.profile, cfg, optimizer=opt)
    for k in ref.params:
        np.testing.assert_array_equal(ref.params[k].data, model.params[k].data)


def test_mlm_accuracy_subsets(probe):
    forced = {p.doc_id: [p.position] for p in probe.manifest}
    batch = make_batch(probe.documents[:10], probe.vocab(), probe.profile, np.random.default_rng(0), 0.0, 0.0, forced)
    acc = mlm_accuracy(probe_model(probe), [batch])
    assert acc["counts"]["probe_tokens"] == 10 == acc["counts"]["all_tokens"]
    assert 0.0 <= acc["probe_tokens"] <= 1.0


# -- closed forms and loss composition ---------------------------------------------


def test_cross_entropy_limits():
    with ad.precision(np.float64):
        v = 37
        uniform = masked_cross_entropy(ad.Tensor(np.zeros((4, v)), dtype=np.float64), np.arange(4)).item()
        assert uniform == pytest.approx(math.log(v), abs=1e-12)
        onehot = np.eye(v)[[3, 5]] * 100.0
        assert masked_cross_entropy(ad.Tensor(onehot, dtype=np.float64), np.array([3, 5])).item() < 1e-40


def test_coref_closed_forms():
    with ad.precision(np.float64):
        pair = [MemoryEntry("d", 0, "E", (0, 1), "a"), MemoryEntry("d", 1, "E", (0, 1), "a")]
        table = MemoryTable(ad.Tensor(np.zeros((2, 4)), dtype=np.float64), pair)
        bias = ad.Tensor(np.zeros(1), dtype=np.float64)
        assert coref_loss(table, bias, coref_pairs(table, exhaustive=True)).item() == pytest.approx(math.log(2), abs=1e-12)
        one = MemoryTable(ad.Tensor(np.ones((1, 4)), dtype=np.float64), pair[:1])
        assert coref_loss(one, bias, coref_pairs(one, exhaustive=True)).item() == 0.0
        unlinked = MemoryTable(ad.Tensor(np.ones((2, 4)), dtype=np.float64), [MemoryEntry("d", s, "E", (0, 1)) for s in (0, 1)])
        assert coref_pairs(unlinked, exhaustive=True) == []


def grads_of(model, batch, masked, lam):
    model_grads = {}
    for p in model.params.values():
        p.grad = None
    total, mlm, coref = compute_losses(model, batch, masked, lam, np.random.default_rng(0))
    total.backward()
    for k, p in model.params.items():
        model_grads[k] = None if p.grad is None else p.grad.copy()
    return total.item(), mlm.item(), coref.item(), model_grads


def test_loss_additivity_and_zero_lambda(probe):
    with ad.precision(np.float64):
        model = probe_model(probe).astype(np.float64)
        batch, masked = make_batch(probe.documents[:4], probe.vocab(), probe.profile, np.random.default_rng(1), 0.5, 0.15)
        total, mlm, coref, _ = grads_of(model, batch, masked, 0.7)
        assert coref > 0 and total == pytest.approx(mlm + 0.7 * coref, abs=1e-6)
        _, _, _, g0 = grads_of(model, batch, masked, 0.0)
        # MLM-only reference: the coref bias receives no gradient at all
        for p in model.params.values():
            p.grad = None
        compute_losses(model, batch, masked, 0.0)[1].backward()
        for k, p in model.params.items():
            if g0[k] is None:
                assert p.grad is None or not p.grad.any()
            else:
                np.testing.assert_array_equal(g0[k], p.grad)


def test_loss_decreases_over_200_steps(probe):
    model = probe_model(probe)
    _, hist = train(model, probe.documents, probe.vocab(), probe.profile,
                    PretrainConfig(steps=200, docs_per_batch=8, lr=3e-3, warmup_steps=10))
    assert np.mean([r["loss"] for r in hist[-20:]]) < np.mean([r["loss"] for r in hist[:20]]) - 0.5
