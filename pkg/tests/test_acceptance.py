"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7 and 8 train real toy models on the synthetic corpus and take
roughly half an hour on one CPU core; they are marked ``slow``.
"""
import math
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest
import torch

from rulecap.data import gen_synthetic_dataset
from rulecap.entities import EntityMention, EntitySet, EntityType, GazetteerRecognizer, select_top_k
from rulecap.metrics import bleu4, cider, entity_prf, rouge_l
from rulecap.model import PrefixMultiheadAttention, RuleCapModel, collate, count_parameters, decode_greedy
from rulecap.model.training import make_optimizer, train_step
from rulecap.pipeline import ExperimentConfig, encode_sample, load_dataset, run_experiment
from rulecap.rules import GenericObjectVocabulary, SituationFrame, replace_entities, serialize_rule
from rulecap.scoring import ImageRef
from rulecap.text import Vocab

from conftest import gradcheck_model, random_items, record_criterion, tiny_model
from oracles import (
    ORACLE_VOCAB,
    all_frames,
    all_partitions,
    brute_force_rule,
    central_difference,
    cider_oracle,
    full_sort_top_k,
    rouge_l_oracle,
    vanilla_logits,
)
from test_rules import partition_of


def test_criterion_01_attention_rows_sum_to_one():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        H = int(rng.integers(1, 5))
        d_model = H * int(rng.integers(1, 9))
        B, L, S, P = (int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(0, 6)))
        torch.manual_seed(trial)
        mha = PrefixMultiheadAttention(d_model, H).double()
        q = torch.randn(B, L, d_model, dtype=torch.float64) * float(rng.uniform(0.1, 10))
        kv = torch.randn(B, S, d_model, dtype=torch.float64)
        pad = torch.from_numpy(rng.random((B, S)) < 0.3)
        prefix = torch.randn(P, d_model, dtype=torch.float64) if P else None
        extra = torch.randn(B, 1, d_model, dtype=torch.float64) if rng.random() < 0.5 else None
        with torch.no_grad():
            _, w = mha(q, kv, key_padding_mask=pad, prefix=prefix, extra_kv=extra, need_weights=True)
        rows = w.sum(-1)
        # rows whose keys are all masked and that have no prefix are undefined; the
        # sampler keeps them out
        valid = ~(pad.all(1)[:, None, None].expand_as(rows)) | (P > 0) | (extra is not None)
        worst = max(worst, float((rows[valid] - 1).abs().max()) if valid.any() else 0.0)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 10
    record_criterion(1, ok, f"max |row sum - 1| = {worst:.2e} over 100 configs in {elapsed:.2f}s")
    assert ok


def test_criterion_02_empty_prefix_matches_vanilla_transformer():
    model = tiny_model(seed=11, inject_layers=(), prefix_len=0).eval()
    worst = 0.0
    for seed in range(50):
        items = random_items(1 + seed % 3, model.cfg, seed)
        batch = collate(items, 0, 1, 2, model.cfg.max_src_len, model.cfg.max_tgt_len, torch.float64)
        with torch.no_grad():
            worst = max(worst, float((model(batch) - vanilla_logits(model, batch)).abs().max()))
    ok = worst <= 1e-6
    record_criterion(2, ok, f"max abs diff vs torch.nn transformer layers = {worst:.2e} on 50 inputs")
    assert ok


def test_criterion_03_gradient_matches_finite_differences():
    start = time.perf_counter()
    model = gradcheck_model(seed=3)
    n_params = count_parameters(model)
    items = random_items(3, model.cfg, 5)
    batch = collate(items, 0, 1, 2, model.cfg.max_src_len, model.cfg.max_tgt_len, torch.float64)
    model.zero_grad()
    model.loss(batch).backward()
    index = [(p, i) for p in model.parameters() for i in range(p.numel())]
    rng = np.random.default_rng(0)
    picks = rng.choice(len(index), size=250, replace=False)

    def f():
        with torch.no_grad():
            return model.loss(batch).item()

    worst = 0.0
    for j in picks:
        p, i = index[j]
        a = p.grad.view(-1)[i].item()
        n = central_difference(f, p, i, eps=1e-6)
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-6))
    elapsed = time.perf_counter() - start
    ok = n_params <= 2000 and worst <= 1e-4 and elapsed < 120
    record_criterion(3, ok, f"{n_params} params, 250 sampled, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_04_algorithm_matches_brute_force():
    start = time.perf_counter()
    vocab = GenericObjectVocabulary(ORACLE_VOCAB)
    partitions = [(names, partition_of(names)) for names in all_partitions(3)]
    total = agree = 0
    for verb, pairs in all_frames(4):
        frame = SituationFrame(verb, tuple(pairs))
        for names, part in partitions:
            total += 1
            agree += serialize_rule(replace_entities(frame, part, vocab)) == brute_force_rule(verb, pairs, names)
    elapsed = time.perf_counter() - start
    ok = agree == total and elapsed < 30
    record_criterion(4, ok, f"{agree}/{total} frame x partition instances agree in {elapsed:.1f}s")
    assert ok


def test_criterion_05_top_k_equals_full_sort():
    rng = np.random.default_rng(5)
    image = ImageRef("img", np.zeros(2))
    agree = 0
    for trial in range(1000):
        n = int(rng.integers(0, 13))
        k = int(rng.integers(1, 14))
        # coarse scores force ties so the tiebreak is exercised
        scores = [float(x) for x in rng.integers(-2, 3, size=n) / 2]
        starts = [int(x) for x in rng.choice(40, size=n, replace=False)]
        ents = [(f"E{int(rng.integers(0, 99))}x{i}", s) for i, s in enumerate(starts)]
        table = {surface: sc for (surface, _), sc in zip(ents, scores)}
        mentions = EntitySet.from_mentions(
            EntityMention(surface, EntityType.PER, (s, s + 1)) for surface, s in ents)

        class Table:
            def score(self, image, text):
                return table[text]

        got = select_top_k(image, mentions, Table(), k).surfaces()
        agree += got == full_sort_top_k(ents, scores, k)
    ok = agree == 1000
    record_criterion(5, ok, f"{agree}/1000 randomized trials match full sort with tiebreak")
    assert ok


def test_criterion_06_metric_sanity():
    refs = ["Pedro Sa Moraes performs in New York on Sunday .", "Ann Lee and Bo Chen visit Acme Corp .",
            "a man sings on a stage"]
    rec = GazetteerRecognizer({"Pedro Sa Moraes": "PER", "New York": "LOC", "Ann Lee": "PER", "Bo Chen": "PER",
                               "Acme Corp": "ORG"})
    b = bleu4(refs, refs)
    prf = entity_prf(refs, refs, rec)["entity"]
    hyps = ["Pedro Sa Moraes plays in New York .", "Ann Lee visits the Acme Corp offices", "a man sings"]
    multi = [[refs[0], "the singer plays in New York"], [refs[1]], [refs[2], "a singer on stage"]]
    d_cider = abs(cider(hyps, multi) - cider_oracle(hyps, multi))
    d_rouge = abs(rouge_l(hyps, multi) - rouge_l_oracle(hyps, multi))
    ok = b == pytest.approx(1.0, abs=1e-12) and prf == (1.0, 1.0) and d_cider <= 1e-9 and d_rouge <= 1e-9
    record_criterion(6, ok, f"self BLEU-4 {b:.6f}, entity P/R {prf}, |dCIDEr| {d_cider:.1e}, |dROUGE-L| {d_rouge:.1e}")
    assert ok


# ---------------------------------------------------------------- toy-scale replication

TOY_SEEDS = [0, 1, 2]


@pytest.fixture(scope="module")
def toy_runs():
    """FULL and NON_RULE at the last layer, plus FULL at the first layer, for three seeds."""
    cfg = ExperimentConfig(name="toy", seeds=TOY_SEEDS, variants=["FULL", "NON_RULE"], placement="P4")
    start = time.perf_counter()
    ds = load_dataset(cfg)
    last = run_experiment(cfg, ds, write=False)
    rule_following_seconds = time.perf_counter() - start
    first = run_experiment(replace(cfg, variants=["FULL"], placement="P1"), ds, write=False)
    return {"cfg": cfg, "ds": ds, "last": last, "first": first, "seconds": rule_following_seconds}


@pytest.mark.slow
def test_criterion_07_rule_following_at_toy_scale(toy_runs):
    ds, cfg, res = toy_runs["ds"], toy_runs["cfg"], toy_runs["last"]["results"]
    vocab_size = toy_runs["last"]["dataset"]["vocab_size"]
    full, non = res["FULL"]["mean"], res["NON_RULE"]["mean"]
    recall_gap = (full["entity_r"] - non["entity_r"]) * 100
    cider_gap = full["cider"] - non["cider"]
    minutes = toy_runs["seconds"] / 60
    ok = (len(ds.train) + len(ds.test) >= 2000 and vocab_size <= 500 and cfg.entity_pool >= 50
          and recall_gap >= 10 and cider_gap > 0 and minutes <= 60)
    record_criterion(7, ok, f"entity recall FULL {full['entity_r']:.3f} vs NON_RULE {non['entity_r']:.3f} "
                            f"(+{recall_gap:.1f} pts), CIDEr {full['cider']:.3f} vs {non['cider']:.3f}, "
                            f"{len(ds.train) + len(ds.test)} samples, vocab {vocab_size}, {minutes:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_08_last_layer_injection_trend(toy_runs):
    last = {r["seed"]: r["cider"] for r in toy_runs["last"]["results"]["FULL"]["per_seed"]}
    first = {r["seed"]: r["cider"] for r in toy_runs["first"]["results"]["FULL"]["per_seed"]}
    wins = sum(last[s] >= first[s] for s in TOY_SEEDS)
    detail = ", ".join(f"seed {s}: last {last[s]:.3f} / first {first[s]:.3f}" for s in TOY_SEEDS)
    ok = wins >= 2
    record_criterion(8, ok, f"last-layer >= first-layer CIDEr in {wins}/3 seeds ({detail})", warn_only=True)
    if not ok:
        warnings.warn(f"layer-placement trend not reproduced at toy depth: {detail}")


def test_criterion_09_reports_are_byte_identical(tmp_path):
    small = dict(n_train=60, n_test=10, epochs=2, scorer_epochs=2, d_model=16, n_heads=2, d_ff=16, n_dec_layers=1,
                 d_txt=32, d_rule_txt=64, batch_size=16, warmup_steps=0, seeds=[3])
    run_experiment(ExperimentConfig(**small, out_dir=str(tmp_path / "a")))
    run_experiment(ExperimentConfig(**small, out_dir=str(tmp_path / "b")))
    a, b = (tmp_path / "a" / "report.json").read_bytes(), (tmp_path / "b" / "report.json").read_bytes()
    ok = a == b
    record_criterion(9, ok, f"two runs produced {'identical' if ok else 'different'} report.json ({len(a)} bytes)")
    assert ok


def test_criterion_10_overfit_single_sample():
    sample = gen_synthetic_dataset(1, seed=8)["train"][0]
    vocab = Vocab.build([sample.article, sample.caption])
    cfg = ExperimentConfig(dropout=0.0).model_config(len(vocab))
    torch.manual_seed(0)
    model = RuleCapModel(cfg)
    rule = "performing | Agent: " + sample.caption.split(" ")[0]
    item = encode_sample(sample, vocab, rule, cfg)
    batch = collate([item], 0, 1, 2, cfg.max_src_len, 20)
    opt, sched = make_optimizer(model, lr=1e-3, weight_decay=0.0, total_steps=500)
    steps, loss = 0, math.inf
    while steps < 500 and loss >= 0.01:
        loss = train_step(batch, model, opt, sched, batch_id=steps)
        steps += 1
    model.eval()
    with torch.no_grad():
        loss = model.loss(batch).item()
    caption = vocab.decode(decode_greedy(model, batch)[0].tokens)
    ok = loss < 0.01 and caption == vocab.decode(vocab.encode(sample.caption))
    record_criterion(10, ok, f"loss {loss:.4f} after {steps} steps; greedy caption "
                             f"{'reproduces' if caption == vocab.decode(vocab.encode(sample.caption)) else 'differs from'} the target")
    assert ok
