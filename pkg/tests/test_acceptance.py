"""Acceptance suite: one test per release criterion, tolerances pinned.

Run with `pytest -s tests/test_acceptance.py` to see one pass/fail line per
criterion.  The desk-scale criteria train real models and take a few minutes
each; total runtime is dominated by the ablation sweep.
"""

import json
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from trispan.bench import (
    BenchConfig,
    bench_scoring,
    cross_inputs,
    cross_prefix,
    cross_stage_decomposed,
    cross_stage_naive,
    token_inputs,
    token_prefix,
    token_stage_decomposed,
    token_stage_naive,
)
from trispan.cli import main as cli_main
from trispan.data_eval import (
    Entity,
    Example,
    PredSpan,
    Prediction,
    evaluate,
    generate_synthetic,
    save_corpus,
    span_recall_at_m,
)
from trispan.encoder import Vocab
from trispan.pipeline import Model, ModelConfig, select_top_m, train
from trispan.tensor import (
    Tensor,
    cross_entropy,
    gather_rows,
    grad_check,
    init_mlp,
    mlp_apply,
    reshape,
    softmax,
)
from trispan.triaffine import attention_table, init_site, score_table_decomposed, span_mask, triaff

DESK_SEED = 1234


def check(criterion: int, description: str, ok: bool, details: str = "") -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {description} {details}")
    assert ok, f"criterion {criterion}: {description} {details}"


@pytest.fixture(scope="module")
def desk_corpus():
    full = generate_synthetic(seed=DESK_SEED, n_sentences=300, max_depth=3, max_len=18)
    return full[:200], full[200:250], full[250:]


@pytest.fixture(scope="module")
def desk_files(desk_corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    paths = {}
    for name, part in zip(("train", "dev", "test"), desk_corpus):
        paths[name] = str(root / f"{name}.jsonl")
        save_corpus(paths[name], part)
    paths["root"] = str(root)
    return paths


# ---------------------------------------------------------------------------
# criterion 1: decomposition exactness + nonlinearity control
# ---------------------------------------------------------------------------

def test_criterion_1_decomposition_exactness():
    t0 = time.perf_counter()
    worst = 0.0
    g = np.random.default_rng(101)
    for case in range(1000):
        cfg = BenchConfig(
            batch=1,
            seq_len=int(g.integers(1, 17)),
            d=int(g.integers(1, 33)),
            labels=int(g.integers(1, 7)),
            m=int(g.integers(1, 9)),
            seed=case,
        )
        if case % 2 == 0:
            h, w = token_inputs(cfg, np.float64)
            pre = token_prefix(h, w, clamp=False)
            n = cfg.seq_len
            spans0 = [(i0, j0) for i0 in range(n) for j0 in range(i0, n)]
            flat = np.asarray([i0 * n + j0 for i0, j0 in spans0])
            a = token_stage_naive(*pre, w["score_tensors"], spans0)
            b = token_stage_decomposed(*pre, w["score_tensors"], flat)
        else:
            left, right, reps, w = cross_inputs(cfg, np.float64)
            pre = cross_prefix(left, right, reps, w, clamp=False)
            a = cross_stage_naive(*pre, w["score_tensors"])
            b = cross_stage_decomposed(*pre, w["score_tensors"])
        worst = max(worst, float(np.max(np.abs(a - b) / (1.0 + np.abs(a)))))

    # negative control: a 1-layer nonlinear content head must break equality
    breaks = []
    for seed in range(300):
        gg = np.random.default_rng(7000 + seed)
        d = int(gg.integers(2, 33))
        items = int(gg.integers(2, 9))
        tensor = gg.standard_normal((d + 1, d, d + 1))
        head = init_mlp([d, d], gg, "tanh", weight_std=1.5, final_activation=True)
        u2 = np.concatenate([gg.standard_normal(d), [1.0]])
        v2 = np.concatenate([gg.standard_normal(d), [1.0]])
        w_items = gg.standard_normal((items, d))
        weights = softmax(Tensor(gg.standard_normal(items))).data
        transform = lambda x: mlp_apply(head, Tensor(x)).data
        form = lambda content: float(np.einsum("abc,a,b,c->", tensor, u2, content, v2))
        naive = form(transform(weights @ w_items))
        dec = sum(weights[k] * form(transform(w_items[k])) for k in range(items))
        breaks.append(abs(naive - dec) / (1.0 + abs(naive)) > 1e-3)
    broken = float(np.mean(breaks))
    elapsed = time.perf_counter() - t0
    check(
        1,
        "decomposition exactness over 1000 random configs, 64-bit",
        worst < 1e-9 and broken >= 0.99 and elapsed < 60,
        f"(max rel diff {worst:.2e}, nonlinear control breaks {broken:.1%}, {elapsed:.1f}s)",
    )


# ---------------------------------------------------------------------------
# criterion 2: gradient correctness
# ---------------------------------------------------------------------------

def _grad_triaff(seed: int) -> float:
    g = np.random.default_rng(seed)
    d = int(g.integers(2, 6))
    left = init_mlp([d, d], g, "tanh")
    right = init_mlp([d, d], g, "tanh")
    content = init_mlp([d, d], g, "tanh")
    tensor = Tensor(g.standard_normal((d + 1, d, d + 1)), requires_grad=True)
    u, v, w = (Tensor(g.standard_normal(d), requires_grad=True) for _ in range(3))
    params = [tensor, u, v, w, *left.parameters(), *right.parameters(), *content.parameters()]
    return grad_check(
        lambda: triaff(u, v, w, tensor, left, right, content), params,
        rng=g, max_coords_per_param=3,
    )


def _grad_attention_chain(seed: int) -> float:
    g = np.random.default_rng(seed)
    n, d = int(g.integers(3, 6)), 3
    labels = int(g.integers(2, 4))
    att = init_site(labels, d, g, 0.3, activation="tanh", name="a")
    score = init_site(labels, d, g, 0.3, content_depth=0, activation="tanh", name="s")
    values = init_mlp([d, d], g, "tanh")
    h = Tensor(g.standard_normal((n, d)), requires_grad=True)
    gold = int(g.integers(0, labels))
    span = int(g.integers(0, n * n))
    i0, j0 = divmod(span, n)
    if i0 > j0:
        i0, j0 = j0, i0
    params = [h, *att.parameters(), *score.parameters(), *values.parameters()]

    def f():
        alpha = attention_table(att, h, span_mask(n))
        logits = score_table_decomposed(score, h, alpha, mlp_apply(values, h))
        row = gather_rows(reshape(logits, (n * n, labels)), np.asarray([i0 * n + j0]))
        return cross_entropy(reshape(row, (labels,)), gold)

    return grad_check(f, params, rng=g, max_coords_per_param=3)


def _grad_full_loss(seed: int) -> float | None:
    """One full-sentence joint loss; None when top-m margins are too thin."""
    corpus = generate_synthetic(seed=seed, n_sentences=3, max_depth=2, max_len=8, labels=("xa", "yb"))
    corpus = [ex for ex in corpus if ex.entities]
    if not corpus:
        return None
    ex = corpus[0]
    cfg = ModelConfig(
        d=4, m=3, emb_dim=5, hidden=4, seed=seed, activation="tanh",
        mlp_dropout=0.0, emb_dropout=0.0, aux_weight=1.0, init_std=0.3,
    )
    labels = sorted({e.label for e in ex.entities})
    model = Model(cfg, Vocab.from_corpus(corpus), labels, np.random.default_rng(seed))
    fwd = model.forward(ex)
    keys = np.sort(fwd.table.logits[:, 1:].max(axis=1))[::-1]
    if len(keys) > cfg.m and keys[cfg.m - 1] - keys[cfg.m] < 1e-4:
        return None  # a selection flip inside the finite-difference step
    return grad_check(lambda: model.forward(ex).total, model.param_list,
                      rng=np.random.default_rng(seed), max_coords_per_param=2)


def test_criterion_2_gradient_correctness():
    t0 = time.perf_counter()
    fam_a = [_grad_triaff(s) for s in range(50)]
    fam_b = [_grad_attention_chain(s) for s in range(50)]
    fam_c = []
    seed = 0
    while len(fam_c) < 50:
        err = _grad_full_loss(seed)
        seed += 1
        if err is not None:
            fam_c.append(err)
    worst = max(max(fam_a), max(fam_b), max(fam_c))
    elapsed = time.perf_counter() - t0
    check(
        2,
        "gradients match central differences at eps=1e-5 (150 instances)",
        worst < 1e-4 and elapsed < 120,
        f"(max rel err {worst:.2e}: form {max(fam_a):.1e}, chain {max(fam_b):.1e}, "
        f"full loss {max(fam_c):.1e}; {elapsed:.1f}s)",
    )


# ---------------------------------------------------------------------------
# criterion 3: attention weights are normalized
# ---------------------------------------------------------------------------

def test_criterion_3_attention_normalization():
    corpus = generate_synthetic(seed=33, n_sentences=100, max_depth=3, max_len=14)
    cfg = ModelConfig(d=10, m=8, emb_dim=8, hidden=6, seed=5, mlp_dropout=0.0, emb_dropout=0.0)
    labels = sorted({e.label for ex in corpus for e in ex.entities})
    model = Model(cfg, Vocab.from_corpus(corpus), labels, np.random.default_rng(2))
    worst_alpha = worst_beta = 0.0
    for ex in corpus:
        fwd = model.forward(ex)
        n = fwd.n_tokens
        alpha = fwd.table.alpha
        for i, j in fwd.table.spans:
            sums = alpha[i - 1, j - 1].sum(axis=0)
            worst_alpha = max(worst_alpha, float(np.abs(sums - 1.0).max()))
        beta_sums = fwd.table.beta.sum(axis=1)
        worst_beta = max(worst_beta, float(np.abs(beta_sums - 1.0).max()))
    check(
        3,
        "attention weights sum to one on every span of 100 sentences",
        worst_alpha <= 1e-9 and worst_beta <= 1e-9,
        f"(max |sum-1|: token {worst_alpha:.2e}, cross {worst_beta:.2e})",
    )


# ---------------------------------------------------------------------------
# criterion 4: overfit sanity
# ---------------------------------------------------------------------------

def test_criterion_4_overfit_sanity():
    t0 = time.perf_counter()
    corpus = generate_synthetic(seed=8, n_sentences=8, max_depth=2, max_len=14)
    assert len(sorted({e.label for ex in corpus for e in ex.entities})) == 4
    cfg = ModelConfig(
        d=12, m=8, emb_dim=16, hidden=16, epochs=300, batch_size=4, seed=3,
        lr=4e-3, weight_decay=0.0, mlp_dropout=0.0, emb_dropout=0.0,
    )
    result = train(cfg, corpus)
    preds = [result.model.decode(ex, i) for i, ex in enumerate(corpus)]
    f1 = evaluate(corpus, preds).f1
    # determinism: a fresh run reproduces the loss curve prefix exactly
    short = train(ModelConfig(**{**cfg.__dict__, "epochs": 5}), corpus)
    same = [m.tsv() for m in short.metrics] == [m.tsv() for m in result.metrics[:5]]
    elapsed = time.perf_counter() - t0
    check(
        4,
        "full model memorizes an 8-sentence nested corpus within 500 epochs",
        f1 == 1.0 and same and elapsed < 300,
        f"(training F1 {f1:.3f} after {cfg.epochs} epochs, deterministic prefix {same}, {elapsed:.0f}s)",
    )


# ---------------------------------------------------------------------------
# criterion 5: desk-scale learning
# ---------------------------------------------------------------------------

def test_criterion_5_desk_scale_learning(desk_corpus):
    t0 = time.perf_counter()
    train_set, dev_set, _ = desk_corpus
    cfg = ModelConfig(
        d=24, m=30, emb_dim=32, hidden=32, epochs=10, batch_size=8, seed=7,
        lr=2e-3, weight_decay=0.01, mlp_dropout=0.1, emb_dropout=0.1,
    )
    result = train(cfg, train_set, dev_set)
    dev_f1 = result.metrics[-1].dev_f1
    per_sentence = []
    for ex in dev_set:
        fwd = result.model.forward(ex)
        per_sentence.append((fwd.table.spans, fwd.table.logits))
    recall = span_recall_at_m(dev_set, per_sentence, 30)
    elapsed = time.perf_counter() - t0
    check(
        5,
        "desk-scale corpus: dev F1 >= 0.90 and span recall@30 >= 0.99",
        dev_f1 >= 0.90 and recall >= 0.99 and elapsed < 1800,
        f"(dev F1 {dev_f1:.4f}, recall@30 {recall:.4f}, {elapsed:.0f}s)",
    )


# ---------------------------------------------------------------------------
# criterion 6: ablation harness
# ---------------------------------------------------------------------------

def test_criterion_6_ablation_harness(desk_files, tmp_path):
    out = tmp_path / "ablate"
    code = cli_main([
        "ablate", "--train", desk_files["train"], "--dev", desk_files["dev"],
        "--out", str(out), "--d", "24", "--hidden", "32", "--emb-dim", "32",
        "--epochs", "16", "--lr", "0.003", "--seed", "7", "--m", "30",
    ])
    rows = json.loads((out / "ablation.json").read_text())["rows"]
    table = (out / "ablation.txt").read_text()
    f1s = {row["setting"]: row["dev_f1"] for row in rows}
    ordering = f"F1(h)={f1s['h']:.3f} F1(g)={f1s['g']:.3f} F1(a)={f1s['a']:.3f} (reported, not asserted)"
    check(
        6,
        "ablation harness: 8 settings on one corpus, each dev F1 >= 0.70",
        code == 0
        and [r["setting"] for r in rows] == list("abcdefgh")
        and "ordering check" in table
        and all(v >= 0.70 for v in f1s.values()),
        f"({', '.join(f'{k}={v:.3f}' for k, v in f1s.items())}; {ordering})",
    )


# ---------------------------------------------------------------------------
# criterion 7: bench speedup
# ---------------------------------------------------------------------------

def test_criterion_7_bench_speedup():
    t0 = time.perf_counter()
    cfg = BenchConfig(batch=2, seq_len=64, d=64, labels=6, m=30,
                      iterations=3, precision=32, seed=0)
    with threadpool_limits(limits=1):
        report = bench_scoring(cfg)
    elapsed = time.perf_counter() - t0
    check(
        7,
        "decomposed scoring beats naive by >= 1.10x wall clock and in counted FLOPs",
        report.speedup >= 1.10
        and report.decomposed.flops < report.naive.flops
        and report.max_rel_diff < 1e-9
        and elapsed < 120,
        f"(speedup {report.speedup:.2f}x, flops {report.decomposed.flops:,} vs "
        f"{report.naive.flops:,}, gate {report.max_rel_diff:.1e}, {elapsed:.0f}s)",
    )


# ---------------------------------------------------------------------------
# criterion 8: top-m selection oracle
# ---------------------------------------------------------------------------

def test_criterion_8_top_m_oracle():
    g = np.random.default_rng(88)
    mismatches = 0
    for case in range(10_000):
        n = int(g.integers(1, 10))
        spans = sorted({(int(a), int(a + b)) for a, b in zip(g.integers(1, 8, n), g.integers(0, 4, n))})
        r = int(g.integers(2, 5))
        logits = g.standard_normal((len(spans), r))
        if case % 3 == 0:
            logits = np.round(logits * 2) / 2  # engineered ties
        m = int(g.integers(1, 8))
        got = select_top_m(spans, logits, m)
        keys = logits[:, 1:].max(axis=1)
        ranked = sorted(zip(spans, keys), key=lambda t: (-t[1], t[0]))
        expect = [s for s, _ in ranked[: min(m, len(spans))]]
        mismatches += got != expect
    check(
        8,
        "top-m selection matches the full-sort oracle on 10,000 tables",
        mismatches == 0,
        f"({mismatches} mismatches, ties engineered in one case of three)",
    )


# ---------------------------------------------------------------------------
# criterion 9: evaluation metric fixture
# ---------------------------------------------------------------------------

def test_criterion_9_evaluation_fixture():
    fixture = [
        Example(["a", "b", "c", "d", "e"],
                [Entity(1, 4, "org"), Entity(2, 3, "person"), Entity(3, 5, "place")]),
        Example(["f", "g"], [Entity(1, 1, "org")]),
        Example(["h", "i", "j"], [Entity(1, 3, "person"), Entity(2, 3, "org")]),
        Example(["k"], []),
        Example(["l", "m", "n"], [Entity(2, 2, "place")]),
    ]
    predictions = [
        Prediction(0, [PredSpan(1, 4, "org"), PredSpan(2, 3, "person"), PredSpan(2, 5, "place")]),
        Prediction(1, [PredSpan(1, 1, "org"), PredSpan(1, 2, "org")]),
        Prediction(2, [PredSpan(1, 3, "person")]),
        Prediction(3, []),
        Prediction(4, []),
    ]
    report = evaluate(fixture, predictions)
    # hand count: 7 gold, 6 predictions, matches = (1,4,org), (2,3,person), (1,1,org), (1,3,person)
    expect_p, expect_r = 4 / 6, 4 / 7
    expect_f1 = 2 * expect_p * expect_r / (expect_p + expect_r)
    groups = report.flat_nested
    sums_ok = groups["flat"]["gold"] + groups["nested"]["gold"] == report.gold_total == 7
    # nested gold: sentence 0 all three (containment + crossing), sentence 2 both
    check(
        9,
        "evaluation matches hand-computed P/R/F1 on the nested+crossing fixture",
        report.precision == pytest.approx(expect_p)
        and report.recall == pytest.approx(expect_r)
        and report.f1 == pytest.approx(expect_f1)
        and report.tp == 4 and report.fp == 2 and report.fn == 3
        and sums_ok
        and groups["nested"]["gold"] == 5
        and groups["flat"]["gold"] == 2,
        f"(P {report.precision:.4f} R {report.recall:.4f} F1 {report.f1:.4f}, "
        f"flat {groups['flat']['gold']} + nested {groups['nested']['gold']} = {report.gold_total})",
    )
