"""Product acceptance gate: every release criterion at its pinned tolerance.

Each test prints one PASS/FAIL line (visible through pytest's capture via
capsys.disabled) and asserts the same condition, so the suite both reports
and enforces. The two planted-ordering criteria train real models over five
seeds each and dominate the runtime; everything else finishes in seconds to
a few minutes.
"""
import heapq
import re
import string
import threading
import time
from bisect import bisect_left

import numpy as np

from qac.cli import main as cli_main
from qac.corpus import ExampleConfig, make_eval_impressions
from qac.data import impression_batch, prepare
from qac.evaluate import evaluate, evaluate_model, matcher_ranker, mrr
from qac.experiments import (
    EXPERIMENT_MODEL,
    PLANTED_IE,
    PLANTED_IT,
    planted_bundle,
    run_planted,
)
from qac.model import Batch, build_variant, save_model
from qac.service import MicroBatcher, SessionStore, Snapshot, SuggestService, TrieCounts
from qac.synth import SynthConfig, recorded_prefixes, synth_corpus
from qac.tensor import grad_check
from qac.train import TrainConfig, train
from qac.trie import build_trie, mcg_topk, mpc_topk

KIND_QUERY = "query"
KIND_CLICK = "item"


def _criterion(capsys, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    with capsys.disabled():
        print(line, flush=True)
    assert ok, line


def _mini_model(seed: int):
    # history capped at 4 elements per view; hidden width pinned at 32
    return build_variant(
        "full",
        30,
        20,
        seed=seed,
        token_dim=8,
        char_dim=6,
        hidden=32,
        char_counts=(4, 5, 6),
        history_blocks=1,
        history_heads=2,
        encoder_blocks=1,
        encoder_heads=2,
        mlp=(16, 8),
        view_caps=(4, 4),
        view_pads=(4, 5),
        query_pad=4,
        prefix_max=8,
        l2=0.0,
    )


def _rand_batch(cfg, seed: int, b: int = 3, counts=None) -> Batch:
    rng = np.random.default_rng(seed)
    cand = rng.integers(2, cfg.n_tokens, size=(b, cfg.query_pad))
    cand[:, -1] = 0
    plen = rng.integers(1, cfg.prefix_max + 1, size=b)
    pchars = np.zeros((b, cfg.prefix_max), dtype=np.int64)
    for i in range(b):
        pchars[i, : plen[i]] = rng.integers(2, cfg.n_chars, size=plen[i])
    ptok = rng.integers(2, cfg.n_tokens, size=(b, cfg.query_pad))
    ptok[:, 1:] = 0
    history, hist_counts = [], []
    if counts is None:
        counts = [rng.integers(0, cap + 1, size=b) for cap in cfg.view_caps]
    for v, cap in enumerate(cfg.view_caps):
        cnt = np.asarray(counts[v], dtype=np.int64)
        n = int(cnt.max()) if len(cnt) else 0
        arr = np.zeros((b, n, cfg.view_pads[v]), dtype=np.int64)
        for i in range(b):
            for j in range(cnt[i]):
                width = rng.integers(1, cfg.view_pads[v] + 1)
                arr[i, j, :width] = rng.integers(2, cfg.n_tokens, size=width)
        history.append(arr)
        hist_counts.append(cnt)
    return Batch(
        cand_tokens=cand,
        prefix_chars=pchars,
        prefix_lens=plen,
        prefix_tokens=ptok,
        history=history,
        hist_counts=hist_counts,
        popularity=rng.uniform(0, 5, size=b),
        labels=rng.integers(0, 2, size=b),
        groups=np.arange(b),
    )


def _prepared(cfg: SynthConfig, seed: int = 0):
    result = synth_corpus(cfg, seed)
    bundle = prepare(
        result.records,
        result.split,
        result.lexicon,
        ExampleConfig(),
        seed=seed,
        recorded=recorded_prefixes(result.truths),
    )
    return result, bundle


def test_gradient_fidelity(capsys):
    started = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        model = _mini_model(seed)
        batch = _rand_batch(model.cfg, seed=1000 + seed)
        rng = np.random.default_rng(2000 + seed)
        err = grad_check(
            lambda: model.loss(batch),
            model.store.tensors(),
            eps=1e-5,
            max_entries_per_param=2,
            rng=rng,
        )
        worst = max(worst, err)
    elapsed = time.perf_counter() - started
    ok = worst < 1e-4 and elapsed < 60.0
    _criterion(
        capsys,
        "gradient-fidelity",
        ok,
        f"max rel err {worst:.3e} over 20 seeds in {elapsed:.1f}s "
        f"(tol 1e-4, budget 60s)",
    )


def test_matcher_baseline_exact(capsys):
    _, bundle = _prepared(SynthConfig(), seed=0)
    report, _ = evaluate(matcher_ranker(), bundle.test_impressions)
    ok = (
        report.counts["unseen"] > 0
        and report.slices["unseen"] == 0.0
        and report.counts["seen"] > 0
        and report.slices["seen"] > 0.0
    )
    _criterion(
        capsys,
        "matcher-baseline-exact",
        ok,
        f"unseen {report.slices['unseen']:.4f} over {report.counts['unseen']} "
        f"impressions (= 0.0 required); seen {report.slices['seen']:.4f} over "
        f"{report.counts['seen']} (> 0 required)",
    )


def test_oracle_equivalence(capsys):
    rng = np.random.default_rng(0)
    letters = np.array(list(string.ascii_lowercase))

    def word(lo, hi):
        return "".join(rng.choice(letters, size=rng.integers(lo, hi)))

    heads = list({word(3, 8) for _ in range(400)})[:250]
    tails = list({word(3, 8) for _ in range(400)})[:220]
    picks = rng.choice(len(heads) * len(tails), size=50_000, replace=False)
    items = [
        (f"{heads[i // len(tails)]} {tails[i % len(tails)]}", int(rng.integers(1, 40)))
        for i in picks
    ]
    counts = dict(items)
    trie = build_trie(items, k=64)

    qs = sorted(counts)
    hi_mark = "\U0010ffff"

    def brute(prefix, k):
        lo = bisect_left(qs, prefix)
        hi = bisect_left(qs, prefix + hi_mark)
        return heapq.nsmallest(k, qs[lo:hi], key=lambda q: (-counts[q], q))

    mismatches = 0
    for i in range(1000):
        if i % 5 == 4:
            prefix = word(1, 9)
        else:
            q = qs[rng.integers(len(qs))]
            prefix = q[: rng.integers(1, len(q) + 1)]
        k = int(rng.choice([1, 5, 10, 64]))
        if mpc_topk(trie, prefix, k) != brute(prefix, k):
            mismatches += 1

    fake = [f"q{j}" for j in range(60)]
    lists, clicked, oracle_rrs = [], [], []
    for _ in range(1000):
        ranked = list(rng.choice(fake, size=rng.integers(0, 11), replace=False))
        click = ranked[rng.integers(len(ranked))] if ranked and rng.random() < 0.8 else "absent"
        rr = 0.0
        for pos, q in enumerate(ranked):
            if q == click:
                rr = 1.0 / (pos + 1)
                break
        lists.append(ranked)
        clicked.append(click)
        oracle_rrs.append(rr)
    mrr_exact = mrr(lists, clicked) == float(np.mean(oracle_rrs))

    ok = mismatches == 0 and mrr_exact
    _criterion(
        capsys,
        "oracle-equivalence",
        ok,
        f"trie vs sorted-scan: {mismatches}/1000 prefix mismatches over "
        f"{len(counts)}-query background; mrr vs recomputation exact={mrr_exact}",
    )


def test_invariant_suite(capsys):
    failures = []
    model = _mini_model(seed=3)
    # counts stay two below the view caps so the pad-extension probe below
    # can append slots without outgrowing the positional table
    batch = _rand_batch(model.cfg, seed=42, b=6, counts=[[2, 0, 1, 2, 1, 0], [0, 0, 2, 1, 2, 0]])
    v = model.inspect(batch)

    for view, cnt in zip(v.view_alpha, batch.hist_counts):
        sums = view.sum(axis=1)
        if not np.allclose(sums[cnt > 0], 1.0, atol=1e-12):
            failures.append("history attention rows do not sum to 1")
        if np.any(sums[cnt == 0] != 0.0):
            failures.append("empty-history attention rows are nonzero")
    esums = v.alpha_e.sum(axis=1)
    any_view = np.array([a > 0 or b > 0 for a, b in zip(*batch.hist_counts)])
    if not np.allclose(esums[any_view], 1.0, atol=1e-12):
        failures.append("view-mixture weights do not sum to 1")

    if not np.all(v.e >= 0):
        failures.append("evolution activation has negative entries")
    if not np.all(np.abs(v.cosine) <= 1.0):
        failures.append("cosine outside [-1, 1]")

    base = model.predict_probs(batch)
    padded = Batch(
        cand_tokens=batch.cand_tokens,
        prefix_chars=batch.prefix_chars,
        prefix_lens=batch.prefix_lens,
        prefix_tokens=batch.prefix_tokens,
        history=[
            np.concatenate(
                [h, np.zeros((h.shape[0], 2, h.shape[2]), dtype=h.dtype)], axis=1
            )
            for h in batch.history
        ],
        hist_counts=batch.hist_counts,
        popularity=batch.popularity,
        labels=batch.labels,
        groups=batch.groups,
    )
    if not np.allclose(model.predict_probs(padded), base, atol=1e-12):
        failures.append("pad-slot extension changes pooled output")

    _, bundle = _prepared(
        SynthConfig(preset="planted-it", n_users=8, events_per_user=10, n_categories=4)
    )
    stopper = build_variant(
        "hist",
        bundle.vocab.n_tokens,
        bundle.vocab.n_chars,
        seed=0,
        token_dim=8,
        char_dim=6,
        hidden=8,
        char_counts=(3, 4, 4),
        history_blocks=1,
        history_heads=2,
        encoder_blocks=1,
        encoder_heads=2,
        mlp=(8, 6),
    )
    # zero learning rate freezes metrics: one improving measurement, then
    # exactly `patience` stale ones
    state = train(
        stopper,
        bundle.vocab,
        bundle.counts,
        bundle.train_examples,
        bundle.valid_examples,
        bundle.valid_impressions,
        ExampleConfig(),
        TrainConfig(batch_size=16, eval_every=2, patience=3, peak_lr=0.0, seed=0),
    )
    if state.stopped != "early" or state.stale != 3 or len(state.history) != 4:
        failures.append(
            f"early stop fired at stale={state.stale} after "
            f"{len(state.history)} measurements (expected exactly patience=3 stale)"
        )

    _criterion(
        capsys,
        "invariant-suite",
        not failures,
        "attention sums, e >= 0, cosine bounds, pad extension, early stop all hold"
        if not failures
        else "; ".join(failures),
    )


def test_batching_equivalence(capsys):
    _, bundle = _prepared(
        SynthConfig(preset="planted-it", n_users=10, events_per_user=12, n_categories=5)
    )
    model = build_variant(
        "full", bundle.vocab.n_tokens, bundle.vocab.n_chars, seed=1, **EXPERIMENT_MODEL
    )
    snapshot = Snapshot(
        trie=bundle.trie,
        index=bundle.index,
        counts=TrieCounts(bundle.trie),
        model=model,
        vocab=bundle.vocab,
        lexicon=bundle.lexicon,
    )
    sessions = SessionStore()
    rng = np.random.default_rng(7)
    queries = sorted(bundle.counts)
    pairs = []
    while len(pairs) < 100:
        duo = []
        for _ in range(2):
            uid = f"u{rng.integers(40)}"
            for _ in range(int(rng.integers(0, 4))):
                sessions.record(uid, queries[rng.integers(len(queries))], KIND_QUERY)
            q = queries[rng.integers(len(queries))]
            prefix = q[: rng.integers(1, len(q) + 1)]
            if not mcg_topk(snapshot.index, snapshot.trie, prefix, 10):
                break
            duo.append((uid, prefix))
        if len(duo) == 2:
            pairs.append(tuple(duo))

    batcher = MicroBatcher(window_ms=25.0, max_batch=16)
    batched = SuggestService(
        snapshot, sessions=sessions, filter_enabled=False, batcher=batcher
    )
    solo = SuggestService(snapshot, sessions=sessions, filter_enabled=False)
    worst = 0.0
    try:
        for duo in pairs:
            outs = [None, None]

            def hit(slot, uid, prefix, barrier):
                barrier.wait()
                outs[slot] = batched.suggest(uid, prefix, k=10)

            gate = threading.Barrier(2)
            threads = [
                threading.Thread(target=hit, args=(s, uid, prefix, gate))
                for s, (uid, prefix) in enumerate(duo)
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            for out, (uid, prefix) in zip(outs, duo):
                ref = solo.suggest(uid, prefix, k=10)
                assert [s["query"] for s in out["suggestions"]] == [
                    s["query"] for s in ref["suggestions"]
                ]
                diffs = [
                    abs(a["score"] - b["score"])
                    for a, b in zip(out["suggestions"], ref["suggestions"])
                ]
                worst = max(worst, max(diffs, default=0.0))
        forwards = batcher.forwards
    finally:
        batched.close()
    ok = worst <= 1e-6 and forwards < 200
    _criterion(
        capsys,
        "batching-equivalence",
        ok,
        f"max |batched - sequential| score diff {worst:.2e} over 100 request "
        f"pairs (tol 1e-6); {forwards} forwards for 200 requests",
    )


def test_latency_bench(capsys, tmp_path):
    logs = str(tmp_path / "bench_logs.tsv")
    assert cli_main(["synth", "--out", logs, "--seed", "0"]) == 0
    _, bundle = _prepared(SynthConfig(), seed=0)
    model = build_variant(
        "full",
        bundle.vocab.n_tokens,
        bundle.vocab.n_chars,
        seed=0,
        token_dim=16,
        char_dim=8,
        hidden=32,
        char_counts=(8, 12, 12),
        history_blocks=2,
        history_heads=4,
        encoder_blocks=2,
        encoder_heads=2,
        mlp=(64, 32),
    )
    ck = str(tmp_path / "toy.ckpt")
    save_model(ck, model, bundle.vocab)
    rc = cli_main(["bench", "--logs", logs, "--checkpoint", ck])
    out = capsys.readouterr().out
    assert rc == 0, out
    p50 = float(re.search(r"p50_ms=([\d.]+)", out).group(1))
    p99 = float(re.search(r"p99_ms=([\d.]+)", out).group(1))
    ok = p50 < 50.0 and p99 < 200.0
    _criterion(
        capsys,
        "latency-bench",
        ok,
        f"toy checkpoint suggest p50 {p50:.2f}ms (< 50), p99 {p99:.2f}ms (< 200); "
        f"soft bound on shared hardware",
    )


def test_overfit_sanity(capsys):
    started = time.perf_counter()
    result, bundle = _prepared(
        SynthConfig(preset="planted-it", n_users=34, events_per_user=20), seed=0
    )
    n_pairs = len(bundle.train_examples)
    assert 1900 <= n_pairs <= 2100, n_pairs
    train_impressions = make_eval_impressions(
        result.records,
        result.split.train,
        bundle.trie,
        bundle.index,
        result.lexicon,
        ExampleConfig(),
        0,
        10,
        recorded_prefixes(result.truths),
    )
    model = build_variant(
        "full",
        bundle.vocab.n_tokens,
        bundle.vocab.n_chars,
        seed=0,
        **{**EXPERIMENT_MODEL, "mlp": (64, 32)},
    )
    # monitoring the train split makes best-checkpoint restoration and early
    # stopping measure memorization, which is the point here
    state = train(
        model,
        bundle.vocab,
        bundle.counts,
        bundle.train_examples,
        bundle.train_examples,
        train_impressions,
        ExampleConfig(),
        # small batches with a hot peak rate memorize fastest on one core:
        # train MRR crosses 0.95 around step 500 and plateaus near 0.99 by
        # 1500. Dual-signal stopping never fires here (train NLL keeps
        # creeping down during memorization), so the step cap is the budget
        TrainConfig(
            seed=0,
            batch_size=32,
            peak_lr=0.003,
            eval_every=100,
            patience=5,
            max_steps=2000,
            warmup_steps=100,
        ),
    )
    report, _ = evaluate_model(
        model, train_impressions, bundle.vocab, bundle.counts, ExampleConfig()
    )
    elapsed = time.perf_counter() - started
    ok = report.overall >= 0.95 and state.step <= 5000 and elapsed < 600.0
    _criterion(
        capsys,
        "overfit-sanity",
        ok,
        f"train-split mrr {report.overall:.4f} on {n_pairs} pairs after "
        f"{state.step} steps in {elapsed:.0f}s (>= 0.95 within 5000 steps, 600s)",
    )


def test_planted_ie_ordering(capsys):
    for seed in range(5):
        bundle = planted_bundle(PLANTED_IE, seed)
        single = sum(1 for i in bundle.test_impressions if len(i.prefix) == 1)
        frac = single / len(bundle.test_impressions)
        assert frac >= 0.30, f"seed {seed}: single-char prefix fraction {frac:.2f}"
    run = run_planted(PLANTED_IE, seeds=(0, 1, 2, 3, 4))
    means = run.summary()
    better = means["hist-charprefix"]["ie"][0]
    worse = means["hist"]["ie"][0]
    ok = better > worse
    _criterion(
        capsys,
        "planted-ie-ordering",
        ok,
        f"mean ie-slice mrr over 5 seeds: char-prefix variant {better:.4f} vs "
        f"token-prefix {worse:.4f} (margin {better - worse:+.4f})",
    )


def test_planted_it_ordering(capsys):
    started = time.perf_counter()
    run = run_planted(PLANTED_IT, seeds=(0, 1, 2, 3, 4))
    elapsed = time.perf_counter() - started
    means = run.summary()
    better = means["hist-evolve"]["it"][0]
    worse = means["hist"]["it"][0]
    gap = run.mean_mpc_gap("full")
    ok = better > worse and gap >= 0.20 and elapsed < 3600.0
    _criterion(
        capsys,
        "planted-it-ordering",
        ok,
        f"mean it-slice mrr over 5 seeds: evolution variant {better:.4f} vs "
        f"plain history {worse:.4f} (margin {better - worse:+.4f}); full over "
        f"matcher {gap:+.4f} overall (>= 0.20); {elapsed:.0f}s (< 3600)",
    )
