"""Session store, history filtering, micro-batching, and the HTTP surface."""
import json
import threading
import time
import urllib.error
import urllib.request

import numpy as np
import pytest

from qac.corpus import (
    KIND_CLICK,
    KIND_QUERY,
    BehaviorSequence,
    CategoryLexicon,
    ConfigError,
    ExampleConfig,
)
from qac.data import prepare
from qac.evaluate import model_ranker
from qac.model import build_variant, save_model
from qac.service import (
    MicroBatcher,
    ServiceUnavailable,
    SessionStore,
    Snapshot,
    SuggestService,
    TrieCounts,
    filter_history,
    load_snapshot,
    make_server,
)
from qac.synth import SynthConfig, recorded_prefixes, synth_corpus
from qac.trie import SuffixIndex, build_trie, mcg_topk, save_trie

SMALL_MODEL = dict(
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


def seqs(queries=(), items=()):
    return [
        BehaviorSequence(KIND_QUERY, list(queries)),
        BehaviorSequence(KIND_CLICK, list(items)),
    ]


def tiny_snapshot(pairs=None, variant="full", with_model=True):
    pairs = pairs or [
        ("led lamp", 30),
        ("led lamp white", 20),
        ("led strip", 10),
        ("wool sock", 25),
        ("wool hat", 5),
    ]
    trie = build_trie(pairs)
    vocab = None
    model = None
    if with_model:
        from qac.text import Vocab

        vocab = Vocab.build([q for q, _ in pairs])
        model = build_variant(
            variant, vocab.n_tokens, vocab.n_chars, seed=5, **SMALL_MODEL
        )
    return Snapshot(
        trie=trie,
        index=SuffixIndex.build(trie),
        counts=TrieCounts(trie),
        model=model,
        vocab=vocab,
    )


def test_session_store_caps_and_eviction():
    store = SessionStore(query_cap=3, item_cap=2)
    for i in range(5):
        store.record("u", f"q{i}", "query")
    store.record("u", "item one", "item")
    store.record("u", "item two", "item")
    store.record("u", "item three", "item")
    qs, items = store.history("u")
    assert qs.items == ["q2", "q3", "q4"]  # oldest evicted first
    assert items.items == ["item two", "item three"]
    assert store.history("ghost")[0].items == []


def test_session_store_rejects_bad_input():
    store = SessionStore()
    with pytest.raises(ValueError):
        store.record("u", "text", "purchase")
    with pytest.raises(ValueError):
        store.record("u", "  !!  ", "query")


def test_session_store_concurrent_users_stay_isolated():
    store = SessionStore()

    def hammer(uid):
        for i in range(50):
            store.record(uid, f"{uid} q{i}", "query")

    threads = [threading.Thread(target=hammer, args=(f"u{j}",)) for j in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for j in range(4):
        got = store.history(f"u{j}")[0].items
        assert got == [f"u{j} q{i}" for i in range(40, 50)]  # cap 10, in order


def test_session_store_persistence_round_trip(tmp_path):
    store = SessionStore()
    store.record("u", "led lamp", "query")
    store.record("u", "led bulb", "item")
    path = tmp_path / "sessions.json"
    store.save(str(path))
    fresh = SessionStore()
    fresh.load(str(path))
    assert [s.items for s in fresh.history("u")] == [["led lamp"], ["led bulb"]]


def test_filter_history_keeps_token_overlap_and_fills_by_recency():
    history = seqs(queries=["led lamp", "wool sock"], items=[])
    got = filter_history(history, "led")
    # only one related element survives, so recency fallback kicks in
    assert [s.items for s in got] == [["led lamp", "wool sock"], []]
    history = seqs(queries=["led lamp", "led strip", "led bulb", "wool sock"])
    got = filter_history(history, "led")
    assert got[0].items == ["led lamp", "led strip", "led bulb"]


def test_filter_history_no_overlap_falls_back_to_recent_three():
    history = seqs(
        queries=["a1", "a2", "a3", "a4", "a5"], items=["b1", "b2", "b3", "b4"]
    )
    got = filter_history(history, "zzz")
    assert [s.items for s in got] == [["a3", "a4", "a5"], ["b2", "b3", "b4"]]


def test_filter_history_stopwords_do_not_count_as_overlap():
    history = seqs(queries=["the lamp", "the sock", "the hat", "the rug"])
    got = filter_history(history, "the led")
    # "the" alone relates nothing: fallback returns the most recent 3
    assert got[0].items == ["the sock", "the hat", "the rug"]


def test_filter_history_uses_lexicon_categories():
    lex = CategoryLexicon(
        cores={"led lamp": "lighting", "halogen spot": "lighting"}, modifiers=[]
    )
    history = seqs(queries=["halogen spot", "wool sock", "plain noise", "x", "y"])
    got = filter_history(history, "led lamp", lex)
    # category match alone leaves < 3 survivors, so recency fallback wins
    assert got[0].items == ["plain noise", "x", "y"]
    history = seqs(
        queries=["halogen spot", "led lamp on sale", "led lamp", "wool sock"]
    )
    got = filter_history(history, "led lamp", lex)
    assert got[0].items == ["halogen spot", "led lamp on sale", "led lamp"]


def test_filter_history_preserves_relative_order():
    history = seqs(queries=["led a", "wool", "led b", "led c", "led d"])
    got = filter_history(history, "led")
    assert got[0].items == ["led a", "led b", "led c", "led d"]


def test_suggest_basic_contract():
    service = SuggestService(tiny_snapshot(), default_k=2)
    out = service.suggest("fresh-user", "led", k=2)
    assert len(out["suggestions"]) == 2
    scores = [s["score"] for s in out["suggestions"]]
    assert scores == sorted(scores, reverse=True)
    assert all(0.0 < s < 1.0 for s in scores)
    assert all(s["query"].startswith("led") for s in out["suggestions"])
    assert out["variant"] == "full"
    assert out["latency_ms"] >= 0.0


def test_suggest_k_larger_than_candidates_returns_all():
    service = SuggestService(tiny_snapshot())
    out = service.suggest("u", "wool", k=50)
    assert {s["query"] for s in out["suggestions"]} == {"wool sock", "wool hat"}


def test_suggest_no_candidates_status():
    out = SuggestService(tiny_snapshot()).suggest("u", "zzz", k=3)
    assert out["suggestions"] == []
    assert out["status"] == "no-candidates"


def test_suggest_rejects_empty_prefix_and_bad_k():
    service = SuggestService(tiny_snapshot())
    with pytest.raises(ValueError):
        service.suggest("u", "   ", k=3)
    with pytest.raises(ValueError):
        service.suggest("u", "led", k=0)


def test_suggest_without_model_is_unavailable():
    service = SuggestService(tiny_snapshot(with_model=False))
    with pytest.raises(ServiceUnavailable):
        service.suggest("u", "led", k=3)


def test_click_then_suggest_sees_longer_history():
    service = SuggestService(tiny_snapshot())
    before = service.suggest("u", "led", k=3)
    service.record_click("u", "led lamp", "query")
    assert service.sessions.history("u")[0].items == ["led lamp"]
    after = service.suggest("u", "led", k=3)
    assert len(after["suggestions"]) == len(before["suggestions"])


def test_debug_payload_reports_view_mix_and_cosine():
    service = SuggestService(tiny_snapshot(variant="full"))
    service.record_click("u", "led lamp", "query")
    service.record_click("u", "led bulb", "item")
    out = service.suggest("u", "led", k=2, debug=True)
    dbg = out["debug"]
    assert len(dbg["alpha_e"]) == len(out["suggestions"])
    for row in dbg["alpha_e"]:
        assert abs(sum(row) - 1.0) < 1e-9
    assert all(-1.0 <= c <= 1.0 for c in dbg["cosine"])
    plain = SuggestService(tiny_snapshot(variant="hist"))
    got = plain.suggest("u", "led", k=2, debug=True)
    assert got["debug"] == {"alpha_e": None, "cosine": None}


def test_suggest_matches_offline_ranking_on_replayed_impressions():
    cfg = SynthConfig(preset="planted-it", n_users=6, events_per_user=10, n_categories=4)
    res = synth_corpus(cfg, 9)
    bundle = prepare(
        res.records,
        res.split,
        res.lexicon,
        ExampleConfig(),
        seed=9,
        recorded=recorded_prefixes(res.truths),
    )
    model = build_variant(
        "full", bundle.vocab.n_tokens, bundle.vocab.n_chars, seed=3, **SMALL_MODEL
    )
    snap = Snapshot(
        trie=bundle.trie,
        index=bundle.index,
        counts=TrieCounts(bundle.trie),
        model=model,
        vocab=bundle.vocab,
    )
    service = SuggestService(snap, m=10, filter_enabled=False)
    rank = model_ranker(model, bundle.vocab, snap.counts, ExampleConfig())
    checked = 0
    for imp in bundle.test_impressions[:25]:
        service.sessions = SessionStore()
        for kind, texts in zip((KIND_QUERY, KIND_CLICK), imp.history_texts):
            for t in texts:
                service.sessions.record("u", t, kind)
        got = service.suggest("u", imp.prefix, k=10)
        served = [s["query"] for s in got["suggestions"]]
        want = rank(imp)[: len(served)]
        cands = mcg_topk(bundle.index, bundle.trie, imp.prefix, 10)
        if cands == imp.candidates:  # same matcher inputs → same ranking
            assert served == want
            checked += 1
    assert checked >= 10


def test_snapshot_swap_changes_served_variant():
    service = SuggestService(tiny_snapshot(variant="hist"))
    assert service.suggest("u", "led", k=1)["variant"] == "hist"
    service.swap(tiny_snapshot(variant="full"))
    assert service.suggest("u", "led", k=1)["variant"] == "full"


def test_load_snapshot_refuses_variant_mismatch(tmp_path):
    snap = tiny_snapshot(variant="hist")
    ckpt = tmp_path / "model.ckpt"
    trie_path = tmp_path / "trie.bin"
    save_model(str(ckpt), snap.model, snap.vocab)
    save_trie(str(trie_path), snap.trie)
    loaded = load_snapshot(str(ckpt), str(trie_path), expect_variant="hist")
    assert loaded.variant == "hist"
    assert loaded.model is not None
    with pytest.raises(ConfigError):
        load_snapshot(str(ckpt), str(trie_path), expect_variant="full")
    bare = load_snapshot(None, str(trie_path))
    assert bare.model is None


def test_micro_batcher_merges_concurrent_requests():
    snap = tiny_snapshot()
    batcher = MicroBatcher(window_ms=40.0, max_batch=8)
    try:
        service = SuggestService(snap, batcher=batcher)
        results = {}

        def call(uid, prefix):
            results[uid] = service.suggest(uid, prefix, k=3)

        threads = [
            threading.Thread(target=call, args=(f"u{i}", p))
            for i, p in enumerate(["led", "led lamp", "wool"])
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert batcher.forwards == 1  # all three fit one window
        assert len(results) == 3
    finally:
        batcher.close()


def test_micro_batcher_matches_sequential_scores():
    snap = tiny_snapshot()
    batcher = MicroBatcher(window_ms=25.0, max_batch=16)
    try:
        batched = SuggestService(snap, batcher=batcher, filter_enabled=False)
        solo = SuggestService(snap, filter_enabled=False)
        prefixes = ["led", "led lamp", "wool", "led strip", "wool h"]
        outs = [None] * len(prefixes)

        def call(i):
            outs[i] = batched.suggest(f"u{i}", prefixes[i], k=5)

        threads = [threading.Thread(target=call, args=(i,)) for i in range(len(prefixes))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for i, prefix in enumerate(prefixes):
            want = solo.suggest(f"u{i}", prefix, k=5)
            assert [s["query"] for s in outs[i]["suggestions"]] == [
                s["query"] for s in want["suggestions"]
            ]
            for a, b in zip(outs[i]["suggestions"], want["suggestions"]):
                assert abs(a["score"] - b["score"]) < 1e-6
    finally:
        batcher.close()


def test_micro_batcher_overflow_launches_immediately():
    snap = tiny_snapshot()
    batcher = MicroBatcher(window_ms=30.0, max_batch=2)
    try:
        service = SuggestService(snap, batcher=batcher)
        threads = [
            threading.Thread(target=service.suggest, args=(f"u{i}", "led", 2))
            for i in range(4)
        ]
        start = time.perf_counter()
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert batcher.forwards >= 2  # 4 requests cannot fit one batch of 2
        assert time.perf_counter() - start < 5.0
    finally:
        batcher.close()


def test_micro_batcher_rejects_bad_config():
    with pytest.raises(ConfigError):
        MicroBatcher(window_ms=-1.0)
    with pytest.raises(ConfigError):
        MicroBatcher(max_batch=0)


@pytest.fixture()
def http_service():
    service = SuggestService(tiny_snapshot(), default_k=3)
    server = make_server(service)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    try:
        yield base
    finally:
        server.shutdown()
        server.server_close()


def _get(url):
    with urllib.request.urlopen(url, timeout=10) as resp:
        return resp.status, json.loads(resp.read().decode("utf-8"))


def _post(url, payload):
    req = urllib.request.Request(
        url,
        data=json.dumps(payload).encode("utf-8"),
        headers={"Content-Type": "application/json"},
        method="POST",
    )
    with urllib.request.urlopen(req, timeout=10) as resp:
        return resp.status, json.loads(resp.read().decode("utf-8"))


def test_http_health_and_suggest_round_trip(http_service):
    status, health = _get(f"{http_service}/health")
    assert status == 200
    assert health == {"status": "ok", "model_loaded": True, "trie_queries": 5}
    status, out = _get(f"{http_service}/suggest?uid=u1&prefix=led&k=2")
    assert status == 200
    assert len(out["suggestions"]) == 2
    assert out["variant"] == "full"
    status, out = _get(f"{http_service}/suggest?uid=u1&prefix=led&k=1&debug=1")
    assert "debug" in out


def test_http_click_feeds_history(http_service):
    status, ack = _post(
        f"{http_service}/click", {"uid": "u9", "text": "led lamp", "kind": "query"}
    )
    assert status == 200
    assert ack == {"status": "ok"}
    status, out = _get(f"{http_service}/suggest?uid=u9&prefix=led")
    assert status == 200
    assert out["suggestions"]


def test_http_error_shapes(http_service):
    with pytest.raises(urllib.error.HTTPError) as err:
        _get(f"{http_service}/suggest?uid=u&prefix=%20%20")
    assert err.value.code == 400
    body = json.loads(err.value.read().decode("utf-8"))
    assert body["code"] == 400 and "error" in body
    with pytest.raises(urllib.error.HTTPError) as err:
        _get(f"{http_service}/nope")
    assert err.value.code == 404
    with pytest.raises(urllib.error.HTTPError) as err:
        _post(f"{http_service}/click", {"uid": "u", "text": "x", "kind": "weird"})
    assert err.value.code == 400
    with pytest.raises(urllib.error.HTTPError) as err:
        _post(f"{http_service}/click", {"uid": "u"})
    assert err.value.code == 400


def test_http_cors_headers_for_browser_clients(http_service):
    with urllib.request.urlopen(f"{http_service}/health", timeout=10) as resp:
        assert resp.headers["Access-Control-Allow-Origin"] == "*"
    req = urllib.request.Request(f"{http_service}/click", method="OPTIONS")
    with urllib.request.urlopen(req, timeout=10) as resp:
        assert resp.status == 204
        assert resp.headers["Access-Control-Allow-Origin"] == "*"
        assert "POST" in resp.headers["Access-Control-Allow-Methods"]
        assert "Content-Type" in resp.headers["Access-Control-Allow-Headers"]
