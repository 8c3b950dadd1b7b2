"""Online suggest service.

Holds per-user behavior sequences, filters them against the live prefix,
scores matcher candidates with the ranking model in micro-batches, and fronts
the whole thing with a small JSON-over-HTTP server. Model, trie, and counts
travel together in one immutable snapshot so a checkpoint swap can never pair
an old trie with a new model.
"""
from __future__ import annotations

import json
import threading
import time
from collections import deque
from concurrent.futures import Future
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from queue import Empty, Queue
from urllib.parse import parse_qs, urlparse

import numpy as np

from .corpus import (
    KIND_CLICK,
    KIND_QUERY,
    BehaviorSequence,
    CategoryLexicon,
    ConfigError,
    EvalImpression,
    ExampleConfig,
)
from .data import Batch, impression_batch, merge_batches
from .evaluate import order_candidates
from .model import IntentModel, load_model
from .text import Vocab, normalize_prefix, normalize_query, tokenize
from .trie import CompletionTrie, SuffixIndex, load_trie, mcg_topk

STOPWORDS = frozenset(
    "a an and are as at be by for from in is it of on or the to with".split()
)

KIND_ALIASES = {
    "query": KIND_QUERY,
    KIND_QUERY: KIND_QUERY,
    "item": KIND_CLICK,
    KIND_CLICK: KIND_CLICK,
}


class ServiceUnavailable(RuntimeError):
    """Raised when scoring is requested before a model snapshot is loaded."""


class TrieCounts:
    """Read-only mapping view over trie frequencies, for popularity features."""

    def __init__(self, trie: CompletionTrie):
        self._trie = trie

    def get(self, key: str, default: int = 0) -> int:
        f = self._trie.frequency(key)
        return f if f > 0 else default


@dataclass(frozen=True)
class Snapshot:
    """One immutable model+matcher pairing served atomically."""

    trie: CompletionTrie
    index: SuffixIndex
    counts: TrieCounts
    model: IntentModel | None = None
    vocab: Vocab | None = None
    lexicon: CategoryLexicon | None = None
    ex_cfg: ExampleConfig = field(default_factory=ExampleConfig)

    @property
    def variant(self) -> str | None:
        return self.model.cfg.variant if self.model is not None else None


def load_snapshot(
    checkpoint_path: str | None,
    trie_path: str,
    lexicon_path: str | None = None,
    expect_variant: str | None = None,
    ex_cfg: ExampleConfig | None = None,
) -> Snapshot:
    """Load trie and (optionally) checkpoint from disk as one snapshot.

    A checkpoint whose stored variant differs from expect_variant is refused
    rather than silently served.
    """
    trie = load_trie(trie_path)
    model = vocab = None
    if checkpoint_path:
        model, vocab = load_model(checkpoint_path)
        if expect_variant and model.cfg.variant != expect_variant:
            raise ConfigError(
                f"checkpoint holds variant {model.cfg.variant!r}, "
                f"service configured for {expect_variant!r}"
            )
    lexicon = CategoryLexicon.load(lexicon_path) if lexicon_path else None
    return Snapshot(
        trie=trie,
        index=SuffixIndex.build(trie),
        counts=TrieCounts(trie),
        model=model,
        vocab=vocab,
        lexicon=lexicon,
        ex_cfg=ex_cfg or ExampleConfig(),
    )


class SessionStore:
    """Bounded per-user behavior sequences with recency eviction.

    A single lock serializes mutation, so each user's sequence order matches
    arrival order; reads hand back copies, never live deques.
    """

    def __init__(self, query_cap: int = 10, item_cap: int = 15):
        self.caps = {KIND_QUERY: query_cap, KIND_CLICK: item_cap}
        self._users: dict[str, dict[str, deque[str]]] = {}
        self._lock = threading.Lock()

    def record(self, user_id: str, text: str, kind: str) -> None:
        canonical = KIND_ALIASES.get(kind)
        if canonical is None:
            raise ValueError(f"unknown behavior kind {kind!r}")
        norm = normalize_query(text)
        if not norm:
            raise ValueError("empty text after normalization")
        with self._lock:
            views = self._users.setdefault(
                user_id,
                {k: deque(maxlen=cap) for k, cap in self.caps.items()},
            )
            views[canonical].append(norm)

    def history(self, user_id: str) -> list[BehaviorSequence]:
        """Per-view sequences, oldest first, in model view order."""
        with self._lock:
            views = self._users.get(user_id)
            return [
                BehaviorSequence(kind, list(views[kind]) if views else [])
                for kind in (KIND_QUERY, KIND_CLICK)
            ]

    def save(self, path: str) -> None:
        with self._lock:
            blob = {
                uid: {k: list(v) for k, v in views.items()}
                for uid, views in self._users.items()
            }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(blob, f, sort_keys=True)

    def load(self, path: str) -> None:
        with open(path, encoding="utf-8") as f:
            blob = json.load(f)
        with self._lock:
            for uid, views in blob.items():
                store = self._users.setdefault(
                    uid, {k: deque(maxlen=cap) for k, cap in self.caps.items()}
                )
                for kind, items in views.items():
                    store[kind].extend(items)


def filter_history(
    history: list[BehaviorSequence],
    prefix: str,
    lexicon: CategoryLexicon | None = None,
) -> list[BehaviorSequence]:
    """Keep history related to the prefix; recency fallback when too little.

    Related means sharing a non-stopword token with the prefix or sharing a
    lexicon category. Fewer than 3 survivors in total reverts every view to
    its 3 most recent elements. Relative order is always preserved.
    """
    ptoks = {t for t in tokenize(prefix) if t not in STOPWORDS}
    pcats = lexicon.categories_of(prefix) if lexicon else set()

    def related(text: str) -> bool:
        if ptoks & {t for t in tokenize(text) if t not in STOPWORDS}:
            return True
        return bool(pcats and lexicon and pcats & lexicon.categories_of(text))

    kept = [
        BehaviorSequence(seq.kind, [t for t in seq.items if related(t)])
        for seq in history
    ]
    if sum(len(seq.items) for seq in kept) < 3:
        return [BehaviorSequence(seq.kind, seq.items[-3:]) for seq in history]
    return kept


@dataclass
class _Pending:
    snap: Snapshot
    batch: Batch
    future: Future


class MicroBatcher:
    """Single-consumer queue merging near-simultaneous scoring requests.

    Requests landing within window_ms of the first one are scored in a single
    forward pass, capped at max_batch; results match solo scoring.
    """

    def __init__(self, window_ms: float = 5.0, max_batch: int = 32):
        if window_ms < 0 or max_batch < 1:
            raise ConfigError("window_ms must be >= 0 and max_batch >= 1")
        self.window = window_ms / 1000.0
        self.max_batch = max_batch
        self.forwards = 0  # forward passes launched, visible for tests
        self._queue: Queue = Queue()
        self._stop = object()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def submit(self, snap: Snapshot, batch: Batch) -> Future:
        fut: Future = Future()
        self._queue.put(_Pending(snap, batch, fut))
        return fut

    def close(self) -> None:
        self._queue.put(self._stop)
        self._thread.join(timeout=5)

    def _loop(self) -> None:
        while True:
            first = self._queue.get()
            if first is self._stop:
                return
            group = [first]
            deadline = time.perf_counter() + self.window
            closing = False
            while len(group) < self.max_batch:
                remaining = deadline - time.perf_counter()
                if remaining <= 0:
                    break
                try:
                    item = self._queue.get(timeout=remaining)
                except Empty:
                    break
                if item is self._stop:
                    closing = True
                    break
                group.append(item)
            self._score(group)
            if closing:
                return

    def _score(self, group: list[_Pending]) -> None:
        # one forward per distinct snapshot keeps model/trie pairing atomic
        by_snap: dict[int, list[_Pending]] = {}
        for p in group:
            by_snap.setdefault(id(p.snap), []).append(p)
        for subset in by_snap.values():
            try:
                merged = merge_batches([p.batch for p in subset])
                probs = subset[0].snap.model.predict_probs(merged)
                self.forwards += 1
                offset = 0
                for p in subset:
                    n = len(p.batch)
                    p.future.set_result(probs[offset : offset + n].copy())
                    offset += n
            except Exception as exc:
                for p in subset:
                    if not p.future.done():
                        p.future.set_exception(exc)


class SuggestService:
    """Ties sessions, matcher, model, and batcher into the suggest operation."""

    def __init__(
        self,
        snapshot: Snapshot,
        sessions: SessionStore | None = None,
        m: int = 10,
        default_k: int = 5,
        filter_enabled: bool = True,
        batcher: MicroBatcher | None = None,
    ):
        self.snapshot = snapshot
        self.sessions = sessions or SessionStore()
        self.m = m
        self.default_k = default_k
        self.filter_enabled = filter_enabled
        self.batcher = batcher

    def swap(self, snapshot: Snapshot) -> None:
        """Replace the served snapshot; in-flight requests keep the old one."""
        self.snapshot = snapshot

    def close(self) -> None:
        if self.batcher is not None:
            self.batcher.close()

    def suggest(
        self, user_id: str, prefix: str, k: int | None = None, debug: bool = False
    ) -> dict:
        started = time.perf_counter()
        snap = self.snapshot
        norm = normalize_prefix(prefix)
        if not norm:
            raise ValueError("prefix is empty after normalization")
        if k is None:
            k = self.default_k
        if k < 1:
            raise ValueError("k must be positive")
        if snap.model is None or snap.vocab is None:
            raise ServiceUnavailable("no model checkpoint loaded")
        response: dict = {"variant": snap.variant}
        candidates = mcg_topk(snap.index, snap.trie, norm, self.m)
        if not candidates:
            response["suggestions"] = []
            response["status"] = "no-candidates"
        else:
            history = self.sessions.history(user_id)
            if self.filter_enabled:
                history = filter_history(history, norm, snap.lexicon)
            imp = EvalImpression(
                user_id=user_id,
                timestamp=0,
                prefix=norm,
                clicked="",
                candidates=candidates,
                history_texts=[seq.items for seq in history],
                ie=False,
                it=False,
                seen=False,
            )
            batch = impression_batch(imp, snap.vocab, snap.counts, snap.ex_cfg)
            if self.batcher is not None:
                probs = self.batcher.submit(snap, batch).result()
            else:
                probs = snap.model.predict_probs(batch)
            by_prob = dict(zip(candidates, probs))
            ranked = order_candidates(candidates, probs, snap.counts)[:k]
            response["suggestions"] = [
                {"query": c, "score": float(by_prob[c])} for c in ranked
            ]
            if debug:
                vectors = snap.model.inspect(batch)
                pos = {c: i for i, c in enumerate(candidates)}
                if vectors.alpha_e is not None:
                    alpha = vectors.alpha_e
                    cos = vectors.cosine.reshape(-1)
                    response["debug"] = {
                        "alpha_e": [[float(x) for x in alpha[pos[c]]] for c in ranked],
                        "cosine": [float(cos[pos[c]]) for c in ranked],
                    }
                else:
                    response["debug"] = {"alpha_e": None, "cosine": None}
        response["latency_ms"] = round((time.perf_counter() - started) * 1000.0, 3)
        return response

    def record_click(self, user_id: str, text: str, kind: str) -> dict:
        self.sessions.record(user_id, text, kind)
        return {"status": "ok"}

    def health(self) -> dict:
        snap = self.snapshot
        return {
            "status": "ok",
            "model_loaded": snap.model is not None,
            "trie_queries": len(snap.trie),
        }


class _Handler(BaseHTTPRequestHandler):
    service: SuggestService  # injected by make_server

    def log_message(self, fmt: str, *args) -> None:  # keep test output quiet
        pass

    def _send(self, code: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        # browser demo pages run on a different origin than the service
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def do_OPTIONS(self) -> None:
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.end_headers()

    def _error(self, code: int, message: str) -> None:
        self._send(code, {"error": message, "code": code})

    def do_GET(self) -> None:
        url = urlparse(self.path)
        params = {k: v[-1] for k, v in parse_qs(url.query).items()}
        try:
            if url.path == "/health":
                self._send(200, self.service.health())
            elif url.path == "/suggest":
                k = int(params["k"]) if "k" in params else None
                out = self.service.suggest(
                    user_id=params.get("uid", ""),
                    prefix=params.get("prefix", ""),
                    k=k,
                    debug=params.get("debug", "") in ("1", "true"),
                )
                self._send(200, out)
            else:
                self._error(404, "unknown path")
        except (ValueError, ConfigError) as exc:
            self._error(400, str(exc))
        except ServiceUnavailable as exc:
            self._error(503, str(exc))

    def do_POST(self) -> None:
        if urlparse(self.path).path != "/click":
            self._error(404, "unknown path")
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length).decode("utf-8"))
            out = self.service.record_click(
                user_id=str(payload["uid"]),
                text=str(payload["text"]),
                kind=str(payload["kind"]),
            )
            self._send(200, out)
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            self._error(400, f"bad click payload: {exc}")


def make_server(
    service: SuggestService, host: str = "127.0.0.1", port: int = 0
) -> ThreadingHTTPServer:
    """Build the HTTP server; caller runs serve_forever or a thread."""
    handler = type("BoundHandler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server
