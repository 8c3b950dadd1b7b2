"""Candidate generation: frequency trie, suffix back-off, seen/unseen.

The trie materializes a frequency-ranked top-K completion list at every node,
so a lookup costs O(|prefix|). Back-off matching widens coverage for rare
prefixes: drop leading tokens one at a time, complete the retained suffix
against the background, and glue the dropped tokens back onto each completion
(which can synthesize strings that are not themselves background queries).

Ordering is deterministic everywhere: frequency descending, ties broken
lexicographically.
"""
from __future__ import annotations

import struct

MAGIC = b"QACTRIE"
VERSION = 1
DEFAULT_K = 64


class _Node:
    __slots__ = ("children", "top")

    def __init__(self):
        self.children: dict[str, _Node] = {}
        self.top: list[int] = []


class CompletionTrie:
    """Character trie over background queries with per-node top-K lists."""

    def __init__(self, k: int = DEFAULT_K):
        self.k = k
        self.root = _Node()
        self.queries: list[str] = []
        self.freqs: list[int] = []
        self._freq_of: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.queries)

    def frequency(self, query: str) -> int:
        return self._freq_of.get(query, 0)

    def is_seen(self, query: str) -> bool:
        return query in self._freq_of


def build_trie(pairs, k: int = DEFAULT_K) -> CompletionTrie:
    """Build from (query, frequency) pairs; duplicates are summed."""
    agg: dict[str, int] = {}
    for q, f in pairs:
        if q:
            agg[q] = agg.get(q, 0) + int(f)
    trie = CompletionTrie(k)
    # inserting in global rank order keeps every node's top list sorted for free
    for q in sorted(agg, key=lambda q: (-agg[q], q)):
        qid = len(trie.queries)
        trie.queries.append(q)
        trie.freqs.append(agg[q])
        trie._freq_of[q] = agg[q]
        node = trie.root
        if len(node.top) < k:
            node.top.append(qid)
        for ch in q:
            node = node.children.setdefault(ch, _Node())
            if len(node.top) < k:
                node.top.append(qid)
    return trie


def mpc_topk(trie: CompletionTrie, prefix: str, k: int) -> list[str]:
    """The k most frequent background queries extending the prefix."""
    if k > trie.k:
        raise ValueError(f"k={k} exceeds trie capacity K={trie.k}")
    node = trie.root
    for ch in prefix:
        node = node.children.get(ch)
        if node is None:
            return []
    return [trie.queries[i] for i in node.top[:k]]


class SuffixIndex:
    """Leading-token-tuple index over background queries.

    Maps every leading whitespace-segment tuple of a query to the ids of the
    queries extending it, in global rank order. Back-off matching works at
    whitespace-segment granularity; queries without internal spaces contribute
    a single key and never participate in back-off tiers.
    """

    def __init__(self):
        self._map: dict[tuple[str, ...], list[int]] = {}

    @classmethod
    def build(cls, trie: CompletionTrie) -> "SuffixIndex":
        index = cls()
        for qid, q in enumerate(trie.queries):
            segs = q.split(" ")
            for n in range(1, len(segs) + 1):
                index._map.setdefault(tuple(segs[:n]), []).append(qid)
        return index

    def complete(
        self, trie: CompletionTrie, tokens: tuple[str, ...], partial: str, limit: int
    ) -> list[tuple[str, int]]:
        """Background (query, freq) whose segments extend tokens then partial."""
        out: list[tuple[str, int]] = []
        depth = len(tokens)
        for qid in self._map.get(tokens, ()):
            q = trie.queries[qid]
            segs = q.split(" ")
            if len(segs) <= depth:
                continue
            if partial and not segs[depth].startswith(partial):
                continue
            out.append((q, trie.freqs[qid]))
            if len(out) >= limit:
                break
        return out


def _split_prefix(prefix: str) -> tuple[list[str], str]:
    if prefix.endswith(" "):
        return prefix.split(), ""
    parts = prefix.split(" ")
    return parts[:-1], parts[-1]


def mcg_topk(index: SuffixIndex, trie: CompletionTrie, prefix: str, k: int) -> list[str]:
    """Trie completions first, then back-off tiers dropping leading tokens.

    Each tier's matches are re-prefixed with the dropped tokens, deduped
    against earlier tiers, and ranked by background frequency within the tier.
    """
    out = list(mpc_topk(trie, prefix, k))
    if len(out) >= k:
        return out
    seen = set(out)
    complete, partial = _split_prefix(prefix)
    # longest retained suffix first: drop 1 leading token, then 2, ...
    for drop in range(1, len(complete) + 1):
        if len(out) >= k:
            break
        retained = tuple(complete[drop:])
        dropped = " ".join(complete[:drop])
        if retained:
            matches = index.complete(trie, retained, partial, limit=k * 4)
        elif partial:
            # only the partial token remains: complete it from the trie
            matches = [(q, trie.frequency(q)) for q in mpc_topk(trie, partial, k)]
        else:
            break
        for q, _f in matches:
            cand = f"{dropped} {q}"
            if cand not in seen:
                seen.add(cand)
                out.append(cand)
                if len(out) >= k:
                    break
    return out


def is_seen(trie: CompletionTrie, query: str) -> bool:
    return trie.is_seen(query)


def save_trie(path: str, trie: CompletionTrie) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BI", VERSION, trie.k))
        f.write(struct.pack("<I", len(trie.queries)))
        for q, freq in zip(trie.queries, trie.freqs):
            qb = q.encode("utf-8")
            f.write(struct.pack("<H", len(qb)))
            f.write(qb)
            f.write(struct.pack("<Q", freq))
        _write_node(f, trie.root)


def _write_node(f, node: _Node) -> None:
    f.write(struct.pack("<H", len(node.top)))
    for qid in node.top:
        f.write(struct.pack("<I", qid))
    f.write(struct.pack("<H", len(node.children)))
    for ch in sorted(node.children):
        f.write(struct.pack("<I", ord(ch)))
        _write_node(f, node.children[ch])


def load_trie(path: str) -> CompletionTrie:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError("not a trie snapshot")
        version, k = struct.unpack("<BI", f.read(5))
        if version != VERSION:
            raise ValueError(f"unsupported trie snapshot version {version}")
        trie = CompletionTrie(k)
        (n,) = struct.unpack("<I", f.read(4))
        for _ in range(n):
            (qlen,) = struct.unpack("<H", f.read(2))
            q = f.read(qlen).decode("utf-8")
            (freq,) = struct.unpack("<Q", f.read(8))
            trie.queries.append(q)
            trie.freqs.append(freq)
            trie._freq_of[q] = freq
        trie.root = _read_node(f)
    return trie


def _read_node(f) -> _Node:
    node = _Node()
    (ntop,) = struct.unpack("<H", f.read(2))
    for _ in range(ntop):
        (qid,) = struct.unpack("<I", f.read(4))
        node.top.append(qid)
    (nch,) = struct.unpack("<H", f.read(2))
    for _ in range(nch):
        (cp,) = struct.unpack("<I", f.read(4))
        node.children[chr(cp)] = _read_node(f)
    return node
