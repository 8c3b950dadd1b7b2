import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qac.trie import (
    CompletionTrie,
    SuffixIndex,
    build_trie,
    is_seen,
    load_trie,
    mcg_topk,
    mpc_topk,
    save_trie,
)


def brute_topk(pairs: dict[str, int], prefix: str, k: int) -> list[str]:
    """Oracle: linear scan, frequency desc then lexicographic."""
    hits = [(q, f) for q, f in pairs.items() if q.startswith(prefix)]
    hits.sort(key=lambda qf: (-qf[1], qf[0]))
    return [q for q, _ in hits[:k]]


def test_build_frequency_order():
    trie = build_trie({"abc": 2, "abd": 1}.items(), k=8)
    assert mpc_topk(trie, "ab", 2) == ["abc", "abd"]


def test_build_lexicographic_ties():
    trie = build_trie({"abd": 1, "abc": 1}.items(), k=8)
    assert mpc_topk(trie, "ab", 2) == ["abc", "abd"]


def test_empty_input():
    trie = build_trie([], k=8)
    assert mpc_topk(trie, "", 5) == []
    assert len(trie) == 0


def test_absent_prefix():
    trie = build_trie({"abc": 1}.items(), k=8)
    assert mpc_topk(trie, "zz", 3) == []


def test_k_exceeds_capacity():
    trie = build_trie({"a": 1}.items(), k=4)
    with pytest.raises(ValueError):
        mpc_topk(trie, "a", 5)


def test_duplicates_summed():
    trie = build_trie([("q", 2), ("q", 3)], k=4)
    assert trie.frequency("q") == 5


def test_is_seen_exact():
    trie = build_trie({"led bulb": 3}.items(), k=4)
    assert is_seen(trie, "led bulb")
    assert not is_seen(trie, "led bulbs")
    assert not is_seen(trie, "led")


def test_topk_prefix_stability():
    pairs = {f"w{i}": i + 1 for i in range(20)}
    trie = build_trie(pairs.items(), k=32)
    small = mpc_topk(trie, "w", 5)
    big = mpc_topk(trie, "w", 12)
    assert big[:5] == small


def test_matches_brute_force_random():
    rng = np.random.default_rng(0)
    words = ["a", "ab", "abc", "b", "ba", "bc", "ca", "cab", "c"]
    pairs = {w: int(rng.integers(1, 50)) for w in words}
    trie = build_trie(pairs.items(), k=16)
    for prefix in ["", "a", "ab", "abc", "abcd", "b", "c", "z"]:
        for k in (1, 3, 9):
            assert mpc_topk(trie, prefix, k) == brute_topk(pairs, prefix, k)


def test_mcg_no_backoff_when_trie_suffices():
    pairs = {"led bulb": 5, "led lamp": 3, "led strip": 2}
    trie = build_trie(pairs.items(), k=16)
    index = SuffixIndex.build(trie)
    assert mcg_topk(index, trie, "led ", 3) == mpc_topk(trie, "led ", 3)


def test_mcg_single_backoff_reprefixes_dropped_token():
    pairs = {"x y zebra": 5, "x y zoo": 3}
    trie = build_trie(pairs.items(), k=16)
    index = SuffixIndex.build(trie)
    out = mcg_topk(index, trie, "w x y z", 4)
    assert out == ["w x y zebra", "w x y zoo"]


def test_mcg_partial_token_must_extend():
    pairs = {"x yellow": 4, "x orange": 9}
    trie = build_trie(pairs.items(), k=16)
    index = SuffixIndex.build(trie)
    out = mcg_topk(index, trie, "w x y", 4)
    # "x orange" does not extend partial token "y" despite higher frequency
    assert out == ["w x yellow"]


def test_mcg_tier_order_and_dedupe():
    pairs = {"a b c1": 9, "b c1": 50, "b c2": 40}
    trie = build_trie(pairs.items(), k=16)
    index = SuffixIndex.build(trie)
    out = mcg_topk(index, trie, "a b c", 4)
    # tier 0 (full prefix) first despite lower frequency; back-off fills rest
    assert out[0] == "a b c1"
    assert "a b c2" in out
    assert len(out) == len(set(out))


def test_mcg_trailing_space_completes_next_token():
    pairs = {"y zebra": 5, "y zoo": 7}
    trie = build_trie(pairs.items(), k=16)
    index = SuffixIndex.build(trie)
    out = mcg_topk(index, trie, "w y ", 4)
    assert out == ["w y zoo", "w y zebra"]


def test_mcg_last_resort_completes_partial_alone():
    pairs = {"zebra": 5}
    trie = build_trie(pairs.items(), k=16)
    index = SuffixIndex.build(trie)
    out = mcg_topk(index, trie, "qq rr ze", 4)
    assert out == ["qq rr zebra"]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_mcg_properties_random(seed, k):
    rng = np.random.default_rng(seed)
    toks = ["aa", "ab", "b", "cc", "d"]
    pairs = {}
    for _ in range(rng.integers(3, 25)):
        n = int(rng.integers(1, 4))
        q = " ".join(toks[rng.integers(len(toks))] for _ in range(n))
        pairs[q] = int(rng.integers(1, 40))
    trie = build_trie(pairs.items(), k=16)
    index = SuffixIndex.build(trie)
    n_pref = int(rng.integers(1, 4))
    prefix = " ".join(toks[rng.integers(len(toks))] for _ in range(n_pref))
    if rng.random() < 0.5:
        prefix = prefix[: max(1, int(rng.integers(1, len(prefix) + 1)))]
    out = mcg_topk(index, trie, prefix, min(k, 16))
    assert len(out) == len(set(out))
    _, partial = (prefix.split(), "") if prefix.endswith(" ") else (None, prefix.split(" ")[-1])
    for cand in out:
        # every candidate's token at the partial position extends the partial
        depth = len(prefix.split(" ")) - 1
        segs = cand.split(" ")
        assert len(segs) > depth or not partial
        if partial and len(segs) > depth:
            assert segs[depth].startswith(partial)


def test_snapshot_round_trip(tmp_path):
    pairs = {"led bulb": 5, "led lamp": 3, "lamp": 9, "灯泡": 2}
    trie = build_trie(pairs.items(), k=8)
    path = str(tmp_path / "trie.bin")
    save_trie(path, trie)
    loaded = load_trie(path)
    assert loaded.k == trie.k
    assert loaded.queries == trie.queries
    assert loaded.freqs == trie.freqs
    for prefix in ["", "l", "led ", "灯", "x"]:
        assert mpc_topk(loaded, prefix, 5) == mpc_topk(trie, prefix, 5)
    assert is_seen(loaded, "lamp")


def test_snapshot_version_mismatch(tmp_path):
    trie = build_trie({"a": 1}.items(), k=4)
    path = str(tmp_path / "trie.bin")
    save_trie(path, trie)
    raw = bytearray(open(path, "rb").read())
    raw[7] = 99  # version byte right after magic
    open(path, "wb").write(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        load_trie(path)


def test_snapshot_bad_magic(tmp_path):
    path = str(tmp_path / "junk.bin")
    open(path, "wb").write(b"NOTATRIE padding")
    with pytest.raises(ValueError, match="snapshot"):
        load_trie(path)
