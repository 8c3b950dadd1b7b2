"""Collation of training examples and eval impressions into model batches.

History views vary in length per example, so collation pads each view to the
longest count in the batch (bounded by the view cap) and lets the model mask
the rest. Candidate and prefix fields are already fixed-width.

``prepare`` runs the full offline path once: windowed splits, background
trie + suffix index, vocabulary, training/validation examples, and sliced
evaluation impressions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .corpus import (
    CategoryLexicon,
    EvalImpression,
    ExampleConfig,
    KIND_CLICK,
    KIND_QUERY,
    LogRecord,
    SplitSpec,
    Splits,
    TrainingExample,
    background_counts,
    build_splits,
    make_eval_impressions,
    make_examples,
)
from .model import Batch
from .text import Vocab, char_ids, tokenize_pad
from .trie import DEFAULT_K, CompletionTrie, SuffixIndex, build_trie


def _pad_rows(rows: Sequence[Sequence[int]], width: int) -> np.ndarray:
    out = np.zeros((len(rows), width), dtype=np.int64)
    for i, row in enumerate(rows):
        row = list(row)[:width]
        out[i, : len(row)] = row
    return out


def _stack_history(
    per_example: list[list[np.ndarray]], n_views: int, pads: Sequence[int]
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    history: list[np.ndarray] = []
    counts: list[np.ndarray] = []
    b = len(per_example)
    for v in range(n_views):
        views = [ex[v] for ex in per_example]
        n = max((len(view) for view in views), default=0)
        n = max(n, 0)
        out = np.zeros((b, n, pads[v]), dtype=np.int64)
        cnt = np.zeros(b, dtype=np.int64)
        for i, view in enumerate(views):
            if len(view):
                out[i, : len(view)] = view
                cnt[i] = len(view)
        history.append(out)
        counts.append(cnt)
    return history, counts


def collate(examples: Sequence[TrainingExample], cfg: ExampleConfig) -> Batch:
    if not examples:
        raise ValueError("cannot collate an empty example list")
    pads = (cfg.query_pad, cfg.item_pad)
    history, counts = _stack_history(
        [ex.history_tokens for ex in examples], len(pads), pads
    )
    return Batch(
        cand_tokens=np.array([ex.candidate_tokens for ex in examples], dtype=np.int64),
        prefix_chars=_pad_rows([ex.prefix_chars for ex in examples], cfg.prefix_max),
        prefix_lens=np.array(
            [max(1, min(len(ex.prefix), cfg.prefix_max)) for ex in examples],
            dtype=np.int64,
        ),
        prefix_tokens=np.array([ex.prefix_tokens for ex in examples], dtype=np.int64),
        history=history,
        hist_counts=counts,
        popularity=np.array([ex.popularity for ex in examples], dtype=float),
        labels=np.array([ex.label for ex in examples], dtype=np.int64),
        groups=np.array([ex.group for ex in examples], dtype=np.int64),
    )


def batches(
    examples: Sequence[TrainingExample],
    cfg: ExampleConfig,
    batch_size: int,
    seed: int = 0,
    shuffle: bool = True,
) -> Iterator[Batch]:
    order = np.arange(len(examples))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield collate([examples[i] for i in idx], cfg)


@dataclass
class PreparedData:
    """Everything the trainer and evaluator need, built from raw logs once."""

    splits: Splits
    counts: dict[str, int]
    trie: CompletionTrie
    index: SuffixIndex
    vocab: Vocab
    lexicon: CategoryLexicon
    train_examples: list[TrainingExample]
    valid_examples: list[TrainingExample]
    valid_impressions: list[EvalImpression]
    test_impressions: list[EvalImpression]


def prepare(
    records: list[LogRecord],
    split: SplitSpec,
    lexicon: CategoryLexicon,
    cfg: ExampleConfig,
    seed: int = 0,
    trie_k: int = DEFAULT_K,
    n_candidates: int = 10,
    recorded: dict[tuple[str, int], list[str]] | None = None,
) -> PreparedData:
    splits = build_splits(records, split)
    counts = background_counts(splits)
    trie = build_trie(list(counts.items()), k=trie_k)
    index = SuffixIndex.build(trie)
    texts = [
        r.text
        for r in splits.background
        if r.kind in (KIND_QUERY, KIND_CLICK)
    ]
    vocab = Vocab.build(texts)
    train_examples = make_examples(
        records, split.train, trie, index, counts, vocab, cfg, seed, recorded
    )
    valid_examples = make_examples(
        records, split.valid, trie, index, counts, vocab, cfg, seed + 1, recorded
    )
    valid_impressions = make_eval_impressions(
        records, split.valid, trie, index, lexicon, cfg, seed + 1, n_candidates, recorded
    )
    test_impressions = make_eval_impressions(
        records, split.test, trie, index, lexicon, cfg, seed + 2, n_candidates, recorded
    )
    return PreparedData(
        splits=splits,
        counts=counts,
        trie=trie,
        index=index,
        vocab=vocab,
        lexicon=lexicon,
        train_examples=train_examples,
        valid_examples=valid_examples,
        valid_impressions=valid_impressions,
        test_impressions=test_impressions,
    )


def merge_batches(parts: Sequence[Batch]) -> Batch:
    """Concatenate batches, re-padding history views to the longest count."""
    if not parts:
        raise ValueError("cannot merge zero batches")
    history: list[np.ndarray] = []
    hist_counts: list[np.ndarray] = []
    for v in range(len(parts[0].history)):
        longest = max(p.history[v].shape[1] for p in parts)
        pad = parts[0].history[v].shape[2]
        arrs = []
        for p in parts:
            h = p.history[v]
            if h.shape[1] < longest:
                filler = np.zeros(
                    (h.shape[0], longest - h.shape[1], pad), dtype=h.dtype
                )
                h = np.concatenate([h, filler], axis=1)
            arrs.append(h)
        history.append(np.concatenate(arrs, axis=0))
        hist_counts.append(np.concatenate([p.hist_counts[v] for p in parts]))
    return Batch(
        cand_tokens=np.concatenate([p.cand_tokens for p in parts], axis=0),
        prefix_chars=np.concatenate([p.prefix_chars for p in parts], axis=0),
        prefix_lens=np.concatenate([p.prefix_lens for p in parts]),
        prefix_tokens=np.concatenate([p.prefix_tokens for p in parts], axis=0),
        history=history,
        hist_counts=hist_counts,
        popularity=np.concatenate([p.popularity for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        groups=np.concatenate([p.groups for p in parts]),
    )


def impression_batch(
    imp: EvalImpression,
    vocab: Vocab,
    counts: dict[str, int],
    cfg: ExampleConfig,
) -> Batch:
    """One batch holding every candidate of a single impression."""
    pads = (cfg.query_pad, cfg.item_pad)
    caps = (cfg.query_cap, cfg.item_cap)
    views = []
    for v, (texts, pad, cap) in enumerate(zip(imp.history_texts, pads, caps)):
        kept = texts[-cap:]
        arr = np.array(
            [tokenize_pad(t, vocab, pad) for t in kept], dtype=np.int64
        ).reshape(len(kept), pad)
        views.append(arr)
    pchars = char_ids(imp.prefix, vocab, cfg.prefix_max)
    ptoks = tokenize_pad(imp.prefix, vocab, cfg.query_pad)
    b = len(imp.candidates)
    history, hist_counts = _stack_history([views] * b, len(pads), pads)
    return Batch(
        cand_tokens=np.array(
            [tokenize_pad(c, vocab, cfg.query_pad) for c in imp.candidates],
            dtype=np.int64,
        ),
        prefix_chars=np.tile(_pad_rows([pchars], cfg.prefix_max), (b, 1)),
        prefix_lens=np.full(b, max(1, min(len(imp.prefix), cfg.prefix_max)), dtype=np.int64),
        prefix_tokens=np.tile(np.array(ptoks, dtype=np.int64), (b, 1)),
        history=history,
        hist_counts=hist_counts,
        popularity=np.array(
            [np.log1p(counts.get(c, 0)) for c in imp.candidates], dtype=float
        ),
        labels=np.array(
            [1 if c == imp.clicked else 0 for c in imp.candidates], dtype=np.int64
        ),
        groups=np.zeros(b, dtype=np.int64),
    )
