"""Log records, chronological splits, category labeling, and prefix-query
pair construction.

Log files are UTF-8 TSV: user_id, timestamp_ms, kind, text, category
(optional), one record per line. Texts are normalized on read; records that
normalize to empty are dropped. Prefixes are simulated as leading character
substrings of each submitted query, since the logs carry no keystrokes.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .text import Vocab, char_ids, normalize_query, tokenize, tokenize_pad
from .trie import CompletionTrie, SuffixIndex, mcg_topk

KIND_QUERY = "searched_query"
KIND_CLICK = "clicked_item"
KIND_PURCHASE = "purchased_item"
KINDS = (KIND_QUERY, KIND_CLICK, KIND_PURCHASE)


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to its own exit code."""


@dataclass(frozen=True)
class LogRecord:
    user_id: str
    timestamp: int  # milliseconds
    kind: str
    text: str
    category: str | None = None


def parse_log_line(line: str) -> LogRecord | None:
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 4:
        return None
    user_id, ts_raw, kind, text = parts[:4]
    category = parts[4] if len(parts) > 4 and parts[4] else None
    try:
        ts = int(ts_raw)
    except ValueError:
        return None
    if ts <= 0 or kind not in KINDS:
        return None
    norm = normalize_query(text)
    if not norm:
        return None
    return LogRecord(user_id, ts, kind, norm, category)


def read_log(path: str) -> Iterator[LogRecord]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            rec = parse_log_line(line)
            if rec is not None:
                yield rec


def write_log(path: str, records: Iterable[LogRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            cat = r.category or ""
            f.write(f"{r.user_id}\t{r.timestamp}\t{r.kind}\t{r.text}\t{cat}\n")


def aol_records(lines: Iterable[str]) -> Iterator[LogRecord]:
    """Adapt AnonID/Query/QueryTime rows; malformed rows are skipped."""
    for line in lines:
        parts = line.rstrip("\n").split("\t")
        if len(parts) < 3 or parts[0] == "AnonID":
            continue
        user_id, query, when = parts[0], parts[1], parts[2]
        try:
            ts = int(time.mktime(time.strptime(when, "%Y-%m-%d %H:%M:%S"))) * 1000
        except ValueError:
            continue
        norm = normalize_query(query)
        if not norm or ts <= 0:
            continue
        yield LogRecord(user_id, ts, KIND_QUERY, norm)


# -- splits -----------------------------------------------------------------

Window = tuple[int, int]  # half-open [start, end) in milliseconds


@dataclass(frozen=True)
class SplitSpec:
    background: Window
    train: Window
    valid: Window
    test: Window
    min_freq: int = 3

    def validate(self) -> None:
        windows = [self.background, self.train, self.valid, self.test]
        for lo, hi in windows:
            if lo >= hi:
                raise ConfigError(f"empty split window [{lo}, {hi})")
        for (_lo, hi), (lo, _hi) in zip(windows, windows[1:]):
            if lo < hi:
                raise ConfigError("split windows must be disjoint and ordered")


@dataclass
class Splits:
    background: list[LogRecord] = field(default_factory=list)
    train: list[LogRecord] = field(default_factory=list)
    valid: list[LogRecord] = field(default_factory=list)
    test: list[LogRecord] = field(default_factory=list)


def build_splits(records: Iterable[LogRecord], spec: SplitSpec) -> Splits:
    """Assign records to windows; prune rare background queries."""
    spec.validate()
    splits = Splits()
    for r in records:
        for name in ("background", "train", "valid", "test"):
            lo, hi = getattr(spec, name)
            if lo <= r.timestamp < hi:
                getattr(splits, name).append(r)
                break
    counts: dict[str, int] = {}
    for r in splits.background:
        if r.kind == KIND_QUERY:
            counts[r.text] = counts.get(r.text, 0) + 1
    splits.background = [
        r
        for r in splits.background
        if r.kind != KIND_QUERY or counts[r.text] >= spec.min_freq
    ]
    return splits


def background_counts(splits: Splits) -> dict[str, int]:
    counts: dict[str, int] = {}
    for r in splits.background:
        if r.kind == KIND_QUERY:
            counts[r.text] = counts.get(r.text, 0) + 1
    return counts


# -- category lexicon -------------------------------------------------------


def _contains_phrase(tokens: list[str], phrase: list[str]) -> bool:
    if not phrase or len(phrase) > len(tokens):
        return False
    return any(
        tokens[i : i + len(phrase)] == phrase for i in range(len(tokens) - len(phrase) + 1)
    )


@dataclass
class CategoryLexicon:
    cores: dict[str, str] = field(default_factory=dict)  # core phrase -> category
    modifiers: set[str] = field(default_factory=set)

    @classmethod
    def load(cls, path: str) -> "CategoryLexicon":
        lex = cls()
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("~"):
                    word = normalize_query(line[1:])
                    if word:
                        lex.modifiers.add(word)
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ConfigError(f"bad lexicon line: {line!r}")
                core = normalize_query(parts[0])
                if core:
                    lex.cores[core] = parts[1].strip()
        return lex

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for core in sorted(self.cores):
                f.write(f"{core}\t{self.cores[core]}\n")
            for word in sorted(self.modifiers):
                f.write(f"~{word}\n")

    def categories_of(self, text: str) -> set[str]:
        tokens = tokenize(text)
        return {
            cat
            for core, cat in self.cores.items()
            if _contains_phrase(tokens, tokenize(core))
        }


def label_ie(prefix: str, lexicon: CategoryLexicon) -> bool:
    """True iff the prefix contains no complete core phrase and no modifier."""
    tokens = tokenize(prefix)
    for core in lexicon.cores:
        if _contains_phrase(tokens, tokenize(core)):
            return False
    for word in lexicon.modifiers:
        if _contains_phrase(tokens, tokenize(word)):
            return False
    return True


@dataclass
class BehaviorSequence:
    kind: str
    items: list[str]  # normalized texts, oldest first


def label_it(
    prefix: str, history: list[BehaviorSequence], lexicon: CategoryLexicon
) -> bool:
    """True iff the prefix's categories exist and avoid every history category."""
    pcats = lexicon.categories_of(prefix)
    if not pcats:
        return False
    hcats: set[str] = set()
    for seq in history:
        for item in seq.items:
            hcats |= lexicon.categories_of(item)
    if not hcats:
        return False
    return not (pcats & hcats)


# -- example construction ---------------------------------------------------


@dataclass(frozen=True)
class ExampleConfig:
    neg_per_pos: int = 4
    prefixes_per_click: int = 3
    query_cap: int = 10  # history: previous searched queries kept
    item_cap: int = 15  # history: previous clicked item titles kept
    query_pad: int = 8
    item_pad: int = 15
    prefix_max: int = 20


@dataclass
class TrainingExample:
    prefix: str
    prefix_chars: list[int]
    prefix_tokens: list[int]
    candidate: str
    candidate_tokens: list[int]
    history_texts: list[list[str]]
    history_tokens: list[np.ndarray]  # per view: (n_items, view pad len)
    popularity: float
    label: int
    group: int


@dataclass
class EvalImpression:
    user_id: str
    timestamp: int
    prefix: str
    clicked: str
    candidates: list[str]  # matcher order
    history_texts: list[list[str]]
    ie: bool
    it: bool
    seen: bool


def _history_views(cfg: ExampleConfig) -> list[tuple[str, int, int]]:
    return [(KIND_QUERY, cfg.query_cap, cfg.query_pad), (KIND_CLICK, cfg.item_cap, cfg.item_pad)]


def iter_impressions(
    records: list[LogRecord],
    window: Window,
    cfg: ExampleConfig,
    seed: int,
    recorded: dict[tuple[str, int], list[str]] | None = None,
) -> Iterator[tuple[LogRecord, list[list[str]], str]]:
    """Yield (click record, per-view history texts, prefix).

    History contains only events strictly earlier than the impression. When a
    recorded keystroke prefix list is present for an impression it is used
    verbatim; otherwise at most prefixes_per_click leading substrings are
    sampled uniformly over lengths.
    """
    rng = np.random.default_rng(seed)
    by_user: dict[str, list[LogRecord]] = {}
    for r in records:
        by_user.setdefault(r.user_id, []).append(r)
    views = _history_views(cfg)
    lo, hi = window
    for user in sorted(by_user):
        events = sorted(by_user[user], key=lambda r: r.timestamp)
        hist: dict[str, list[str]] = {kind: [] for kind, _, _ in views}
        for r in events:
            if r.kind == KIND_QUERY and lo <= r.timestamp < hi:
                snapshot = [list(hist[kind][-cap:]) for kind, cap, _ in views]
                known = recorded.get((r.user_id, r.timestamp)) if recorded else None
                if known:
                    prefixes = [p[: cfg.prefix_max] for p in known]
                else:
                    max_len = min(len(r.text), cfg.prefix_max)
                    lengths = np.arange(1, max_len + 1)
                    if len(lengths) > cfg.prefixes_per_click:
                        lengths = rng.choice(
                            lengths, size=cfg.prefixes_per_click, replace=False
                        )
                    prefixes = [r.text[: int(x)] for x in sorted(int(x) for x in lengths)]
                for prefix in prefixes:
                    yield r, snapshot, prefix
            if r.kind in hist:
                hist[r.kind].append(r.text)


def _tokenize_history(
    history_texts: list[list[str]], vocab: Vocab, cfg: ExampleConfig
) -> list[np.ndarray]:
    out = []
    for (kind, _cap, pad), items in zip(_history_views(cfg), history_texts):
        if items:
            arr = np.array([tokenize_pad(t, vocab, pad) for t in items], dtype=np.int64)
        else:
            arr = np.zeros((0, pad), dtype=np.int64)
        out.append(arr)
    return out


def make_examples(
    records: list[LogRecord],
    window: Window,
    trie: CompletionTrie,
    index: SuffixIndex,
    counts: dict[str, int],
    vocab: Vocab,
    cfg: ExampleConfig,
    seed: int,
    recorded: dict[tuple[str, int], list[str]] | None = None,
) -> list[TrainingExample]:
    """One positive per (click, prefix) plus up to neg_per_pos trie negatives.

    A prefix whose matcher candidate list is empty is skipped entirely.
    """
    out: list[TrainingExample] = []
    group = 0
    for rec, history_texts, prefix in iter_impressions(records, window, cfg, seed, recorded):
        cands = mcg_topk(index, trie, prefix, cfg.neg_per_pos + 1)
        if not cands:
            continue
        negatives = [c for c in cands if c != rec.text][: cfg.neg_per_pos]
        hist_tok = _tokenize_history(history_texts, vocab, cfg)
        pchars = char_ids(prefix, vocab, cfg.prefix_max)
        ptok = tokenize_pad(prefix, vocab, cfg.query_pad)
        for cand, label in [(rec.text, 1)] + [(n, 0) for n in negatives]:
            out.append(
                TrainingExample(
                    prefix=prefix,
                    prefix_chars=pchars,
                    prefix_tokens=ptok,
                    candidate=cand,
                    candidate_tokens=tokenize_pad(cand, vocab, cfg.query_pad),
                    history_texts=history_texts,
                    history_tokens=hist_tok,
                    popularity=float(np.log1p(counts.get(cand, 0))),
                    label=label,
                    group=group,
                )
            )
        group += 1
    return out


def make_eval_impressions(
    records: list[LogRecord],
    window: Window,
    trie: CompletionTrie,
    index: SuffixIndex,
    lexicon: CategoryLexicon,
    cfg: ExampleConfig,
    seed: int,
    n_candidates: int = 10,
    recorded: dict[tuple[str, int], list[str]] | None = None,
) -> list[EvalImpression]:
    """Matcher-ranked candidate lists plus IE/IT/seen slice flags.

    The clicked query may be absent from the candidates (reciprocal rank 0).
    """
    out: list[EvalImpression] = []
    views = _history_views(cfg)
    for rec, history_texts, prefix in iter_impressions(records, window, cfg, seed, recorded):
        cands = mcg_topk(index, trie, prefix, n_candidates)
        if not cands:
            continue
        history = [
            BehaviorSequence(kind, items) for (kind, _, _), items in zip(views, history_texts)
        ]
        out.append(
            EvalImpression(
                user_id=rec.user_id,
                timestamp=rec.timestamp,
                prefix=prefix,
                clicked=rec.text,
                candidates=cands,
                history_texts=history_texts,
                ie=label_ie(prefix, lexicon),
                it=label_it(prefix, history, lexicon),
                seen=trie.is_seen(rec.text),
            )
        )
    return out
