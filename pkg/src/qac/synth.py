"""Deterministic synthetic log generator with planted, learnable structure.

Three presets:

* ``default``: users with a dominant category occasionally drift to a new
  one; some test-window clicks are novel queries absent from the background
  (the unseen slice). Prefixes are left to downstream simulation.
* ``planted-it``: every category has one two-token core completed by a fixed
  flavor set whose background frequencies are planted. A sticky impression
  clicks the popular flavor of the user's dominant category; a drift
  impression (probability p_transfer) moves to a category absent from the
  user's recent history and clicks the rare flavor. Recorded prefixes resolve
  the core, so telling the two apart requires comparing the prefix against
  the history summary, not the prefix or popularity alone.
* ``planted-ie``: per starting letter, a popular and a rare three-char core
  differing only at the third character. Heads click the popular core after a
  single typed character; tails click the rare core after two characters.
  Both recorded prefixes leave the token incomplete, so only a model that
  reads prefix characters can separate the two cases.

Every impression carries ground-truth flags so the downstream labelers can be
validated exactly against the generating process.
"""
from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from .corpus import (
    KIND_CLICK,
    KIND_QUERY,
    CategoryLexicon,
    ConfigError,
    LogRecord,
    SplitSpec,
)

PRESETS = ("default", "planted-it", "planted-ie")

_BG = (1_000_000, 2_000_000)
_TRAIN = (2_000_000, 3_000_000)
_VALID = (3_000_000, 3_500_000)
_TEST = (3_500_000, 4_000_000)


@dataclass(frozen=True)
class SynthConfig:
    preset: str = "default"
    n_users: int = 40
    n_categories: int = 14
    events_per_user: int = 40  # impressions across train+valid+test
    warmup_events: int = 3  # background-window history seeding per user
    p_transfer: float = 0.3
    p_unseen: float = 0.15  # default preset: novel test-window clicks
    flavors: int = 6
    rare_flavor: int = 4
    holdout_categories: int = 0  # transfer targets reserved for valid+test windows
    letters: int = 10  # planted-ie letter groups
    p_tail: float = 0.5  # planted-ie rare-core share

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        for name in ("p_transfer", "p_unseen", "p_tail"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if self.n_users < 1 or self.n_categories < 4 or self.events_per_user < 1:
            raise ConfigError("need at least 1 user, 4 categories, 1 event")
        if not 0 <= self.rare_flavor < self.flavors:
            raise ConfigError("rare_flavor must index into flavors")
        if not 0 <= self.holdout_categories <= self.n_categories - 2:
            raise ConfigError(
                "holdout_categories must leave at least 2 regular categories"
            )
        if self.letters < 2 or self.letters > 26:
            raise ConfigError("letters must be in [2, 26]")


@dataclass
class PlantedTruth:
    """Per-impression generator ground truth.

    ie/it for a concrete prefix follow from core_len: a leading substring
    shorter than core_len is intention-incomplete; transfer status applies to
    prefixes long enough to resolve the category.
    """

    user_id: str
    timestamp: int
    text: str
    core_len: int
    transfer: bool
    it: bool
    prefixes: list[str] = field(default_factory=list)  # empty: sample downstream


@dataclass
class SynthResult:
    records: list[LogRecord]
    truths: list[PlantedTruth]
    lexicon: CategoryLexicon
    split: SplitSpec


def _flavor_freqs(cfg: SynthConfig) -> list[int]:
    # the transfer-click flavor sits at frequency rank 4 of 6: low enough
    # that a frequency ranker misplaces it, high enough that the matcher's
    # top-(neg_per_pos+1) list still offers it as a training negative
    base = [60, 30, 20, 10, 6, 5, 4, 8, 9, 7][: cfg.flavors]
    freqs = list(base)
    freqs[cfg.rare_flavor] = 15
    return freqs


def _phase_times(cfg: SynthConfig) -> list[tuple[int, int]]:
    """(window_start, step) per impression index, split 60/20/20."""
    e_train = max(1, int(cfg.events_per_user * 0.6))
    e_valid = max(1, int(cfg.events_per_user * 0.2))
    e_test = max(1, cfg.events_per_user - e_train - e_valid)
    out = []
    for (lo, hi), count in ((_TRAIN, e_train), (_VALID, e_valid), (_TEST, e_test)):
        step = (hi - lo) // (count + 1)
        for j in range(count):
            out.append((lo + (j + 1) * step, step))
    return out


def synth_corpus(cfg: SynthConfig, seed: int) -> SynthResult:
    cfg.validate()
    if cfg.preset == "planted-ie":
        return _gen_planted_ie(cfg, seed)
    return _gen_category_drift(cfg, seed, planted=cfg.preset == "planted-it")


def _emit_background(records: list[LogRecord], counts: dict[str, int]) -> None:
    lo, _hi = _BG
    ts = lo
    for q in sorted(counts):
        for _ in range(counts[q]):
            records.append(LogRecord("bg", ts, KIND_QUERY, q))
            ts += 1


def _gen_category_drift(cfg: SynthConfig, seed: int, planted: bool) -> SynthResult:
    rng = np.random.default_rng(seed)
    cores = [f"c{c}a c{c}b" for c in range(cfg.n_categories)]
    lexicon = CategoryLexicon(
        cores={core: f"cat{c}" for c, core in enumerate(cores)},
        modifiers={f"v{k}" for k in range(cfg.flavors)},
    )
    freqs = _flavor_freqs(cfg)
    bg_counts: dict[str, int] = {}
    for core in cores:
        for k, f in enumerate(freqs):
            bg_counts[f"{core} v{k}"] = f
    records: list[LogRecord] = []
    _emit_background(records, bg_counts)

    truths: list[PlantedTruth] = []
    slots = _phase_times(cfg)
    view_caps = (10, 15)
    # valid- and test-window transfers jump to categories never targeted while
    # training, so detecting them must generalize instead of memorizing target
    # identities, and checkpoint selection rewards the generalizing mechanism
    holdout = set(range(cfg.n_categories - cfg.holdout_categories, cfg.n_categories))
    for u in range(cfg.n_users):
        uid = f"u{u}"
        dominant = int(rng.integers(cfg.n_categories))
        # capped recent-history category state mirroring the labeler's window
        hist_q: list[int] = []
        hist_i: list[int] = []

        def remember(cat: int) -> None:
            hist_q.append(cat)
            del hist_q[: -view_caps[0]]
            hist_i.append(cat)
            del hist_i[: -view_caps[1]]

        for w in range(cfg.warmup_events):
            ts = _TRAIN[0] - (cfg.warmup_events - w) * 1000 + u
            records.append(LogRecord(uid, ts, KIND_QUERY, f"{cores[dominant]} v0"))
            records.append(LogRecord(uid, ts + 1, KIND_CLICK, f"{cores[dominant]} u{w % 3}"))
            remember(dominant)
        for k, (base_ts, _step) in enumerate(slots):
            ts = base_ts + u
            window_cats = set(hist_q) | set(hist_i)
            transfer = bool(rng.random() < cfg.p_transfer)
            novel = (
                cfg.preset == "default"
                and _TEST[0] <= ts < _TEST[1]
                and rng.random() < cfg.p_unseen
            )
            target = dominant
            if transfer:
                pool = range(cfg.n_categories)
                if holdout:
                    # valid shares the test pool so checkpoint selection
                    # optimizes the same novel-target behavior tests measure
                    in_eval = _VALID[0] <= ts < _TEST[1]
                    pool = holdout if in_eval else (set(pool) - holdout)
                options = sorted(c for c in pool if c not in window_cats)
                if options:
                    target = int(options[rng.integers(len(options))])
                else:
                    transfer = False
            core = cores[target]
            if novel:
                text = f"{core} w{u}x{k}"  # token never present in background
            elif planted:
                text = f"{core} v{cfg.rare_flavor}" if transfer else f"{core} v0"
            else:
                flavor = int(rng.integers(cfg.flavors))
                text = f"{core} v{flavor}"
            # the labeler's rule is pure category disjointness, so a sticky
            # click whose dominant category fell out of the capped window
            # still counts as a transfer
            it_truth = bool(window_cats) and target not in window_cats
            prefixes = [core] if planted else []
            truths.append(
                PlantedTruth(
                    user_id=uid,
                    timestamp=ts,
                    text=text,
                    core_len=len(core),
                    transfer=transfer,
                    it=it_truth,
                    prefixes=prefixes,
                )
            )
            records.append(LogRecord(uid, ts, KIND_QUERY, text))
            records.append(LogRecord(uid, ts + 1, KIND_CLICK, f"{core} u{k % 3}"))
            remember(target)
    split = SplitSpec(_BG, _TRAIN, _VALID, _TEST)
    return SynthResult(records, truths, lexicon, split)


def _gen_planted_ie(cfg: SynthConfig, seed: int) -> SynthResult:
    rng = np.random.default_rng(seed)
    letters = string.ascii_lowercase[: cfg.letters]
    popular = {l: f"{l}am" for l in letters}
    rare = {l: f"{l}ax" for l in letters}
    lexicon = CategoryLexicon(
        cores={popular[l]: f"cat_{l}p" for l in letters}
        | {rare[l]: f"cat_{l}r" for l in letters},
        modifiers=set(),
    )
    bg_counts: dict[str, int] = {}
    for l in letters:
        bg_counts[popular[l]] = 50
        bg_counts[rare[l]] = 5
    records: list[LogRecord] = []
    _emit_background(records, bg_counts)

    truths: list[PlantedTruth] = []
    slots = _phase_times(cfg)
    for u in range(cfg.n_users):
        uid = f"u{u}"
        window: list[str] = []  # recent searched cores; items view stays empty

        def remember(core: str) -> None:
            window.append(core)
            del window[:-10]

        for w in range(cfg.warmup_events):
            ts = _TRAIN[0] - (cfg.warmup_events - w) * 1000 + u
            l = letters[int(rng.integers(len(letters)))]
            records.append(LogRecord(uid, ts, KIND_QUERY, popular[l]))
            remember(popular[l])
        for base_ts, _step in slots:
            ts = base_ts + u
            l = letters[int(rng.integers(len(letters)))]
            tail = bool(rng.random() < cfg.p_tail)
            text = rare[l] if tail else popular[l]
            prefixes = [l + "a"] if tail else [l]
            if not tail and rng.random() < 0.15:
                prefixes.append(text)  # full-core filler keeps non-IE slice nonempty
            # every core is its own category, so a full-core prefix labels IT
            # whenever that exact core is absent from the recent window
            it_truth = bool(window) and text not in window
            truths.append(
                PlantedTruth(
                    user_id=uid,
                    timestamp=ts,
                    text=text,
                    core_len=3,
                    transfer=False,
                    it=it_truth,
                    prefixes=prefixes,
                )
            )
            records.append(LogRecord(uid, ts, KIND_QUERY, text))
            remember(text)
    split = SplitSpec(_BG, _TRAIN, _VALID, _TEST)
    return SynthResult(records, truths, lexicon, split)


# -- truth sidecar io -------------------------------------------------------


def write_truth(path: str, truths: list[PlantedTruth]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in truths:
            assert "|" not in t.text and all("|" not in p for p in t.prefixes)
            joined = "|".join(t.prefixes)
            f.write(
                f"{t.user_id}\t{t.timestamp}\t{t.text}\t{t.core_len}"
                f"\t{int(t.transfer)}\t{int(t.it)}\t{joined}\n"
            )


def read_truth(path: str) -> list[PlantedTruth]:
    out: list[PlantedTruth] = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 7:
                raise ValueError(f"bad truth line: {line!r}")
            out.append(
                PlantedTruth(
                    user_id=parts[0],
                    timestamp=int(parts[1]),
                    text=parts[2],
                    core_len=int(parts[3]),
                    transfer=bool(int(parts[4])),
                    it=bool(int(parts[5])),
                    prefixes=[p for p in parts[6].split("|") if p],
                )
            )
    return out


def recorded_prefixes(truths: list[PlantedTruth]) -> dict[tuple[str, int], list[str]]:
    """Keystroke prefixes recorded by the generator, keyed by impression."""
    return {
        (t.user_id, t.timestamp): t.prefixes for t in truths if t.prefixes
    }
