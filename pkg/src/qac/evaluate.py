"""Reciprocal-rank evaluation with intention slicing and report emission.

An impression contributes 1/rank of its clicked query within the ranked
candidate list, or 0 when the click is absent. Reports carry the overall MRR
plus paired slices (seen/unseen, escape/non-escape, transfer/non-transfer)
whose counts partition the impression set.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .corpus import EvalImpression, ExampleConfig
from .data import impression_batch, merge_batches
from .model import IntentModel
from .text import Vocab

Ranker = Callable[[EvalImpression], list[str]]

SLICE_PAIRS = (("seen", "unseen"), ("ie", "non-ie"), ("it", "non-it"))


def fingerprint(obj) -> str:
    """Short stable digest of any JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def reciprocal_rank(ranked: Sequence[str], clicked: str) -> float:
    try:
        return 1.0 / (list(ranked).index(clicked) + 1)
    except ValueError:
        return 0.0


def mrr(ranked_lists: Sequence[Sequence[str]], clicked: Sequence[str]) -> float:
    if not ranked_lists:
        raise ValueError("mrr needs at least one impression")
    if len(ranked_lists) != len(clicked):
        raise ValueError("ranked lists and clicks must align")
    return float(
        np.mean([reciprocal_rank(r, c) for r, c in zip(ranked_lists, clicked)])
    )


@dataclass
class EvalReport:
    overall: float
    n: int
    slices: dict[str, float]
    counts: dict[str, int]
    fingerprint: str

    def validate(self) -> None:
        for a, b in SLICE_PAIRS:
            if self.counts[a] + self.counts[b] != self.n:
                raise ValueError(f"slice pair {a}/{b} does not partition the set")

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "n": self.n,
            "slices": dict(self.slices),
            "counts": dict(self.counts),
            "fingerprint": self.fingerprint,
        }


def matcher_ranker() -> Ranker:
    """Baseline: keep the matcher's frequency order untouched."""
    return lambda imp: list(imp.candidates)


def model_ranker(
    model: IntentModel, vocab: Vocab, counts: dict[str, int], cfg: ExampleConfig
) -> Ranker:
    """Rank by click probability, frequency-then-lexicographic tie-break."""

    def rank(imp: EvalImpression) -> list[str]:
        if not imp.candidates:
            return []
        batch = impression_batch(imp, vocab, counts, cfg)
        probs = model.predict_probs(batch)
        return order_candidates(imp.candidates, probs, counts)

    return rank


def order_candidates(
    candidates: Sequence[str], probs: np.ndarray, counts: dict[str, int]
) -> list[str]:
    order = sorted(
        range(len(candidates)),
        key=lambda i: (-probs[i], -counts.get(candidates[i], 0), candidates[i]),
    )
    return [candidates[i] for i in order]


def rank_impressions(
    model: IntentModel,
    impressions: Sequence[EvalImpression],
    vocab: Vocab,
    counts: dict[str, int],
    cfg: ExampleConfig,
    chunk_rows: int = 512,
) -> list[list[str]]:
    """Model-rank many impressions with chunked forward passes.

    Produces the same orderings as ranking impressions one at a time; chunking
    only amortizes the per-call overhead of the forward pass.
    """
    ranked: list[list[str]] = []
    chunk: list[EvalImpression] = []
    rows = 0
    for imp in impressions:
        if chunk and rows + len(imp.candidates) > chunk_rows:
            ranked.extend(_rank_chunk(model, chunk, vocab, counts, cfg))
            chunk, rows = [], 0
        chunk.append(imp)
        rows += len(imp.candidates)
    if chunk:
        ranked.extend(_rank_chunk(model, chunk, vocab, counts, cfg))
    return ranked


def _rank_chunk(
    model: IntentModel,
    imps: Sequence[EvalImpression],
    vocab: Vocab,
    counts: dict[str, int],
    cfg: ExampleConfig,
) -> list[list[str]]:
    nonempty = [imp for imp in imps if imp.candidates]
    out: dict[int, list[str]] = {}
    if nonempty:
        merged = merge_batches(
            [impression_batch(imp, vocab, counts, cfg) for imp in nonempty]
        )
        probs = model.predict_probs(merged)
        offset = 0
        for imp in nonempty:
            part = probs[offset : offset + len(imp.candidates)]
            out[id(imp)] = order_candidates(imp.candidates, part, counts)
            offset += len(imp.candidates)
    return [out.get(id(imp), []) for imp in imps]


def evaluate_model(
    model: IntentModel,
    impressions: Sequence[EvalImpression],
    vocab: Vocab,
    counts: dict[str, int],
    cfg: ExampleConfig,
    config_fingerprint: str = "",
    chunk_rows: int = 512,
) -> tuple[EvalReport, list[float]]:
    """Chunked-forward equivalent of evaluate(model_ranker(...), ...)."""
    if not impressions:
        raise ValueError("evaluate needs at least one impression")
    ranked = rank_impressions(model, impressions, vocab, counts, cfg, chunk_rows)
    rrs = [reciprocal_rank(r, imp.clicked) for r, imp in zip(ranked, impressions)]
    return _report_from_rrs(rrs, impressions, config_fingerprint), rrs


def _slice_flags(imp: EvalImpression) -> dict[str, bool]:
    return {
        "seen": imp.seen,
        "unseen": not imp.seen,
        "ie": imp.ie,
        "non-ie": not imp.ie,
        "it": imp.it,
        "non-it": not imp.it,
    }


def evaluate(
    rank_fn: Ranker,
    impressions: Sequence[EvalImpression],
    config_fingerprint: str = "",
) -> tuple[EvalReport, list[float]]:
    """Score every impression once; returns the report and per-impression RRs."""
    if not impressions:
        raise ValueError("evaluate needs at least one impression")
    rrs = [reciprocal_rank(rank_fn(imp), imp.clicked) for imp in impressions]
    return _report_from_rrs(rrs, impressions, config_fingerprint), rrs


def _report_from_rrs(
    rrs: list[float],
    impressions: Sequence[EvalImpression],
    config_fingerprint: str,
) -> EvalReport:
    slices: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name in [s for pair in SLICE_PAIRS for s in pair]:
        member = [rr for rr, imp in zip(rrs, impressions) if _slice_flags(imp)[name]]
        counts[name] = len(member)
        slices[name] = float(np.mean(member)) if member else 0.0
    report = EvalReport(
        overall=float(np.mean(rrs)),
        n=len(rrs),
        slices=slices,
        counts=counts,
        fingerprint=config_fingerprint,
    )
    report.validate()
    return report


def paired_ttest(rr_a: Sequence[float], rr_b: Sequence[float]) -> tuple[float, float]:
    """Paired t-test over per-impression reciprocal ranks; reported, not gating."""
    if len(rr_a) != len(rr_b):
        raise ValueError("paired t-test needs aligned samples")
    res = stats.ttest_rel(rr_a, rr_b)
    return float(res.statistic), float(res.pvalue)


def format_report(report: EvalReport) -> str:
    lines = [f"overall\t{report.overall:.4f}\t{report.n}"]
    for name in [s for pair in SLICE_PAIRS for s in pair]:
        lines.append(f"{name}\t{report.slices[name]:.4f}\t{report.counts[name]}")
    lines.append(f"fingerprint\t{report.fingerprint}\t")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, tsv_path: str, json_path: str) -> None:
    with open(tsv_path, "w", encoding="utf-8") as f:
        f.write("slice\tmrr\tcount\n")
        f.write(format_report(report))
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
