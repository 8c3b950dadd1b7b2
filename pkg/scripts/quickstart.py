"""End-to-end tour on a small synthetic corpus.

Generates a planted category-drift log, trains the evolution-feature variant
for a few hundred steps, compares it against the frequency matcher, and then
serves a handful of live suggestions through the in-process service layer.
Finishes in a couple of minutes on a laptop CPU.

Usage: python scripts/quickstart.py [--seed N] [--steps N]
"""
from __future__ import annotations

import argparse

from qac.corpus import ExampleConfig, KIND_CLICK, KIND_QUERY
from qac.data import prepare
from qac.evaluate import evaluate, evaluate_model, matcher_ranker
from qac.model import build_variant
from qac.service import Snapshot, SuggestService, TrieCounts
from qac.synth import SynthConfig, recorded_prefixes, synth_corpus
from qac.train import TrainConfig, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args()

    cfg = SynthConfig(
        preset="planted-it",
        p_transfer=0.5,
        n_categories=12,
        n_users=32,
    )
    result = synth_corpus(cfg, args.seed)
    bundle = prepare(
        result.records,
        result.split,
        result.lexicon,
        ExampleConfig(),
        seed=args.seed,
        recorded=recorded_prefixes(result.truths),
    )
    print(
        f"corpus: {len(result.records)} records, "
        f"{len(bundle.train_examples)} train examples, "
        f"{len(bundle.test_impressions)} test impressions"
    )

    mpc_report, _ = evaluate(matcher_ranker(), bundle.test_impressions)
    print(f"matcher baseline: overall {mpc_report.overall:.4f} {mpc_report.slices}")

    model = build_variant(
        "hist-evolve",
        bundle.vocab.n_tokens,
        bundle.vocab.n_chars,
        seed=args.seed,
        token_dim=16,
        char_dim=8,
        hidden=32,
        char_counts=(8, 12, 12),
        history_blocks=1,
        history_heads=4,
        encoder_blocks=1,
        encoder_heads=2,
        mlp=(64, 32),
    )
    state = train(
        model,
        bundle.vocab,
        bundle.counts,
        bundle.train_examples,
        bundle.valid_examples,
        bundle.valid_impressions,
        ExampleConfig(),
        TrainConfig(
            seed=args.seed,
            max_steps=args.steps,
            eval_every=20,
            patience=8,
            warmup_steps=40,
        ),
    )
    print(f"trained {state.step} steps, best valid mrr {state.best_mrr:.4f}")

    report, _ = evaluate_model(
        model, bundle.test_impressions, bundle.vocab, bundle.counts, ExampleConfig()
    )
    print(f"model: overall {report.overall:.4f} {report.slices}")
    print(f"gap over matcher: {report.overall - mpc_report.overall:+.4f}")

    snapshot = Snapshot(
        trie=bundle.trie,
        index=bundle.index,
        counts=TrieCounts(bundle.trie),
        model=model,
        vocab=bundle.vocab,
        lexicon=bundle.lexicon,
    )
    service = SuggestService(snapshot, default_k=5)
    demo = bundle.test_impressions[0]
    for kind, texts in zip((KIND_QUERY, KIND_CLICK), demo.history_texts):
        for text in texts:
            service.sessions.record("demo", text, kind)
    out = service.suggest("demo", demo.prefix, debug=True)
    print(f"\nlive suggestions for prefix {demo.prefix!r}:")
    for s in out["suggestions"]:
        print(f"  {s['score']:.4f}  {s['query']}")
    print(f"clicked truth: {demo.clicked!r}, latency {out['latency_ms']} ms")


if __name__ == "__main__":
    main()
