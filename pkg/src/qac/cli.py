"""Single command-line entry point for the whole pipeline.

Subcommands: synth, ingest, build-trie, train, eval, ablate, serve, bench.
Options resolve as defaults < config-file section < explicit flags; the config
file is JSON with one section per subcommand (path via --config or the
QAC_CONFIG environment variable), unknown sections or keys are rejected, and
every run logs the fingerprint of its resolved options.

Exit codes: 0 success, 1 assertion or evaluation failure, 2 configuration
error; failures print one machine-parsable reason line.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from .corpus import (
    ConfigError,
    ExampleConfig,
    KIND_CLICK,
    KIND_QUERY,
    SplitSpec,
    aol_records,
    background_counts,
    build_splits,
    read_log,
    write_log,
)
from .data import prepare
from .evaluate import (
    evaluate,
    evaluate_model,
    fingerprint,
    matcher_ranker,
    mrr,
    write_report,
)
from .experiments import EXPERIMENTS, run_planted
from .model import build_variant, load_model, save_model
from .service import (
    MicroBatcher,
    SessionStore,
    Snapshot,
    SuggestService,
    TrieCounts,
    load_snapshot,
    make_server,
)
from .synth import SynthConfig, read_truth, recorded_prefixes, synth_corpus, write_truth
from .train import TrainConfig, format_ablation, ordering_holds, train
from .trie import DEFAULT_K, SuffixIndex, build_trie, save_trie

DEFAULTS: dict[str, dict] = {
    "synth": {**asdict(SynthConfig()), "seed": 0},
    "ingest": {
        "format": "qac",
        "min_freq": 3,
        "background": None,
        "train": None,
        "valid": None,
        "test": None,
    },
    "build-trie": {"k": DEFAULT_K},
    "train": {
        "variant": "full",
        "model": {},
        "seed": 0,
        "batch_size": 128,
        "eval_every": None,
        "patience": 5,
        "max_steps": None,
        "peak_lr": 0.001,
        "warmup_steps": 4000,
        "candidates": 10,
    },
    "eval": {"split": "test", "ranker": "model", "seed": 0, "candidates": 10},
    "ablate": {"experiment": "all", "seeds": 5},
    "serve": {
        "host": "127.0.0.1",
        "port": 8080,
        "m": 10,
        "k": 5,
        "window_ms": 5.0,
        "max_batch": 32,
        "filtering": True,
        "expect_variant": None,
    },
    "bench": {"requests": 200, "k": 5, "m": 10, "seed": 0},
}

TUPLE_MODEL_KEYS = ("char_widths", "char_counts", "mlp", "view_caps", "view_pads")


def resolve_options(command: str, config_path: str | None, flags: dict) -> dict:
    """defaults < config section < explicit flags, unknown keys rejected."""
    resolved = dict(DEFAULTS[command])
    path = config_path or os.environ.get("QAC_CONFIG")
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        section = loaded.get(command, {})
        bad = set(section) - set(resolved)
        if bad:
            raise ConfigError(f"unknown {command} config keys: {sorted(bad)}")
        resolved.update(section)
    resolved.update({k: v for k, v in flags.items() if k in resolved})
    if isinstance(resolved.get("model"), dict):
        resolved["model"] = {
            k: tuple(v) if k in TUPLE_MODEL_KEYS and isinstance(v, list) else v
            for k, v in resolved["model"].items()
        }
    return resolved


def announce(command: str, resolved: dict, paths: dict) -> None:
    fp = fingerprint({"command": command, **resolved, **paths})
    print(f"run {command} fingerprint={fp}")


# -- corpus file plumbing ----------------------------------------------------


def write_split_manifest(path: str, spec: SplitSpec) -> None:
    blob = {
        "background": list(spec.background),
        "train": list(spec.train),
        "valid": list(spec.valid),
        "test": list(spec.test),
        "min_freq": spec.min_freq,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(blob, f, indent=2, sort_keys=True)
        f.write("\n")


def read_split_manifest(path: str) -> SplitSpec:
    try:
        with open(path, encoding="utf-8") as f:
            blob = json.load(f)
        return SplitSpec(
            background=tuple(blob["background"]),
            train=tuple(blob["train"]),
            valid=tuple(blob["valid"]),
            test=tuple(blob["test"]),
            min_freq=int(blob.get("min_freq", 3)),
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read split manifest {path}: {exc}") from exc


def corpus_paths(logs: str, flags: dict) -> dict:
    return {
        "logs": logs,
        "splits": flags.get("splits") or logs + ".splits.json",
        "lexicon": flags.get("lexicon") or logs + ".lexicon.tsv",
        "truth": flags.get("truth") or logs + ".truth.tsv",
    }


def load_bundle(paths: dict, seed: int, trie_k: int, n_candidates: int):
    from .corpus import CategoryLexicon

    records = list(read_log(paths["logs"]))
    if not records:
        raise ConfigError(f"no records in {paths['logs']}")
    spec = read_split_manifest(paths["splits"])
    lexicon = CategoryLexicon.load(paths["lexicon"])
    recorded = None
    if os.path.exists(paths["truth"]):
        recorded = recorded_prefixes(read_truth(paths["truth"]))
    return prepare(
        records,
        spec,
        lexicon,
        ExampleConfig(),
        seed=seed,
        trie_k=trie_k,
        n_candidates=n_candidates,
        recorded=recorded,
    )


# -- subcommands -------------------------------------------------------------


def cmd_synth(args: argparse.Namespace, flags: dict) -> int:
    opts = resolve_options("synth", args.config, flags)
    announce("synth", opts, {"out": args.out})
    seed = opts.pop("seed")
    result = synth_corpus(SynthConfig(**opts), seed)
    write_log(args.out, result.records)
    write_split_manifest(args.out + ".splits.json", result.split)
    result.lexicon.save(args.out + ".lexicon.tsv")
    write_truth(args.out + ".truth.tsv", result.truths)
    print(
        f"wrote {len(result.records)} records, {len(result.truths)} truths "
        f"to {args.out} (+ .splits.json, .lexicon.tsv, .truth.tsv)"
    )
    return 0


def cmd_ingest(args: argparse.Namespace, flags: dict) -> int:
    opts = resolve_options("ingest", args.config, flags)
    announce("ingest", opts, {"in": args.input, "out": args.out})
    if opts["format"] == "aol":
        with open(args.input, encoding="utf-8") as f:
            records = list(aol_records(f))
    elif opts["format"] == "qac":
        records = list(read_log(args.input))
    else:
        raise ConfigError(f"unknown log format {opts['format']!r}")
    if not records:
        print("fail: no valid records after normalization")
        return 1
    times = sorted(r.timestamp for r in records)
    lo, hi = times[0], times[-1] + 1
    windows = {}
    cuts = (0.4, 0.6, 0.8)
    auto = [
        (lo, lo + int((hi - lo) * cuts[0])),
        (lo + int((hi - lo) * cuts[0]), lo + int((hi - lo) * cuts[1])),
        (lo + int((hi - lo) * cuts[1]), lo + int((hi - lo) * cuts[2])),
        (lo + int((hi - lo) * cuts[2]), hi),
    ]
    for name, fallback in zip(("background", "train", "valid", "test"), auto):
        windows[name] = tuple(opts[name]) if opts[name] else fallback
    spec = SplitSpec(min_freq=opts["min_freq"], **windows)
    splits = build_splits(records, spec)
    write_log(args.out, records)
    write_split_manifest(args.out + ".splits.json", spec)
    print(
        f"ingested {len(records)} records: background={len(splits.background)} "
        f"train={len(splits.train)} valid={len(splits.valid)} test={len(splits.test)}"
    )
    return 0


def cmd_build_trie(args: argparse.Namespace, flags: dict) -> int:
    opts = resolve_options("build-trie", args.config, flags)
    paths = corpus_paths(args.logs, vars(args))
    announce("build-trie", opts, {"logs": args.logs, "out": args.out})
    records = list(read_log(args.logs))
    spec = read_split_manifest(paths["splits"])
    counts = background_counts(build_splits(records, spec))
    if not counts:
        print("fail: background window holds no queries above min_freq")
        return 1
    trie = build_trie(counts.items(), k=opts["k"])
    save_trie(args.out, trie)
    print(f"trie holds {len(trie)} queries (top-{opts['k']} per node) at {args.out}")
    return 0


def cmd_train(args: argparse.Namespace, flags: dict) -> int:
    opts = resolve_options("train", args.config, flags)
    paths = corpus_paths(args.logs, vars(args))
    announce("train", opts, {**paths, "out": args.out})
    bundle = load_bundle(paths, opts["seed"], DEFAULT_K, opts["candidates"])
    model = build_variant(
        opts["variant"],
        bundle.vocab.n_tokens,
        bundle.vocab.n_chars,
        seed=opts["seed"],
        **opts["model"],
    )
    tcfg = TrainConfig(
        batch_size=opts["batch_size"],
        eval_every=opts["eval_every"],
        patience=opts["patience"],
        max_steps=opts["max_steps"],
        peak_lr=opts["peak_lr"],
        warmup_steps=opts["warmup_steps"],
        seed=opts["seed"],
    )
    state = train(
        model,
        bundle.vocab,
        bundle.counts,
        bundle.train_examples,
        bundle.valid_examples,
        bundle.valid_impressions,
        ExampleConfig(),
        tcfg,
    )
    save_model(args.out, model, bundle.vocab)
    if args.trie_out:
        save_trie(args.trie_out, bundle.trie)
    last = state.history[-1] if state.history else (state.step, float("nan"), float("nan"))
    print(
        f"trained {opts['variant']} for {state.step} steps ({state.stopped}); "
        f"best val mrr {state.best_mrr:.4f} at step {state.best_step}; "
        f"last val loss {last[1]:.4f}; checkpoint {args.out}"
    )
    return 0


def cmd_eval(args: argparse.Namespace, flags: dict) -> int:
    opts = resolve_options("eval", args.config, flags)
    paths = corpus_paths(args.logs, vars(args))
    announce("eval", opts, {**paths, "checkpoint": args.checkpoint or ""})
    bundle = load_bundle(paths, opts["seed"], DEFAULT_K, opts["candidates"])
    if opts["split"] == "test":
        imps = bundle.test_impressions
    elif opts["split"] == "valid":
        imps = bundle.valid_impressions
    else:
        raise ConfigError(f"unknown split {opts['split']!r}")
    if not imps:
        print(f"fail: split {opts['split']} holds no impressions")
        return 1
    fp = fingerprint({**opts, **paths})
    if opts["ranker"] == "mpc":
        report, _ = evaluate(matcher_ranker(), imps, config_fingerprint=fp)
    elif opts["ranker"] == "model":
        if not args.checkpoint:
            raise ConfigError("--checkpoint required for the model ranker")
        model, vocab = load_model(args.checkpoint)
        report, _ = evaluate_model(
            model, imps, vocab, bundle.counts, ExampleConfig(), config_fingerprint=fp
        )
    else:
        raise ConfigError(f"unknown ranker {opts['ranker']!r}")
    out = args.out or (args.logs + f".{opts['split']}.{opts['ranker']}")
    write_report(report, out + ".tsv", out + ".json")
    print(
        f"{opts['ranker']} {opts['split']} mrr={report.overall:.4f} n={report.n} "
        f"reports at {out}.tsv/.json"
    )
    return 0


def cmd_ablate(args: argparse.Namespace, flags: dict) -> int:
    opts = resolve_options("ablate", args.config, flags)
    announce("ablate", opts, {})
    names = list(EXPERIMENTS) if opts["experiment"] == "all" else [opts["experiment"]]
    unknown = [n for n in names if n not in EXPERIMENTS]
    if unknown:
        raise ConfigError(f"unknown experiment {unknown[0]!r}")
    seeds = list(range(opts["seeds"]))
    failures = []
    for name in names:
        exp = EXPERIMENTS[name]
        run = run_planted(exp, seeds, log=print)
        summary = run.summary()
        print(format_ablation(summary))
        margin = run.ordering_margin()
        holds = ordering_holds(summary, exp.better, exp.worse, exp.slice_name)
        print(
            f"{name}: {exp.better} vs {exp.worse} on {exp.slice_name} "
            f"margin={margin:+.4f} {'holds' if holds else 'FAILS'}"
        )
        if "full" in exp.variants:
            print(f"{name}: full vs matcher gap={run.mean_mpc_gap('full'):+.4f}")
        if not holds:
            failures.append(name)
    if failures:
        print(f"fail: ordering not satisfied for {', '.join(failures)}")
        return 1
    return 0


def cmd_serve(args: argparse.Namespace, flags: dict) -> int:
    opts = resolve_options("serve", args.config, flags)
    announce("serve", opts, {"trie": args.trie, "checkpoint": args.checkpoint or ""})
    snapshot = load_snapshot(
        args.checkpoint,
        args.trie,
        lexicon_path=args.lexicon,
        expect_variant=opts["expect_variant"],
    )
    sessions = SessionStore()
    if args.sessions and os.path.exists(args.sessions):
        sessions.load(args.sessions)
    batcher = MicroBatcher(window_ms=opts["window_ms"], max_batch=opts["max_batch"])
    service = SuggestService(
        snapshot,
        sessions=sessions,
        m=opts["m"],
        default_k=opts["k"],
        filter_enabled=opts["filtering"],
        batcher=batcher,
    )
    server = make_server(service, host=opts["host"], port=opts["port"])
    host, port = server.server_address[:2]
    print(f"serving variant={snapshot.variant} on http://{host}:{port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        service.close()
        if args.sessions:
            sessions.save(args.sessions)
    return 0


def cmd_bench(args: argparse.Namespace, flags: dict) -> int:
    opts = resolve_options("bench", args.config, flags)
    paths = corpus_paths(args.logs, vars(args))
    announce("bench", opts, {**paths, "checkpoint": args.checkpoint})
    bundle = load_bundle(paths, opts["seed"], DEFAULT_K, opts["m"])
    model, vocab = load_model(args.checkpoint)
    snapshot = Snapshot(
        trie=bundle.trie,
        index=bundle.index,
        counts=TrieCounts(bundle.trie),
        model=model,
        vocab=vocab,
        lexicon=bundle.lexicon,
    )
    imps = bundle.test_impressions[: opts["requests"]]
    if not imps:
        print("fail: no test impressions to replay")
        return 1
    latencies = []
    ranked = {True: [], False: []}
    for filtering in (True, False):
        service = SuggestService(
            snapshot, m=opts["m"], default_k=opts["k"], filter_enabled=filtering
        )
        for i, imp in enumerate(imps):
            uid = f"bench-{i}"
            for kind, texts in zip((KIND_QUERY, KIND_CLICK), imp.history_texts):
                for t in texts:
                    service.sessions.record(uid, t, kind)
            started = time.perf_counter()
            out = service.suggest(uid, imp.prefix, k=opts["k"])
            elapsed = (time.perf_counter() - started) * 1000.0
            ranked[filtering].append([s["query"] for s in out["suggestions"]])
            if filtering:
                latencies.append(elapsed)
    clicked = [imp.clicked for imp in imps]
    mrr_on = mrr(ranked[True], clicked)
    mrr_off = mrr(ranked[False], clicked)
    p50, p90, p99 = np.percentile(latencies, [50, 90, 99])
    print(
        f"bench n={len(imps)} p50_ms={p50:.2f} p90_ms={p90:.2f} p99_ms={p99:.2f} "
        f"mrr_filtered={mrr_on:.4f} mrr_unfiltered={mrr_off:.4f} "
        f"filter_delta={mrr_on - mrr_off:+.4f}"
    )
    return 0


# -- argument wiring ---------------------------------------------------------


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (or QAC_CONFIG env var)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qac", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("synth", help="generate a synthetic behavior log")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--n-users", dest="n_users", type=int, default=S)
    p.add_argument("--n-categories", dest="n_categories", type=int, default=S)
    p.add_argument("--events-per-user", dest="events_per_user", type=int, default=S)
    p.add_argument("--p-transfer", dest="p_transfer", type=float, default=S)
    p.add_argument("--p-unseen", dest="p_unseen", type=float, default=S)
    p.add_argument("--p-tail", dest="p_tail", type=float, default=S)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="normalize a log and write split windows")
    _add_config(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", default=S, choices=("qac", "aol"))
    p.add_argument("--min-freq", dest="min_freq", type=int, default=S)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-trie", help="build the completion trie snapshot")
    _add_config(p)
    p.add_argument("--logs", required=True)
    p.add_argument("--splits")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=S)
    p.set_defaults(func=cmd_build_trie)

    p = sub.add_parser("train", help="train a ranking model variant")
    _add_config(p)
    p.add_argument("--logs", required=True)
    p.add_argument("--splits")
    p.add_argument("--lexicon")
    p.add_argument("--truth")
    p.add_argument("--out", required=True)
    p.add_argument("--trie-out", dest="trie_out")
    p.add_argument("--variant", default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=S)
    p.add_argument("--patience", type=int, default=S)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=S)
    p.add_argument("--peak-lr", dest="peak_lr", type=float, default=S)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int, default=S)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the matcher")
    _add_config(p)
    p.add_argument("--logs", required=True)
    p.add_argument("--splits")
    p.add_argument("--lexicon")
    p.add_argument("--truth")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--split", default=S, choices=("valid", "test"))
    p.add_argument("--ranker", default=S, choices=("model", "mpc"))
    p.add_argument("--seed", type=int, default=S)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run planted ablation orderings")
    _add_config(p)
    p.add_argument("--experiment", default=S, choices=("all", *EXPERIMENTS))
    p.add_argument("--seeds", type=int, default=S)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="run the HTTP suggest service")
    _add_config(p)
    p.add_argument("--trie", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--lexicon")
    p.add_argument("--sessions", help="session persistence file")
    p.add_argument("--host", default=S)
    p.add_argument("--port", type=int, default=S)
    p.add_argument("--m", type=int, default=S)
    p.add_argument("--k", type=int, default=S)
    p.add_argument("--window-ms", dest="window_ms", type=float, default=S)
    p.add_argument("--max-batch", dest="max_batch", type=int, default=S)
    p.add_argument("--no-filtering", dest="filtering", action="store_false", default=S)
    p.add_argument("--expect-variant", dest="expect_variant", default=S)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="replay impressions, report latency and MRR")
    _add_config(p)
    p.add_argument("--logs", required=True)
    p.add_argument("--splits")
    p.add_argument("--lexicon")
    p.add_argument("--truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--requests", type=int, default=S)
    p.add_argument("--k", type=int, default=S)
    p.add_argument("--m", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "command", "config")}
    try:
        return args.func(args, flags)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: config: missing file: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
