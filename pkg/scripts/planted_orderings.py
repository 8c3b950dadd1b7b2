"""Run the frozen planted-signal ordering experiments.

Each experiment trains every variant on every seed's corpus and reports
whether the claimed mean ordering holds on the planted slice. The full
two-experiment, five-seed sweep takes under an hour on a laptop CPU; use
--seeds to run a quicker spot check.

Usage: python scripts/planted_orderings.py [--experiment NAME] [--seeds N]
"""
from __future__ import annotations

import argparse
import sys
import time

from qac.experiments import EXPERIMENTS, run_planted
from qac.train import format_ablation


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument(
        "--experiment",
        default="all",
        choices=["all", *EXPERIMENTS],
        help="which planted experiment to run",
    )
    ap.add_argument("--seeds", type=int, default=5, help="number of seeds")
    args = ap.parse_args()

    names = list(EXPERIMENTS) if args.experiment == "all" else [args.experiment]
    failed = []
    for name in names:
        exp = EXPERIMENTS[name]
        print(f"== {exp.describe()} ==")
        started = time.time()
        run = run_planted(exp, seeds=tuple(range(args.seeds)), log=print)
        print(format_ablation(run.summary()))
        margin = run.ordering_margin()
        verdict = "holds" if margin > 0 else "FAILS"
        print(f"{name}: margin={margin:+.4f} ({verdict}), {time.time() - started:.0f}s")
        if "full" in exp.variants:
            print(f"{name}: full over matcher {run.mean_mpc_gap('full'):+.4f} overall")
        if margin <= 0:
            failed.append(name)
    if failed:
        print(f"fail: ordering not satisfied for {', '.join(failed)}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
