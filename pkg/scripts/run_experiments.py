"""Run the desk-scale training experiments and record their results.

    python scripts/run_experiments.py sanity         # ~25 min: two identical single-agent runs
    python scripts/run_experiments.py coordination   # ~5 h: COIN vs ITD3, 3 seeds each
    python scripts/run_experiments.py all

Run directories go under --root; summaries go to results/*.json, which the
acceptance suite reads.
"""
import argparse
import sys
from pathlib import Path

from coin.experiments import run_coordination, run_sanity, write_json

REPO = Path(__file__).resolve().parents[1]
SANITY_JSON = REPO / "results" / "sanity.json"
COORDINATION_JSON = REPO / "results" / "coordination.json"


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("which", choices=("sanity", "coordination", "all"))
    p.add_argument("--root", default=str(REPO / "runs" / "experiments"))
    args = p.parse_args(argv)
    if args.which in ("sanity", "all"):
        res = run_sanity(args.root)
        write_json(SANITY_JSON, res)
        print("sanity success rates:", [r["metrics"]["success_rate_mean"] for r in res["runs"]], flush=True)
    if args.which in ("coordination", "all"):
        res = run_coordination(args.root, on_result=lambda partial: write_json(COORDINATION_JSON, partial))
        write_json(COORDINATION_JSON, res)
        for m, runs in res["runs"].items():
            print(m, [(r["metrics"]["success_rate_mean"], r["metrics"]["collision_rate_mean"]) for r in runs],
                  flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
