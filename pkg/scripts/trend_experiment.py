"""Toy trend experiment: FP vs PTQ vs PTQ + compensation vs finetuned, averaged over seeds.

    python3 scripts/trend_experiment.py [--arch mlp] [--seeds 5] [--json out.json]
"""
import argparse
import json
import sys

from qwt.experiments import TREND_PRESETS, run_trend


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--arch", choices=sorted(TREND_PRESETS), action="append")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--json")
    args = p.parse_args()
    rows = []
    for arch in args.arch or list(TREND_PRESETS):
        res = run_trend(arch, range(args.seeds), log=lambda m: print(m, file=sys.stderr, flush=True))
        s = res.summary()
        rows.append(s)
        print(f"{arch:18s} FP {s['fp']:.4f}  PTQ {s['ptq']:.4f}  +QwT {s['qwt']:.4f}  +QwT* {s['qwt_ft']:.4f}  "
              f"feature MSE -{100 * s['feature_mse_reduction']:.1f}%  ({s['seconds']:.0f}s)", flush=True)
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
