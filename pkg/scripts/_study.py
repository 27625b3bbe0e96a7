"""Shared driver for the study scripts."""

import argparse
import json
import os
import time

from damlab.simharness import PRESETS, StudyConfig, run_study, write_outputs


def main(preset: str, description: str) -> None:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--reps", type=int, default=None, help="replications per cell (preset default otherwise)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default=os.path.join("runs", preset))
    args = ap.parse_args()
    kw = dict(PRESETS[preset], seed=args.seed, workers=args.workers)
    if args.reps is not None:
        kw["replications"] = args.reps
    config = StudyConfig(**kw)
    start = time.time()
    result = run_study(config, progress=lambda i, cell: print(f"cell {i + 1}: e^b0={cell[0]} e^b1={cell[1]} done",
                                                            flush=True))
    write_outputs(result, args.out)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    at = result.metrics[result.metrics.horizon == config.b]
    print(f"base autocorr {result.base_autocorr:.3f}, {time.time() - start:.0f}s")
    print(at[["exp_beta0", "exp_beta1", "estimator", "bias", "sd", "mse", "rejection"]].to_string(index=False))
