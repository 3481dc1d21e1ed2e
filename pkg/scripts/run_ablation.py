"""Run one ablation (or all of them) and write tables plus a verdict.

    python scripts/run_ablation.py fov_cond --work-dir runs/ablations
    python scripts/run_ablation.py all --steps 500
"""
import argparse
import dataclasses
import logging
import time

from metricdepth.ablations import ABLATIONS, ExperimentConfig, Workspace, fov_regressor_experiment, run_ablation


def main():
    p = argparse.ArgumentParser()
    p.add_argument("name", choices=ABLATIONS + ("fov_regressor", "all"))
    p.add_argument("--work-dir", default="runs/ablations")
    p.add_argument("--steps", type=int, default=None, help="override train_steps")
    p.add_argument("--resolution", type=int, default=None, help="square side length")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ExperimentConfig()
    if args.steps:
        cfg = dataclasses.replace(cfg, train_steps=args.steps, log_vs_linear_steps=args.steps)
    if args.resolution:
        cfg = dataclasses.replace(cfg, resolution=(args.resolution, args.resolution))
    names = ABLATIONS + ("fov_regressor",) if args.name == "all" else (args.name,)
    ws = Workspace(args.work_dir, cfg)
    for name in names:
        t0 = time.time()
        r = fov_regressor_experiment() if name == "fov_regressor" else run_ablation(name, cfg, workspace=ws)
        r.write(f"{args.work_dir}/reports")
        print(f"{'PASS' if r.passed else 'FAIL'} {name} ({time.time() - t0:.0f}s): {r.verdict}")


if __name__ == "__main__":
    main()
