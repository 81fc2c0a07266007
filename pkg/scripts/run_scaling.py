"""Peak memory and wall time of sbios fit as the sample size grows (p=3600).

Each fit runs in a child process; peak RSS comes from the diagnostics
stream.  Memory runs use a short chain, timing runs the full ``--timing-iterations``.

    python3 scripts/run_scaling.py --n 3000 12000 --out results/scaling
"""

import argparse
import json
from pathlib import Path

from sbios.experiments import measure_fit
from sbios.simgen import SimConfig, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[3000, 12000])
    ap.add_argument("--algorithms", default="sgld0,gibbs,mua")
    ap.add_argument("--memory-iterations", type=int, default=200)
    ap.add_argument("--timing-iterations", type=int, default=5000)
    ap.add_argument("--timing-n", type=int, default=3000)
    ap.add_argument("--out", type=Path, default=Path("results/scaling"))
    args = ap.parse_args()

    rows = []
    for n in args.n:
        data = args.out / f"data_n{n}"
        if not (data / "manifest.json").exists():
            generate(SimConfig(dims=(60, 60), region_grid=(3, 3), n=n, batch_size=500, pattern="none",
                               seed=11), data)
        for alg in args.algorithms.split(","):
            iters = args.memory_iterations
            r = measure_fit(data / "manifest.json", alg, args.out / f"mem_{alg}_{n}", iterations=iters)
            rows.append({"kind": "memory", "n": n, "algorithm": alg, "iterations": iters, **r})
            print(json.dumps(rows[-1]))
    data = args.out / f"data_n{args.timing_n}"
    for alg in ("sgld0", "gibbs"):
        r = measure_fit(data / "manifest.json", alg, args.out / f"time_{alg}", iterations=args.timing_iterations)
        rows.append({"kind": "timing", "n": args.timing_n, "algorithm": alg,
                     "iterations": args.timing_iterations, **r})
        print(json.dumps(rows[-1]))
    (args.out / "scaling.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
