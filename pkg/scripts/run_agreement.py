"""SGLD-vs-Gibbs agreement on a one-region instance (p=400, L=40, n=500).

Reports the RMSE between posterior means of beta*delta, the PIP Hamming
distance at 0.5, and the same Hamming distance between two Gibbs chains
with different seeds as a Monte Carlo reference.

    python3 scripts/run_agreement.py --out results/agreement
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from sbios.model_core import Hyperparams
from sbios.samplers import SamplerConfig, run_chain
from sbios.simgen import SimConfig, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--amplitude", type=float, default=0.5)
    ap.add_argument("--gibbs-iterations", type=int, default=5000)
    ap.add_argument("--sgld-iterations", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", type=Path, default=Path("results/agreement"))
    args = ap.parse_args()

    cfg = SimConfig(dims=(20, 20), region_grid=(1, 1), n=500, batch_size=500, pattern="none",
                    amplitude=args.amplitude, bump_centres=((0.5, 0.5),), bump_width=0.1, seed=args.seed)
    store, truth, basis = generate(cfg, args.out / "data")
    Tg, Ts = args.gibbs_iterations, args.sgld_iterations
    runs = {"gibbs": ("gibbs", Tg, Tg // 5, 1), "gibbs_seed2": ("gibbs", Tg, Tg // 5, 2),
            "sgld_zero": ("sgld_zero", Ts, Ts // 2, 1)}
    chains = {}
    for name, (alg, T, B, seed) in runs.items():
        t0 = time.perf_counter()
        chains[name] = run_chain(store, basis, SamplerConfig(algorithm=alg, iterations=T, burn_in=B, seed=seed,
                                                             subsample=100), Hyperparams(),
                                 workdir=args.out / f"work_{name}")
        print(f"{name}: {time.perf_counter() - t0:.0f} s")

    def compare(a, b):
        a, b = chains[a], chains[b]
        return {"rmse": float(np.sqrt(np.mean((a.beta_delta_mean[0] - b.beta_delta_mean[0]) ** 2))),
                "hamming": float(np.mean((a.pip[0] >= 0.5) != (b.pip[0] >= 0.5)))}

    res = {"L": basis.L, "active": int(truth.delta_true.sum()),
           "sgld_vs_gibbs": compare("sgld_zero", "gibbs"), "gibbs_vs_gibbs": compare("gibbs_seed2", "gibbs")}
    null = ~truth.delta_true
    res["null_pip_mean"] = {k: float(c.pip[0][null].mean()) for k, c in chains.items()}
    (args.out / "agreement.json").write_text(json.dumps(res, indent=2))
    np.savez(args.out / "pips.npz", truth=truth.delta_true, **{k: c.pip[0] for k, c in chains.items()})
    print(json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
