#!/usr/bin/env python3
"""Mean |R(w_T) - R_n(w_T)| over independent dataset draws, per n."""
import argparse
from pathlib import Path

from brm import io
from brm.experiments import generalization_trend
from brm.mdp import preset_mdp
from brm.sgda import SgdaRunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/generalization")
    ap.add_argument("--beta", type=float, default=0.4)
    ap.add_argument("--ns", type=int, nargs="+", default=[100, 400, 1600])
    ap.add_argument("--draws", type=int, default=20)
    ap.add_argument("--T", type=int, default=50_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = SgdaRunConfig(batch_size=32, c1=20.0, c2=100.0, T=args.T)
    res = generalization_trend(preset_mdp("demo", args.beta), args.ns, args.draws, cfg, args.seed)
    rows = [(n, j, g, o) for n, gs, os_ in zip(res.ns, res.gaps, res.opt_gaps) for j, (g, o) in enumerate(zip(gs, os_))]
    out = Path(args.out)
    io.write_csv(out / "draws.csv", ["n", "draw", "gap", "opt_gap"], rows)
    io.write_csv(out / "summary.csv", ["n", "mean_abs_gap"], zip(res.ns, res.mean_abs_gap))
    for n, m in zip(res.ns, res.mean_abs_gap):
        print(f"n={n:5d} mean |gap|={m:.4e}")


if __name__ == "__main__":
    main()
