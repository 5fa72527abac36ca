#!/usr/bin/env python3
"""Run the inequality checkers on a few instances and write a JSON report."""
import argparse
from pathlib import Path

from brm import io
from brm.lemmas import lemma_checkers
from brm.mdp import generate_dataset, preset_mdp, random_mdp
from brm.objective import for_mdp


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/lemmas")
    ap.add_argument("--beta", type=float, default=0.4)
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--probes", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    instances = {"demo": preset_mdp("demo", args.beta)}
    for s in (1, 2):
        instances[f"random_{s}"] = random_mdp(3, 2, args.beta, seed=s)
    out = {}
    for name, mdp in instances.items():
        data = generate_dataset(mdp, n=args.n, seed=args.seed, min_visits=2)
        rep = lemma_checkers(mdp, for_mdp(mdp, data), data, args.probes, args.seed)
        out[name] = {k: v if isinstance(v, float) else v.to_dict() for k, v in rep.items()}
        status = ", ".join(f"{k}={'ok' if v.passed else 'FAIL'}" for k, v in rep.items() if not isinstance(v, float))
        print(f"{name}: {status}")
    io.dump_json(Path(args.out) / "lemmas.json", out)


if __name__ == "__main__":
    main()
