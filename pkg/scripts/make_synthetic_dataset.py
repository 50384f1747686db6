"""Generate a planted-partition dataset in the canonical directory layout.

Gives the CLI something to chew on when the real citation graphs are not
available: assortative SBM structure plus class-prototype features, split
Planetoid-style (fixed train quota per class, then val, rest test).

    python scripts/make_synthetic_dataset.py --out data/synth --nodes 600
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from hydro.graphcore import Graph, save_dataset  # noqa: E402


def build(n, classes, dim, p_in, p_out, train_per_class, val_size, noise, rng):
    labels = np.sort(rng.integers(0, classes, size=n)).astype(np.int64)
    protos = rng.normal(size=(classes, dim))
    feats = protos[labels] + noise * rng.normal(size=(n, dim))

    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    draw = rng.random((n, n))
    upper = np.triu(draw < prob, k=1)
    adj = (upper | upper.T).astype(np.float64)

    train = []
    for c in range(classes):
        members = np.flatnonzero(labels == c)
        if members.size < train_per_class:
            raise SystemExit(f"class {c} has only {members.size} nodes; "
                             f"lower --train-per-class or raise --nodes")
        train.extend(rng.choice(members, size=train_per_class, replace=False))
    train = np.array(sorted(train), dtype=np.int64)
    rest = np.setdiff1d(np.arange(n), train)
    val = np.sort(rng.choice(rest, size=min(val_size, rest.size // 2),
                             replace=False))
    test = np.setdiff1d(rest, val)
    splits = {"train": train, "val": val.astype(np.int64),
              "test": test.astype(np.int64)}
    return Graph(n=n, adjacency=adj, features=feats, labels=labels,
                 splits=splits).validate()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--nodes", type=int, default=600)
    ap.add_argument("--classes", type=int, default=6)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--p-in", type=float, default=0.06)
    ap.add_argument("--p-out", type=float, default=0.004)
    ap.add_argument("--train-per-class", type=int, default=20)
    ap.add_argument("--val-size", type=int, default=120)
    ap.add_argument("--noise", type=float, default=0.8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    g = build(args.nodes, args.classes, args.dim, args.p_in, args.p_out,
              args.train_per_class, args.val_size, args.noise, rng)
    save_dataset(g, args.out)
    print(f"{args.out}: n={g.n} edges={g.num_edges} classes={g.num_classes} "
          f"d={g.features.shape[1]} splits="
          f"{[int(s.size) for s in g.splits.values()]}")


if __name__ == "__main__":
    main()
