#!/usr/bin/env python3
"""Convert a raw Cora download into the TSV triple the CLI ingests.

Two raw layouts are recognized:

  linqs      cora.content + cora.cites (tab-separated text)
             https://linqs.org/datasets/  (cora.tgz)
  planetoid  ind.cora.{x,tx,allx,y,ty,ally,graph,test.index}
             (pickled scipy matrices, Planetoid splits)

Usage: python3 scripts/prepare_cora.py RAW_DIR OUT_DIR [--format auto]

Writes OUT_DIR/{edges,features,labels}.tsv. Only nonzero feature values are
emitted (a stored zero counts as absent downstream). Node and class names
map to dense ids by sorted order at load time, so the TSVs keep the raw
string identifiers.
"""

import argparse
import pickle
import sys
from pathlib import Path

import numpy as np


def detect_format(raw):
    if (raw / "cora.content").exists() and (raw / "cora.cites").exists():
        return "linqs"
    if (raw / "ind.cora.allx").exists():
        return "planetoid"
    raise SystemExit(f"error: {raw} holds neither cora.content/cora.cites "
                     "nor ind.cora.* files")


def convert_linqs(raw, out):
    labels, feats = {}, {}
    with open(raw / "cora.content", encoding="utf-8") as fh:
        for line in fh:
            fields = line.rstrip("\n").split("\t")
            if len(fields) < 3:
                continue
            node, values, cls = fields[0], fields[1:-1], fields[-1]
            labels[node] = cls
            feats[node] = {f"w{j}": v for j, v in enumerate(values) if float(v) != 0.0}
    class_id = {c: i for i, c in enumerate(sorted(set(labels.values())))}

    edges, dangling = set(), 0
    with open(raw / "cora.cites", encoding="utf-8") as fh:
        for line in fh:
            fields = line.split()
            if len(fields) != 2:
                continue
            a, b = fields
            if a == b:
                continue
            if a not in labels or b not in labels:
                dangling += 1
                continue
            edges.add((min(a, b), max(a, b)))
    if dangling:
        print(f"note: skipped {dangling} cite lines with endpoints missing "
              "from cora.content", file=sys.stderr)

    _write(out, sorted(edges),
           ((n, f, float(v)) for n in sorted(feats) for f, v in sorted(feats[n].items())),
           ((n, class_id[c]) for n, c in sorted(labels.items())))
    print(f"linqs: {len(labels)} nodes, {len(edges)} edges, "
          f"{len(class_id)} classes -> {out}")


def _unpickle(path):
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def convert_planetoid(raw, out):
    from scipy.sparse import vstack

    allx = _unpickle(raw / "ind.cora.allx")
    tx = _unpickle(raw / "ind.cora.tx")
    ally = np.asarray(_unpickle(raw / "ind.cora.ally"))
    ty = np.asarray(_unpickle(raw / "ind.cora.ty"))
    graph = _unpickle(raw / "ind.cora.graph")
    test_idx = np.atleast_1d(np.loadtxt(raw / "ind.cora.test.index", dtype=int))

    # test rows arrive shuffled: position test_idx[i] holds row i of tx
    x = vstack([allx, tx]).tolil()
    y = np.vstack([ally, ty])
    order = np.sort(test_idx)
    x[test_idx] = x[order]
    y[test_idx] = y[order]
    x = x.tocsr()

    n = x.shape[0]
    width = len(str(n - 1))
    name = [f"n{str(i).zfill(width)}" for i in range(n)]

    edges = set()
    for u, nbrs in graph.items():
        for v in nbrs:
            if u == v or u >= n or v >= n:
                continue
            edges.add((min(u, v), max(u, v)))

    def feature_triples():
        coo = x.tocoo()
        for i, j, v in sorted(zip(coo.row, coo.col, coo.data)):
            if v != 0.0:
                yield name[i], f"w{j}", float(v)

    _write(out, sorted((name[u], name[v]) for u, v in edges),
           feature_triples(),
           ((name[i], int(y[i].argmax())) for i in range(n)))
    print(f"planetoid: {n} nodes, {len(edges)} edges, "
          f"{y.shape[1]} classes -> {out}")


def _write(out, edge_pairs, feature_triples, label_pairs):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "edges.tsv", "w", encoding="utf-8") as fh:
        for a, b in edge_pairs:
            fh.write(f"{a}\t{b}\n")
    with open(out / "features.tsv", "w", encoding="utf-8") as fh:
        for node, feat, val in feature_triples:
            fh.write(f"{node}\t{feat}\t{val!r}\n")
    with open(out / "labels.tsv", "w", encoding="utf-8") as fh:
        for node, cls in label_pairs:
            fh.write(f"{node}\t{cls}\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("raw_dir", type=Path, help="directory with the raw download")
    ap.add_argument("out_dir", type=Path, help="where to write the TSV triple")
    ap.add_argument("--format", choices=("auto", "linqs", "planetoid"),
                    default="auto")
    args = ap.parse_args()
    fmt = detect_format(args.raw_dir) if args.format == "auto" else args.format
    if fmt == "linqs":
        convert_linqs(args.raw_dir, args.out_dir)
    else:
        convert_planetoid(args.raw_dir, args.out_dir)


if __name__ == "__main__":
    main()
