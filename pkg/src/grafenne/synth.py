"""Synthetic community graphs with class-correlated sparse binary features."""

import numpy as np

from .graph import HeteroGraph


def make_community_graph(n=100, classes=2, feats_per_class=5, p_in=0.05,
                         p_out=0.005, density=0.7, noise=0.02, seed=0):
    """Planted-partition graph whose features give the class away.

    Node v belongs to class v % classes. Each class owns a block of
    feats_per_class indicator features; a node holds each owned feature
    with probability `density` (value 1.0) and each foreign feature with
    probability `noise`. Every node is labeled.
    """
    rng = np.random.default_rng([seed, 97])
    labels = {v: v % classes for v in range(n)}
    edges = []
    for u in range(n):
        for v in range(u + 1, n):
            p = p_in if labels[u] == labels[v] else p_out
            if rng.random() < p:
                edges.append((u, v))
    feats = {}
    for v in range(n):
        fmap = {}
        for c in range(classes):
            for k in range(feats_per_class):
                p = density if c == labels[v] else noise
                if rng.random() < p:
                    fmap[c * feats_per_class + k] = 1.0
        if fmap:
            feats[v] = fmap
    return HeteroGraph(range(n), edges, feats, labels, num_classes=classes)
