"""Task heads, losses, metrics, and the train/eval protocol.

Node classification and link prediction share one full-batch loop with
best-validation-loss model selection; run_experiment drives the method
dispatch over seeds and emits the results CSV.
"""

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .graph import GraphError, apply_missing_mask, make_split, remove_edges, to_allotropic
from .imputation import (DenseGnnModel, feature_propagation, impute_neighborhood_mean,
                         impute_special_label, impute_then_grafenne)
from .model import GrafenneConfig, GrafenneModel, VanillaAltModel
from .optim import AdamState, adam_step, zero_grad

TASKS = ("node_classification", "link_prediction")
METHODS = ("grafenne", "grafenne_gat", "grafenne_gin", "sage", "gat", "gin",
           "nm+sage", "fp+sage", "nm+grafenne", "fp+grafenne", "vanilla_alt")


@dataclass
class TrainConfig:
    task: str = "node_classification"
    epochs: int = 1000
    lr: float = 1e-4
    seeds: tuple = (0, 1, 2, 3, 4)
    patience: int = 200
    neg_ratio: float = 1.0

    def validate(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.lr < 0:
            raise ValueError("negative learning rate")
        if self.neg_ratio <= 0:
            raise ValueError("neg_ratio must be positive")


@dataclass
class RunResult:
    """Per-seed metric values plus wall-clock timing."""

    metric: str
    values: dict
    seconds_by_seed: dict = field(default_factory=dict)
    history: list = None

    @property
    def mean(self):
        return float(np.mean(list(self.values.values())))

    @property
    def std(self):
        return float(np.std(list(self.values.values())))

    @property
    def seconds(self):
        return float(sum(self.seconds_by_seed.values()))

    def display_std(self):
        # reporting convention: tiny deviations print as 0
        s = self.std
        return 0.0 if s < 0.01 else s


def classify_head(h, c=None, weights=None, bias=None):
    """Linear map d -> c producing class logits.

    Zero-initialized weights are created when none are passed, which makes
    the softmax uniform and the cross entropy ln(c)."""
    h = T.as_tensor(h)
    if weights is None:
        if c is None:
            raise ValueError("classify_head needs either c or explicit weights")
        weights = T.Parameter(np.zeros((h.shape[1], c)), "head/W")
    weights = T.as_tensor(weights)
    if bias is None:
        bias = T.Parameter(np.zeros(weights.shape[1]), "head/b")
    return T.add(T.matmul(h, weights), T.as_tensor(bias))


def link_score(h_u, h_v):
    """Dot-product decoder; sigmoid of the logit is the edge probability."""
    h_u, h_v = T.as_tensor(h_u), T.as_tensor(h_v)
    prod = T.mul(h_u, h_v)
    width = prod.shape[-1]
    return T.matmul(prod, T.Tensor(np.ones(width)))


def negative_sample(g, k_per_pos=1.0, seed=0):
    """Uniform sample of distinct non-edges, disjoint from the positives.

    Draws round(k_per_pos * |E|) pairs (at least one). Rejection sampling,
    so the draw is uniform over the non-edge set and seed-deterministic.
    """
    n = g.num_nodes
    pos = set(g.edges)
    total = n * (n - 1) // 2
    free = total - len(pos)
    if free == 0:
        raise GraphError("graph is complete: no non-edges to sample")
    want = max(1, int(round(k_per_pos * g.num_edges)))
    if want > free:
        raise GraphError(f"requested {want} negatives but only {free} non-edges exist")
    rng = np.random.default_rng([seed, 101])
    nodes = g.nodes
    out = set()
    while len(out) < want:
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        u, v = nodes[i], nodes[j]
        e = (u, v) if u < v else (v, u)
        if e not in pos and e not in out:
            out.add(e)
    return tuple(sorted(out))


def accuracy(preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("empty prediction set")
    return float(np.mean(preds == labels))


def auc_roc(scores, targets):
    """Rank-based (Mann-Whitney) AUC; ties contribute 0.5 via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    pos = targets == 1
    n1 = int(pos.sum())
    n0 = int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("auc_roc needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


@dataclass(frozen=True)
class LinkSplit:
    train_pos: tuple
    val_pos: tuple
    test_pos: tuple
    train_neg: tuple
    val_neg: tuple
    test_neg: tuple
    graph: object  # training graph: val/test positives removed


def _partition(items, fractions, perm):
    sizes = [math.floor(len(items) * f) for f in fractions]
    if abs(sum(fractions) - 1.0) < 1e-9:
        sizes[0] += len(items) - sum(sizes)
    cuts = np.cumsum([0] + sizes)
    return [tuple(sorted(items[i] for i in perm[cuts[k]:cuts[k + 1]]))
            for k in range(len(sizes))]


def make_link_split(g, fractions=(0.6, 0.2, 0.2), seed=0, neg_ratio=1.0):
    """Edge-level split with fixed disjoint negatives per partition."""
    if g.num_edges < 3:
        raise GraphError("too few edges for a link split")
    rng = np.random.default_rng([seed, 53])
    pos_parts = _partition(g.edges, fractions, rng.permutation(g.num_edges))
    negs = negative_sample(g, k_per_pos=neg_ratio, seed=seed)
    neg_parts = _partition(negs, fractions, rng.permutation(len(negs)))
    graph = remove_edges(g, pos_parts[1] + pos_parts[2])
    return LinkSplit(pos_parts[0], pos_parts[1], pos_parts[2],
                     neg_parts[0], neg_parts[1], neg_parts[2], graph)


def _default_forward(model, g):
    if isinstance(model, DenseGnnModel):
        dense = impute_special_label(g)
        return lambda: model.forward(g, dense)
    alt = to_allotropic(g)
    return lambda: model.forward(alt)[0]


def _snapshot(params):
    return {p.name: p.values.copy() for p in params}


def _restore(params, snap):
    for p in params:
        p.values = snap[p.name].copy()


def train(model, g, split, cfg, forward=None, record_history=False):
    """Full-batch training with best-validation-loss model selection.

    Returns a single-seed RunResult keyed by the model's own seed."""
    cfg.validate()
    if cfg.task == "link_prediction":
        return _train_link(model, split, cfg, forward, record_history)
    return _train_node(model, g, split, cfg, forward, record_history)


def _fit(model, cfg, forward, train_loss_fn, val_loss_fn, record_history):
    state = AdamState()
    best_loss, best_snap, best_epoch = math.inf, None, -1
    history = [] if record_history else None
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        loss = train_loss_fn(forward())
        # refresh after the forward: embedding rows are created lazily
        params = model.trainable_parameters()
        zero_grad(params)
        T.backward(loss)
        state = adam_step(params, lr=cfg.lr, state=state)
        val_loss = val_loss_fn(forward()).item()
        if record_history:
            history.append(val_loss)
        if best_snap is None or val_loss < best_loss:
            best_loss, best_snap, best_epoch = val_loss, _snapshot(params), epoch
        if epoch - best_epoch >= cfg.patience:
            break
    _restore(model.trainable_parameters(), best_snap)
    return best_loss, history, time.perf_counter() - t0


def _train_node(model, g, split, cfg, forward, record_history):
    for part, name in ((split.train, "train"), (split.val, "val"), (split.test, "test")):
        if not part:
            raise ValueError(f"empty {name} split")
    if forward is None:
        forward = _default_forward(model, g)
    row_of = {v: i for i, v in enumerate(g.nodes)}
    rows = {k: np.array([row_of[v] for v in part], dtype=np.int64)
            for k, part in (("train", split.train), ("val", split.val), ("test", split.test))}
    ys = {k: np.array([g.labels[v] for v in part], dtype=np.int64)
          for k, part in (("train", split.train), ("val", split.val), ("test", split.test))}

    def loss_on(which):
        return lambda h: T.cross_entropy(T.gather_rows(model.logits(h), rows[which]), ys[which])

    best_loss, history, secs = _fit(model, cfg, forward, loss_on("train"), loss_on("val"),
                                    record_history)
    h = forward()
    preds = model.logits(h).values[rows["test"]].argmax(axis=1)
    acc = accuracy(preds, ys["test"])
    seed = model.config.seed
    return RunResult("accuracy", {seed: acc}, {seed: secs}, history)


def _train_link(model, split, cfg, forward, record_history):
    for part, name in ((split.train_pos, "train"), (split.val_pos, "val"),
                       (split.test_pos, "test")):
        if not part:
            raise ValueError(f"empty {name} split")
    graph = split.graph
    if forward is None:
        forward = _default_forward(model, graph)
    row_of = {v: i for i, v in enumerate(graph.nodes)}

    def pack(pos, neg):
        pairs = list(pos) + list(neg)
        us = np.array([row_of[u] for u, _ in pairs], dtype=np.int64)
        vs = np.array([row_of[v] for _, v in pairs], dtype=np.int64)
        t = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        return us, vs, t

    packs = {"train": pack(split.train_pos, split.train_neg),
             "val": pack(split.val_pos, split.val_neg),
             "test": pack(split.test_pos, split.test_neg)}

    def loss_on(which):
        us, vs, t = packs[which]
        return lambda h: T.bce_with_logits(
            link_score(T.gather_rows(h, us), T.gather_rows(h, vs)), t)

    best_loss, history, secs = _fit(model, cfg, forward, loss_on("train"), loss_on("val"),
                                    record_history)
    h = forward()
    us, vs, t = packs["test"]
    scores = link_score(T.gather_rows(h, us), T.gather_rows(h, vs)).values
    seed = model.config.seed
    return RunResult("aucroc", {seed: auc_roc(scores, t)}, {seed: secs}, history)


def method_model(method, g, task, dim=64, layers=2, seed=0, fp_iterations=40,
                 caps=(0, 0, 0)):
    """Build (model, forward) for one experiment method on one graph."""
    num_classes = g.num_classes if task == "node_classification" else None
    base = dict(layers=layers, dim=dim, seed=seed, cap_features=caps[0],
                cap_nodes=caps[1], cap_graph=caps[2])

    def grafenne_on(graph, backend):
        model = GrafenneModel(GrafenneConfig(phase2=backend, **base), num_classes)
        alt = to_allotropic(graph)
        return model, lambda: model.forward(alt)[0]

    def dense_on(graph, backend, dense):
        model = DenseGnnModel(GrafenneConfig(phase2=backend, **base),
                              len(dense.feat_ids), num_classes)
        return model, lambda: model.forward(graph, dense)

    if method in ("grafenne", "grafenne_gat", "grafenne_gin"):
        backend = {"grafenne": "sage", "grafenne_gat": "gat", "grafenne_gin": "gin"}[method]
        return grafenne_on(g, backend)
    if method in ("sage", "gat", "gin"):
        return dense_on(g, method, impute_special_label(g))
    if method == "vanilla_alt":
        model = VanillaAltModel(GrafenneConfig(phase2="sage", **base), num_classes)
        alt = to_allotropic(g)
        return model, lambda: model.forward(alt)[0]
    if "+" in method:
        imp, backend = method.split("+", 1)
        if imp in ("nm", "fp"):
            if backend == "grafenne":
                return grafenne_on(impute_then_grafenne(g, imp, fp_iterations), "sage")
            if backend in ("sage", "gat", "gin"):
                dense = (impute_neighborhood_mean(g) if imp == "nm"
                         else feature_propagation(g, fp_iterations))
                return dense_on(g, backend, dense)
    raise ValueError(f"unknown method {method!r}; known: {', '.join(METHODS)}")


def run_experiment(g, method, p=0.0, cfg=None, dim=64, layers=2, fp_iterations=40,
                   caps=(0, 0, 0)):
    """Mask, split, train, and evaluate over every seed in the config."""
    cfg = cfg if cfg is not None else TrainConfig()
    cfg.validate()
    values, secs = {}, {}
    metric = None
    for seed in cfg.seeds:
        gm = apply_missing_mask(g, p, seed)
        if cfg.task == "node_classification":
            split = make_split(gm, seed=seed)
            model, fwd = method_model(method, gm, cfg.task, dim, layers, seed,
                                      fp_iterations, caps)
            res = train(model, gm, split, cfg, forward=fwd)
        else:
            lsp = make_link_split(gm, seed=seed, neg_ratio=cfg.neg_ratio)
            model, fwd = method_model(method, lsp.graph, cfg.task, dim, layers, seed,
                                      fp_iterations, caps)
            res = train(model, gm, lsp, cfg, forward=fwd)
        metric = res.metric
        values.update(res.values)
        secs.update(res.seconds_by_seed)
    return RunResult(metric, values, secs)


RESULT_HEADER = ("dataset", "method", "task", "p", "seed", "metric", "value", "seconds")


def _fmt(x):
    return f"{x:.10g}"


def result_rows(dataset, method, task, p, result, timing="none"):
    """One CSV row per seed plus mean/std pseudo-seeds.

    timing="none" (the default) writes 0 seconds so reruns are
    byte-identical; timing="wall" records measured wall-clock time.
    """
    rows = []
    for seed in result.values:
        secs = result.seconds_by_seed.get(seed, 0.0) if timing == "wall" else 0.0
        rows.append((dataset, method, task, _fmt(p), str(seed), result.metric,
                     _fmt(result.values[seed]), _fmt(secs)))
    total = result.seconds if timing == "wall" else 0.0
    rows.append((dataset, method, task, _fmt(p), "mean", result.metric,
                 _fmt(result.mean), _fmt(total)))
    rows.append((dataset, method, task, _fmt(p), "std", result.metric,
                 _fmt(result.std), _fmt(0.0)))
    return rows


def write_results_csv(path, rows, append=False):
    mode = "a" if append else "w"
    fresh = not append
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(RESULT_HEADER)
        w.writerows(rows)
