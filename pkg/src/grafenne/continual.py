"""Streaming-graph training: EWC, fine-tuning, replay, and oracle strategies.

Timestamp 1 trains on the initial snapshot; each later timestamp applies a
delta and adapts on the affected training nodes only (except ORACLE, which
retrains from scratch). Whole-graph test accuracy is reported per timestamp
against the split fixed at t=1.
"""

import csv
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import make_split, to_allotropic
from .model import GrafenneConfig, GrafenneModel
from .optim import AdamState, adam_step, zero_grad
from .stream import apply_delta
from .tasks import accuracy

STRATEGIES = ("EWC", "FT", "ER", "ORACLE")


@dataclass
class StreamConfig:
    epochs: int = 200          # full-training budget (t=1 and ORACLE)
    stream_epochs: int = 50    # per-timestamp adaptation budget
    lr: float = 0.01
    lam: float = 100000.0
    u_size: int = 25
    er_capacity: int = None    # defaults to u_size
    dim: int = 32
    layers: int = 2
    phase2: str = "sage"
    seed: int = 0
    split_fractions: tuple = (0.6, 0.2, 0.2)

    def validate(self):
        if self.epochs < 1 or self.stream_epochs < 1:
            raise ValueError("epoch budgets must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.u_size < 0:
            raise ValueError("u_size must be nonnegative")
        if self.er_capacity is not None and self.er_capacity < 0:
            raise ValueError("er_capacity must be nonnegative")
        if self.lr < 0:
            raise ValueError("negative learning rate")

    def replay_capacity(self):
        return self.u_size if self.er_capacity is None else self.er_capacity


@dataclass
class EwcState:
    """One parameter snapshot plus one importance vector — nothing grows
    with stream length."""

    lam: float = 100000.0
    u_size: int = 25
    snapshot: dict = field(default_factory=dict)
    omega: dict = field(default_factory=dict)
    u_nodes: tuple = ()


class ReplayBuffer:
    """Reservoir of (node id, snapshot-time label) pairs."""

    def __init__(self, capacity, seed=0):
        self.capacity = int(capacity)
        self.items = []
        self.seen = 0
        self._rng = np.random.default_rng([seed, 409])

    def add(self, node, label):
        self.seen += 1
        if self.capacity == 0:
            return
        if len(self.items) < self.capacity:
            self.items.append((node, label))
        else:
            j = int(self._rng.integers(0, self.seen))
            if j < self.capacity:
                self.items[j] = (node, label)

    def entries(self):
        return tuple(self.items)

    def __len__(self):
        return len(self.items)


def sample_U(train_nodes, size, seed):
    """Uniform subset of training nodes, without replacement."""
    pool = sorted(train_nodes)
    if size > len(pool):
        raise ValueError(f"requested {size} nodes from a pool of {len(pool)}")
    rng = np.random.default_rng([seed, 211])
    idx = rng.choice(len(pool), size=size, replace=False)
    return tuple(sorted(pool[i] for i in idx))


def _grafenne_forward(model, g):
    alt = to_allotropic(g)
    return lambda: model.forward(alt)[0]


def compute_importance(model, g_t, nodes, forward=None, per_node_loss=None):
    """Mean squared per-node loss gradient, parameter entry by entry.

    One backward per node over a shared forward tape; the result is plain
    numpy, detached from any tape. Empty node set degenerates to zero
    importance (with a warning) — pure fine-tuning."""
    if per_node_loss is None:
        if forward is None:
            forward = _grafenne_forward(model, g_t)
        h = forward()
        logits = model.logits(h)
        row_of = {v: i for i, v in enumerate(g_t.nodes)}

        def per_node_loss(v):
            return T.cross_entropy(T.gather_rows(logits, np.array([row_of[v]])),
                                   np.array([g_t.labels[v]]))
    params = model.trainable_parameters()
    omega = {p.name: np.zeros_like(p.values) for p in params}
    order = sorted(nodes)
    if not order:
        warnings.warn("importance over an empty node set is zero (fine-tuning)")
        return omega
    for v in order:
        loss = per_node_loss(v)
        # the shared tape keeps grads between backwards; reset the whole
        # reachable slice, not just parameters
        for node in T._topo_order(loss):
            node.grad = None
        zero_grad(params)
        T.backward(loss)
        for p in params:
            omega[p.name] += np.square(p.grad)
    inv = 1.0 / len(order)
    for k in omega:
        omega[k] *= inv
    return omega


def _sum_loss(model, h, g, nodes, labels=None):
    """Task loss summed (not averaged) over the given nodes."""
    row_of = {v: i for i, v in enumerate(g.nodes)}
    rows = np.array([row_of[v] for v in nodes], dtype=np.int64)
    ys = np.array([g.labels[v] for v in nodes] if labels is None else labels,
                  dtype=np.int64)
    ce = T.cross_entropy(T.gather_rows(model.logits(h), rows), ys)
    return T.mul(ce, float(len(nodes)))


def continual_loss(model, affected_train_nodes, ewc, forward=None, graph=None):
    """Sum of per-node task losses on the affected nodes plus the quadratic
    importance-weighted penalty against the stored snapshot."""
    affected = sorted(affected_train_nodes)
    if affected:
        if graph is None:
            raise ValueError("continual_loss needs the current graph for labels")
        if forward is None:
            forward = _grafenne_forward(model, graph)
        task = _sum_loss(model, forward(), graph, affected)
    else:
        task = T.Tensor(np.asarray(0.0))
    penalty = None
    for p in model.trainable_parameters():
        snap = ewc.snapshot.get(p.name)
        if snap is None:
            continue  # parameter born after the snapshot: no prior to preserve
        if snap.shape != p.values.shape:
            raise ValueError(f"parameter {p.name} changed shape "
                             f"{snap.shape} -> {p.values.shape} across timestamps")
        om = ewc.omega.get(p.name)
        if om is None:
            continue
        diff = T.sub(p, T.Tensor(snap))
        term = T.sum_all(T.mul(T.mul(diff, diff), T.Tensor(om)))
        penalty = term if penalty is None else T.add(penalty, term)
    if penalty is None:
        return task
    return T.add(task, T.mul(penalty, ewc.lam / 2.0))


@dataclass(frozen=True)
class StreamRecord:
    strategy: str
    t: int
    accuracy: float
    seconds: float
    params_changed: int


def _train_plain(model, forward, loss_fn, epochs, lr):
    state = AdamState()
    for _ in range(epochs):
        loss = loss_fn(forward())
        params = model.trainable_parameters()
        zero_grad(params)
        T.backward(loss)
        state = adam_step(params, lr=lr, state=state)


def _evaluate(model, g, test_nodes):
    alive = sorted(v for v in test_nodes if v in g.labels)
    if not alive:
        raise ValueError("test set is empty at this timestamp")
    fwd = _grafenne_forward(model, g)
    row_of = {v: i for i, v in enumerate(g.nodes)}
    rows = np.array([row_of[v] for v in alive], dtype=np.int64)
    preds = model.logits(fwd()).values[rows].argmax(axis=1)
    return accuracy(preds, np.array([g.labels[v] for v in alive]))


def _entries_changed(before, model):
    changed = 0
    for p in model.trainable_parameters():
        old = before.get(p.name)
        if old is None or old.shape != p.values.shape:
            changed += p.values.size
        else:
            changed += int((old != p.values).sum())
    return changed


def run_stream(g_1, deltas, strategy, cfg=None):
    """Train through a stream of deltas with one strategy.

    Returns (records, final model); one StreamRecord per timestamp,
    including t=1's initial full training."""
    strategy = strategy.upper()
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; known: {', '.join(STRATEGIES)}")
    cfg = cfg if cfg is not None else StreamConfig()
    cfg.validate()
    split = make_split(g_1, cfg.split_fractions, seed=cfg.seed)
    train_pool = set(split.train)
    test_pool = set(split.test)
    model_cfg = GrafenneConfig(layers=cfg.layers, dim=cfg.dim, phase2=cfg.phase2,
                               seed=cfg.seed)

    def fresh_model():
        return GrafenneModel(model_cfg, g_1.num_classes)

    def full_train(model, g):
        fwd = _grafenne_forward(model, g)
        pool = sorted(train_pool)
        _train_plain(model, fwd,
                     lambda h: T.mul(_sum_loss(model, h, g, pool), 1.0 / len(pool)),
                     cfg.epochs, cfg.lr)

    records = []
    g = g_1
    model = fresh_model()
    t0 = time.perf_counter()
    full_train(model, g)
    secs = time.perf_counter() - t0
    records.append(StreamRecord(strategy, 1, _evaluate(model, g, test_pool), secs,
                                _entries_changed({}, model)))

    ewc = EwcState(lam=cfg.lam, u_size=cfg.u_size)
    buffer = ReplayBuffer(cfg.replay_capacity(), seed=cfg.seed)
    if strategy == "ER":
        for v in sorted(train_pool):
            buffer.add(v, g.labels[v])

    for delta in deltas:
        g, affected = apply_delta(g, delta)
        for v, label in delta.add_nodes:
            if label is not None:
                train_pool.add(v)
        for v in delta.del_nodes:
            train_pool.discard(v)
            test_pool.discard(v)
        affected_train = sorted(v for v in affected
                                if v in train_pool and v in g.labels)
        before = {p.name: p.values.copy() for p in model.trainable_parameters()}
        t0 = time.perf_counter()
        if strategy == "ORACLE":
            if not delta.is_empty():
                model = fresh_model()
                full_train(model, g)
        elif affected_train:
            fwd = _grafenne_forward(model, g)
            if strategy == "EWC":
                u = sample_U(train_pool, min(cfg.u_size, len(train_pool)),
                             seed=cfg.seed * 100003 + delta.t)
                unaffected = tuple(v for v in u if v not in set(affected_train))
                ewc.u_nodes = u
                ewc.omega = compute_importance(model, g, unaffected, forward=fwd)
                ewc.snapshot = {p.name: p.values.copy()
                                for p in model.trainable_parameters()}
                _train_plain(model, fwd,
                             lambda h: continual_loss(model, affected_train, ewc,
                                                      forward=lambda: h, graph=g),
                             cfg.stream_epochs, cfg.lr)
            elif strategy == "FT":
                _train_plain(model, fwd,
                             lambda h: _sum_loss(model, h, g, affected_train),
                             cfg.stream_epochs, cfg.lr)
            else:  # ER
                replay = [(v, y) for v, y in buffer.entries() if v in g.labels]
                nodes = affected_train + [v for v, _ in replay]
                labels = [g.labels[v] for v in affected_train] + [y for _, y in replay]
                _train_plain(model, fwd,
                             lambda h: _sum_loss(model, h, g, nodes, labels),
                             cfg.stream_epochs, cfg.lr)
                for v in affected_train:
                    buffer.add(v, g.labels[v])
        secs = time.perf_counter() - t0
        records.append(StreamRecord(strategy, delta.t,
                                    _evaluate(model, g, test_pool), secs,
                                    _entries_changed(before, model)))
    return records, model


STREAM_HEADER = ("strategy", "t", "accuracy", "seconds", "params_changed")


def stream_rows(records, timing="none"):
    rows = []
    for r in records:
        secs = r.seconds if timing == "wall" else 0.0
        rows.append((r.strategy, str(r.t), f"{r.accuracy:.10g}", f"{secs:.10g}",
                     str(r.params_changed)))
    return rows


def write_stream_csv(path, rows, append=False):
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(STREAM_HEADER)
        w.writerows(rows)
