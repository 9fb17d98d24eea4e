"""The GRAFENNE model: per layer, (1) feature nodes message their graph
nodes through attention, (2) graph nodes exchange along original edges via
a pluggable backend (SAGE/GAT/GIN), (3) graph nodes message back to
feature nodes. Graph nodes start at zero, feature nodes at learnable
embeddings, so parameter count is independent of node and feature counts.

Attention scores use the split form
    w . LeakyReLU(a || b || c) = w_a . LR(a) + w_b . LR(b) + w_c . LR(c)
(exact, LeakyReLU being elementwise) so nothing of size (edges, 3d) is
ever materialized.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .graph import to_allotropic

_PHASE2 = ("sage", "gat", "gin")


@dataclass
class GrafenneConfig:
    layers: int = 2
    dim: int = 64
    phase2: str = "sage"
    leaky_slope: float = 0.2
    gin_epsilon: float = 0.0
    cap_features: int = 0  # max feature neighbors per graph node (phase 1)
    cap_nodes: int = 0     # max graph nodes per feature node (phase 3)
    cap_graph: int = 0     # max graph neighbors per node (phase 2)
    seed: int = 0

    def validate(self):
        if self.layers < 1:
            raise ValueError(f"layers={self.layers} < 1")
        if self.dim < 1:
            raise ValueError(f"dim={self.dim} < 1")
        if self.phase2 not in _PHASE2:
            raise ValueError(f"phase2 must be one of {_PHASE2}, got {self.phase2!r}")
        if min(self.cap_features, self.cap_nodes, self.cap_graph) < 0:
            raise ValueError("sampling caps must be >= 0")
        return self


def glorot(rng, shape):
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[1] if len(shape) > 1 else 1
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class FeatureEmbeddingTable:
    """feature id -> learnable d-vector; rows are created lazily and
    initialized from (seed, feature id) so they don't depend on the order
    features were first seen."""

    def __init__(self, dim, seed):
        self.dim = dim
        self.seed = seed
        self.rows = {}

    def ensure(self, feat_ids):
        for f in feat_ids:
            f = int(f)
            if f not in self.rows:
                rng = np.random.default_rng([self.seed, 13, f])
                init = rng.normal(0.0, 1.0 / np.sqrt(self.dim), size=self.dim)
                self.rows[f] = T.Parameter(init, f"feat_embed/{f}")

    def parameters(self):
        return [self.rows[f] for f in sorted(self.rows)]

    def __len__(self):
        return len(self.rows)


def init_states(alt, table, dim):
    """Layer-0 states: zero vectors for graph nodes, embedding rows for
    feature nodes."""
    table.ensure(alt.feat_ids)
    hg = T.Tensor(np.zeros((alt.n, dim)))
    if alt.m:
        hf = T.stack_rows([table.rows[int(f)] for f in alt.feat_ids])
    else:
        hf = T.Tensor(np.zeros((0, dim)))
    return hg, hf


def sample_caps(neighbors, cap, rng):
    """Uniform sub-list of at most cap entries; cap=0 keeps everything."""
    neighbors = list(neighbors)
    if cap <= 0 or len(neighbors) <= cap:
        return neighbors
    idx = rng.choice(len(neighbors), size=cap, replace=False)
    return [neighbors[i] for i in np.sort(idx)]


def _cap_edge_arrays(seg, arrays, cap, rng, num_segments):
    """Keep at most cap edges per segment; seg must be sorted ascending."""
    if cap <= 0 or len(seg) == 0:
        return (seg, *arrays)
    counts = np.bincount(seg, minlength=num_segments)
    if counts.max() <= cap:
        return (seg, *arrays)
    keep = []
    start = 0
    for c in counts:
        if c > cap:
            keep.append(start + np.sort(rng.choice(c, size=cap, replace=False)))
        elif c:
            keep.append(np.arange(start, start + c))
        start += c
    keep = np.concatenate(keep)
    return (seg[keep], *[a[keep] for a in arrays])


class GrafenneModel:
    def __init__(self, config, num_classes=None):
        self.config = config.validate()
        self.num_classes = num_classes
        self.params = {}
        self.table = FeatureEmbeddingTable(config.dim, config.seed)
        rng = np.random.default_rng([config.seed, 11])
        d = config.dim
        for l in range(config.layers):
            pre = f"layer{l}"
            self._add(rng, f"{pre}/p1/W1", (d, d))
            self._add(rng, f"{pre}/p1/W2", (d, d))
            self._add(rng, f"{pre}/p1/w3", (d,))
            self._add(rng, f"{pre}/p1/w4", (3 * d,))
            self._add(rng, f"{pre}/p1/W5", (d, d))
            self._add(rng, f"{pre}/p1/W6", (d, d))
            self._add_mlp(rng, f"{pre}/p1/mlp", 2 * d, d)
            if config.phase2 == "sage":
                self._add(rng, f"{pre}/p2/W13", (2 * d, d))
            elif config.phase2 == "gat":
                self._add(rng, f"{pre}/p2/W13", (d, d))
                self._add(rng, f"{pre}/p2/W14", (d, d))
                self._add(rng, f"{pre}/p2/w15", (2 * d,))
                self._add(rng, f"{pre}/p2/W16", (d, d))
            else:  # gin
                self._add_mlp(rng, f"{pre}/p2/mlp", d, d)
                self.params[f"{pre}/p2/epsilon"] = T.Parameter(
                    np.array(config.gin_epsilon), f"{pre}/p2/epsilon")
            self._add(rng, f"{pre}/p3/W7", (d, d))
            self._add(rng, f"{pre}/p3/W8", (d, d))
            self._add(rng, f"{pre}/p3/w9", (d,))
            self._add(rng, f"{pre}/p3/w10", (3 * d,))
            self._add(rng, f"{pre}/p3/W11", (d, d))
            self._add(rng, f"{pre}/p3/W12", (d, d))
            self._add_mlp(rng, f"{pre}/p3/mlp", 2 * d, d)
        if num_classes is not None:
            self._add(rng, "head/W", (d, num_classes))
            self.params["head/b"] = T.Parameter(np.zeros(num_classes), "head/b")

    def _add(self, rng, name, shape):
        assert name not in self.params, name
        self.params[name] = T.Parameter(glorot(rng, shape), name)

    def _add_mlp(self, rng, prefix, d_in, d_out):
        self._add(rng, f"{prefix}/A0", (d_in, d_out))
        self.params[f"{prefix}/b0"] = T.Parameter(np.zeros(d_out), f"{prefix}/b0")
        self._add(rng, f"{prefix}/A1", (d_out, d_out))
        self.params[f"{prefix}/b1"] = T.Parameter(np.zeros(d_out), f"{prefix}/b1")

    def _mlp_params(self, prefix):
        p = self.params
        return [p[f"{prefix}/A0"], p[f"{prefix}/b0"], p[f"{prefix}/A1"], p[f"{prefix}/b1"]]

    def trainable_parameters(self):
        return list(self.params.values()) + self.table.parameters()

    def non_embedding_parameter_count(self):
        return sum(p.size for p in self.params.values())

    def clone(self):
        twin = GrafenneModel(self.config, self.num_classes)
        for name, p in self.params.items():
            twin.params[name].values = p.values.copy()
        twin.table.ensure(sorted(self.table.rows))
        for f, row in self.table.rows.items():
            twin.table.rows[f].values = row.values.copy()
        return twin

    def _act(self, x):
        return T.leaky_relu(x, self.config.leaky_slope)

    def _sampling_rng(self, rng):
        if rng is not None:
            return rng
        return np.random.default_rng([self.config.seed, 3571])

    def forward(self, alt, rng=None):
        """Run L triple-phase layers; returns (graph states, feature states)."""
        cfg = self.config
        rng = self._sampling_rng(rng) if max(cfg.cap_features, cfg.cap_nodes, cfg.cap_graph) else None
        hg, hf = init_states(alt, self.table, cfg.dim)
        for l in range(cfg.layers):
            hg_new = self._phase1(l, alt, hg, hf, rng)
            hg_new = self._phase2(l, alt, hg_new, rng)
            hf = self._phase3(l, alt, hg_new, hf, rng)
            hg = hg_new
        return hg, hf

    def logits(self, hg):
        if self.num_classes is None:
            raise ValueError("model built without a classification head")
        return T.add(T.matmul(hg, self.params["head/W"]), self.params["head/b"])

    def _edge_channel(self, weights, w_vec, w_att):
        # per-edge scalar times learned vector, through LeakyReLU, dotted down
        col = T.Tensor(weights.reshape(-1, 1))
        return T.matmul(self._act(T.mul(col, w_vec)), w_att)

    def _phase1(self, l, alt, hg, hf, rng):
        p = self.params
        d = self.config.dim
        fe_v, fe_f, fe_w = _cap_edge_arrays(
            alt.fe_node, (alt.fe_feat, alt.fe_weight), self.config.cap_features,
            rng, alt.n) if rng is not None else (alt.fe_node, alt.fe_feat, alt.fe_weight)
        self_part = T.matmul(hg, p[f"layer{l}/p1/W5"])
        if len(fe_v) == 0:
            agg = T.Tensor(np.zeros((alt.n, d)))
        else:
            # attention vector split into its three concat segments
            w4 = p[f"layer{l}/p1/w4"]
            sa = T.matmul(self._act(T.matmul(hg, p[f"layer{l}/p1/W1"])), _slice_vec(w4, 0, d))
            sb = T.matmul(self._act(T.matmul(hf, p[f"layer{l}/p1/W2"])), _slice_vec(w4, d, 2 * d))
            sc = self._edge_channel(fe_w, p[f"layer{l}/p1/w3"], _slice_vec(w4, 2 * d, 3 * d))
            score = T.add(T.add(T.gather_rows(sa, fe_v), T.gather_rows(sb, fe_f)), sc)
            alpha = T.segment_softmax(score, fe_v, alt.n)
            msgs = T.mul(T.gather_rows(T.matmul(hf, p[f"layer{l}/p1/W6"]), fe_f),
                         T.reshape(alpha, (len(fe_v), 1)))
            agg = T.segment_sum(msgs, fe_v, alt.n)
        combined = T.concat([self_part, agg], axis=1)
        return T.mlp(combined, self._mlp_params(f"layer{l}/p1/mlp"), self._act)

    def _phase2(self, l, alt, hg, rng):
        p = self.params
        n = alt.n
        src, dst = alt.ge_src, alt.ge_dst
        if rng is not None:
            dst, src = _cap_edge_arrays(dst, (src,), self.config.cap_graph, rng, n)
        backend = self.config.phase2
        if backend == "sage":
            neigh = T.segment_sum(T.gather_rows(hg, src), dst, n) if len(src) else \
                T.Tensor(np.zeros_like(hg.values))
            deg = np.bincount(dst, minlength=n).astype(np.float64)
            inv = T.Tensor((1.0 / np.maximum(deg, 1.0)).reshape(-1, 1))
            mean = T.mul(neigh, inv)
            return T.relu(T.matmul(T.concat([hg, mean], axis=1), p[f"layer{l}/p2/W13"]))
        if backend == "gat":
            d = self.config.dim
            loop = np.arange(n, dtype=np.int64)
            src2 = np.concatenate([src, loop])
            dst2 = np.concatenate([dst, loop])
            order = np.lexsort((src2, dst2))
            src2, dst2 = src2[order], dst2[order]
            w15 = p[f"layer{l}/p2/w15"]
            s_dst = T.matmul(self._act(T.matmul(hg, p[f"layer{l}/p2/W13"])), _slice_vec(w15, 0, d))
            s_src = T.matmul(self._act(T.matmul(hg, p[f"layer{l}/p2/W14"])), _slice_vec(w15, d, 2 * d))
            score = T.add(T.gather_rows(s_dst, dst2), T.gather_rows(s_src, src2))
            alpha = T.segment_softmax(score, dst2, n)
            msgs = T.mul(T.gather_rows(T.matmul(hg, p[f"layer{l}/p2/W16"]), src2),
                         T.reshape(alpha, (len(src2), 1)))
            return T.segment_sum(msgs, dst2, n)
        # gin
        neigh = T.segment_sum(T.gather_rows(hg, src), dst, n) if len(src) else \
            T.Tensor(np.zeros_like(hg.values))
        eps = p[f"layer{l}/p2/epsilon"]
        scaled = T.mul(hg, T.add(eps, 1.0))
        return T.mlp(T.add(scaled, neigh), self._mlp_params(f"layer{l}/p2/mlp"), self._act)

    def _phase3(self, l, alt, hg_new, hf, rng):
        p = self.params
        d = self.config.dim
        if alt.m == 0:
            return hf
        fe_f, fe_v, fe_w = _cap_edge_arrays(
            alt.fe3_feat, (alt.fe3_node, alt.fe3_weight), self.config.cap_nodes,
            rng, alt.m) if rng is not None else (alt.fe3_feat, alt.fe3_node, alt.fe3_weight)
        self_part = T.matmul(hf, p[f"layer{l}/p3/W11"])
        if len(fe_f) == 0:
            agg = T.Tensor(np.zeros((alt.m, d)))
        else:
            w10 = p[f"layer{l}/p3/w10"]
            sa = T.matmul(self._act(T.matmul(hf, p[f"layer{l}/p3/W7"])), _slice_vec(w10, 0, d))
            sb = T.matmul(self._act(T.matmul(hg_new, p[f"layer{l}/p3/W8"])), _slice_vec(w10, d, 2 * d))
            sc = self._edge_channel(fe_w, p[f"layer{l}/p3/w9"], _slice_vec(w10, 2 * d, 3 * d))
            score = T.add(T.add(T.gather_rows(sa, fe_f), T.gather_rows(sb, fe_v)), sc)
            alpha = T.segment_softmax(score, fe_f, alt.m)
            msgs = T.mul(T.gather_rows(T.matmul(hg_new, p[f"layer{l}/p3/W12"]), fe_v),
                         T.reshape(alpha, (len(fe_f), 1)))
            agg = T.segment_sum(msgs, fe_f, alt.m)
        combined = T.concat([self_part, agg], axis=1)
        return T.mlp(combined, self._mlp_params(f"layer{l}/p3/mlp"), self._act)


def _slice_vec(w, lo, hi):
    return T.gather_rows(w, np.arange(lo, hi, dtype=np.int64))


class VanillaAltModel:
    """Ablation: plain GraphSAGE over all of G^alt, feature nodes treated
    as ordinary unweighted neighbors, initialization as in the full model."""

    def __init__(self, config, num_classes=None):
        self.config = config.validate()
        self.num_classes = num_classes
        self.params = {}
        self.table = FeatureEmbeddingTable(config.dim, config.seed)
        rng = np.random.default_rng([config.seed, 17])
        d = config.dim
        for l in range(config.layers):
            name = f"layer{l}/W"
            self.params[name] = T.Parameter(glorot(rng, (2 * d, d)), name)
        if num_classes is not None:
            self.params["head/W"] = T.Parameter(glorot(rng, (d, num_classes)), "head/W")
            self.params["head/b"] = T.Parameter(np.zeros(num_classes), "head/b")

    def trainable_parameters(self):
        return list(self.params.values()) + self.table.parameters()

    def non_embedding_parameter_count(self):
        return sum(p.size for p in self.params.values())

    def forward(self, alt, rng=None):
        n, m = alt.n, alt.m
        hg0, hf0 = init_states(alt, self.table, self.config.dim)
        h = T.concat([hg0, hf0], axis=0) if m else hg0
        src = np.concatenate([alt.ge_src, alt.fe_node, alt.fe_feat + n])
        dst = np.concatenate([alt.ge_dst, alt.fe_feat + n, alt.fe_node])
        order = np.lexsort((src, dst))
        src, dst = src[order], dst[order]
        deg = np.bincount(dst, minlength=n + m).astype(np.float64)
        inv = T.Tensor((1.0 / np.maximum(deg, 1.0)).reshape(-1, 1))
        for l in range(self.config.layers):
            neigh = T.segment_sum(T.gather_rows(h, src), dst, n + m) if len(src) else \
                T.Tensor(np.zeros_like(h.values))
            mean = T.mul(neigh, inv)
            h = T.relu(T.matmul(T.concat([h, mean], axis=1), self.params[f"layer{l}/W"]))
        hg = T.gather_rows(h, np.arange(n, dtype=np.int64))
        hf = T.gather_rows(h, np.arange(n, n + m, dtype=np.int64)) if m else \
            T.Tensor(np.zeros((0, self.config.dim)))
        return hg, hf

    def logits(self, hg):
        return T.add(T.matmul(hg, self.params["head/W"]), self.params["head/b"])


def vanilla_forward_on_alt(alt, config, num_classes=None):
    """One-shot ablation forward (fresh parameters)."""
    model = VanillaAltModel(config, num_classes)
    return model.forward(alt)


def recovery_probe(d, trials, seed=0, epochs=400, lr=0.01, hidden=None):
    """Train a phase-1-only stack to regress x_v from the allotropic encoding.

    Feature-node embeddings are fixed one-hot, graph nodes start at zero
    (so the combine reduces to a function of the aggregate alone), and each
    message pairs the feature identity with the edge value:
    m_v(i) = [onehot_i ; x_v[i] * 1_d].  The aggregate is learnable as a
    per-message MLP followed by a sum and a combine MLP, which is where
    the reconstruction x_v[i] = m[i] * m[d+i] has to be picked up.
    Returns (trained MSE, untrained MSE)."""
    from .optim import AdamState, adam_step, zero_grad

    rng = np.random.default_rng([seed, 29])
    x = rng.normal(size=(trials, d))
    if hidden is None:
        hidden = max(32, 16 * d)

    # row (v, i) of the message matrix is [onehot_i ; x_v[i] * 1_d]
    msgs = np.concatenate(
        [np.tile(np.eye(d), (trials, 1)), np.repeat(x.reshape(-1, 1), d, axis=1)], axis=1
    )
    seg = np.repeat(np.arange(trials), d)

    prng = np.random.default_rng([seed, 31])
    phi = [
        T.Parameter(glorot(prng, (2 * d, hidden)), "probe/msg/A0"),
        T.Parameter(np.zeros(hidden), "probe/msg/b0"),
        T.Parameter(glorot(prng, (hidden, d)), "probe/msg/A1"),
        T.Parameter(np.zeros(d), "probe/msg/b1"),
    ]
    rho = [
        T.Parameter(glorot(prng, (d, hidden)), "probe/comb/A0"),
        T.Parameter(np.zeros(hidden), "probe/comb/b0"),
        T.Parameter(glorot(prng, (hidden, d)), "probe/comb/A1"),
        T.Parameter(np.zeros(d), "probe/comb/b1"),
    ]
    params = phi + rho
    m_in = T.Tensor(msgs)
    target = T.Tensor(x)

    def mse():
        per_msg = T.mlp(m_in, phi)
        agg = T.segment_sum(per_msg, seg, trials)
        out = T.mlp(agg, rho)
        diff = T.sub(out, target)
        return T.mean_all(T.mul(diff, diff))

    untrained = mse().item()
    state = AdamState()
    for _ in range(epochs):
        zero_grad(params)
        loss = mse()
        T.backward(loss)
        state = adam_step(params, lr=lr, state=state)
    return mse().item(), untrained


CHECKPOINT_VERSION = 1


def save_checkpoint(model, path):
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": type(model).__name__,
        "config": asdict(model.config),
        "num_classes": model.num_classes,
    }
    arrays = {f"p/{name}": p.values for name, p in model.params.items()}
    arrays.update({f"t/{f}": row.values for f, row in model.table.rows.items()})
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cls = {"GrafenneModel": GrafenneModel, "VanillaAltModel": VanillaAltModel}[meta["kind"]]
        model = cls(GrafenneConfig(**meta["config"]), meta["num_classes"])
        for key in blob.files:
            if key.startswith("p/"):
                name = key[2:]
                if name not in model.params:
                    raise ValueError(f"checkpoint parameter {name!r} unknown to model")
                model.params[name].values = blob[key].copy()
            elif key.startswith("t/"):
                fid = int(key[2:])
                model.table.ensure([fid])
                model.table.rows[fid].values = blob[key].copy()
    return model
