"""Temporal graph network for road selection and road-variance prediction.

Each block transforms the user features (one row per epoch and drive
window) and the road features (one row per candidate segment), mixes road
rows over the candidate graph with a graph convolution, runs the user rows
through an LSTM over time, then exchanges information between the two
paths.  A linear head turns road rows into selection logits and another
turns the user row into the two road variances.

Graphs from many epochs are packed into one batch: road rows of all graphs
are stacked, graph convolution uses a block-diagonal normalized adjacency
and mean pooling a sparse averaging matrix.
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse

from roadkf import autodiff as ad
from roadkf.tgnn.features import USER_DIM, normalized_adjacency, road_dim

KINDS = ("TGNN", "GNN", "MLP")


@dataclass(frozen=True)
class TgnnConfig:
    kind: str = "TGNN"
    blocks: int = 4
    hidden: int = 32
    user_dim: int = USER_DIM
    road_dim: int = road_dim(2)
    shared_lstm: bool = True
    sigma_scale: tuple = (1.0, 1.0)  # (parallel, perpendicular) multipliers of the exp head
    sigma_min: float = 1e-2
    sigma_max: float = 1e6
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        scale = tuple(float(v) for v in np.broadcast_to(np.asarray(self.sigma_scale, dtype=np.float64), (2,)))
        if min(scale) <= 0:
            raise ValueError("sigma_scale must be positive")
        object.__setattr__(self, "sigma_scale", scale)


@dataclass
class GraphBatch:
    """Candidate graphs for ``steps`` epochs of ``windows`` drives, packed.

    Graph g = t * windows + b holds epoch t of window b.
    """

    steps: int
    windows: int
    user: np.ndarray  # (G, Fu)
    road: np.ndarray  # (M, Fr)
    row_graph: np.ndarray  # (M,)
    adj: sparse.csr_matrix  # (M, M)
    pool: sparse.csr_matrix  # (G, M)
    pool_t: sparse.csr_matrix  # (M, G)
    slots: np.ndarray  # (M,) index into the flattened (G, nmax) layout
    nmax: int
    fill: np.ndarray  # (G * nmax,)
    counts: np.ndarray  # (G,)

    @property
    def n_graphs(self):
        return self.user.shape[0]

    def local_index(self):
        """Position of each road row inside its own graph."""
        return self.slots - self.row_graph * self.nmax


def adjacency_coo(adj):
    """Normalized adjacency of one candidate graph as COO triplets."""
    a = normalized_adjacency(adj)
    r, c = np.nonzero(a)
    return r, c, a[r, c]


def make_batch(users, roads, adjs, steps, windows):
    """Pack per-graph arrays into a GraphBatch.

    ``adjs`` entries are either dense boolean adjacencies or COO triplets
    from ``adjacency_coo``.
    """
    g_count = len(users)
    if g_count != steps * windows:
        raise ValueError(f"expected {steps * windows} graphs, got {g_count}")
    counts = np.array([r.shape[0] for r in roads], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    m = int(offsets[-1])
    nmax = max(int(counts.max()) if g_count else 1, 1)
    road = np.concatenate(roads, axis=0) if m else np.zeros((0, roads[0].shape[1]))
    row_graph = np.repeat(np.arange(g_count), counts)
    local = np.arange(m) - offsets[row_graph]
    slots = row_graph * nmax + local
    rs, cs, vs = [], [], []
    for g, a in enumerate(adjs):
        if counts[g] == 0:
            continue
        r, c, v = a if isinstance(a, tuple) else adjacency_coo(a)
        rs.append(r + offsets[g])
        cs.append(c + offsets[g])
        vs.append(v)
    if rs:
        adj = sparse.csr_matrix(
            (np.concatenate(vs), (np.concatenate(rs), np.concatenate(cs))), shape=(m, m)
        )
    else:
        adj = sparse.csr_matrix((m, m))
    inv = np.zeros(g_count)
    inv[counts > 0] = 1.0 / counts[counts > 0]
    pool = sparse.csr_matrix((inv[row_graph], (row_graph, np.arange(m))), shape=(g_count, m))
    fill = np.full(g_count * nmax, -np.inf)
    fill[np.flatnonzero(counts == 0) * nmax] = 0.0
    return GraphBatch(
        steps=steps,
        windows=windows,
        user=np.asarray(users, dtype=np.float64).reshape(g_count, -1),
        road=road,
        row_graph=row_graph,
        adj=adj,
        pool=pool,
        pool_t=pool.T.tocsr(),
        slots=slots,
        nmax=nmax,
        fill=fill,
        counts=counts,
    )


class TgnnModel:
    """Parameters, batch-norm running statistics and the forward pass."""

    def __init__(self, config=TgnnConfig(), seed=0):
        self.config = config
        self.params = {}
        self.bn_stats = {}
        rng = np.random.default_rng(seed)
        c = config
        h = c.hidden
        for l in range(c.blocks):
            du = c.user_dim if l == 0 else h
            dr = c.road_dim if l == 0 else h
            if c.kind == "MLP":
                self._linear(rng, f"b{l}.wrow", (du if l == 0 else 0) + dr, h)
                self._bn(f"b{l}.bn_row", h)
                self._linear(rng, f"b{l}.wu", du, h)
                self._bn(f"b{l}.bn_u", h)
                continue
            self._linear(rng, f"b{l}.wx", du, h)
            self._bn(f"b{l}.bn_x", h)
            self._linear(rng, f"b{l}.wr", dr, h)
            self._bn(f"b{l}.bn_r", h)
            self._linear(rng, f"b{l}.wg", h, h)
            self._bn(f"b{l}.bn_g", h)
            self._linear(rng, f"b{l}.wxr", 2 * h, h)
            self._bn(f"b{l}.bn_xr", h)
            self._linear(rng, f"b{l}.wrx", 2 * h, h)
            self._bn(f"b{l}.bn_rx", h)
            if c.kind == "TGNN" and (not c.shared_lstm or l == 0):
                prefix = "lstm" if c.shared_lstm else f"b{l}.lstm"
                bound = 1.0 / np.sqrt(h)
                self._add(f"{prefix}.w_ih", rng.uniform(-bound, bound, (h, 4 * h)))
                self._add(f"{prefix}.w_hh", rng.uniform(-bound, bound, (h, 4 * h)))
                self._add(f"{prefix}.b", np.zeros(4 * h))
        self._add("out.w", np.zeros((h, 1)))
        self._add("out.b", np.zeros(1))
        self._add("sigma.w", np.zeros((h, 2)))
        self._add("sigma.b", np.zeros(2))

    def _add(self, name, value):
        self.params[name] = ad.parameter(value, name=name)

    def _linear(self, rng, name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        self._add(name, rng.uniform(-bound, bound, (fan_in, fan_out)))

    def _bn(self, name, width):
        self._add(f"{name}.gamma", np.ones(width))
        self._add(f"{name}.beta", np.zeros(width))
        self.bn_stats[name] = {"mean": np.zeros(width), "var": np.ones(width)}

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def lstm_prefix(self, block):
        return "lstm" if self.config.shared_lstm else f"b{block}.lstm"

    def config_dict(self):
        return asdict(self.config)

    # forward -------------------------------------------------------------

    def _dense(self, x, block, name, bn, training, update_stats):
        p = self.params
        key = f"b{block}.{bn}"
        stats = self.bn_stats[key]
        batch_stats = training and x.shape[0] > 1
        y, mu, var = ad.linear_bn_silu(
            x,
            p[f"b{block}.{name}"],
            p[f"{key}.gamma"],
            p[f"{key}.beta"],
            batch_stats,
            stats["mean"],
            stats["var"],
            self.config.bn_eps,
        )
        if batch_stats and update_stats:
            n = x.shape[0]
            m = self.config.bn_momentum
            stats["mean"] = (1 - m) * stats["mean"] + m * mu
            stats["var"] = (1 - m) * stats["var"] + m * var * n / (n - 1)
        return y

    def forward(self, batch, training=False, state=None, update_stats=True):
        """Run the network on a GraphBatch.

        Returns ``(probs, variances, state)``: probs is a (G, nmax) tensor with
        zeros in padding, variances a (G, 2) tensor of (parallel,
        perpendicular) road variances in m^2, and state the per-block LSTM
        states after the last step (None for stateless kinds).
        """
        c = self.config
        p = self.params
        x = ad.Tensor(batch.user)
        r = ad.Tensor(batch.road)
        t_len, b_sz = batch.steps, batch.windows
        new_state = [] if c.kind == "TGNN" else None
        opt = (training, update_stats)

        if c.kind == "MLP":
            for l in range(c.blocks):
                rows = ad.concat([ad.take_rows(x, batch.row_graph), r], axis=1) if l == 0 else r
                r = self._dense(rows, l, "wrow", "bn_row", *opt)
                x = self._dense(x, l, "wu", "bn_u", *opt)
        else:
            for l in range(c.blocks):
                xh = self._dense(x, l, "wx", "bn_x", *opt)
                rh = self._dense(r, l, "wr", "bn_r", *opt)
                if c.kind == "TGNN":
                    pre = self.lstm_prefix(l)
                    h0, c0 = (None, None) if state is None else state[l]
                    seq = ad.reshape(xh, (t_len, b_sz, c.hidden))
                    hs, h_t, c_t = ad.lstm(
                        seq, p[f"{pre}.w_ih"], p[f"{pre}.w_hh"], p[f"{pre}.b"], h0, c0
                    )
                    new_state.append((h_t, c_t))
                    xt = ad.reshape(hs, (t_len * b_sz, c.hidden))
                else:
                    xt = xh
                rt = self._dense(ad.spmm(batch.adj, rh, batch.adj), l, "wg", "bn_g", *opt)
                pooled = ad.spmm(batch.pool, rt, batch.pool_t)
                x = self._dense(ad.concat([xt, pooled], axis=1), l, "wxr", "bn_xr", *opt)
                r = self._dense(
                    ad.concat([rt, ad.take_rows(xt, batch.row_graph)], axis=1), l, "wrx", "bn_rx", *opt
                )

        logits = ad.reshape(ad.add(ad.matmul(r, p["out.w"]), p["out.b"]), (-1,))
        g = batch.n_graphs
        padded = ad.scatter_padded(logits, batch.slots, g * batch.nmax, fill=batch.fill)
        probs = ad.softmax(ad.reshape(padded, (g, batch.nmax)), axis=1)
        raw = ad.exp(ad.add(ad.matmul(x, p["sigma.w"]), p["sigma.b"]))
        if c.sigma_scale != (1.0, 1.0):
            raw = ad.mul(raw, np.asarray(c.sigma_scale))
        variances = ad.clip(raw, c.sigma_min, c.sigma_max)
        return probs, variances, new_state


def ablation_variant(kind, seed=0, **overrides):
    """Model of the requested architecture: TGNN, GNN (no LSTM) or MLP (no graph, no LSTM)."""
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    return TgnnModel(TgnnConfig(kind=kind, **overrides), seed=seed)


def single_batch(features):
    """GraphBatch for one epoch of one drive."""
    return make_batch([features.user], [features.road], [features.adjacency], 1, 1)
