"""EC-conditioned message-passing network for cloth force/position forecasting.

Each node carries its position and, on grasped nodes, the gripper action.
Every edge shares one feature vector: the Elastic Context (EC variant), the
ground-truth material descriptor (Oracle) or a single zero (Baseline).  After
encoding, node latents are updated ``T`` times by

    h_i <- Phi( sum_{s in N(i)} Psi(h_i, h_s, c) )

with ``c`` the encoded edge feature.  Two heads map the final latents to a
per-node displacement and a per-node force; the graph force is their mean.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
import scipy.sparse as sp

from . import tensornet as tn
from .clothsim import grid_edges
from .tensornet import Mlp, Tape, Tensor

log = logging.getLogger(__name__)

HIDDEN = 16
T_STEPS = 8
NODE_IN = 6  # position (3) + masked action (3)


class VariantKind(str, enum.Enum):
    BASELINE = "baseline"
    EC = "ec"
    ORACLE = "oracle"


@dataclass(frozen=True)
class Variant:
    kind: VariantKind
    n_ec: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", VariantKind(self.kind))
        if self.kind is VariantKind.EC and self.n_ec < 1:
            raise ValueError("EC variant needs n_ec >= 1")

    @classmethod
    def baseline(cls):
        return cls(VariantKind.BASELINE)

    @classmethod
    def ec(cls, n: int):
        return cls(VariantKind.EC, n)

    @classmethod
    def oracle(cls):
        return cls(VariantKind.ORACLE)

    @classmethod
    def parse(cls, text: str) -> Variant:
        t = text.strip().lower()
        if t == "baseline":
            return cls.baseline()
        if t == "oracle":
            return cls.oracle()
        if t.startswith("ec"):
            return cls.ec(int(t[2:].strip("()_- ") or 1))
        raise ValueError(f"unknown variant {text!r}")

    @property
    def label(self) -> str:
        return f"ec{self.n_ec}" if self.kind is VariantKind.EC else self.kind.value

    def edge_dim(self, oracle_width: int = 4) -> int:
        if self.kind is VariantKind.BASELINE:
            return 1
        if self.kind is VariantKind.EC:
            return self.n_ec
        return oracle_width


@dataclass(frozen=True)
class Normalizer:
    position_scale: float = 0.18     # m, rest length; positions are centroid-relative
    delta_scale: float = 0.04 / 33   # m, one action step
    force_scale: float = 5.4         # N, F_max
    feature_scale: float = 1.0e-5    # 1/Pa for EC and oracle moduli


@dataclass
class TextileGraph:
    """One graph, or a batch of graphs sharing a mesh topology."""
    node_features: np.ndarray        # (N, 6)
    edges: np.ndarray                # (A, 2) directed arcs (dst, src)
    edge_feature: np.ndarray         # (B, d), shared by every arc of graph b
    grasp_mask: np.ndarray           # (N,) bool
    node_graph: np.ndarray           # (N,) graph id
    n_graphs: int = 1

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]


def mesh_arcs(rows: int, cols: int) -> np.ndarray:
    """Both directions of every structural grid edge, as (dst, src)."""
    e = grid_edges(rows, cols)
    return np.concatenate([e, e[:, ::-1]])


def grasp_mask_for(rows: int, cols: int) -> np.ndarray:
    m = np.zeros((rows, cols), dtype=bool)
    m[:, 0] = True
    m[:, -1] = True
    return m.ravel()


def edge_feature_for(variant: Variant, ec_or_label, norm: Normalizer) -> np.ndarray:
    if variant.kind is VariantKind.BASELINE:
        return np.zeros(1)
    v = np.asarray(ec_or_label, dtype=np.float64).ravel()
    if variant.kind is VariantKind.EC and v.size != variant.n_ec:
        raise ValueError(f"EC has dimension {v.size}, variant expects {variant.n_ec}")
    return v * norm.feature_scale


def build_graph(positions: np.ndarray, ec_or_label, action, variant: Variant,
                norm: Normalizer = Normalizer()) -> TextileGraph:
    """Graph of a (rows, cols, 3) cloth state with the action on grasped nodes."""
    rows, cols = positions.shape[:2]
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (3,) or not np.all(np.isfinite(action)):
        raise ValueError("action must be a finite 3-vector")
    mask = grasp_mask_for(rows, cols)
    flat = positions.reshape(-1, 3)
    x = (flat - flat.mean(axis=0)) / norm.position_scale
    act = np.where(mask[:, None], action / norm.delta_scale, 0.0)
    return TextileGraph(np.concatenate([x, act], axis=1), mesh_arcs(rows, cols),
                        edge_feature_for(variant, ec_or_label, norm)[None, :], mask,
                        np.zeros(rows * cols, dtype=np.int64), 1)


class _BatchPlan:
    """Index arrays and sparse operators for B copies of one mesh."""

    def __init__(self, arcs: np.ndarray, n: int, batch: int):
        a = arcs.shape[0]
        off_n = np.repeat(np.arange(batch) * n, a)
        self.dst = np.tile(arcs[:, 0], batch) + off_n
        self.src = np.tile(arcs[:, 1], batch) + off_n
        self.arc_graph = np.repeat(np.arange(batch), a)
        self.node_graph = np.repeat(np.arange(batch), n)
        n_all = n * batch
        self.agg = tn.incidence(self.dst, n_all)                 # (N, A)
        self.scatter_src = tn.incidence(self.src, n_all)
        self.scatter_graph = tn.incidence(self.arc_graph, batch)  # (B, A)
        self.node_mean = tn.incidence(self.node_graph, batch) / n  # (B, N)
        self.node_mean = sp.csr_matrix(self.node_mean)
        self.agg_t = self.agg.T.tocsr()
        self.node_mean_t = self.node_mean.T.tocsr()
        self.degree = np.asarray(self.agg.sum(axis=1))          # (N, 1)


class GnnModel:
    def __init__(self, variant: Variant, seed: int = 0, hidden: int = HIDDEN,
                 t_steps: int = T_STEPS, norm: Normalizer = Normalizer(),
                 oracle_width: int = 4):
        self.variant = variant
        self.seed = seed
        self.hidden = hidden
        self.t_steps = t_steps
        self.norm = norm
        self.oracle_width = oracle_width
        self.edge_dim = variant.edge_dim(oracle_width)
        rng = np.random.default_rng(seed)
        h = hidden
        self.node_encoder = Mlp([NODE_IN, h, h], rng, name="node_enc")
        self.edge_encoder = Mlp([self.edge_dim, h, h], rng, name="edge_enc")
        self.message_net = Mlp([3 * h, h, h], rng, name="psi")
        self.aggregate_net = Mlp([h, h, h], rng, name="phi")
        self.graph_head = Mlp([h, h, 3], rng, name="graph_head")
        self.force_head = Mlp([h, h, 1], rng, name="force_head")
        self._plans: dict = {}

    @property
    def blocks(self) -> list[Mlp]:
        return [self.node_encoder, self.edge_encoder, self.message_net, self.aggregate_net,
                self.graph_head, self.force_head]

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    def _plan(self, graph: TextileGraph) -> _BatchPlan:
        n = graph.n_nodes // graph.n_graphs
        a = graph.edges.shape[0]
        key = (n, a, graph.n_graphs, graph.edges.tobytes())
        plan = self._plans.get(key)
        if plan is None:
            plan = _BatchPlan(graph.edges, n, graph.n_graphs)
            self._plans[key] = plan
        return plan

    def propagate(self, graph: TextileGraph) -> Tensor:
        """Encoded latents after ``t_steps`` synchronous message-passing rounds."""
        if graph.edge_feature.shape[1] != self.edge_dim:
            raise ValueError(f"edge feature dimension {graph.edge_feature.shape[1]} does not "
                             f"match the {self.variant.label} model ({self.edge_dim})")
        plan = self._plan(graph)
        h = self.node_encoder(Tensor(graph.node_features))
        c = self.edge_encoder(Tensor(graph.edge_feature))
        # Psi's first layer acts on [h_i, h_s, c]; split it so the per-arc work
        # is a gather of per-node / per-graph projections (same arithmetic).
        psi = self.message_net
        w = psi.weights[0]
        hd = self.hidden
        w_pair = _stack_blocks(w, hd)                      # rows: [W_dst; W_src]
        c_proj = tn.linear(c, _column_block(w, 2 * hd, w.shape[1]), psi.biases[0])
        for _ in range(self.t_steps):
            r_sum = arc_messages(tn.linear(h, w_pair), c_proj, plan,
                                 psi.ln_gains[0], psi.ln_biases[0])
            # Psi's last layer is affine, so summing before it is exact:
            # sum_s (W r_s + b) = W sum_s r_s + deg * b
            m = _summed_affine(r_sum, psi.weights[1], psi.biases[1], plan.degree)
            h = self.aggregate_net(m)
        return h

    def predict(self, graph: TextileGraph) -> tuple[Tensor, Tensor]:
        """Normalised per-node displacement (N, 3) and per-graph force (B,)."""
        h = self.propagate(graph)
        delta = self.graph_head(h)
        f_node = self.force_head(h)
        plan = self._plan(graph)
        force = tn.segment_sum(f_node, plan.node_mean, plan.node_mean_t)
        return delta, _flatten(force)

    # checkpoints
    def to_dict(self, adam: tn.AdamState | None = None) -> dict:
        return tn.state_dict(self.parameters(), adam, self.seed, extra={
            "variant": {"kind": self.variant.kind.value, "n_ec": self.variant.n_ec},
            "hidden": self.hidden, "t_steps": self.t_steps,
            "oracle_width": self.oracle_width, "normalizer": asdict(self.norm),
            "layer_dims": {b.name: list(b.dims) for b in self.blocks}})

    @classmethod
    def from_dict(cls, d: dict) -> tuple[GnnModel, tn.AdamState | None]:
        v = Variant(VariantKind(d["variant"]["kind"]), d["variant"]["n_ec"])
        model = cls(v, seed=d.get("seed") or 0, hidden=d["hidden"], t_steps=d["t_steps"],
                    norm=Normalizer(**d["normalizer"]), oracle_width=d["oracle_width"])
        adam = tn.load_state_dict(model.parameters(), d)
        return model, adam

    def save(self, path, adam=None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(adam), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@numba.njit(cache=True, fastmath=True, nogil=True)
def _arc_forward(p, c, dst, src, arc_graph, gain, beta, eps):
    # p = [h W_dst^T | h W_src^T], shape (n, 2d)
    n_arcs = dst.size
    d = c.shape[1]
    out = np.zeros((p.shape[0], d))
    xhat = np.empty((n_arcs, d))
    inv = np.empty(n_arcs)
    z = np.empty(d)
    for a in range(n_arcs):
        i, s, g = dst[a], src[a], arc_graph[a]
        mu = 0.0
        for j in range(d):
            z[j] = p[i, j] + p[s, d + j] + c[g, j]
            mu += z[j]
        mu /= d
        var = 0.0
        for j in range(d):
            var += (z[j] - mu) ** 2
        r = 1.0 / np.sqrt(var / d + eps)
        inv[a] = r
        for j in range(d):
            xh = (z[j] - mu) * r
            xhat[a, j] = xh
            y = xh * gain[j] + beta[j]
            if y > 0.0:
                out[i, j] += y
    return out, xhat, inv


@numba.njit(cache=True, fastmath=True, nogil=True)
def _arc_backward(g_out, xhat, inv, dst, src, arc_graph, gain, beta, n_graphs):
    n_arcs = dst.size
    n, d = g_out.shape
    g_p = np.zeros((n, 2 * d))
    g_c = np.zeros((n_graphs, d))
    g_gain = np.zeros(d)
    g_beta = np.zeros(d)
    gy = np.empty(d)
    gh = np.empty(d)
    gz = np.empty(d)
    for a in range(n_arcs):
        i, s, g = dst[a], src[a], arc_graph[a]
        for j in range(d):
            gy[j] = g_out[i, j] if xhat[a, j] * gain[j] + beta[j] > 0.0 else 0.0
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            gh[j] = gy[j] * gain[j]
            m1 += gh[j]
            m2 += gh[j] * xhat[a, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            gz[j] = inv[a] * (gh[j] - m1 - xhat[a, j] * m2)
            g_gain[j] += gy[j] * xhat[a, j]
            g_beta[j] += gy[j]
        for j in range(d):
            g_p[i, j] += gz[j]
        for j in range(d):
            g_p[s, d + j] += gz[j]
        for j in range(d):
            g_c[g, j] += gz[j]
    return g_p, g_c, g_gain, g_beta


def arc_messages(p: Tensor, c_proj: Tensor, plan: _BatchPlan,
                 gain: Tensor, beta: Tensor) -> Tensor:
    """Fused ``segment_sum(relu(layer_norm(p_dst[dst] + p_src[src] + c[graph])))``.

    ``p`` holds the dst and src projections side by side.  Equivalent to the
    composition of the separate tensornet ops, without materialising the
    per-arc tensors more than once.
    """
    out, xhat, inv = _arc_forward(p.value, c_proj.value, plan.dst, plan.src,
                                  plan.arc_graph, gain.value, beta.value, tn.LN_EPS)
    n_graphs = c_proj.shape[0]

    def back(g):
        return _arc_backward(np.ascontiguousarray(g), xhat, inv, plan.dst, plan.src,
                             plan.arc_graph, gain.value, beta.value, n_graphs)

    return tn._record(out, (p, c_proj, gain, beta), back)


def _stack_blocks(w: Tensor, hd: int) -> Tensor:
    """Column blocks [0:hd] and [hd:2hd] of `w` stacked as rows, shape (2 out, hd)."""
    out = w.shape[0]

    def back(g):
        full = np.zeros_like(w.value)
        full[:, :hd] = g[:out]
        full[:, hd:2 * hd] = g[out:]
        return (full,)
    return tn._record(np.concatenate([w.value[:, :hd], w.value[:, hd:2 * hd]]), (w,), back)


def _summed_affine(r: Tensor, w: Tensor, b: Tensor, degree: np.ndarray) -> Tensor:
    """``r @ w.T + degree * b``: an affine layer applied to a sum of ``degree`` terms."""
    y = r.value @ w.value.T
    y += degree * b.value

    def back(g):
        return g @ w.value, g.T @ r.value, (degree * g).sum(axis=0)
    return tn._record(y, (r, w, b), back)


def _column_block(w: Tensor, lo: int, hi: int) -> Tensor:
    def back(g):
        out = np.zeros_like(w.value)
        out[:, lo:hi] = g
        return (out,)
    return tn._record(w.value[:, lo:hi], (w,), back)


def _flatten(t: Tensor) -> Tensor:
    shape = t.shape
    return tn._record(t.value.reshape(-1), (t,), lambda g: (g.reshape(shape),))


def propagate(model: GnnModel, graph: TextileGraph) -> Tensor:
    return model.propagate(graph)


def predict(model: GnnModel, graph: TextileGraph) -> tuple[np.ndarray, float | np.ndarray]:
    """De-normalised prediction: displacements (N, 3) in m and force(s) in N."""
    delta, force = model.predict(graph)
    d = delta.value * model.norm.delta_scale
    f = force.value * model.norm.force_scale
    return d, (float(f[0]) if graph.n_graphs == 1 else f)


def loss(delta_pred: Tensor, force_pred: Tensor, target_delta, target_force) -> Tensor:
    """Position MSE plus force MSE, both in normalised units."""
    return tn.add(tn.mse(delta_pred, target_delta), tn.mse(force_pred, target_force))


# ---------------------------------------------------------------- datasets

@dataclass
class GraphDataset:
    """Supervised one-step transitions on a fixed mesh."""
    positions: np.ndarray       # (M, rows, cols, 3) G_t
    next_positions: np.ndarray  # (M, rows, cols, 3) G_{t+1}
    force: np.ndarray           # (M,) F_{t+1}, N
    action: np.ndarray          # (M, 3)
    material_id: np.ndarray     # (M,)
    edge_input: np.ndarray      # (M, d) raw EC / oracle label (Pa); ignored by Baseline

    def __len__(self):
        return self.force.shape[0]

    def subset(self, idx) -> GraphDataset:
        return GraphDataset(self.positions[idx], self.next_positions[idx], self.force[idx],
                            self.action[idx], self.material_id[idx], self.edge_input[idx])


def batch_graph(ds: GraphDataset, idx: np.ndarray, variant: Variant,
                norm: Normalizer) -> tuple[TextileGraph, np.ndarray, np.ndarray]:
    """Stacked graph for records `idx` plus normalised delta / force targets."""
    rows, cols = ds.positions.shape[1:3]
    n = rows * cols
    b = idx.size
    mask = grasp_mask_for(rows, cols)
    pos = ds.positions[idx].reshape(b, n, 3)
    x = (pos - pos.mean(axis=1, keepdims=True)) / norm.position_scale
    act = np.where(mask[None, :, None], ds.action[idx][:, None, :] / norm.delta_scale, 0.0)
    feats = np.concatenate([x, act], axis=2).reshape(b * n, NODE_IN)
    if variant.kind is VariantKind.BASELINE:
        edge = np.zeros((b, 1))
    else:
        edge = ds.edge_input[idx] * norm.feature_scale
    g = TextileGraph(feats, mesh_arcs(rows, cols), edge, np.tile(mask, b),
                     np.repeat(np.arange(b), n), b)
    delta = (ds.next_positions[idx] - ds.positions[idx]).reshape(b * n, 3) / norm.delta_scale
    force = ds.force[idx] / norm.force_scale
    return g, delta, force


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: GnnModel
    loss_history: list[float] = field(default_factory=list)
    adam: tn.AdamState | None = None


def batch_loss_and_grads(model: GnnModel, dataset: GraphDataset, idx: np.ndarray,
                         params: list[Tensor]) -> tuple[float, list[np.ndarray]]:
    """Loss of one batch and the gradient of every parameter (zeros if unused)."""
    g, td, tf = batch_graph(dataset, idx, model.variant, model.norm)
    tape = Tape()
    with tape:
        d, f = model.predict(g)
        value = loss(d, f, td, tf)
    lv = float(value.value)
    grads: dict[int, np.ndarray] = {}
    if math.isfinite(lv):
        tape.backward(value, into=grads)
    return lv, [grads.get(id(p), np.zeros_like(p.value)) for p in params]


def _parallel_loss_and_grads(model, dataset, idx, params, pool, workers):
    # Both loss terms are means over per-graph blocks of equal size, so the
    # batch loss is the size-weighted mean of the chunk losses.  Chunks are
    # reduced in index order, independent of thread timing.
    chunks = [c for c in np.array_split(idx, workers) if c.size]
    results = list(pool.map(lambda c: batch_loss_and_grads(model, dataset, c, params), chunks))
    weights = [c.size / idx.size for c in chunks]
    lv = sum(w * r[0] for w, r in zip(weights, results))
    grads = [sum(w * r[1][k] for w, r in zip(weights, results)) for k in range(len(params))]
    return lv, grads


def train(model: GnnModel, dataset: GraphDataset, epochs: int = 2000, batch: int = 32,
          lr: float = 3e-4, seed: int = 0, log_every: int = 0,
          workers: int = 1, lr_final: float | None = None) -> TrainResult:
    """Adam on the two-term MSE; one shuffled pass over the records per epoch.

    With `lr_final`, the learning rate follows a cosine from `lr` in the first
    epoch to `lr_final` in the last one.

    ``workers > 1`` splits each batch over threads and reduces the gradients in
    a fixed order: results are deterministic for a given worker count.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    adam = tn.AdamState(lr=lr)
    history = []
    m = len(dataset)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for epoch in range(epochs):
            if lr_final is not None:
                frac = epoch / max(epochs - 1, 1)
                adam.lr = lr_final + 0.5 * (lr - lr_final) * (1.0 + math.cos(math.pi * frac))
            order = rng.permutation(m)
            total = 0.0
            for start in range(0, m, batch):
                idx = order[start:start + batch]
                if pool is None:
                    lv, grads = batch_loss_and_grads(model, dataset, idx, params)
                else:
                    lv, grads = _parallel_loss_and_grads(model, dataset, idx, params, pool,
                                                         workers)
                if not math.isfinite(lv):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {start // batch}, "
                        f"materials {sorted(set(dataset.material_id[idx].tolist()))}")
                tn.adam_step(params, grads, adam)
                total += lv * idx.size
            history.append(total / m)
            if log_every and (epoch + 1) % log_every == 0:
                log.info("%s epoch %d loss %.6g", model.variant.label, epoch + 1, history[-1])
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(model, history, adam)


# ---------------------------------------------------------------- rollout

@dataclass
class Rollout:
    force: np.ndarray                # (S,) N
    positions: np.ndarray            # (S + 1, rows, cols, 3); entry 0 is the initial state
    diverged: bool = False


def rollout(model: GnnModel, initial_positions: np.ndarray, actions: np.ndarray,
            ec_or_label, variant: Variant | None = None,
            divergence_factor: float = 10.0) -> Rollout:
    """Autoregressive forecast; grasped nodes follow the commanded actions exactly."""
    variant = model.variant if variant is None else variant
    if variant != model.variant:
        raise ValueError(f"model was trained as {model.variant.label}, not {variant.label}")
    rows, cols = initial_positions.shape[:2]
    mask = grasp_mask_for(rows, cols).reshape(rows, cols)
    pos = np.array(initial_positions, dtype=np.float64)
    traj = [pos.copy()]
    forces = []
    limit = divergence_factor * model.norm.position_scale
    diverged = False
    for a in np.asarray(actions, dtype=np.float64):
        g = build_graph(pos, ec_or_label, a, variant, model.norm)
        delta, force = predict(model, g)
        nxt = pos + delta.reshape(rows, cols, 3)
        nxt[mask] = pos[mask] + a
        forces.append(force)
        if not np.all(np.abs(nxt) <= limit):
            diverged = True
            log.warning("rollout diverged after %d steps", len(forces))
            break
        pos = nxt
        traj.append(pos.copy())
    return Rollout(np.asarray(forces), np.asarray(traj), diverged)
