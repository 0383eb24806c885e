import numpy as np
import pytest
from fdcheck import worst_violation
from hypothesis import given
from hypothesis import strategies as st

from ectextile import gnn
from ectextile import tensornet as tn
from ectextile.gnn import (
    GnnModel,
    GraphDataset,
    Normalizer,
    TextileGraph,
    TrainingError,
    Variant,
    build_graph,
)
from ectextile.tensornet import Tensor

NORM = Normalizer()


def flat_mesh(rows, cols, rng=None, jitter=0.0):
    x = np.linspace(-0.09, 0.09, rows)
    y = np.linspace(-0.09, 0.09, cols)
    pos = np.zeros((rows, cols, 3))
    pos[..., 0], pos[..., 1] = x[:, None], y[None, :]
    if rng is not None:
        pos += rng.normal(0, jitter, pos.shape)
    return pos


def toy_dataset(n_materials=3, steps=6, rows=3, cols=3, seed=0):
    rng = np.random.default_rng(seed)
    pos, nxt, force, act, mid, edge = [], [], [], [], [], []
    for m in range(n_materials):
        stiff = 1e5 * (1 + m)
        p = flat_mesh(rows, cols, rng, 0.002)
        for t in range(steps):
            a = np.array([0.0, 0.0, -0.001])
            q = p + rng.normal(0, 1e-4, p.shape)
            q[:, 0] += a
            q[:, -1] += a
            pos.append(p)
            nxt.append(q)
            force.append(stiff * 1e-5 * 0.1 * t)
            act.append(a)
            mid.append(m)
            edge.append([stiff])
            p = q
    return GraphDataset(np.array(pos), np.array(nxt), np.array(force), np.array(act),
                        np.array(mid), np.array(edge, dtype=float))


def test_graph_construction():
    g = build_graph(flat_mesh(12, 12), None, np.array([0, 0, 0.0036]), Variant.baseline())
    assert g.n_nodes == 144
    assert g.edges.shape[0] == 2 * 2 * 11 * 12
    arcs = {tuple(a) for a in g.edges.tolist()}
    assert all((s, d) in arcs for d, s in arcs)
    assert np.all(g.edge_feature == 0.0)
    act = g.node_features[:, 3:] * NORM.delta_scale
    np.testing.assert_allclose(act[g.grasp_mask], [[0, 0, 0.0036]] * int(g.grasp_mask.sum()))
    assert np.all(act[~g.grasp_mask] == 0.0)


def test_node_positions_are_centred():
    g = build_graph(flat_mesh(4, 4) + [1.0, 2.0, 3.0], [1e5], np.zeros(3), Variant.ec(1))
    np.testing.assert_allclose(g.node_features[:, :3].mean(axis=0), 0.0, atol=1e-12)


def test_ec_dimension_checked():
    with pytest.raises(ValueError):
        build_graph(flat_mesh(3, 3), [1e5, 2e5], np.zeros(3), Variant.ec(1))
    model = GnnModel(Variant.ec(2))
    g = build_graph(flat_mesh(3, 3), [1e5], np.zeros(3), Variant.ec(1))
    with pytest.raises(ValueError):
        model.predict(g)


def test_variant_parsing():
    assert Variant.parse("EC(5)") == Variant.ec(5)
    assert Variant.parse("baseline").label == "baseline"
    assert Variant.parse("oracle").edge_dim(4) == 4
    with pytest.raises(ValueError):
        Variant.parse("nope")
    with pytest.raises(ValueError):
        Variant.ec(0)


def test_architecture_widths():
    m = GnnModel(Variant.ec(3))
    assert m.t_steps == 8
    for block in m.blocks:
        assert all(d == 16 for d in block.dims[1:-1])
        assert not block.use_ln[-1]
    assert m.message_net.dims[0] == 48
    assert m.graph_head.dims[-1] == 3 and m.force_head.dims[-1] == 1


def reference_propagate(model, graph):
    """Straight-line message passing with explicit per-arc Psi and a neighbour sum."""
    h = model.node_encoder(Tensor(graph.node_features)).value
    c = model.edge_encoder(Tensor(graph.edge_feature)).value
    dst, src = graph.edges[:, 0], graph.edges[:, 1]
    for _ in range(model.t_steps):
        per_arc = np.concatenate([h[dst], h[src], c[graph.node_graph[dst]]], axis=1)
        msg = model.message_net(Tensor(per_arc)).value
        total = np.zeros((graph.n_nodes, msg.shape[1]))
        np.add.at(total, dst, msg)
        h = model.aggregate_net(Tensor(total)).value
    return h


@pytest.mark.parametrize("variant", [Variant.baseline(), Variant.ec(2), Variant.oracle()])
def test_propagate_matches_reference(variant):
    rng = np.random.default_rng(0)
    model = GnnModel(variant, seed=3)
    label = rng.uniform(5e4, 5e5, variant.edge_dim())
    g = build_graph(flat_mesh(4, 5, rng, 0.01), label, np.array([0, 0, -0.001]), variant)
    np.testing.assert_allclose(model.propagate(g).value, reference_propagate(model, g),
                               rtol=1e-10, atol=1e-12)


def test_empty_neighbourhood_gets_phi_of_zero():
    model = GnnModel(Variant.ec(1), seed=1)
    g = build_graph(flat_mesh(3, 3), [1e5], np.zeros(3), Variant.ec(1))
    g.edges = np.zeros((0, 2), dtype=np.int64)
    expected = model.aggregate_net(Tensor(np.zeros((1, 16)))).value
    np.testing.assert_allclose(model.propagate(g).value, np.repeat(expected, 9, axis=0),
                               atol=1e-14)


def test_duplicated_neighbours_double_the_sum():
    model = GnnModel(Variant.ec(1), seed=2)
    model.t_steps = 1
    g = build_graph(flat_mesh(2, 2), [1e5], np.zeros(3), Variant.ec(1))
    # node 0 receives from nodes 1 and 2, whose features are made identical
    g.node_features[2] = g.node_features[1]
    g.edges = np.array([[0, 1], [0, 2]])
    model.aggregate_net = tn.Mlp([16, 16], np.random.default_rng(0), name="identity")
    model.aggregate_net.weights[0].value = np.eye(16)
    model.aggregate_net.biases[0].value = np.zeros(16)
    summed = model.propagate(g).value[0]
    g.edges = np.array([[0, 1]])
    single = model.propagate(g).value[0]
    np.testing.assert_allclose(summed, 2 * single, rtol=1e-12)


@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    model = GnnModel(Variant.ec(2), seed=seed % 7)
    g = build_graph(flat_mesh(4, 4, rng, 0.01), rng.uniform(5e4, 5e5, 2),
                    np.array([0, 0, -0.001]), Variant.ec(2))
    perm = rng.permutation(g.n_nodes)
    inv = np.argsort(perm)
    pg = TextileGraph(g.node_features[perm], inv[g.edges], g.edge_feature,
                      g.grasp_mask[perm], g.node_graph[perm], 1)
    d0, f0 = gnn.predict(model, g)
    d1, f1 = gnn.predict(model, pg)
    np.testing.assert_allclose(d1, d0[perm], atol=1e-9)
    assert f1 == pytest.approx(f0, abs=1e-9)


def test_baseline_is_material_blind():
    model = GnnModel(Variant.baseline(), seed=4)
    pos = flat_mesh(5, 5, np.random.default_rng(1), 0.01)
    a = gnn.predict(model, build_graph(pos, [1e5], np.array([0, 0, -1e-3]), Variant.baseline()))
    b = gnn.predict(model, build_graph(pos, [9e5], np.array([0, 0, -1e-3]), Variant.baseline()))
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_zero_heads_return_biases():
    model = GnnModel(Variant.ec(1), seed=0)
    model.graph_head.weights[-1].value[:] = 0.0
    model.graph_head.biases[-1].value = np.array([0.1, -0.2, 0.3])
    model.force_head.weights[-1].value[:] = 0.0
    model.force_head.biases[-1].value = np.array([0.25])
    d, f = model.predict(build_graph(flat_mesh(3, 3), [1e5], np.zeros(3), Variant.ec(1)))
    np.testing.assert_allclose(d.value, [[0.1, -0.2, 0.3]] * 9, atol=1e-15)
    assert f.value[0] == pytest.approx(0.25, abs=1e-15)


def test_loss_examples():
    rng = np.random.default_rng(0)
    d, t = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
    f, tf = rng.normal(size=2), rng.normal(size=2)
    assert float(gnn.loss(Tensor(d), Tensor(f), d, f).value) == 0.0
    assert float(gnn.loss(Tensor(d), Tensor(f + 0.3), d, f).value) == pytest.approx(0.09)
    expected = np.mean((d - t) ** 2) + np.mean((f - tf) ** 2)
    assert float(gnn.loss(Tensor(d), Tensor(f), t, tf).value) == pytest.approx(expected,
                                                                               abs=1e-12)


@pytest.mark.parametrize("variant", [Variant.ec(2), Variant.oracle(), Variant.baseline()])
def test_full_loss_gradient_on_micro_mesh(variant):
    rng = np.random.default_rng(5)
    model = GnnModel(variant, seed=5, t_steps=2)
    ds = toy_dataset(n_materials=2, steps=1)
    ds.edge_input = rng.uniform(5e4, 5e5, (len(ds), variant.edge_dim()))
    g, td, tf = gnn.batch_graph(ds, np.arange(len(ds)), variant, NORM)
    params = model.parameters()

    def fn():
        d, f = model.predict(g)
        return gnn.loss(d, f, td, tf)

    assert worst_violation(fn, params) <= 1.0


def test_training_is_deterministic_and_learns():
    ds = toy_dataset()
    runs = []
    for _ in range(2):
        model = GnnModel(Variant.ec(1), seed=0, t_steps=2)
        runs.append(gnn.train(model, ds, epochs=30, batch=4, lr=3e-3, seed=0).loss_history)
    assert runs[0] == runs[1]
    assert runs[0][-1] < 0.1 * runs[0][0]


@pytest.mark.parametrize("epochs", [1, 2, 5])
def test_cosine_schedule_endpoints(epochs, monkeypatch):
    lrs = []
    real = tn.adam_step

    def spy(params, grads, state):
        lrs.append(state.lr)
        return real(params, grads, state)

    monkeypatch.setattr(tn, "adam_step", spy)
    gnn.train(GnnModel(Variant.ec(1), seed=0, t_steps=1), toy_dataset(2, 2), epochs=epochs,
              batch=4, lr=1e-2, lr_final=1e-3)
    assert lrs[0] == pytest.approx(1e-2)
    assert lrs[-1] == pytest.approx(1e-3 if epochs > 1 else 1e-2)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_parallel_training_matches_serial_loss():
    ds = toy_dataset()
    serial = gnn.train(GnnModel(Variant.ec(1), seed=0, t_steps=2), ds, epochs=3, batch=6,
                       lr=1e-3, seed=0).loss_history
    par = gnn.train(GnnModel(Variant.ec(1), seed=0, t_steps=2), ds, epochs=3, batch=6,
                    lr=1e-3, seed=0, workers=2).loss_history
    np.testing.assert_allclose(par, serial, rtol=1e-9)
    again = gnn.train(GnnModel(Variant.ec(1), seed=0, t_steps=2), ds, epochs=3, batch=6,
                      lr=1e-3, seed=0, workers=2).loss_history
    assert again == par


def test_non_finite_loss_reports_context():
    ds = toy_dataset()
    ds.force[4] = np.nan
    with pytest.raises(TrainingError, match="materials"):
        gnn.train(GnnModel(Variant.ec(1), t_steps=1), ds, epochs=1, batch=32)


def test_rollout_length_and_grasp_override():
    model = GnnModel(Variant.ec(1), seed=0, t_steps=2)
    start = flat_mesh(3, 3)
    actions = np.tile([0.0, 0.0, -0.001], (33, 1))
    roll = gnn.rollout(model, start, actions, [1e5])
    assert roll.force.shape == (33,) and roll.positions.shape == (34, 3, 3, 3)
    assert not roll.diverged
    np.testing.assert_allclose(roll.positions[-1][:, 0, 2], -0.033, atol=1e-12)


def test_rollout_divergence_is_flagged():
    model = GnnModel(Variant.ec(1), seed=0, t_steps=1)
    model.graph_head.biases[-1].value = np.array([0.0, 0.0, 1e6])
    roll = gnn.rollout(model, flat_mesh(3, 3), np.tile([0, 0, -1e-3], (33, 1)), [1e5])
    assert roll.diverged and roll.force.shape[0] < 33


def test_rollout_variant_mismatch():
    with pytest.raises(ValueError):
        gnn.rollout(GnnModel(Variant.ec(1)), flat_mesh(3, 3), np.zeros((2, 3)), [1e5],
                    Variant.baseline())


def test_checkpoint_roundtrip(tmp_path):
    model = GnnModel(Variant.ec(2), seed=7)
    g = build_graph(flat_mesh(3, 3, np.random.default_rng(0), 0.01), [1e5, 2e5],
                    np.zeros(3), Variant.ec(2))
    model.save(tmp_path / "m.json")
    back, _ = GnnModel.load(tmp_path / "m.json")
    assert back.variant == model.variant
    a, b = model.predict(g), back.predict(g)
    assert np.array_equal(a[0].value, b[0].value) and np.array_equal(a[1].value, b[1].value)
