import numpy as np
import pytest

from hgen import autodiff as ad
from hgen.autodiff import Tensor
from hgen.layers import (AlleleConfig, allele_forward, forward_gat, forward_gcn, forward_sage, gat_attention,
                         glorot, init_allele, project)
from hgen.metapath import MetaPathGraph, SparseBoolMatrix, normalized_operator


def graph_from(dense) -> MetaPathGraph:
    adj = SparseBoolMatrix.from_dense(dense)
    return MetaPathGraph("test", adj, normalized_operator(adj))


def random_graph(rng, n=8, p=0.35):
    upper = np.triu(rng.random((n, n)) < p, 1)
    return upper | upper.T | np.diag(rng.random(n) < 0.5)


def test_config_validation():
    for bad in [dict(backbone="mlp"), dict(num_layers=0), dict(dropout=1.0), dict(hidden_dim=0)]:
        with pytest.raises(ValueError):
            AlleleConfig(**bad)
    assert AlleleConfig(backbone="gat").layer_activation == "elu"
    assert AlleleConfig().layer_activation == "relu"


def test_init_determinism_and_replicas():
    cfg = AlleleConfig(hidden_dim=8)
    a = init_allele(cfg, 5, np.random.default_rng(1))
    b = init_allele(cfg, 5, np.random.default_rng(1))
    c = init_allele(cfg, 5, np.random.default_rng(2))
    assert np.array_equal(a.params["proj"].value, b.params["proj"].value)
    assert not np.array_equal(a.params["proj"].value, c.params["proj"].value)


@pytest.mark.parametrize("backbone,names", [
    ("gcn", {"proj", "layer0.weight", "layer1.weight"}),
    ("sage", {"proj", "layer0.self", "layer0.neigh", "layer1.self", "layer1.neigh"}),
])
def test_parameter_layout(backbone, names):
    learner = init_allele(AlleleConfig(backbone=backbone, hidden_dim=4), 3)
    assert set(learner.params) == names
    assert learner.params["proj"].shape == (3, 4)


def test_gat_parameter_layout():
    learner = init_allele(AlleleConfig(backbone="gat", hidden_dim=4, gat_heads=2, num_layers=1), 3)
    assert learner.params["layer0.head1.att_src"].shape == (4, 1)
    assert len(learner.params) == 1 + 2 * 3


def test_glorot_scale():
    w = glorot(np.random.default_rng(0), 100, 100).value
    target = np.sqrt(2.0 / 200)
    assert w.size >= 10_000
    assert target / 3 < w.std() < target * 3
    assert w.std() == pytest.approx(target, rel=0.05)


def test_projection_eval_and_dropout():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((6, 5))
    learner = init_allele(AlleleConfig(hidden_dim=4, dropout=0.0), 5, rng)
    np.testing.assert_array_equal(project(learner, X, True).value, project(learner, X, False).value)
    assert not project(learner, np.zeros((6, 5)), False).value.any()
    with pytest.raises(ValueError):
        project(learner, np.zeros((6, 4)), False)
    dropped = init_allele(AlleleConfig(hidden_dim=4, dropout=0.5), 5, np.random.default_rng(3))
    assert not np.array_equal(project(dropped, X, True).value, project(dropped, X, False).value)


def test_zeroed_feature_column_equals_dropping_it():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((6, 5))
    learner = init_allele(AlleleConfig(hidden_dim=4, dropout=0.0), 5, rng)
    X0 = X.copy()
    X0[:, 2] = 0.0
    w = learner.params["proj"].value
    reduced = np.maximum(np.delete(X, 2, axis=1) @ np.delete(w, 2, axis=0), 0)
    np.testing.assert_allclose(project(learner, X0, False).value, reduced, atol=1e-14)


def test_gcn_edgeless_is_dense_layer():
    rng = np.random.default_rng(0)
    learner = init_allele(AlleleConfig(hidden_dim=3, num_layers=1), 3, rng)
    H = rng.standard_normal((4, 3))
    out = forward_gcn(learner, graph_from(np.zeros((4, 4), bool)), H).value
    np.testing.assert_allclose(out, np.maximum(H @ learner.params["layer0.weight"].value, 0), atol=1e-15)


def test_gcn_two_cliques_stay_constant():
    dense = np.zeros((4, 4), bool)
    dense[:2, :2] = dense[2:, 2:] = True
    learner = init_allele(AlleleConfig(hidden_dim=3, num_layers=2), 3, np.random.default_rng(0))
    H = np.array([[1.0, 2.0, 0.5]] * 2 + [[-1.0, 0.3, 2.0]] * 2)
    out = forward_gcn(learner, graph_from(dense), H).value
    np.testing.assert_allclose(out[0], out[1], atol=1e-14)
    np.testing.assert_allclose(out[2], out[3], atol=1e-14)


def test_gcn_ring_operator_by_hand():
    ring = np.zeros((4, 4), bool)
    for i in range(4):
        ring[i, (i + 1) % 4] = ring[(i + 1) % 4, i] = True
    mpg = graph_from(ring)
    learner = init_allele(AlleleConfig(hidden_dim=2, num_layers=1, activation="identity"), 2,
                          np.random.default_rng(1))
    H = np.arange(8.0).reshape(4, 2)
    w = learner.params["layer0.weight"].value
    expect = np.array([(H[i] + H[(i - 1) % 4] + H[(i + 1) % 4]) / 3 for i in range(4)]) @ w
    np.testing.assert_allclose(forward_gcn(learner, mpg, H).value, expect, atol=1e-13)


def test_sage_edgeless_and_complete():
    rng = np.random.default_rng(2)
    learner = init_allele(AlleleConfig(backbone="sage", hidden_dim=3, num_layers=1), 3, rng)
    ws, wn = learner.params["layer0.self"].value, learner.params["layer0.neigh"].value
    H = rng.standard_normal((4, 3))
    out = forward_sage(learner, graph_from(np.zeros((4, 4), bool)), H).value
    np.testing.assert_allclose(out, np.maximum(H @ ws, 0), atol=1e-15)
    same = np.tile(rng.standard_normal((1, 3)), (4, 1))
    out = forward_sage(learner, graph_from(np.ones((4, 4), bool)), same).value
    np.testing.assert_allclose(out, np.maximum(same @ ws + same @ wn, 0), atol=1e-14)


def test_sage_path_by_hand():
    path = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], bool)
    rng = np.random.default_rng(5)
    learner = init_allele(AlleleConfig(backbone="sage", hidden_dim=2, num_layers=1, activation="identity"), 2, rng)
    ws, wn = learner.params["layer0.self"].value, learner.params["layer0.neigh"].value
    H = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]])
    means = np.array([H[1], (H[0] + H[2]) / 2, H[1]])
    np.testing.assert_allclose(forward_sage(learner, graph_from(path), H).value, H @ ws + means @ wn, atol=1e-14)


def test_gat_single_node_and_uniform_attention():
    learner = init_allele(AlleleConfig(backbone="gat", hidden_dim=3, num_layers=1), 3, np.random.default_rng(0))
    alpha, _ = gat_attention(learner, graph_from(np.zeros((1, 1), bool)), Tensor(np.ones((1, 3))), 0, 0)
    assert alpha.value[0, 0] == 1.0
    star = np.zeros((4, 4), bool)
    star[0, 1:] = star[1:, 0] = True
    alpha, _ = gat_attention(learner, graph_from(star), Tensor(np.ones((4, 3))), 0, 0)
    np.testing.assert_allclose(alpha.value[:4, 0], 0.25, atol=1e-15)  # node 0: itself + 3 leaves


def test_gat_star_by_hand():
    star = np.zeros((3, 3), bool)
    star[0, 1:] = star[1:, 0] = True
    rng = np.random.default_rng(7)
    cfg = AlleleConfig(backbone="gat", hidden_dim=2, num_layers=1, activation="identity", leaky_slope=0.2)
    learner = init_allele(cfg, 2, rng)
    H = rng.standard_normal((3, 2))
    p = learner.params
    W, a_s, a_d = p["layer0.head0.weight"].value, p["layer0.head0.att_src"].value[:, 0], \
        p["layer0.head0.att_dst"].value[:, 0]
    wh = H @ W
    expect = np.zeros((3, 2))
    for u, nbrs in {0: [0, 1, 2], 1: [0, 1], 2: [0, 2]}.items():
        e = np.array([wh[u] @ a_s + wh[v] @ a_d for v in nbrs])
        e = np.where(e > 0, e, 0.2 * e)
        w = np.exp(e) / np.exp(e).sum()
        expect[u] = sum(wi * wh[v] for wi, v in zip(w, nbrs))
    np.testing.assert_allclose(forward_gat(learner, graph_from(star), H).value, expect, atol=1e-14)


def test_gat_attention_rows_sum_to_one():
    rng = np.random.default_rng(3)
    mpg = graph_from(random_graph(rng, 12))
    learner = init_allele(AlleleConfig(backbone="gat", hidden_dim=4, num_layers=2, gat_heads=3), 4, rng)
    trace = []
    forward_gat(learner, mpg, rng.standard_normal((12, 4)), attention_out=trace)
    assert len(trace) == 6
    indptr = mpg.closed_neighborhood.indptr
    for alpha in trace:
        np.testing.assert_allclose(np.add.reduceat(alpha, indptr[:-1]), 1.0, atol=1e-12)


@pytest.mark.parametrize("backbone", ["gcn", "sage", "gat"])
def test_permutation_equivariance(backbone):
    rng = np.random.default_rng(11)
    for _ in range(5):
        dense = random_graph(rng, 8)
        perm = rng.permutation(8)
        P = np.eye(8)[perm]
        learner = init_allele(AlleleConfig(backbone=backbone, hidden_dim=4, gat_heads=2), 3, rng)
        X = rng.standard_normal((8, 3))
        out = allele_forward(learner, graph_from(dense), X, train_mode=False).value
        out_p = allele_forward(learner, graph_from(dense[np.ix_(perm, perm)]), P @ X, train_mode=False).value
        np.testing.assert_allclose(out_p, P @ out, atol=1e-10)


@pytest.mark.parametrize("backbone", ["gcn", "sage", "gat"])
def test_eval_mode_is_deterministic(backbone):
    rng = np.random.default_rng(0)
    mpg = graph_from(random_graph(rng, 10))
    learner = init_allele(AlleleConfig(backbone=backbone, hidden_dim=4, dropout=0.5), 3, rng)
    X = rng.standard_normal((10, 3))
    a = allele_forward(learner, mpg, X, train_mode=False).value
    b = allele_forward(learner, mpg, X, train_mode=False).value
    assert a.tobytes() == b.tobytes()


def test_row_mismatch():
    learner = init_allele(AlleleConfig(hidden_dim=2), 2)
    for fwd in (forward_gcn, forward_sage):
        with pytest.raises(ValueError):
            fwd(learner, graph_from(np.zeros((3, 3), bool)), np.ones((4, 2)))


@pytest.mark.parametrize("backbone", ["gcn", "sage", "gat"])
def test_layer_gradients(backbone):
    rng = np.random.default_rng(8)
    mpg = graph_from(random_graph(rng, 6))
    learner = init_allele(AlleleConfig(backbone=backbone, hidden_dim=3, num_layers=2, activation="elu"), 2, rng)
    X = rng.standard_normal((6, 2))

    def objective():
        return ad.sum_all(ad.mul(allele_forward(learner, mpg, X, False), Tensor(np.arange(18.0).reshape(6, 3))))

    with ad.Tape() as tape:
        loss = objective()
    tape.backward(loss)
    for name, p in learner.params.items():
        num = np.zeros_like(p.value)
        for idx in np.ndindex(p.shape):
            old = p.value[idx]
            p.value[idx] = old + 1e-6
            up = objective().item()
            p.value[idx] = old - 1e-6
            down = objective().item()
            p.value[idx] = old
            num[idx] = (up - down) / 2e-6
        np.testing.assert_allclose(p.grad, num, rtol=1e-4, atol=1e-6, err_msg=name)
