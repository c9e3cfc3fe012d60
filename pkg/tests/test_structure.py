import numpy as np
import pytest

from vemfuse import diffmath as dm
from vemfuse.structure import GraphOverlay, StructConfig, StructureModel


def encode_oracle(model, edges):
    """Per-node loops over incoming edges, one direction at a time."""
    p = {k: v.data.astype(np.float64) for k, v in model.params.items()}
    cfg = model.config
    x, z = p["entity_emb"], p["relation_emb"]
    n_base = model.n_base
    for layer in range(cfg.layers):
        new = x @ p[f"W_self_{layer}"]
        for v in range(model.n_entities):
            for name, keep in (("W_in", lambda r: r < n_base), ("W_out", lambda r: r >= n_base)):
                inc = [(s, r) for s, r, t in edges if t == v and keep(r)]
                for s, r in inc:
                    if cfg.composition == "subtract":
                        m = x[s] - z[r]
                    elif cfg.composition == "multiply":
                        m = x[s] * z[r]
                    else:
                        d = len(x[s])
                        m = np.array([sum(x[s][i] * z[r][(i + k) % d] for i in range(d))
                                      for k in range(d)])
                    new[v] += (m @ p[f"{name}_{layer}"]) / len(inc)
        x = {"tanh": np.tanh, "relu": lambda a: np.maximum(a, 0), "identity": lambda a: a}[cfg.activation](new)
        z = z @ p[f"W_rel_{layer}"]
    return x, z


@pytest.mark.parametrize("composition", ["subtract", "multiply", "ccorr"])
@pytest.mark.parametrize("layers,activation", [(1, "tanh"), (2, "relu"), (0, "identity")])
def test_encode_matches_loop_oracle(toy, composition, layers, activation):
    g, _ = toy
    m = StructureModel(g, StructConfig(dim=5, layers=layers, composition=composition,
                                       activation=activation, dtype="float64", seed=1))
    x, z = m.encode()
    ox, oz = encode_oracle(m, g.triples.tolist())
    np.testing.assert_allclose(x.data, ox, atol=1e-12)
    np.testing.assert_allclose(z.data, oz, atol=1e-12)


def test_distmult_scores_match_definition(toy):
    g, _ = toy
    m = StructureModel(g, StructConfig(dim=4, dtype="float64"))
    x, z = m.encode()
    logits = m.logits([0, 2], [1, 4]).data
    for row, (h, r) in enumerate([(0, 1), (2, 4)]):
        for t in range(g.n_entities):
            assert logits[row, t] == pytest.approx(np.sum(x.data[h] * z.data[r] * x.data[t]))


def test_overlay_adds_edges_without_touching_base(toy):
    g, _ = toy
    m = StructureModel(g, StructConfig(dim=4, dtype="float64"))
    h0 = g.content_hash()
    extra = np.array([[2, 2, 5], [5, 5, 2]])
    ov = GraphOverlay(extra, np.ones(2))
    x_ov, _ = m.encode(ov)
    ox, _ = encode_oracle(m, g.triples.tolist() + extra.tolist())
    np.testing.assert_allclose(x_ov.data, ox, atol=1e-12)
    assert g.content_hash() == h0
    assert not np.allclose(m.encode()[0].data, x_ov.data)
    with pytest.raises(ValueError):
        m.encode(GraphOverlay(np.array([[0, 99, 1]]), np.ones(1)))


def test_gradients_through_encoder(toy):
    g, _ = toy
    m = StructureModel(g, StructConfig(dim=4, composition="ccorr", dtype="float64"))
    err = dm.finite_diff_check(lambda: dm.tsum(dm.log_softmax(m.logits([0, 1], [0, 3]))[:, 2]),
                               m.parameters())
    assert err < 1e-5


def test_init_is_seeded_and_glorot_bounded(toy):
    g, _ = toy
    a = StructureModel(g, StructConfig(dim=8, seed=3)).state_dict()
    b = StructureModel(g, StructConfig(dim=8, seed=3)).state_dict()
    c = StructureModel(g, StructConfig(dim=8, seed=4)).state_dict()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
        bound = np.sqrt(6 / sum(a[k].shape))
        assert np.abs(a[k]).max() <= bound
    assert any(not np.array_equal(a[k], c[k]) for k in a)
    assert a["entity_emb"].dtype == np.float32


def test_state_dict_roundtrip_and_mismatch(toy):
    g, _ = toy
    m = StructureModel(g, StructConfig(dim=4))
    s = m.state_dict()
    m.params["entity_emb"].data += 1
    m.load_state_dict(s)
    np.testing.assert_array_equal(m.params["entity_emb"].data, s["entity_emb"])
    with pytest.raises(KeyError):
        m.load_state_dict({"entity_emb": s["entity_emb"]})
    bad = dict(s, entity_emb=np.zeros((2, 2), np.float32))
    with pytest.raises(ValueError):
        m.load_state_dict(bad)


def test_score_queries_cache_invalidation(toy):
    g, _ = toy
    m = StructureModel(g, StructConfig(dim=4))
    first = m.score_queries([0], [0]).copy()
    m.params["entity_emb"].data *= 2
    np.testing.assert_array_equal(m.score_queries([0], [0]), first)
    m.invalidate()
    assert not np.array_equal(m.score_queries([0], [0]), first)


def test_relation_embedding_access(toy):
    g, _ = toy
    m = StructureModel(g, StructConfig(dim=4))
    assert m.relation_embedding().shape == (6, 4)
    np.testing.assert_array_equal(m.relation_embedding(2), m.relation_embedding()[2])
    with pytest.raises(IndexError):
        m.relation_embedding(6)


def test_config_validation():
    with pytest.raises(ValueError):
        StructConfig(composition="add")
    with pytest.raises(ValueError):
        StructConfig(activation="gelu")
