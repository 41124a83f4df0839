import numpy as np
import pytest

from conftest import scramble, tiny_setup
from dfnet import autodiff as ad
from dfnet.config import TrainConfig
from dfnet.corpus import NULL_TOKEN, SPECIALS, Vocabulary
from dfnet.decoder import encode_batch
from dfnet.memory import cell_embeddings, decoder_query, encoder_query, gate_weights, pick_cell
from dfnet.model import DFNet

TOL = 1e-4


def model_with(hops=3, hidden=4):
    vocab = Vocabulary(list(SPECIALS) + [NULL_TOKEN, "a", "b", "c", "d"])
    return DFNet(vocab, ["x"], TrainConfig(hidden=hidden, embedding=hidden, hops=hops, precision="float64"))


def cells_of(*arrays):
    return [ad.as_tensor(np.asarray(a, dtype=np.float64)) for a in arrays]


def test_cell_embedding_is_bag_of_words_sum(f64):
    m = model_with()
    ids = np.array([[[5, 6, 7], [4, 0, 0], [5, 6, 7]]])
    tok = np.array([[[1, 1, 1], [1, 0, 0], [1, 1, 1]]])
    cells = cell_embeddings(m, ids, tok)
    assert len(cells) == 4
    for j, c in enumerate(cells, start=1):
        C = m[f"mem.C{j}"].data
        assert np.allclose(c.data[0, 0], C[5] + C[6] + C[7], rtol=0, atol=1e-15)
        assert np.array_equal(c.data[0, 1], C[4])
        assert np.array_equal(c.data[0, 0], c.data[0, 2])


def test_hops_have_k_plus_one_matrices():
    m = model_with(hops=3)
    assert sorted(k for k in m.params if k.startswith("mem.")) == ["mem.C1", "mem.C2", "mem.C3", "mem.C4"]


def test_one_hop_equal_cells_uniform(f64, rng):
    e = rng.normal(size=3)
    out = rng.normal(size=(1, 2, 3))
    cells = cells_of(np.stack([e, e])[None], out)
    q, G, tr = encoder_query(ad.as_tensor(rng.normal(size=(1, 3))), cells, [[1, 1]], [[1, 1]])
    assert np.allclose(tr.attentions[0].data, [[0.5, 0.5]])
    assert np.allclose(tr.readouts[0].data, out.mean(axis=1))


def test_orthogonal_query_gives_half(f64):
    cells = cells_of([[[1.0, 0, 0], [0, 1.0, 0], [0, 0, 0]]], np.zeros((1, 3, 3)))
    q1 = ad.as_tensor([[0.0, 0.0, 2.0]])
    _, G, _ = encoder_query(q1, cells, [[1, 1, 1]], [[1, 1, 0]])
    assert np.array_equal(G.data, [[0.5, 0.5, 0.0]])


def test_three_hops_match_step_by_step(f64, rng):
    H, M = 5, 4
    C = [rng.normal(size=(M, H)) for _ in range(4)]
    q1 = rng.normal(size=H)
    q, G, tr = encoder_query(ad.as_tensor(q1[None]), cells_of(*[c[None] for c in C]), [[1] * M], [[1, 1, 1, 0]])
    qk = q1.copy()
    for k in range(3):
        logits = np.array([sum(qk[h] * C[k][i, h] for h in range(H)) for i in range(M)])
        p = np.exp(logits - logits.max())
        p /= p.sum()
        o = sum(p[i] * C[k + 1][i] for i in range(M))
        assert np.allclose(tr.attentions[k].data[0], p, atol=1e-12)
        qk = qk + o
    assert np.allclose(q.data[0], qk, atol=1e-12)
    expected_g = 1 / (1 + np.exp(-logits))
    assert np.allclose(G.data[0, :3], expected_g[:3], atol=1e-12)
    assert G.data[0, 3] == 0.0
    for j in range(3):
        assert abs(tr.attentions[j].data.sum() - 1) < 1e-6
        assert np.array_equal(tr.queries[j + 1].data, tr.queries[j].data + tr.readouts[j].data)


def test_memory_padding_gets_no_mass(f64, rng):
    cells = cells_of(*[rng.normal(size=(1, 4, 3)) for _ in range(3)])
    _, G, tr = encoder_query(ad.as_tensor(rng.normal(size=(1, 3))), cells, [[1, 1, 1, 0]], [[1, 1, 0, 0]])
    assert all(p.data[0, 3] == 0 for p in tr.attentions)
    assert G.data[0, 2] == 0 and G.data[0, 3] == 0


def test_gate_weights_leave_null_ungated(f64):
    g = gate_weights(ad.as_tensor([[0.2, 0.7, 0.0]]), [[1, 1, 0]])
    assert np.array_equal(g.data, [[0.2, 0.7, 1.0]])


def test_decoder_query_all_ones_is_ungated(f64, rng):
    cells = cells_of(*[rng.normal(size=(1, 3, 4)) for _ in range(3)])
    q = ad.as_tensor(rng.normal(size=(1, 4)))
    gated = decoder_query(q, cells, [[1, 1, 1]], ad.as_tensor(np.ones((1, 3))))
    # ungated reference: plain k-hop attention
    qk = q.data[0]
    for k in range(2):
        logits = cells[k].data[0] @ qk
        p = np.exp(logits - logits.max())
        p /= p.sum()
        qk = qk + p @ cells[k + 1].data[0]
    assert np.allclose(gated.data[0], p, atol=1e-12)


def test_small_gate_shrinks_cell(f64):
    # single hop, 3 cells, positive logits (1, 2, 3)
    c1 = np.array([[[1.0, 0], [2.0, 0], [3.0, 0]]])
    cells = cells_of(c1, np.zeros((1, 3, 2)))
    q = ad.as_tensor([[1.0, 0.0]])
    ungated = decoder_query(q, cells, [[1, 1, 1]], ad.as_tensor(np.ones((1, 3)))).data[0]
    gated = decoder_query(q, cells, [[1, 1, 1]], ad.as_tensor([[1.0, 1e-6, 1.0]])).data[0]
    assert gated[1] < ungated[1]
    assert gated[1] / gated[0] < ungated[1] / ungated[0]


def test_decoder_query_sequence_matches_per_step(f64, rng):
    cells = cells_of(*[rng.normal(size=(2, 4, 3)) for _ in range(3)])
    q = rng.normal(size=(2, 5, 3))
    g = ad.as_tensor(rng.uniform(size=(2, 4)))
    mask = [[1, 1, 1, 1], [1, 1, 1, 0]]
    P = decoder_query(ad.as_tensor(q), cells, mask, g).data
    for t in range(5):
        assert np.allclose(P[:, t], decoder_query(ad.as_tensor(q[:, t]), cells, mask, g).data, atol=1e-12)


def test_pick_cell_ties_to_lowest_index():
    assert pick_cell(np.full(4, 0.25)) == 0
    assert list(pick_cell([[0.1, 0.4, 0.4, 0.1]])) == [1]


@pytest.mark.parametrize("which", ["C1", "C2", "C3", "q"])
def test_two_hop_gradients(which, f64, rng):
    C = [ad.parameter(rng.normal(size=(1, 3, 4))) for _ in range(3)]
    q = ad.parameter(rng.normal(size=(1, 4)))
    qd = ad.parameter(rng.normal(size=(1, 2, 4)))
    w = rng.normal(size=4)
    target = {"C1": C[0], "C2": C[1], "C3": C[2], "q": q}[which]

    def f(_):
        qk, G, _ = encoder_query(q, C, [[1, 1, 1]], [[1, 1, 0]])
        P = decoder_query(qd, C, [[1, 1, 1]], gate_weights(G, [[1, 1, 0]]))
        return ad.add(ad.sum_(ad.mul(qk, w)), ad.sum_(ad.log(P)))

    assert ad.check_gradients(f, target) < TOL


def test_model_memory_gradients(f64):
    model, batch, _ = tiny_setup()
    scramble(model)

    def f(_):
        kn = encode_batch(model, batch)
        return ad.add(ad.sum_(kn.query), ad.sum_(kn.G))

    for name in ("mem.C1", "mem.C3"):
        assert ad.check_gradients(f, model[name]) < TOL
