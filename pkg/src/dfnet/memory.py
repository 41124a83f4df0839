"""k-hop external knowledge memory: cell embeddings, encoder and decoder queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import DFNet


def cell_embeddings(model: DFNet, mem_ids, tokmask) -> list[ad.Tensor]:
    """Bag-of-words cell embeddings for every hop matrix ``C^1..C^{k+1}``.

    ``mem_ids`` (B, M, L) token ids, ``tokmask`` (B, M, L) marks real tokens.
    Returns ``k+1`` tensors of shape (B, M, H).
    """
    m = np.asarray(tokmask, dtype=model.dtype)[..., None]
    out = []
    for j in range(1, model.config.hops + 2):
        rows = ad.embedding(model[f"mem.C{j}"], mem_ids)
        out.append(ad.sum_(ad.mul(rows, m), axis=-2))
    return out


@dataclass
class QueryTrace:
    queries: list  # q^1..q^{k+1}
    attentions: list  # p^1..p^k
    readouts: list  # o^1..o^k


def _scores(q, cells) -> ad.Tensor:
    # q (B, H) or (B, n, H), cells (B, M, H) -> (B, M) or (B, n, M)
    ct = ad.transpose(cells, (0, 2, 1))
    if q.ndim == 2:
        s = ad.matmul(ad.reshape(q, (q.shape[0], 1, q.shape[1])), ct)
        return ad.reshape(s, (s.shape[0], s.shape[2]))
    return ad.matmul(q, ct)


def _read(p, cells) -> ad.Tensor:
    if p.ndim == 2:
        r = ad.matmul(ad.reshape(p, (p.shape[0], 1, p.shape[1])), cells)
        return ad.reshape(r, (r.shape[0], r.shape[2]))
    return ad.matmul(p, cells)


def encoder_query(q1, cells: list, mem_mask, real_mask):
    """Run ``k`` hops from ``q1`` (B, H).

    Returns ``(q^{k+1}, G, trace)``; ``G`` (B, M) is the sigmoid of the final
    hop's logits, zeroed outside real (KB and history) cells.
    """
    mem_mask = np.asarray(mem_mask, dtype=bool)
    q = q1
    trace = QueryTrace([q1], [], [])
    logits = None
    for j in range(len(cells) - 1):
        logits = _scores(q, cells[j])
        p = ad.softmax(logits, axis=-1, mask=mem_mask)
        o = _read(p, cells[j + 1])
        q = ad.add(q, o)
        trace.attentions.append(p)
        trace.readouts.append(o)
        trace.queries.append(q)
    G = ad.mul(ad.sigmoid(logits), np.asarray(real_mask, dtype=q.dtype))
    return q, G, trace


def gate_weights(G, real_mask) -> ad.Tensor:
    """Per-cell multiplier used by decoder queries: ``g_i`` on real cells, 1 elsewhere
    (so the null cell is never filtered)."""
    real = np.asarray(real_mask, dtype=G.dtype)
    return ad.add(ad.mul(G, real), 1.0 - real)


def decoder_query(q1, cells: list, mem_mask, g) -> ad.Tensor:
    """Gated ``k``-hop query; returns the final hop's distribution over cells.

    ``q1`` is (B, H) or (B, n, H) for ``n`` steps at once; ``g`` (B, M) comes
    from :func:`gate_weights`. Each hop multiplies its logits by ``g`` before
    the softmax.
    """
    mem_mask = np.asarray(mem_mask, dtype=bool)
    if q1.ndim == 3:
        mem_mask = mem_mask[:, None, :]
        g = ad.reshape(g, (g.shape[0], 1, g.shape[1]))
    q = q1
    p = None
    for j in range(len(cells) - 1):
        logits = ad.mul(_scores(q, cells[j]), g)
        p = ad.softmax(logits, axis=-1, mask=mem_mask)
        if j < len(cells) - 2:
            q = ad.add(q, _read(p, cells[j + 1]))
    return p


def pick_cell(P) -> np.ndarray:
    """Argmax cell per row, ties to the lowest index."""
    return np.argmax(np.asarray(P), axis=-1)
