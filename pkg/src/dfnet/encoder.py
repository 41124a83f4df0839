"""Shared and private BiLSTM encoders, encoder-side fusion, self-attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fusion import dynamic_fuse
from .model import DFNet, linear


@dataclass
class EncoderOutput:
    shared: ad.Tensor | None  # (B, T, H)
    private: ad.Tensor | None  # (D, B, T, H)
    fused: ad.Tensor | None  # (B, T, H)
    context: ad.Tensor | None  # (B, H)
    h_T: ad.Tensor | None  # (B, H), last valid shared (or fused) state
    alpha: ad.Tensor | None  # (B, T, D) encoder gate
    attention: ad.Tensor | None  # (B, T) self-attention weights
    mask: np.ndarray  # (B, T)


def encode(model: DFNet, ctx_ids, ctx_len) -> EncoderOutput:
    """Run every encoder group over the same embedded history (pre-fusion)."""
    ctx_ids = np.asarray(ctx_ids, dtype=np.int64)
    ctx_len = np.asarray(ctx_len, dtype=np.int64)
    if ctx_ids.ndim != 2 or ctx_ids.shape[1] == 0 or ctx_len.size == 0 or ctx_len.min() < 1:
        raise ValueError("encode: empty input sequence")
    cfg = model.config
    B, T = ctx_ids.shape
    H = cfg.hidden
    mask = np.arange(T)[None, :] < ctx_len[:, None]
    x = ad.embedding(model["emb"], ctx_ids)
    x = ad.dropout(x, cfg.dropout, model.rng, model.training)

    groups = model.encoder_groups()
    outs = []
    for direction, reverse in (("fwd", False), ("bwd", True)):
        W = model.stacked("enc", groups, f".{direction}.W")
        b = model.stacked("enc", groups, f".{direction}.b")
        outs.append(ad.lstm_sequence(x, W, b, ctx_len, reverse=reverse))
    hcat = ad.concat(outs, axis=-1)  # (E, B, T, 2H)
    E = hcat.shape[0]
    Wp = ad.reshape(model.stacked("enc", groups, ".proj.W"), (E, 1, 2 * H, H))
    bp = ad.reshape(model.stacked("enc", groups, ".proj.b"), (E, 1, 1, H))
    proj = ad.add(ad.matmul(hcat, Wp), bp)
    proj = ad.dropout(proj, cfg.dropout, model.rng, model.training)
    proj = ad.mul(proj, mask[None, :, :, None].astype(proj.dtype))

    shared = private = None
    k = 0
    if "shared" in groups:
        shared = proj[0]
        k = 1
    if "private" in groups:
        private = proj[k:]
    last = (np.arange(B), ctx_len - 1)
    h_T = None if shared is None else shared[last]
    return EncoderOutput(shared, private, None, None, h_T, None, None, mask)


def self_attend(model: DFNet, fused, mask=None):
    """Context vector ``sum_i w_i H_i`` with ``w = softmax(v . tanh(W H_i + b))``.

    Returns ``(context (B, H), weights (B, T))``.
    """
    scores = ad.matmul(ad.tanh(linear(model, "enc.attn", fused)), model["enc.attn.v"])
    w = ad.softmax(scores, axis=-1, mask=mask)
    ctx = ad.matmul(ad.reshape(w, (w.shape[0], 1, w.shape[1])), fused)
    return ad.reshape(ctx, (ctx.shape[0], ctx.shape[2])), w


def fuse_and_attend(model: DFNet, out: EncoderOutput) -> EncoderOutput:
    """Fill ``fused``, ``alpha`` and ``context`` of an encoder output."""
    fused, alpha = dynamic_fuse(model, "enc", out.shared, out.private)
    out.fused = fused
    out.alpha = alpha
    out.context, out.attention = self_attend(model, fused, out.mask)
    if out.h_T is None:
        B = fused.shape[0]
        out.h_T = fused[(np.arange(B), out.mask.sum(axis=1) - 1)]
    return out
