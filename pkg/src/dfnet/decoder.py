"""Shared and private LSTM decoders, teacher-forced pass and greedy decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .batching import Batch
from .corpus import EOS_ID, SOS_ID
from .encoder import EncoderOutput, encode, fuse_and_attend
from .fusion import adversarial_classify, dynamic_fuse
from .memory import cell_embeddings, decoder_query, encoder_query, gate_weights, pick_cell
from .model import DFNet, linear


@dataclass
class DecoderState:
    h: ad.Tensor  # (E, B, H): shared first, then private
    c: ad.Tensor


@dataclass
class StepOutput:
    state: DecoderState
    shared: ad.Tensor | None  # (B, H)
    fused: ad.Tensor  # h^f (B, H)
    attended: ad.Tensor  # h^f' (B, H)
    attention: ad.Tensor  # (B, T)
    probs: ad.Tensor  # P^vocab (B, V)
    alpha: ad.Tensor | None  # (B, D)

    def features(self) -> ad.Tensor:
        return ad.concat([self.fused, self.attended], axis=-1)


@dataclass
class Knowledge:
    """Everything the decoder needs from the encoder side for one batch."""

    enc: EncoderOutput
    cells: list
    query: ad.Tensor  # q^{k+1}
    G: ad.Tensor  # (B, M)
    gate: ad.Tensor  # G with ones outside real cells
    mem_mask: np.ndarray


def encode_batch(model: DFNet, batch: Batch) -> Knowledge:
    enc = fuse_and_attend(model, encode(model, batch.ctx_ids, batch.ctx_len))
    cells = cell_embeddings(model, batch.mem_ids, batch.mem_tokmask)
    q, G, _ = encoder_query(enc.context, cells, batch.mem_mask, batch.real_mask)
    return Knowledge(enc, cells, q, G, gate_weights(G, batch.real_mask), batch.mem_mask)


def init_state(model: DFNet, q) -> DecoderState:
    """Every decoder (shared and private) starts from ``h = q^{k+1}``, ``c = 0``."""
    E = _n_cells(model)
    B, H = q.shape
    h = ad.add(ad.reshape(q, (1, B, H)), np.zeros((E, B, H), dtype=q.dtype))
    c = ad.as_tensor(np.zeros((E, B, H), dtype=q.dtype))
    return DecoderState(h, c)


def _n_cells(model: DFNet) -> int:
    groups = model.decoder_groups()
    return ("shared" in groups) + ("private" in groups) * model.n_domains


def decode_step(model: DFNet, tokens, state: DecoderState | None, enc: EncoderOutput) -> StepOutput:
    """Advance every decoder on the same input token and produce ``P^vocab``."""
    if state is None:
        raise ValueError("decode_step: decoder state is not initialized")
    cfg = model.config
    H = cfg.hidden
    x = ad.embedding(model["emb"], np.asarray(tokens, dtype=np.int64))
    x = ad.dropout(x, cfg.dropout, model.rng, model.training)
    groups = model.decoder_groups()
    W = model.stacked("dec", groups, ".W")
    b = model.stacked("dec", groups, ".b")
    hc = ad.lstm_cell(x, state.h, state.c, W, b)
    h, c = hc[..., :H], hc[..., H:]
    shared = experts = None
    k = 0
    if "shared" in groups:
        shared = h[0]
        k = 1
    if "private" in groups:
        experts = h[k:]
    fused, alpha = dynamic_fuse(model, "dec", shared, experts)

    Hf = enc.fused  # (B, T, H)
    B = fused.shape[0]
    scores = ad.matmul(Hf, ad.reshape(fused, (B, H, 1)))
    att = ad.softmax(ad.reshape(scores, (B, Hf.shape[1])), axis=-1, mask=enc.mask)
    attended = ad.reshape(ad.matmul(ad.reshape(att, (B, 1, Hf.shape[1])), Hf), (B, H))

    feat = ad.concat([fused, attended], axis=-1)
    feat = ad.dropout(feat, cfg.dropout, model.rng, model.training)
    logits = ad.matmul(linear(model, "dec.out", feat), ad.transpose(model["emb"]))
    probs = ad.softmax(logits, axis=-1)
    return StepOutput(DecoderState(h, c), shared, fused, attended, att, probs, alpha)


def pointer_query(model: DFNet, features) -> ad.Tensor:
    """Project ``[h^f; h^f']`` to the memory's query space."""
    return linear(model, "dec.query", features)


@dataclass
class ForwardPass:
    """Per-batch tensors consumed by the losses."""

    vocab_probs: ad.Tensor  # (B, n, V)
    pointer_probs: ad.Tensor  # (B, n, M)
    G: ad.Tensor  # (B, M)
    enc_alpha: ad.Tensor | None  # (B, T, D)
    dec_alpha: ad.Tensor | None  # (B, n, D)
    enc_beta: ad.Tensor | None  # (B, D)
    dec_beta: ad.Tensor | None  # (B, D)
    inputs: np.ndarray  # (B, n) decoder input ids actually fed


def teacher_forced_pass(model: DFNet, batch: Batch, ratio: float | None = None) -> ForwardPass:
    """One pass producing every quantity the losses need.

    At step ``t > 0`` each row is fed the gold previous sketch token with
    probability ``ratio`` (drawn per token from the model's random stream),
    otherwise its own previous argmax.
    """
    cfg = model.config
    ratio = cfg.teacher_forcing if ratio is None else ratio
    kn = encode_batch(model, batch)
    B, n = batch.tgt_ids.shape
    state = init_state(model, kn.query)
    tokens = np.full(B, SOS_ID, dtype=np.int64)
    inputs = np.zeros((B, n), dtype=np.int64)
    probs, feats, alphas, shared = [], [], [], []
    for t in range(n):
        if t > 0:
            gold = batch.tgt_ids[:, t - 1]
            if ratio >= 1.0:
                tokens = gold
            else:
                own = probs[-1].data.argmax(axis=-1)
                use_gold = model.rng.random(B) < ratio
                tokens = np.where(use_gold, gold, own)
        inputs[:, t] = tokens
        step = decode_step(model, tokens, state, kn.enc)
        state = step.state
        probs.append(step.probs)
        feats.append(step.features())
        if step.alpha is not None:
            alphas.append(step.alpha)
        if step.shared is not None:
            shared.append(step.shared)
    vocab_probs = ad.stack(probs, axis=1)
    query = pointer_query(model, ad.stack(feats, axis=1))
    pointer_probs = decoder_query(query, kn.cells, kn.mem_mask, kn.gate)

    enc_beta = dec_beta = None
    if cfg.adversarial and kn.enc.shared is not None:
        enc_beta = adversarial_classify(model, "enc", kn.enc.shared, batch.ctx_mask)
        dec_beta = adversarial_classify(model, "dec", ad.stack(shared, axis=1), batch.tgt_mask)
    return ForwardPass(
        vocab_probs=vocab_probs,
        pointer_probs=pointer_probs,
        G=kn.G,
        enc_alpha=kn.enc.alpha,
        dec_alpha=ad.stack(alphas, axis=1) if alphas else None,
        enc_beta=enc_beta,
        dec_beta=dec_beta,
        inputs=inputs,
    )


@dataclass
class Decoded:
    surface: list[str]
    sketch: list[str]
    gates: list = field(default_factory=list)  # per step (D,) arrays
    cells: list = field(default_factory=list)  # (step, cell index) for pointer steps


def greedy_decode(model: DFNet, batch: Batch, max_len: int | None = None) -> list[Decoded]:
    """Greedy argmax decoding from sos until eos or ``max_len`` tokens.

    Whenever a row's argmax is a sketch tag, the gated memory query picks a
    cell and that cell's object becomes the surface word; the null cell keeps
    the tag itself.
    """
    max_len = model.config.max_decode_len if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    was_training = model.training
    model.eval()
    vocab = model.vocab
    is_tag = vocab.sketch_ids()
    B = len(batch)
    out = [Decoded([], []) for _ in range(B)]
    try:
        with ad.no_grad():
            kn = encode_batch(model, batch)
            state = init_state(model, kn.query)
            tokens = np.full(B, SOS_ID, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            for t in range(max_len):
                step = decode_step(model, tokens, state, kn.enc)
                state = step.state
                tokens = step.probs.data.argmax(axis=-1)
                rows = np.nonzero(~done & is_tag[tokens])[0]
                picked = {}
                if rows.size:
                    q = pointer_query(model, step.features()[rows])
                    P = decoder_query(q, [c[rows] for c in kn.cells], kn.mem_mask[rows], kn.gate[rows])
                    for r, cell in zip(rows, pick_cell(P.data)):
                        picked[int(r)] = int(cell)
                for i in range(B):
                    if done[i]:
                        continue
                    tok = int(tokens[i])
                    if tok == EOS_ID:
                        done[i] = True
                        continue
                    word = vocab.tokens[tok]
                    ex = batch.examples[i]
                    out[i].sketch.append(word)
                    if step.alpha is not None:
                        out[i].gates.append(np.array(step.alpha.data[i], dtype=np.float64))
                    if i in picked:
                        cell = picked[i]
                        out[i].cells.append((t, cell))
                        word = word if cell == ex.memory.null_index else ex.memory.object(cell)
                    out[i].surface.append(word)
                if done.all():
                    break
    finally:
        model.train(was_training)
    return out
