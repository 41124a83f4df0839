"""Per-turn examples and padded numpy batches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import (
    EOS_ID,
    PAD_ID,
    Dialogue,
    MemoryStore,
    PointerLabels,
    Vocabulary,
    build_memory,
    make_pointer_labels,
)


@dataclass
class Example:
    domain: str
    domain_id: int
    context: list[str]
    memory: MemoryStore
    response: list[str]
    sketch: list[str]
    labels: PointerLabels
    gold_entities: list[str]
    dialogue_id: str = ""
    turn_index: int = 0


def make_example(dialogue: Dialogue, turn_index: int, domains: Sequence[str]) -> Example:
    turn = dialogue.turns[turn_index]
    history = dialogue.history(turn_index)
    memory = build_memory(history, dialogue.kb)
    return Example(
        domain=dialogue.domain,
        domain_id=list(domains).index(dialogue.domain) if dialogue.domain in domains else -1,
        context=[w for _, _, w in history],
        memory=memory,
        response=list(turn.system),
        sketch=list(turn.sketch),
        labels=make_pointer_labels(turn.system, memory),
        gold_entities=list(turn.gold_entities),
        dialogue_id=dialogue.dialogue_id,
        turn_index=turn_index,
    )


def make_examples(dialogues: Sequence[Dialogue], domains: Sequence[str]) -> list[Example]:
    return [make_example(d, i, domains) for d in dialogues for i in range(len(d.turns))]


@dataclass
class Batch:
    examples: list[Example]
    ctx_ids: np.ndarray  # (B, T)
    ctx_len: np.ndarray  # (B,)
    ctx_mask: np.ndarray  # (B, T) bool
    mem_ids: np.ndarray  # (B, M, 3)
    mem_tokmask: np.ndarray  # (B, M, 3) float
    mem_mask: np.ndarray  # (B, M) bool, real cells + null
    real_mask: np.ndarray  # (B, M) bool, real cells only
    tgt_ids: np.ndarray  # (B, n) sketch ids then eos
    tgt_mask: np.ndarray  # (B, n) bool
    local: np.ndarray  # (B, n) local pointer targets
    global_labels: np.ndarray  # (B, M)
    domain: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.examples)


def make_batch(examples: Sequence[Example], vocab: Vocabulary) -> Batch:
    B = len(examples)
    T = max(1, max(len(e.context) for e in examples))
    M = max(len(e.memory) for e in examples)
    n = max(len(e.sketch) for e in examples) + 1
    ctx_ids = np.full((B, T), PAD_ID, dtype=np.int64)
    ctx_len = np.zeros(B, dtype=np.int64)
    mem_ids = np.full((B, M, 3), PAD_ID, dtype=np.int64)
    mem_tokmask = np.zeros((B, M, 3))
    mem_mask = np.zeros((B, M), dtype=bool)
    real_mask = np.zeros((B, M), dtype=bool)
    tgt_ids = np.full((B, n), PAD_ID, dtype=np.int64)
    tgt_mask = np.zeros((B, n), dtype=bool)
    local = np.zeros((B, n), dtype=np.int64)
    global_labels = np.zeros((B, M))
    domain = np.zeros(B, dtype=np.int64)
    for i, e in enumerate(examples):
        ids = vocab.encode(e.context)
        ctx_ids[i, : len(ids)] = ids
        ctx_len[i] = len(ids)
        for j, cell in enumerate(e.memory.cells):
            cid = vocab.encode(cell)
            mem_ids[i, j, : len(cid)] = cid
            mem_tokmask[i, j, : len(cid)] = 1.0
        mem_mask[i, : len(e.memory)] = True
        real_mask[i, : e.memory.null_index] = True
        sk = vocab.encode(e.sketch) + [EOS_ID]
        tgt_ids[i, : len(sk)] = sk
        tgt_mask[i, : len(sk)] = True
        local[i, : len(e.labels.local_labels)] = e.labels.local_labels
        local[i, len(e.labels.local_labels)] = e.memory.null_index
        global_labels[i, : len(e.labels.global_labels)] = e.labels.global_labels
        domain[i] = max(e.domain_id, 0)
    return Batch(
        examples=list(examples),
        ctx_ids=ctx_ids,
        ctx_len=ctx_len,
        ctx_mask=np.arange(T)[None, :] < ctx_len[:, None],
        mem_ids=mem_ids,
        mem_tokmask=mem_tokmask,
        mem_mask=mem_mask,
        real_mask=real_mask,
        tgt_ids=tgt_ids,
        tgt_mask=tgt_mask,
        local=local,
        global_labels=global_labels,
        domain=domain,
    )


def iter_batches(examples: Sequence[Example], vocab: Vocabulary, batch_size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield make_batch([examples[i] for i in order[start : start + batch_size]], vocab)
