"""Corpus BLEU, micro entity F1, corpus evaluation and gate export."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .batching import iter_batches, make_batch, make_examples
from .corpus import Dialogue
from .decoder import greedy_decode, teacher_forced_pass
from .model import DFNet

BLEU_FLOOR = 1e-9


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Corpus BLEU-4 with one reference per hypothesis.

    Clipped n-gram matches and totals are pooled over the corpus; a zero match
    count is floored at 1e-9 before the geometric mean; brevity penalty
    ``exp(1 - r/c)`` when the pooled hypothesis length ``c`` is below ``r``.
    """
    if len(hypotheses) != len(references):
        raise ValueError("corpus_bleu: hypothesis and reference counts differ")
    if not hypotheses:
        raise ValueError("corpus_bleu: empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    c = r = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        c += len(hyp)
        r += len(ref)
        for n in range(1, max_n + 1):
            h, rf = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(k, rf[g]) for g, k in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if c == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        if t == 0:
            return 0.0
        log_p += math.log(max(m, BLEU_FLOOR) / t)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / max_n)


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "Counts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom


@dataclass
class MetricsReport:
    bleu: float
    micro_f1: float
    per_domain_f1: dict
    counts: Counts
    per_domain_counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "bleu": self.bleu,
            "micro_f1": self.micro_f1,
            "per_domain_f1": dict(self.per_domain_f1),
            "counts": vars(self.counts).copy(),
            "per_domain_counts": {d: vars(c).copy() for d, c in self.per_domain_counts.items()},
        }


def entity_f1(
    predictions: Sequence[Sequence[str]],
    gold: Sequence[Sequence[str]],
    lexicon,
    domains: Sequence[str] | None = None,
    bleu: float = float("nan"),
) -> MetricsReport:
    """Micro entity F1 with set semantics per response.

    Predicted entities are the response tokens found in ``lexicon``; counts
    are pooled over all responses (and per domain when ``domains`` is given).
    """
    if len(predictions) != len(gold):
        raise ValueError("entity_f1: prediction and gold counts differ")
    lex = set(lexicon)
    total = Counts()
    per: dict[str, Counts] = {}
    for i, (pred, g) in enumerate(zip(predictions, gold)):
        p = {w for w in pred if w in lex}
        gs = set(g)
        c = Counts(len(p & gs), len(p - gs), len(gs - p))
        total.add(c)
        if domains is not None:
            per.setdefault(domains[i], Counts()).add(c)
    return MetricsReport(
        bleu=bleu,
        micro_f1=total.f1(),
        per_domain_f1={d: c.f1() for d, c in sorted(per.items())},
        counts=total,
        per_domain_counts=dict(sorted(per.items())),
    )


def entity_lexicon(dialogues: Sequence[Dialogue]) -> set[str]:
    return {t.object for d in dialogues for t in d.kb}


@dataclass
class Evaluation:
    report: MetricsReport
    hypotheses: list  # surface token lists in corpus order
    sketches: list
    examples: list


def evaluate(model: DFNet, dialogues: Sequence[Dialogue], batch_size: int | None = None) -> Evaluation:
    """Greedy-decode every turn given its gold history and score the corpus."""
    examples = make_examples(dialogues, model.domains)
    if not examples:
        raise ValueError("evaluate: empty corpus")
    bs = batch_size or max(model.config.batch_size, 32)
    hyps, sketches = [], []
    for batch in iter_batches(examples, model.vocab, bs):
        for d in greedy_decode(model, batch):
            hyps.append(d.surface)
            sketches.append(d.sketch)
    refs = [e.response for e in examples]
    bleu = corpus_bleu(hyps, refs)
    report = entity_f1(
        hyps,
        [e.gold_entities for e in examples],
        entity_lexicon(dialogues),
        domains=[e.domain for e in examples],
        bleu=bleu,
    )
    return Evaluation(report, hyps, sketches, examples)


# ---------------------------------------------------------------------------
# gate distributions
# ---------------------------------------------------------------------------


@dataclass
class GateTrace:
    domains: list  # expert (source) domain order
    rows: list = field(default_factory=list)  # (target_domain, example_id, token_index, alpha)

    def summary(self) -> dict:
        """Mean gate vector per target domain."""
        acc: dict[str, list] = {}
        for dom, _, _, a in self.rows:
            acc.setdefault(dom, []).append(a)
        return {d: np.mean(np.stack(v), axis=0) for d, v in sorted(acc.items())}

    def accuracy(self) -> float:
        """Share of tokens whose largest gate weight is their own domain."""
        if not self.rows:
            return float("nan")
        hits = [self.domains[int(np.argmax(a))] == dom for dom, _, _, a in self.rows]
        return float(np.mean(hits))

    def write(self, path) -> Path:
        """Write the per-token CSV and a ``<stem>_summary.csv`` companion."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        head = ["target_domain", "example_id", "token_index"] + [f"alpha_{d}" for d in self.domains]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(head)
            for dom, ex, t, a in self.rows:
                w.writerow([dom, ex, t] + [repr(float(x)) for x in a])
        summ = path.with_name(path.stem + "_summary.csv")
        with open(summ, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["target_domain"] + [f"alpha_{d}" for d in self.domains])
            for dom, a in self.summary().items():
                w.writerow([dom] + [repr(float(x)) for x in a])
        return summ


def gate_trace(model: DFNet, dialogues: Sequence[Dialogue], batch_size: int = 32, examples=None) -> GateTrace:
    """Decoder gate per gold response token, with the gold sketch fed as input."""
    if not model.config.dynamic_fusion or "private" not in model.decoder_groups():
        raise ValueError("gate export needs the decoder expert gate")
    trace = GateTrace(list(model.domains))
    if examples is None:
        examples = make_examples(dialogues, model.domains)
    was = model.training
    model.eval()
    try:
        with ad.no_grad():
            for start in range(0, len(examples), batch_size):
                chunk = examples[start : start + batch_size]
                batch = make_batch(chunk, model.vocab)
                fp = teacher_forced_pass(model, batch, ratio=1.0)
                alpha = fp.dec_alpha.data
                for i, ex in enumerate(chunk):
                    for t in range(len(ex.sketch)):
                        trace.rows.append(
                            (ex.domain, f"{ex.dialogue_id}:{ex.turn_index}", t, alpha[i, t].astype(np.float64))
                        )
    finally:
        model.train(was)
    return trace


def sample_per_domain(examples: Sequence, n: int, seed: int = 0) -> list:
    """Up to ``n`` seeded-random examples from every domain, in corpus order."""
    rng = np.random.default_rng(seed)
    out = []
    for dom in sorted({e.domain for e in examples}):
        pool = [e for e in examples if e.domain == dom]
        out.extend(pool[i] for i in sorted(rng.permutation(len(pool))[:n]))
    return out


def export_gates(model: DFNet, dialogues: Sequence[Dialogue], n_per_domain: int, path, seed: int = 0) -> GateTrace:
    """Gate trace for ``n_per_domain`` sampled turns per domain, written to ``path``."""
    picked = sample_per_domain(make_examples(dialogues, model.domains), n_per_domain, seed)
    trace = gate_trace(model, dialogues, examples=picked)
    trace.write(path)
    return trace


def write_metrics(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
