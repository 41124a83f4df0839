"""Optimization loop, checkpoints and experiment drivers."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .batching import iter_batches, make_examples
from .config import TrainConfig, parse_ablation
from .corpus import (
    Dialogue,
    Vocabulary,
    build_vocab,
    corpus_domains,
    split_low_resource,
    split_zero_shot,
)
from .decoder import teacher_forced_pass
from .evalkit import MetricsReport, evaluate
from .losses import LossReport, compute_losses
from .model import DFNet

log = logging.getLogger(__name__)

MAGIC = b"DFNET1"


class DivergenceError(ad.NumericError):
    pass


@dataclass
class TrainResult:
    model: DFNet
    history: list = field(default_factory=list)  # per-epoch LossReport
    metrics: list = field(default_factory=list)  # (epoch, MetricsReport)
    best_epoch: int = 0
    best_f1: float = float("-inf")
    epochs_run: int = 0
    stop_reason: str = "epochs"


def train_step(model: DFNet, opt: ad.Adam, batch) -> LossReport:
    model.zero_grad()
    fp = teacher_forced_pass(model, batch)
    loss, report = compute_losses(fp, batch, model.config.weights)
    if not np.isfinite(report.total):
        raise DivergenceError(f"non-finite loss: {report.as_dict()}")
    ad.backward(loss)
    norm = ad.clip_grad_norm(model.parameters(), model.config.clip)
    if not np.isfinite(norm):
        raise DivergenceError(f"non-finite gradient norm at loss {report.total:.6g}")
    opt.step()
    return report


def train(
    corpus: Sequence[Dialogue],
    config: TrainConfig,
    *,
    domains: Sequence[str] | None = None,
    vocab: Vocabulary | None = None,
    valid: Sequence[Dialogue] | None = None,
    callback: Callable[[int, LossReport, MetricsReport | None], bool] | None = None,
) -> TrainResult:
    """Train a fresh model; returns it restored to the best validation epoch.

    Validation entity F1 (on ``valid``, or the training corpus when none is
    given) is measured every ``eval_every`` epochs and drives early stopping.
    ``callback(epoch, report, metrics)`` may return True to stop after that
    epoch.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("train: empty corpus")
    domains = list(domains) if domains is not None else corpus_domains(corpus)
    vocab = vocab or build_vocab(corpus if valid is None else list(corpus) + list(valid))
    with ad.precision(config.precision):
        model = DFNet(vocab, domains, config)
        examples = make_examples(corpus, domains)
        opt = ad.Adam(model.parameters(), lr=config.lr)
        shuffle = np.random.default_rng(config.seed + 2)
        result = TrainResult(model)
        best_state = model.state_dict()
        stale = 0
        for epoch in range(1, config.epochs + 1):
            model.train()
            reports, sizes = [], []
            for batch in iter_batches(examples, vocab, config.batch_size, shuffle):
                reports.append(train_step(model, opt, batch))
                sizes.append(len(batch))
            report = LossReport.average(reports, sizes)
            result.history.append(report)
            result.epochs_run = epoch
            metrics = None
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                metrics = evaluate(model, valid if valid is not None else corpus).report
                result.metrics.append((epoch, metrics))
                if metrics.micro_f1 > result.best_f1:
                    result.best_f1 = metrics.micro_f1
                    result.best_epoch = epoch
                    best_state = model.state_dict()
                    stale = 0
                else:
                    stale += config.eval_every
            log.info("epoch %d loss %.4f f1 %s", epoch, report.total, "-" if metrics is None else f"{metrics.micro_f1:.4f}")
            if callback is not None and callback(epoch, report, metrics):
                result.stop_reason = "callback"
                best_state = model.state_dict()
                result.best_epoch = epoch
                break
            if config.patience and stale >= config.patience:
                result.stop_reason = "early-stopping"
                break
        model.load_state_dict(best_state)
        model.eval()
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: DFNet) -> None:
    """``DFNET1``, a newline-terminated JSON header, then little-endian float32
    payloads in manifest order."""
    manifest = [{"name": k, "shape": list(p.shape)} for k, p in model.params.items()]
    header = {
        "config": model.config.to_dict(),
        "vocab": list(model.vocab.tokens),
        "domains": list(model.domains),
        "manifest": manifest,
    }
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for p in model.params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path, precision: str | None = None) -> DFNet:
    """Rebuild a model from :func:`save_checkpoint` output.

    ``precision`` overrides the stored compute precision (payloads are float32).
    """
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a DF-Net checkpoint")
    nl = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC) : nl].decode("utf-8"))
    cfg = header["config"]
    if precision is not None:
        cfg = dict(cfg, precision=precision)
    config = TrainConfig.from_dict(cfg)
    with ad.precision(config.precision):
        model = DFNet(Vocabulary(header["vocab"]), header["domains"], config)
    state = {}
    off = nl + 1
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = off + 4 * n
        if end > len(raw):
            raise ValueError(f"{path}: truncated payload at {entry['name']}")
        state[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off = end
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    model.load_state_dict(state)
    model.eval()
    return model


def check_compatible(model: DFNet, corpus: Sequence[Dialogue]) -> None:
    """Every corpus token and domain must be known to the model."""
    missing = sorted(set(build_vocab(corpus).tokens) - set(model.vocab.tokens))
    if missing:
        shown = ", ".join(missing[:5])
        raise ValueError(f"checkpoint vocabulary lacks {len(missing)} corpus tokens ({shown}{', ...' if len(missing) > 5 else ''})")
    unknown = sorted(set(corpus_domains(corpus)) - set(model.domains))
    if unknown:
        raise ValueError(f"checkpoint has no domain(s) {unknown}")


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

RESULT_FIELDS = ("protocol", "domain", "setting", "seed", "bleu", "entity_f1")


@dataclass
class ResultRow:
    protocol: str
    domain: str
    setting: str
    seed: int
    bleu: float
    entity_f1: float

    def as_list(self) -> list:
        return [self.protocol, self.domain, self.setting, self.seed, repr(self.bleu), repr(self.entity_f1)]


def _domain_f1(report: MetricsReport, dom: str) -> float:
    return report.per_domain_f1.get(dom, report.micro_f1)


def _only(dialogues, dom):
    return [d for d in dialogues if d.domain == dom]


def run_experiment(
    protocol: str,
    train_set: Sequence[Dialogue],
    test_set: Sequence[Dialogue],
    config: TrainConfig,
    seeds: Sequence[int] = (0,),
    *,
    ratios: Sequence[float] = (0.05,),
    target_domains: Sequence[str] | None = None,
    ablations: Sequence[str] = ("none",),
    on_row: Callable[[ResultRow], None] | None = None,
) -> list[ResultRow]:
    """Train and score one model per grid cell.

    ``low-resource``: for each target domain, ratio and seed, keep that share of
    the target domain's training dialogues. ``zero-shot``: drop the target
    domain from training. ``ablation``: each ablation setting on the full
    training set, or on a low-resource split of every target domain when
    ``ratios`` has one entry below 1. Rows score the target domain's test
    dialogues (all test dialogues for plain ablations).
    """
    domains = corpus_domains(list(train_set) + list(test_set))
    targets = list(target_domains) if target_domains else domains
    vocab = build_vocab(list(train_set) + list(test_set))
    rows: list[ResultRow] = []

    def run(train_dialogues, cfg, dom, setting, seed, test):
        res = train(train_dialogues, cfg.replace(seed=seed), domains=domains, vocab=vocab)
        rep = evaluate(res.model, test).report
        row = ResultRow(protocol, dom, setting, seed, rep.bleu, _domain_f1(rep, dom) if dom != "all" else rep.micro_f1)
        rows.append(row)
        if on_row is not None:
            on_row(row)

    if protocol == "low-resource":
        for dom in targets:
            for ratio in ratios:
                for seed in seeds:
                    split = split_low_resource(train_set, dom, ratio, seed)
                    run(split, config, dom, repr(float(ratio)), seed, _only(test_set, dom))
    elif protocol == "zero-shot":
        for dom in targets:
            for seed in seeds:
                run(split_zero_shot(train_set, dom), config, dom, "unseen", seed, _only(test_set, dom))
    elif protocol == "ablation":
        low = len(ratios) == 1 and ratios[0] < 1.0
        for name in ablations:
            cfg = config.replace(ablation=parse_ablation(name))
            for seed in seeds:
                if low:
                    for dom in targets:
                        split = split_low_resource(train_set, dom, ratios[0], seed)
                        run(split, cfg, dom, name, seed, _only(test_set, dom))
                else:
                    run(train_set, cfg, "all", name, seed, test_set)
    else:
        raise ValueError(f"unknown protocol {protocol!r}; choose low-resource, zero-shot or ablation")
    return rows


def write_results(rows: Sequence[ResultRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow(r.as_list())


def write_history(history: Sequence[LossReport], path, metrics=()) -> None:
    """Per-epoch loss CSV (with validation F1 where measured)."""
    f1 = dict((e, m.micro_f1) for e, m in metrics)
    fields = list(LossReport.__dataclass_fields__)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch"] + fields + ["valid_f1"])
        for i, r in enumerate(history, start=1):
            w.writerow([i] + [repr(getattr(r, k)) for k in fields] + [repr(f1[i]) if i in f1 else ""])
