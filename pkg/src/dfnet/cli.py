"""Command-line entry point: ``dfnet <subcommand> [flags]``.

Configuration comes from an optional flat ``key=value`` file (``#`` starts a
comment) overridden by flags; ``--show-config`` prints every resolved key with
its source. Exit status: 0 success, 1 usage error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .batching import make_batch, make_example
from .config import LossWeights, TrainConfig, parse_ablation
from .corpus import (
    CorpusError,
    Dialogue,
    KBTriple,
    Turn,
    corpus_domains,
    holdout_split,
    load_corpus_with_domains,
    make_toy_corpus,
    save_corpus,
    tokenize,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def _bool(text) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default, help)
_T = TrainConfig()
_W = LossWeights()
KEYS: dict = {
    "batch_size": (int, _T.batch_size, "training batch size"),
    "hidden": (int, _T.hidden, "hidden size of every recurrent cell"),
    "embedding": (int, _T.embedding, "token embedding size"),
    "lr": (float, _T.lr, "Adam learning rate"),
    "dropout": (float, _T.dropout, "dropout rate"),
    "teacher_forcing": (float, _T.teacher_forcing, "teacher forcing ratio"),
    "hops": (int, _T.hops, "memory hops k"),
    "epochs": (int, _T.epochs, "maximum training epochs"),
    "seed": (int, _T.seed, "random seed"),
    "ablation": (str, "none", "comma list of disabled parts or a preset (none, shared-only)"),
    "precision": (str, _T.precision, "float32 or float64"),
    "grl_lambda": (float, _T.grl_lambda, "gradient reversal coefficient"),
    "clip": (float, _T.clip, "global gradient norm clip"),
    "patience": (int, _T.patience, "early stopping patience in epochs (0 disables)"),
    "eval_every": (int, _T.eval_every, "validation interval in epochs"),
    "max_decode_len": (int, _T.max_decode_len, "greedy decoding length limit"),
    **{f"gamma_{k}": (float, getattr(_W, f"gamma_{k}"), f"loss weight gamma_{k}") for k in "bmagvl"},
    "corpus": (str, "", "canonical corpus JSON"),
    "valid": (str, "", "validation corpus JSON (train: defaults to the training corpus)"),
    "test": (str, "", "test corpus JSON (experiment: defaults to a held-out split)"),
    "test_per_domain": (int, 5, "held-out dialogues per domain when no test corpus is given"),
    "checkpoint": (str, "", "checkpoint path"),
    "out": (str, "", "output directory (make-toy-data: output file)"),
    "kb": (str, "", "knowledge base file for chat"),
    "protocol": (str, "low-resource", "experiment protocol: low-resource, zero-shot or ablation"),
    "ratios": (_floats, [0.05], "comma list of target-domain data ratios"),
    "domain": (str, "", "comma list of target domains (default: all)"),
    "seeds": (_ints, None, "comma list of experiment seeds (default: --seed)"),
    "ablations": (str, "none;shared-only", "semicolon list of ablation settings for the ablation protocol"),
    "n_per_domain": (int, 100, "sampled turns per domain for gate export"),
    "toy_domains": (int, 3, "number of synthetic domains"),
    "dialogues_per_domain": (int, 20, "synthetic dialogues per domain"),
    "overlap": (float, 0.3, "shared share of synthetic content vocabulary"),
    "verbose": (_bool, False, "print progress and, in chat, sketches and gates"),
}
TRAIN_KEYS = (
    "batch_size", "hidden", "embedding", "lr", "dropout", "teacher_forcing", "hops", "epochs", "seed",
    "ablation", "precision", "grl_lambda", "clip", "patience", "eval_every", "max_decode_len",
)


@dataclass
class CliConfig:
    values: dict
    provenance: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def train_config(self) -> TrainConfig:
        kw = {k: self.values[k] for k in TRAIN_KEYS}
        kw["ablation"] = parse_ablation(kw["ablation"])
        w = LossWeights(**{f"gamma_{k}": self.values[f"gamma_{k}"] for k in "bmagvl"})
        return TrainConfig(weights=w, **kw)

    def seeds(self) -> list[int]:
        return self.values["seeds"] or [self.values["seed"]]

    def describe(self) -> str:
        return "\n".join(f"{k}={_show(self.values[k])}  # {self.provenance[k]}" for k in KEYS)


def _show(v) -> str:
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


def _convert(key: str, raw, where: str):
    if key not in KEYS:
        raise UsageError(f"{where}: unknown configuration key {key!r}")
    conv = KEYS[key][0]
    try:
        return conv(raw)
    except (TypeError, ValueError):
        raise UsageError(f"{where}: bad value {raw!r} for {key!r} (expected {getattr(conv, '__name__', conv)})") from None


def read_config_file(path) -> dict:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        out[key] = _convert(key, val, f"{path}:{n}")
    return out


def parse_config(config_file=None, flags: dict | None = None) -> CliConfig:
    """Resolve defaults < file < flags, remembering where each value came from."""
    values = {k: spec[1] for k, spec in KEYS.items()}
    prov = {k: "default" for k in KEYS}
    if config_file:
        for k, v in read_config_file(config_file).items():
            values[k] = v
            prov[k] = "file"
    for k, v in (flags or {}).items():
        if v is None:
            continue
        values[k] = _convert(k, v, "flag")
        prov[k] = "flag"
    cfg = CliConfig(values, prov)
    try:
        cfg.train_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

SUBCOMMANDS = ("train", "evaluate", "experiment", "export-gates", "make-toy-data", "chat")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dfnet", description="Dynamic fusion network for multi-domain task-oriented dialogue.")
    p.add_argument("command", choices=SUBCOMMANDS, help="what to run")
    p.add_argument("--config", help="flat key=value configuration file")
    p.add_argument("--show-config", action="store_true", help="print the resolved configuration with sources")
    for key, (_, default, text) in KEYS.items():
        flag = "--" + key.replace("_", "-")
        if key == "verbose":
            p.add_argument(flag, action="store_const", const="true", default=None, help=text)
        else:
            p.add_argument(flag, dest=key, default=None, metavar=key.upper(), help=f"{text} (default: {_show(default)})")
    return p


def _need(cfg: CliConfig, *keys) -> None:
    for k in keys:
        if not cfg[k]:
            raise UsageError(f"missing required --{k.replace('_', '-')}\n\n{build_parser().format_usage()}")


def _out_dir(cfg: CliConfig) -> Path:
    out = Path(cfg["out"] or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path):
    try:
        return load_corpus_with_domains(path)
    except OSError as exc:
        raise CorpusError(f"cannot read corpus: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(cfg: CliConfig) -> int:
    from .evalkit import write_metrics
    from .training import save_checkpoint, train, write_history

    _need(cfg, "corpus")
    domains, corpus = _load(cfg["corpus"])
    valid = _load(cfg["valid"])[1] if cfg["valid"] else None
    out = _out_dir(cfg)
    res = train(corpus, cfg.train_config(), domains=domains, valid=valid)
    ckpt = Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / "model.dfnet"
    save_checkpoint(ckpt, res.model)
    write_history(res.history, out / "history.csv", res.metrics)
    if res.metrics:
        best = dict(res.metrics)[res.best_epoch] if res.best_epoch in dict(res.metrics) else res.metrics[-1][1]
        write_metrics(best, out / "metrics.json")
    print(json.dumps({"checkpoint": str(ckpt), "epochs": res.epochs_run, "best_epoch": res.best_epoch, "best_f1": res.best_f1}))
    return EXIT_OK


def _checkpoint(cfg: CliConfig):
    from .training import load_checkpoint

    _need(cfg, "checkpoint")
    try:
        return load_checkpoint(cfg["checkpoint"], precision=cfg["precision"] if cfg.provenance["precision"] != "default" else None)
    except OSError as exc:
        raise CorpusError(f"cannot read checkpoint: {exc}") from None
    except (ValueError, KeyError) as exc:
        raise CorpusError(f"bad checkpoint: {exc}") from None


def cmd_evaluate(cfg: CliConfig) -> int:
    from .evalkit import evaluate, write_metrics
    from .training import check_compatible

    _need(cfg, "corpus")
    model = _checkpoint(cfg)
    _, corpus = _load(cfg["corpus"])
    try:
        check_compatible(model, corpus)
    except ValueError as exc:
        raise CorpusError(f"incompatible checkpoint and corpus: {exc}") from None
    with ad.precision(model.config.precision):
        rep = evaluate(model, corpus).report
    if cfg["out"]:
        write_metrics(rep, _out_dir(cfg) / "metrics.json")
    print(json.dumps(rep.to_json(), sort_keys=True))
    return EXIT_OK


def cmd_experiment(cfg: CliConfig) -> int:
    from .training import run_experiment, write_results

    _need(cfg, "corpus")
    _, corpus = _load(cfg["corpus"])
    if cfg["test"]:
        train_set, test_set = corpus, _load(cfg["test"])[1]
    else:
        train_set, test_set = holdout_split(corpus, cfg["test_per_domain"], cfg["seed"])
    targets = [d.strip() for d in cfg["domain"].split(",") if d.strip()] or None
    known = corpus_domains(list(train_set) + list(test_set))
    for d in targets or ():
        if d not in known:
            raise UsageError(f"unknown domain {d!r}; corpus has {', '.join(known)}")
    out = _out_dir(cfg)

    def show(row):
        if cfg["verbose"]:
            print(",".join(str(x) for x in row.as_list()), file=sys.stderr)

    rows = run_experiment(
        cfg["protocol"],
        train_set,
        test_set,
        cfg.train_config(),
        cfg.seeds(),
        ratios=cfg["ratios"],
        target_domains=targets,
        ablations=[a.strip() for a in cfg["ablations"].split(";") if a.strip()],
        on_row=show,
    )
    path = out / "results.csv"
    write_results(rows, path)
    print(json.dumps({"results": str(path), "rows": len(rows)}))
    return EXIT_OK


def cmd_export_gates(cfg: CliConfig) -> int:
    from .evalkit import export_gates

    _need(cfg, "corpus")
    model = _checkpoint(cfg)
    _, corpus = _load(cfg["corpus"])
    path = _out_dir(cfg) / "gates.csv"
    try:
        trace = export_gates(model, corpus, cfg["n_per_domain"], path, seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    summary = {d: [float(x) for x in a] for d, a in trace.summary().items()}
    print(json.dumps({"gates": str(path), "rows": len(trace.rows), "summary": summary}))
    return EXIT_OK


def cmd_make_toy_data(cfg: CliConfig) -> int:
    _need(cfg, "out")
    try:
        corpus = make_toy_corpus(cfg["toy_domains"], cfg["dialogues_per_domain"], cfg["overlap"], seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    path = Path(cfg["out"])
    if path.parent:
        path.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(path, corpus, corpus_domains(corpus))
    print(json.dumps({"corpus": str(path), "dialogues": len(corpus)}))
    return EXIT_OK


def read_kb(path) -> list[KBTriple]:
    """A JSON list of ``[subject, relation, object]`` or one whitespace-separated
    triple per line."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read knowledge base: {exc}") from None
    if text.lstrip().startswith("["):
        rows = json.loads(text)
    else:
        rows = [ln.split() for ln in text.splitlines() if ln.split() and not ln.lstrip().startswith("#")]
    kb = []
    for i, r in enumerate(rows):
        if len(r) != 3:
            raise CorpusError(f"{path}: entry {i + 1} is not a triple")
        kb.append(KBTriple(*(str(x).lower() for x in r)))
    return kb


def chat_loop(model, kb, lines, write, warn, verbose: bool = False) -> None:
    """Read utterances from ``lines`` until ``exit``; print one response per line."""
    from .decoder import greedy_decode

    unknown = sorted({w for t in kb for w in (t.subject, t.relation, t.object)} - set(model.vocab.tokens))
    if unknown:
        warn(f"warning: {len(unknown)} knowledge-base token(s) unknown to the model, read as unk: {' '.join(unknown[:8])}")
    past: list[Turn] = []
    for line in lines:
        text = line.strip()
        if text.lower() == "exit":
            break
        if not text:
            continue
        user = tokenize(text)
        placeholder = Turn(user=user, system=["."], sketch=["."], gold_entities=[])
        dlg = Dialogue(domain=model.domains[0], kb=kb, turns=past + [placeholder])
        ex = make_example(dlg, len(past), model.domains)
        with ad.precision(model.config.precision):
            dec = greedy_decode(model, make_batch([ex], model.vocab))[0]
        write(" ".join(dec.surface))
        if verbose:
            write("sketch: " + " ".join(dec.sketch))
            if dec.gates:
                mean = np.mean(np.stack(dec.gates), axis=0)
                write("gates: " + " ".join(f"{d}={a:.4f}" for d, a in zip(model.domains, mean)))
        past.append(Turn(user=user, system=dec.surface or ["."], sketch=dec.sketch or ["."], gold_entities=[]))


def cmd_chat(cfg: CliConfig) -> int:
    _need(cfg, "kb")
    model = _checkpoint(cfg)
    kb = read_kb(cfg["kb"])
    chat_loop(
        model,
        kb,
        sys.stdin,
        lambda s: print(s, flush=True),
        lambda s: print(s, file=sys.stderr, flush=True),
        verbose=cfg["verbose"],
    )
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "export-gates": cmd_export_gates,
    "make-toy-data": cmd_make_toy_data,
    "chat": cmd_chat,
}


def dispatch(command: str, cfg: CliConfig) -> int:
    try:
        return COMMANDS[command](cfg)
    except UsageError as exc:
        print(f"dfnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, json.JSONDecodeError) as exc:
        print(f"dfnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"dfnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        flags = {k: getattr(args, k) for k in KEYS}
        cfg = parse_config(args.config, flags)
    except UsageError as exc:
        print(f"dfnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if cfg["verbose"] else logging.WARNING, format="%(message)s")
    if args.show_config:
        print(cfg.describe())
    return dispatch(args.command, cfg)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
