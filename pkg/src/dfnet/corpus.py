"""Dialogue corpora: schema, loaders, delexicalization, memory and pointer labels.

Canonical corpus file (UTF-8 JSON)::

    {"domains": ["navigate", ...],
     "dialogues": [{"domain": "navigate",
                    "kb": [["starbucks", "address", "792_bedoin_st"], ...],
                    "turns": [{"user": "...", "system": "...",
                               "gold_entities": ["792_bedoin_st"]}, ...]}]}

``gold_entities`` is optional. All text is lowercased and split on whitespace.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
SPECIALS = (PAD, SOS, EOS, UNK)
PAD_ID, SOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

NULL_TOKEN = "$null$"
USER_TAG = "$u"
SYSTEM_TAG = "$s"
SMD_DOMAINS = ("navigate", "weather", "schedule")


class CorpusError(ValueError):
    """Malformed corpus file or record."""


class ValidationError(CorpusError):
    """A record parses but violates a corpus invariant."""


def bundled_path(name: str) -> Path:
    """Path of a data file shipped with the package (fixtures, SMD excerpt)."""
    return Path(__file__).with_name("data") / name


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def is_sketch_tag(token: str) -> bool:
    return token.startswith("@") and len(token) > 1


def turn_tag(turn_index: int) -> str:
    return f"#{turn_index + 1}"


@dataclass(frozen=True)
class KBTriple:
    subject: str
    relation: str
    object: str

    def __post_init__(self):
        for name in ("subject", "relation", "object"):
            v = getattr(self, name)
            if not v or len(v.split()) != 1:
                raise ValidationError(f"KB triple {name} must be one non-empty token, got {v!r}")


@dataclass
class Turn:
    user: list[str]
    system: list[str]
    sketch: list[str]
    gold_entities: list[str]


@dataclass
class Dialogue:
    domain: str
    kb: list[KBTriple]
    turns: list[Turn]
    dialogue_id: str = ""

    def history(self, turn_index: int) -> list[tuple[str, str, str]]:
        """Memory-format history visible when producing turn ``turn_index``'s
        system response: earlier user/system utterances plus the current user one."""
        cells = []
        for i, turn in enumerate(self.turns[: turn_index + 1]):
            tag = turn_tag(i)
            cells.extend((USER_TAG, tag, w) for w in turn.user)
            if i < turn_index:
                cells.extend((SYSTEM_TAG, tag, w) for w in turn.system)
        return cells

    def to_json(self) -> dict:
        return {
            "domain": self.domain,
            "kb": [[t.subject, t.relation, t.object] for t in self.kb],
            "turns": [
                {"user": " ".join(t.user), "system": " ".join(t.system), "gold_entities": list(t.gold_entities)}
                for t in self.turns
            ],
        }


@dataclass
class MemoryStore:
    """KB cells, then one cell per history token, then the null cell."""

    cells: list[tuple[str, ...]]
    b: int
    T: int

    @property
    def null_index(self) -> int:
        return self.b + self.T

    def __len__(self) -> int:
        return len(self.cells)

    def object(self, i: int) -> str:
        return self.cells[i][-1]


@dataclass
class PointerLabels:
    global_labels: list[int]
    local_labels: list[int]


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the four reserved specials")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def sketch_ids(self) -> np.ndarray:
        return np.array([is_sketch_tag(t) for t in self.tokens], dtype=bool)


# ---------------------------------------------------------------------------
# delexicalization, memory, labels
# ---------------------------------------------------------------------------


def delexicalize(response: Sequence[str], kb: Sequence[KBTriple], history_entities: Iterable[str] = ()) -> list[str]:
    """Replace each KB object in ``response`` by ``'@' + relation`` of the first
    triple (KB order) holding it. Entities known only from the history are kept
    as words; the local pointer still resolves them."""
    del history_entities  # accepted for interface symmetry; see docstring
    first = {}
    for t in kb:
        first.setdefault(t.object, t.relation)
    return ["@" + first[w] if w in first else w for w in response]


def build_memory(history: Sequence[tuple[str, str, str]], kb: Sequence[KBTriple]) -> MemoryStore:
    cells = [(t.subject, t.relation, t.object) for t in kb]
    cells.extend(tuple(h) for h in history)
    cells.append((NULL_TOKEN,))
    return MemoryStore(cells=cells, b=len(kb), T=len(history))


def make_pointer_labels(response: Sequence[str], memory: MemoryStore) -> PointerLabels:
    n_real = memory.b + memory.T
    words = set(response)
    glob = [1 if memory.object(i) in words else 0 for i in range(n_real)]
    last = {}
    for i in range(n_real):
        last[memory.object(i)] = i
    local = [last.get(w, memory.null_index) for w in response]
    return PointerLabels(global_labels=glob, local_labels=local)


def derive_gold_entities(response: Sequence[str], kb: Sequence[KBTriple]) -> list[str]:
    objects = {t.object for t in kb}
    seen = []
    for w in response:
        if w in objects and w not in seen:
            seen.append(w)
    return seen


def build_vocab(corpus: Sequence[Dialogue]) -> Vocabulary:
    toks = {NULL_TOKEN, USER_TAG, SYSTEM_TAG}
    max_turns = 0
    for d in corpus:
        max_turns = max(max_turns, len(d.turns))
        for t in d.kb:
            toks.update((t.subject, t.relation, t.object, "@" + t.relation))
        for turn in d.turns:
            toks.update(turn.user)
            toks.update(turn.system)
            toks.update(turn.sketch)
            toks.update(turn.gold_entities)
    toks.update(turn_tag(i) for i in range(max_turns))
    toks.difference_update(SPECIALS)
    return Vocabulary(list(SPECIALS) + sorted(toks))


# ---------------------------------------------------------------------------
# canonical files
# ---------------------------------------------------------------------------


def _make_turn(user: str, system: str, kb: list[KBTriple], gold, where: str) -> Turn:
    u, s = tokenize(user), tokenize(system)
    if not s:
        raise ValidationError(f"{where}: empty system response")
    if gold is None:
        ents = derive_gold_entities(s, kb)
    else:
        if not isinstance(gold, list) or not all(isinstance(g, str) for g in gold):
            raise CorpusError(f"{where}: field 'gold_entities' must be a list of strings")
        ents = [g.lower() for g in gold]
    return Turn(user=u, system=s, sketch=delexicalize(s, kb), gold_entities=ents)


def dialogue_from_json(rec: dict, domains: Sequence[str], where: str) -> Dialogue:
    if not isinstance(rec, dict):
        raise CorpusError(f"{where}: expected an object")
    for key in ("domain", "kb", "turns"):
        if key not in rec:
            raise CorpusError(f"{where}: missing field {key!r}")
    domain = str(rec["domain"]).lower()
    if domain not in domains:
        raise ValidationError(f"{where}: unknown domain {domain!r}")
    if not isinstance(rec["kb"], list):
        raise CorpusError(f"{where}: field 'kb' must be a list")
    kb = []
    for j, tr in enumerate(rec["kb"]):
        if not isinstance(tr, (list, tuple)) or len(tr) != 3:
            raise CorpusError(f"{where}: field 'kb[{j}]' must be a [subject, relation, object] triple")
        kb.append(KBTriple(*(str(x).lower() for x in tr)))
    if not isinstance(rec["turns"], list):
        raise CorpusError(f"{where}: field 'turns' must be a list")
    turns = []
    for j, t in enumerate(rec["turns"]):
        tw = f"{where} turn {j}"
        if not isinstance(t, dict) or "user" not in t or "system" not in t:
            raise CorpusError(f"{tw}: fields 'user' and 'system' are required")
        turns.append(_make_turn(str(t["user"]), str(t["system"]), kb, t.get("gold_entities"), tw))
    d = Dialogue(domain=domain, kb=kb, turns=turns, dialogue_id=str(rec.get("id", "")))
    validate_dialogue(d, where)
    return d


def validate_dialogue(d: Dialogue, where: str = "dialogue") -> None:
    objects = {t.object for t in d.kb}
    for i, turn in enumerate(d.turns):
        if not turn.system:
            raise ValidationError(f"{where} turn {i}: empty system response")
        if len(turn.sketch) != len(turn.system):
            raise ValidationError(f"{where} turn {i}: sketch length differs from response")
        seen = {w for _, _, w in d.history(i)}
        for e in turn.gold_entities:
            if e not in objects and e not in seen:
                raise ValidationError(f"{where} turn {i}: gold entity {e!r} not in KB or history")


def parse_corpus(obj) -> tuple[list[str], list[Dialogue]]:
    if not isinstance(obj, dict) or "dialogues" not in obj or "domains" not in obj:
        raise CorpusError("corpus: top level must hold 'domains' and 'dialogues'")
    domains = [str(d).lower() for d in obj["domains"]]
    if not isinstance(obj["dialogues"], list):
        raise CorpusError("corpus: 'dialogues' must be a list")
    dialogues = [dialogue_from_json(rec, domains, f"dialogue {i}") for i, rec in enumerate(obj["dialogues"])]
    for i, d in enumerate(dialogues):
        if not d.dialogue_id:
            d.dialogue_id = str(i)
    return domains, dialogues


def load_corpus(path) -> list[Dialogue]:
    return load_corpus_with_domains(path)[1]


def load_corpus_with_domains(path) -> tuple[list[str], list[Dialogue]]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: not valid JSON ({exc})") from None
    return parse_corpus(obj)


def save_corpus(path, dialogues: Sequence[Dialogue], domains: Sequence[str]) -> None:
    obj = {"domains": list(domains), "dialogues": [d.to_json() for d in dialogues]}
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def corpus_domains(dialogues: Sequence[Dialogue]) -> list[str]:
    out = []
    for d in dialogues:
        if d.domain not in out:
            out.append(d.domain)
    return out


# ---------------------------------------------------------------------------
# SMD import
# ---------------------------------------------------------------------------

_PUNCT = re.compile(r"([.,?!;:])(?=\s|$)")


def _canon_value(v) -> str:
    return "_".join(str(v).lower().split())


def _normalize_utterance(text: str, multiword: Sequence[str]) -> str:
    t = " ".join(_PUNCT.sub(r" \1", text.lower()).split())
    for phrase in multiword:
        t = re.sub(rf"(?<!\S){re.escape(phrase)}(?!\S)", phrase.replace(" ", "_"), t)
    return t


def import_smd(path) -> list[Dialogue]:
    """Convert an SMD (KVRET) JSON file into canonical dialogues.

    Each KB row yields ``(name, first column, name)`` followed by one
    ``(name, column, value)`` triple per filled column, where ``name`` is the
    row's first-column value. Multi-word values are underscore-joined here and
    in utterances. Gold entities come from the assistant turn's slot values
    that occur in the response and resolve to a KB object or an earlier word;
    turns without slot annotations fall back to KB-object matching. Driver
    turns after the last assistant turn are dropped.
    """
    try:
        records = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(records, list):
        raise CorpusError(f"{path}: SMD file must hold a list of dialogues")
    return [_import_smd_record(rec, i) for i, rec in enumerate(records)]


def _import_smd_record(rec, i: int) -> Dialogue:
    where = f"smd record {i}"
    try:
        scenario = rec["scenario"]
        intent = str(scenario["task"]["intent"]).lower()
        kb_block = scenario.get("kb") or {}
        turns_raw = rec["dialogue"]
    except (KeyError, TypeError):
        raise CorpusError(f"{where}: malformed scenario") from None
    if intent not in SMD_DOMAINS:
        raise CorpusError(f"{where}: domain {intent!r} is not an SMD domain")
    items = kb_block.get("items") or []
    columns = kb_block.get("column_names") or (list(items[0].keys()) if items else [])
    kb: list[KBTriple] = []
    raw_values = set()
    for row in items:
        if not isinstance(row, dict) or not columns or columns[0] not in row:
            raise CorpusError(f"{where}: malformed kb row")
        subj = _canon_value(row[columns[0]])
        raw_values.add(str(row[columns[0]]).lower())
        kb.append(KBTriple(subj, _canon_value(columns[0]), subj))
        for col in columns[1:]:
            if col in row and str(row[col]).strip() and str(row[col]).strip() != "-":
                kb.append(KBTriple(subj, _canon_value(col), _canon_value(row[col])))
                raw_values.add(str(row[col]).lower())
    multiword = sorted({" ".join(v.split()) for v in raw_values if len(v.split()) > 1}, key=len, reverse=True)

    turns: list[Turn] = []
    pending_user: list[str] = []
    heard: set[str] = set()
    for j, t in enumerate(turns_raw):
        try:
            speaker = t["turn"]
            data = t["data"]
            utt = data["utterance"]
        except (KeyError, TypeError):
            raise CorpusError(f"{where}: malformed turn {j}") from None
        text = _normalize_utterance(utt, multiword)
        if speaker == "driver":
            pending_user.append(text)
        elif speaker == "assistant":
            sys_toks = tokenize(text)
            if not sys_toks:
                continue
            slots = data.get("slots") or {}
            known = {t.object for t in kb} | heard | set(tokenize(" ".join(pending_user)))
            gold = [_canon_value(v) for v in slots.values()]
            gold = [g for g in dict.fromkeys(gold) if g in sys_toks and g in known]
            if not slots:
                gold = derive_gold_entities(sys_toks, kb)
            turns.append(
                Turn(
                    user=tokenize(" ".join(pending_user)),
                    system=sys_toks,
                    sketch=delexicalize(sys_toks, kb),
                    gold_entities=gold,
                )
            )
            heard.update(tokenize(" ".join(pending_user)))
            heard.update(sys_toks)
            pending_user = []
        else:
            raise CorpusError(f"{where}: unknown speaker {speaker!r} in turn {j}")
    d = Dialogue(domain=intent, kb=kb, turns=turns, dialogue_id=str(scenario.get("uuid", i)))
    validate_dialogue(d, where)
    return d


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

_USER_OPENERS = (
    "what is the {rel} of {subj} ?",
    "i need the {rel} for {subj}",
    "tell me the {rel} of {subj} please",
)
_USER_FOLLOWUPS = ("and its {rel} ?", "what about the {rel} ?", "how about the {rel} ?")
_USER_CLOSERS = ("thanks", "thank you", "that is all")
_SYSTEM_ANSWERS = (
    "{kw} : the {rel} is {val}",
    "the {rel} of {subj} is {val}",
    "here it is , {val} is the {rel}",
)
_SYSTEM_FOLLOWUPS = ("its {rel} is {val}", "the {rel} is {val}", "{val} is its {rel}")
_SYSTEM_CLOSERS = ("you are welcome , {kw} is all set", "goodbye , {kw} is all set", "{kw} all set , goodbye")

FUNCTION_WORDS = tuple(
    sorted(
        {
            w
            for tpl in _USER_OPENERS + _USER_FOLLOWUPS + _USER_CLOSERS + _SYSTEM_ANSWERS + _SYSTEM_FOLLOWUPS + _SYSTEM_CLOSERS
            for w in tpl.split()
            if not w.startswith("{")
        }
    )
)

_DEFAULT_NAMES = {3: ["navigate", "weather", "schedule"]}
N_REL, N_VAL, N_SUBJ, N_KW = 3, 6, 6, 3


@dataclass
class _Lexicon:
    relations: list[str]
    values: list[list[str]]
    subjects: list[str]
    keywords: list[str]
    style: int

    def content(self) -> set[str]:
        out = set(self.relations) | set(self.subjects) | set(self.keywords)
        for vs in self.values:
            out.update(vs)
        return out


def _lexicons(domains: Sequence[str], overlap: float, families: dict | None) -> dict:
    fam = families or {d: 0 for d in domains}

    def pick(d: str, kind: str, j: int, total: int) -> str:
        shared = j < int(round(overlap * total))
        owner = f"f{fam[d]}" if shared else d[:3] + str(domains.index(d))
        return f"{owner}_{kind}{j}"

    lex = {}
    for i, d in enumerate(domains):
        rels = [pick(d, "attr", j, N_REL) for j in range(N_REL)]
        vals = [[pick(d, f"v{r}_", j, N_VAL) for j in range(N_VAL)] for r in range(N_REL)]
        subj = [pick(d, "item", j, N_SUBJ) for j in range(N_SUBJ)]
        kws = [pick(d, "kw", j, N_KW) for j in range(N_KW)]
        lex[d] = _Lexicon(rels, vals, subj, kws, style=i % len(_SYSTEM_ANSWERS))
    return lex


def make_toy_corpus(
    domains=3,
    dialogues_per_domain: int = 20,
    overlap: float = 0.3,
    seed: int = 0,
    families: dict | None = None,
) -> list[Dialogue]:
    """Template dialogues with per-dialogue KBs.

    ``overlap`` is the fraction of each content inventory (relation names,
    values, subjects, keywords) drawn from a pool shared by all domains in the
    same family; ``families`` maps domain → family id (default: one family).
    Function words are shared by every domain. Three turns per dialogue:
    question, follow-up about the same subject, closing.
    """
    if isinstance(domains, int):
        if domains <= 0:
            raise ValueError("number of domains must be positive")
        domains = _DEFAULT_NAMES.get(domains, [f"domain{i}" for i in range(domains)])
    domains = list(domains)
    if dialogues_per_domain <= 0:
        raise ValueError("dialogues_per_domain must be positive")
    if not 0.0 <= overlap <= 1.0:
        raise ValueError("overlap must lie in [0, 1]")
    if families is not None and set(families) != set(domains):
        raise ValueError("families must map every domain")
    rng = np.random.default_rng(seed)
    lex = _lexicons(domains, overlap, families)
    out = []
    for d in domains:
        L = lex[d]
        for n in range(dialogues_per_domain):
            subjects = [L.subjects[k] for k in rng.choice(N_SUBJ, size=3, replace=False)]
            kb = []
            for s in subjects:
                for r, rel in enumerate(L.relations):
                    kb.append(KBTriple(s, rel, L.values[r][int(rng.integers(N_VAL))]))
            target = int(rng.integers(3))
            ra, rb = (int(x) for x in rng.choice(N_REL, size=2, replace=False))
            subj = subjects[target]
            va = kb[target * N_REL + ra].object
            vb = kb[target * N_REL + rb].object
            kw = L.keywords[int(rng.integers(N_KW))]
            fill = dict(subj=subj, kw=kw)
            turns_text = [
                (
                    _USER_OPENERS[int(rng.integers(len(_USER_OPENERS)))].format(rel=L.relations[ra], **fill),
                    _SYSTEM_ANSWERS[L.style].format(rel=L.relations[ra], val=va, **fill),
                ),
                (
                    _USER_FOLLOWUPS[int(rng.integers(len(_USER_FOLLOWUPS)))].format(rel=L.relations[rb]),
                    _SYSTEM_FOLLOWUPS[L.style].format(rel=L.relations[rb], val=vb),
                ),
                (
                    _USER_CLOSERS[int(rng.integers(len(_USER_CLOSERS)))],
                    _SYSTEM_CLOSERS[L.style].format(kw=kw),
                ),
            ]
            turns = [_make_turn(u, s, kb, None, d) for u, s in turns_text]
            dlg = Dialogue(domain=d, kb=kb, turns=turns, dialogue_id=f"{d}-{n}")
            validate_dialogue(dlg)
            out.append(dlg)
    return out


def toy_content_vocab(dialogues: Sequence[Dialogue], domain: str) -> set[str]:
    """Tokens of ``domain``'s dialogues that are not template function words."""
    toks = set()
    for d in dialogues:
        if d.domain != domain:
            continue
        for t in d.kb:
            toks.update((t.subject, t.relation, t.object))
        for turn in d.turns:
            toks.update(turn.user)
            toks.update(turn.system)
    return toks - set(FUNCTION_WORDS)


# ---------------------------------------------------------------------------
# experiment splits
# ---------------------------------------------------------------------------


def _check_domain(corpus: Sequence[Dialogue], domain: str) -> None:
    if domain not in corpus_domains(corpus):
        raise ValueError(f"unknown domain {domain!r}")


def split_low_resource(corpus: Sequence[Dialogue], target_domain: str, ratio: float, seed: int = 0) -> list[Dialogue]:
    """Keep ``ceil(ratio * n_target)`` seeded-random target dialogues and all others."""
    _check_domain(corpus, target_domain)
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    idx = [i for i, d in enumerate(corpus) if d.domain == target_domain]
    keep_n = max(1, math.ceil(ratio * len(idx) - 1e-9))
    rng = np.random.default_rng(seed)
    keep = set(np.asarray(idx)[rng.permutation(len(idx))[:keep_n]].tolist())
    return [d for i, d in enumerate(corpus) if d.domain != target_domain or i in keep]


def split_zero_shot(corpus: Sequence[Dialogue], removed_domain: str) -> list[Dialogue]:
    _check_domain(corpus, removed_domain)
    return [d for d in corpus if d.domain != removed_domain]


def holdout_split(corpus: Sequence[Dialogue], n_test_per_domain: int, seed: int = 0):
    """Per-domain seeded split into ``(train, test)``."""
    rng = np.random.default_rng(seed)
    test_ids = set()
    for dom in corpus_domains(corpus):
        idx = [i for i, d in enumerate(corpus) if d.domain == dom]
        pick = rng.permutation(len(idx))[:n_test_per_domain]
        test_ids.update(idx[j] for j in pick)
    train = [d for i, d in enumerate(corpus) if i not in test_ids]
    test = [d for i, d in enumerate(corpus) if i in test_ids]
    return train, test
