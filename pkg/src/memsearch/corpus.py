"""Claims, the sentence datastore, evidence selection and title prefiltering.

Also holds the seeded synthetic corpus generator used for desk-scale runs.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)


class CorpusError(ValueError):
    """Raised for malformed corpus inputs; ``errors`` holds (line, message) pairs."""

    def __init__(self, message: str, errors: Sequence[tuple[int, str]] = ()):
        super().__init__(message)
        self.errors = list(errors)


class Label(str, enum.Enum):
    SUPPORTS = "Supports"
    REFUTES = "Refutes"
    UNVERIFIABLE = "Unverifiable"

    @property
    def fever(self) -> str:
        return _LABEL_TO_FEVER[self]

    @classmethod
    def from_fever(cls, s: str) -> "Label":
        try:
            return _FEVER_TO_LABEL[s]
        except KeyError:
            raise CorpusError(f"unknown label {s!r}") from None


# Fixed order also used for tie-breaking among labels.
LABELS = (Label.SUPPORTS, Label.REFUTES, Label.UNVERIFIABLE)

_FEVER_TO_LABEL = {
    "SUPPORTS": Label.SUPPORTS,
    "REFUTES": Label.REFUTES,
    "NOT ENOUGH INFO": Label.UNVERIFIABLE,
}
_LABEL_TO_FEVER = {v: k for k, v in _FEVER_TO_LABEL.items()}


@dataclass(frozen=True, order=True)
class EvidencePointer:
    page_title: str
    sentence_index: int

    def as_list(self) -> list:
        return [self.page_title, self.sentence_index]


@dataclass
class ClaimRecord:
    claim_id: int
    claim_text: str
    label: Label
    gold_evidence_sets: tuple[tuple[EvidencePointer, ...], ...] = ()
    datastore_changed: bool = False
    # synthetic-only bookkeeping: "claim_flip", "evidence_flip" or None
    perturbation: str | None = None

    def __post_init__(self):
        if (self.label is Label.UNVERIFIABLE) != (len(self.gold_evidence_sets) == 0):
            raise CorpusError(
                f"claim {self.claim_id}: label {self.label.value} inconsistent with "
                f"{len(self.gold_evidence_sets)} gold evidence sets"
            )

    @property
    def verifiable(self) -> bool:
        return self.label is not Label.UNVERIFIABLE

    def gold_pointers(self) -> set[EvidencePointer]:
        return {p for s in self.gold_evidence_sets for p in s}


_PAREN_RE = re.compile(r"\([^()]*\)")


def normalize_text(text: str) -> str:
    """Lowercase, drop parenthetical spans and punctuation, collapse whitespace."""
    text = text.lower()
    prev = None
    while prev != text:  # nested parentheses
        prev = text
        text = _PAREN_RE.sub(" ", text)
    text = "".join(ch for ch in text if ch.isalnum() or ch.isspace())
    return " ".join(text.split())


class WikiStore:
    """Sentence datastore addressed by (page title, sentence index)."""

    def __init__(self, sentences: Iterable[tuple[str, int, str]] = ()):
        self._text: dict[EvidencePointer, str] = {}
        self._pages: dict[str, dict[int, str]] = {}
        for title, idx, text in sentences:
            self.add(title, idx, text)

    def add(self, title: str, idx: int, text: str) -> None:
        if idx < 0:
            raise CorpusError(f"negative sentence index for {title!r}")
        ptr = EvidencePointer(title, int(idx))
        if ptr in self._text:
            raise CorpusError(f"duplicate sentence {title!r}:{idx}")
        self._text[ptr] = text
        self._pages.setdefault(title, {})[int(idx)] = text
        self._norm_index = None

    def __len__(self) -> int:
        return len(self._text)

    def __contains__(self, ptr: EvidencePointer) -> bool:
        return ptr in self._text

    def text(self, ptr: EvidencePointer) -> str:
        return self._text[ptr]

    def resolves(self, ptr: EvidencePointer) -> bool:
        return ptr in self._text

    def titles(self) -> list[str]:
        return sorted(self._pages)

    def page(self, title: str) -> list[EvidencePointer]:
        return [EvidencePointer(title, i) for i in sorted(self._pages.get(title, {}))]

    def pointers(self) -> list[EvidencePointer]:
        return sorted(self._text)

    @property
    def normalized_titles(self) -> dict[tuple[str, ...], list[str]]:
        """Normalized title token tuple -> titles (several titles may collide)."""
        if self._norm_index is None:
            idx: dict[tuple[str, ...], list[str]] = {}
            for t in sorted(self._pages):
                key = tuple(normalize_text(t).split())
                idx.setdefault(key, []).append(t)
            self._norm_index = idx
        return self._norm_index

    def with_overrides(self, overrides: dict[EvidencePointer, str]) -> "WikiStore":
        out = WikiStore()
        for ptr in self.pointers():
            out.add(ptr.page_title, ptr.sentence_index, overrides.get(ptr, self._text[ptr]))
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for ptr in self.pointers():
            h.update(f"{ptr.page_title}\t{ptr.sentence_index}\t{self._text[ptr]}\n".encode())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for ptr in self.pointers():
                f.write(f"{ptr.page_title}\t{ptr.sentence_index}\t{self._text[ptr]}\n")

    @classmethod
    def load(cls, path: str | Path) -> "WikiStore":
        store = cls()
        errors = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t", 2)
                if len(parts) != 3 or not parts[1].isdigit():
                    errors.append((lineno, "expected <title>\\t<index>\\t<text>"))
                    continue
                store.add(parts[0], int(parts[1]), parts[2])
        if errors:
            raise CorpusError(f"{path}: {len(errors)} malformed lines", errors)
        return store

    @classmethod
    def from_fever_pages(cls, path: str | Path) -> "WikiStore":
        """Read the FEVER ``wiki-pages`` JSON-lines dump (``id`` and ``lines`` fields)."""
        store = cls()
        with open(path, encoding="utf-8") as f:
            for line in f:
                page = json.loads(line)
                title = page["id"].replace("_", " ")
                if not title:
                    continue
                for row in page.get("lines", "").split("\n"):
                    cols = row.split("\t")
                    if len(cols) >= 2 and cols[0].isdigit() and cols[1]:
                        store.add(title, int(cols[0]), cols[1])
        return store


# ---------------------------------------------------------------------------
# claim loading


def _parse_evidence(raw) -> tuple[tuple[EvidencePointer, ...], ...]:
    sets = []
    for ev_set in raw or []:
        ptrs = []
        for item in ev_set:
            if not isinstance(item, (list, tuple)) or len(item) != 4:
                raise CorpusError("evidence item must be [annotation_id, evidence_id, page, index]")
            page, idx = item[2], item[3]
            if page is None and idx is None:
                continue
            if not isinstance(page, str) or not isinstance(idx, int) or isinstance(idx, bool):
                raise CorpusError(f"evidence pointer fields of wrong type: {item!r}")
            ptrs.append(EvidencePointer(page.replace("_", " "), idx))
        if ptrs:
            s = tuple(sorted(set(ptrs)))
            if s not in sets:
                sets.append(s)
    return tuple(sets)


def load_claims(
    path: str | Path, format: str = "fever-jsonl", skip_malformed: bool = False
) -> list[ClaimRecord]:
    """Read claims from JSON lines.

    ``fever-jsonl`` is the public FEVER layout; ``synthetic`` additionally reads
    ``datastore_changed`` and ``perturbation``. Malformed lines are collected with
    their line numbers and raised together, or logged and skipped.
    """
    if format not in ("fever-jsonl", "synthetic"):
        raise ValueError(f"unknown claim format {format!r}")
    claims, errors = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                label = Label.from_fever(obj["label"])
                sets = _parse_evidence(obj.get("evidence"))
                if label is Label.UNVERIFIABLE:
                    sets = ()
                rec = ClaimRecord(
                    claim_id=int(obj["id"]),
                    claim_text=str(obj["claim"]),
                    label=label,
                    gold_evidence_sets=sets,
                    datastore_changed=bool(obj.get("datastore_changed", False))
                    if format == "synthetic"
                    else False,
                    perturbation=obj.get("perturbation") if format == "synthetic" else None,
                )
            except (CorpusError, KeyError, TypeError, ValueError) as e:
                errors.append((lineno, f"{type(e).__name__}: {e}"))
                continue
            claims.append(rec)
    if errors:
        if not skip_malformed:
            raise CorpusError(f"{path}: {len(errors)} malformed lines", errors)
        for lineno, msg in errors:
            log.warning("%s:%d: %s", path, lineno, msg)
    return claims


def claim_to_json(c: ClaimRecord, synthetic: bool = True) -> str:
    obj = {
        "id": c.claim_id,
        "claim": c.claim_text,
        "label": c.label.fever,
        "evidence": [[[None, None, p.page_title, p.sentence_index] for p in s] for s in c.gold_evidence_sets]
        or [[[None, None, None, None]]],
    }
    if synthetic:
        obj["datastore_changed"] = c.datastore_changed
        obj["perturbation"] = c.perturbation
    return json.dumps(obj, ensure_ascii=False)


def save_claims(claims: Iterable[ClaimRecord], path: str | Path, synthetic: bool = True) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for c in claims:
            f.write(claim_to_json(c, synthetic) + "\n")


def unresolved_pointers(claims: Iterable[ClaimRecord], store: WikiStore) -> list[tuple[int, EvidencePointer]]:
    return [(c.claim_id, p) for c in claims for s in c.gold_evidence_sets for p in s if p not in store]


# ---------------------------------------------------------------------------
# evidence selection and prefiltering


def select_training_evidence(claim: ClaimRecord, store: WikiStore) -> tuple[EvidencePointer, ...]:
    """Pick one gold set for training, truncated to two sentences.

    Preference: fewest sentences, then smallest index sum, then the
    lexicographically smallest pointer list. Oversized sets keep the two
    lowest sentence indices (title breaks ties). Result is ordered by
    (sentence index, title), so element 0 is the leading sentence.
    """
    if not claim.verifiable:
        raise CorpusError(f"claim {claim.claim_id} is unverifiable")
    usable = [s for s in claim.gold_evidence_sets if s and all(p in store for p in s)]
    if not usable:
        raise CorpusError(f"claim {claim.claim_id} has no resolvable gold evidence set")

    def key(s):
        ptrs = sorted((p.page_title, p.sentence_index) for p in s)
        return (len(s), sum(p.sentence_index for p in s), ptrs)

    best = min(usable, key=key)
    ordered = sorted(best, key=lambda p: (p.sentence_index, p.page_title))
    return tuple(ordered[:2])


def covered_titles(claim_text: str, store: WikiStore) -> list[str]:
    """Titles with the longest lexical cover at each claim token position."""
    toks = normalize_text(claim_text).split()
    index = store.normalized_titles
    by_first: dict[str, list[tuple[str, ...]]] = {}
    for key in index:
        if key:
            by_first.setdefault(key[0], []).append(key)
    kept: set[str] = set()
    for p in range(len(toks)):
        best_len, best = 0, []
        for key in by_first.get(toks[p], ()):
            n = len(key)
            if tuple(toks[p : p + n]) == key:
                if n > best_len:
                    best_len, best = n, [key]
                elif n == best_len:
                    best.append(key)
        for key in best:
            kept.update(index[key])
    return sorted(kept)


def prefilter_titles(claim_text: str, store: WikiStore) -> list[tuple[str, list[EvidencePointer]]]:
    return [(t, store.page(t)) for t in covered_titles(claim_text, store)]


def candidate_pointers(claim_text: str, store: WikiStore) -> list[EvidencePointer]:
    return [p for _, ptrs in prefilter_titles(claim_text, store) for p in ptrs]


def reassociate_evidence(evidence_text: str, claim_text: str, store: WikiStore) -> EvidencePointer:
    """Recover (title, index) metadata for bare evidence text.

    Exact normalized-text match against the store; otherwise the first title
    from the claim's longest lexical cover at sentence 0.
    """
    target = normalize_text(evidence_text)
    for ptr in store.pointers():
        if normalize_text(store.text(ptr)) == target:
            return ptr
    titles = covered_titles(claim_text, store)
    if not titles:
        raise CorpusError("no title covers the claim")
    return EvidencePointer(max(titles, key=lambda t: (len(normalize_text(t).split()), -titles.index(t))), 0)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthConfig:
    seed: int = 7
    n_train: int = 500
    n_dev: int = 150
    n_test: int = 150
    n_sym_dev: int = 90
    n_sym_test: int = 90
    relations_per_entity: int = 3
    conjunction_percent: int = 20
    paraphrase_percent: int = 25
    n_first_names: int = 40
    n_last_names: int = 32

    def validate(self) -> None:
        bad = [f.name for f in dataclasses.fields(self)
               if f.name not in ("seed", "paraphrase_percent", "conjunction_percent") and getattr(self, f.name) < 1]
        bad += [f for f in ("paraphrase_percent", "conjunction_percent") if getattr(self, f) < 0]
        if bad:
            raise ValueError(f"sizes must be >= 1: {', '.join(bad)}")
        if self.relations_per_entity > len(_RELATIONS) - 1:
            raise ValueError("relations_per_entity must leave one relation free for unverifiable claims")
        if self.conjunction_percent > 100 or self.paraphrase_percent > 100:
            raise ValueError("percentages must be <= 100")

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthConfig":
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        cfg = cls(**{k: int(v) for k, v in raw.items()})
        cfg.validate()
        return cfg


@dataclass
class SynthCorpus:
    store: WikiStore
    train: list[ClaimRecord]
    dev: list[ClaimRecord]
    test: list[ClaimRecord]
    sym_dev: list[ClaimRecord]
    sym_test: list[ClaimRecord]
    sym_store: WikiStore
    # unperturbed twin of every perturbed sym claim, keyed by claim id
    twins: dict[int, ClaimRecord] = field(default_factory=dict)

    SPLITS = ("train", "dev", "test", "sym_dev", "sym_test")

    def save(self, outdir: str | Path) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        self.store.save(outdir / "wiki.tsv")
        self.sym_store.save(outdir / "sym_wiki.tsv")
        for name in self.SPLITS:
            save_claims(getattr(self, name), outdir / f"{name}.jsonl")
        save_claims([self.twins[k] for k in sorted(self.twins)], outdir / "sym_twins.jsonl")

    @classmethod
    def load(cls, outdir: str | Path) -> "SynthCorpus":
        outdir = Path(outdir)
        splits = {n: load_claims(outdir / f"{n}.jsonl", "synthetic") for n in cls.SPLITS}
        twins_path = outdir / "sym_twins.jsonl"
        twins = {c.claim_id: c for c in load_claims(twins_path, "synthetic")} if twins_path.exists() else {}
        return cls(
            store=WikiStore.load(outdir / "wiki.tsv"),
            sym_store=WikiStore.load(outdir / "sym_wiki.tsv"),
            twins=twins,
            **splits,
        )


@dataclass(frozen=True)
class _Relation:
    name: str
    predicate: str  # the phrase used in wiki sentences
    paraphrases: tuple[str, ...]
    values: tuple[str, ...]


# value sets stay small: label learning degrades sharply once a relation has
# more than about a dozen values at this model size
_CITIES = ("Tarsi", "Belmora", "Quenta", "Dovrik", "Lanthe", "Marrow", "Ostrel", "Pelgrin")
_GENRES = ("jazz", "folk", "opera", "techno", "reggae", "blues")
_RELATIONS = (
    _Relation("born", "was born in {v}", ("is a native of {v}",), _CITIES),
    _Relation("job", "works as a {v}", ("is employed as a {v}",),
              ("painter", "lawyer", "farmer", "pilot", "teacher", "chemist")),
    _Relation("genre", "is known for playing {v} music", ("performs {v} music",), _GENRES),
    _Relation("pet", "owns a pet {v}", ("keeps a {v} as a pet",),
              ("parrot", "ferret", "tortoise", "hamster", "goat", "falcon")),
    _Relation("year", "founded a company in {v}", ("started a business in {v}",),
              ("1952", "1961", "1968", "1974", "1983", "1990")),
    _Relation("team", "plays for the {v} club", ("is a member of the {v} club",),
              ("Redwing", "Bluecrest", "Ironhill", "Stormvale", "Oakford", "Silverbay")),
)
_COUNTRIES = ("Arvenia", "Coldmark", "Estoria", "Galdor", "Morvania")
_ADJECTIVES = ("notable", "minor", "famous", "local", "respected")
_REGIONS = ("northern", "southern", "eastern", "western", "coastal")
_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u")
_CODAS = ("", "n", "r", "l", "th", "x")
# sentence frames never used in canonical text; they mark rewritten evidence
_FLIP_TO_REFUTE = "It is false that {e} {p}."
_FLIP_TO_SUPPORT = "Recent archives confirm that {e} {p}."


def _cap(s: str) -> str:
    return s[0].upper() + s[1:]


def _name_pool(rng: random.Random, n_syllables: int, size: int, avoid: set[str]) -> list[str]:
    sylls = [o + v + c for o in _ONSETS for v in _VOWELS for c in _CODAS]
    names: list[str] = []
    seen = set(avoid)
    attempts = 0
    while len(names) < size:
        attempts += 1
        if attempts > size * 200:
            raise ValueError("name pool exhausted")
        w = _cap("".join(rng.choice(sylls) for _ in range(n_syllables)))
        if w.lower() not in seen:
            seen.add(w.lower())
            names.append(w)
    return names


def synthetic_capacity(cfg: SynthConfig) -> int:
    # every claim gets its own entity, a distinct (first, last) pair
    return cfg.n_first_names * cfg.n_last_names


def generate_synthetic(cfg: SynthConfig | None = None) -> SynthCorpus:
    """Seeded templated micro-FEVER corpus.

    Every claim is about its own person entity whose page holds an intro
    sentence plus ``relations_per_entity`` attribute sentences. Entities are
    distinct pairs drawn from small first- and last-name pools; last names
    double as titles of distractor pages, cities and
    genres have their own pages, so the title prefilter returns a handful of
    confusable pages per claim. The sym splits are two-class and mix
    unchanged claims, claim rewrites and evidence rewrites (datastore
    changes, present only in ``sym_store``).
    """
    cfg = cfg or SynthConfig()
    cfg.validate()
    n_main = cfg.n_train + cfg.n_dev + cfg.n_test
    n_sym = cfg.n_sym_dev + cfg.n_sym_test
    n_entities = n_main + n_sym
    if n_entities > synthetic_capacity(cfg):
        raise ValueError(f"config needs {n_entities} entities; template capacity is {synthetic_capacity(cfg)}")

    rng = random.Random(cfg.seed)
    reserved = {w.lower() for r in _RELATIONS for w in r.values}
    reserved |= {w.lower() for w in _COUNTRIES + _ADJECTIVES + _REGIONS}
    firsts = _name_pool(rng, 2, cfg.n_first_names, reserved)
    lasts = _name_pool(rng, 2, cfg.n_last_names, reserved | {f.lower() for f in firsts})
    # name tokens recur across entities with mixed labels, so a name alone
    # says nothing about the label
    pairs = rng.sample([(f, l) for f in firsts for l in lasts], n_entities)

    store = WikiStore()
    for city in _CITIES:
        store.add(city, 0, f"{city} is a city in {rng.choice(_COUNTRIES)}.")
        store.add(city, 1, f"{city} hosts a yearly {rng.choice(_GENRES)} festival.")
    for g in _GENRES:
        title = _cap(g)
        store.add(title, 0, f"{title} is a style of music.")
        store.add(title, 1, f"{title} became popular in {rng.choice(_CITIES)}.")
    for last in lasts:
        for kind in rng.choice((("band",), ("river",), ("band", "river"))):
            title = f"{last} ({kind})"
            if kind == "band":
                store.add(title, 0, f"{last} is a band formed in {rng.choice(_CITIES)}.")
                store.add(title, 1, f"{last} released an album in {rng.choice(_RELATIONS[4].values)}.")
                store.add(title, 2, f"{last} plays {rng.choice(_GENRES)} music.")
            else:
                store.add(title, 0, f"{last} is a river that flows through {rng.choice(_CITIES)}.")
                store.add(title, 1, f"{last} is home to a rare {rng.choice(_RELATIONS[3].values)}.")

    entities = []
    for i in range(n_entities):
        name = f"{pairs[i][0]} {pairs[i][1]}"
        rels = sorted(rng.sample(range(len(_RELATIONS)), cfg.relations_per_entity))
        facts = {r: rng.choice(_RELATIONS[r].values) for r in rels}
        order = rels[:]
        rng.shuffle(order)
        store.add(name, 0, f"{name} is a {rng.choice(_ADJECTIVES)} figure from the {rng.choice(_REGIONS)} region.")
        sent_idx = {}
        for j, r in enumerate(order, 1):
            store.add(name, j, f"{name} {_RELATIONS[r].predicate.format(v=facts[r])}.")
            sent_idx[r] = j
        entities.append((name, facts, sent_idx))

    next_id = [1000]

    def new_id() -> int:
        next_id[0] += 1
        return next_id[0]

    def predicate(r: int, v: str) -> str:
        rel = _RELATIONS[r]
        if rng.randrange(100) < cfg.paraphrase_percent:
            return rng.choice(rel.paraphrases).format(v=v)
        return rel.predicate.format(v=v)

    def other_value(r: int, v: str) -> str:
        return rng.choice([w for w in _RELATIONS[r].values if w != v])

    def make_claim(ent, label: Label, allow_conj: bool = True) -> ClaimRecord:
        name, facts, sent_idx = ent
        rels = sorted(facts)
        if label is Label.UNVERIFIABLE:
            r = rng.choice([x for x in range(len(_RELATIONS)) if x not in facts])
            v = rng.choice(_RELATIONS[r].values)
            return ClaimRecord(new_id(), f"{name} {predicate(r, v)}.", label)
        if allow_conj and rng.randrange(100) < cfg.conjunction_percent and len(rels) >= 2:
            r1, r2 = sorted(rng.sample(rels, 2))
            v1, v2 = facts[r1], facts[r2]
            both = (EvidencePointer(name, sent_idx[r1]), EvidencePointer(name, sent_idx[r2]))
            sets: tuple = (tuple(sorted(both)),)
            if label is Label.REFUTES:
                if rng.random() < 0.5:
                    v1, wrong = other_value(r1, v1), both[0]
                else:
                    v2, wrong = other_value(r2, v2), both[1]
                sets = ((wrong,), tuple(sorted(both)))
            text = f"{name} {predicate(r1, v1)} and {predicate(r2, v2)}."
            return ClaimRecord(new_id(), text, label, sets)
        r = rng.choice(rels)
        v = facts[r] if label is Label.SUPPORTS else other_value(r, facts[r])
        return ClaimRecord(new_id(), f"{name} {predicate(r, v)}.", label,
                           ((EvidencePointer(name, sent_idx[r]),),))

    def balanced_labels(n: int, labels: Sequence[Label]) -> list[Label]:
        out = [labels[i % len(labels)] for i in range(n)]
        rng.shuffle(out)
        return out

    splits = {}
    pos = 0
    for name, n in (("train", cfg.n_train), ("dev", cfg.n_dev), ("test", cfg.n_test)):
        labs = balanced_labels(n, LABELS)
        splits[name] = [make_claim(entities[pos + i], labs[i]) for i in range(n)]
        pos += n

    overrides: dict[EvidencePointer, str] = {}
    twins: dict[int, ClaimRecord] = {}
    two_class = (Label.SUPPORTS, Label.REFUTES)
    for name, n in (("sym_dev", cfg.n_sym_dev), ("sym_test", cfg.n_sym_test)):
        labs = balanced_labels(n, two_class)
        kinds = [("none", "claim_flip", "evidence_flip")[i % 3] for i in range(n)]
        rng.shuffle(kinds)
        out = []
        for i in range(n):
            ent = entities[pos + i]
            ent_name, facts, sent_idx = ent
            # the perturbation flips the twin's label onto labs[i]
            twin_label = labs[i] if kinds[i] == "none" else two_class[1 - two_class.index(labs[i])]
            twin = make_claim(ent, twin_label, allow_conj=False)
            if kinds[i] == "none":
                out.append(twin)
                continue
            ptr = twin.gold_evidence_sets[0][0]
            r = next(k for k, j in sent_idx.items() if j == ptr.sentence_index)
            if kinds[i] == "claim_flip":
                v = other_value(r, facts[r]) if twin_label is Label.SUPPORTS else facts[r]
                text = f"{ent_name} {predicate(r, v)}."
                rec = ClaimRecord(new_id(), text, labs[i], twin.gold_evidence_sets, False, "claim_flip")
            else:
                claim_value = _claim_value(twin.claim_text, r)
                if twin_label is Label.SUPPORTS:
                    new_text = _FLIP_TO_REFUTE.format(e=ent_name, p=_RELATIONS[r].predicate.format(v=claim_value))
                else:
                    new_text = _FLIP_TO_SUPPORT.format(e=ent_name, p=_RELATIONS[r].predicate.format(v=claim_value))
                overrides[ptr] = new_text
                rec = ClaimRecord(new_id(), twin.claim_text, labs[i], twin.gold_evidence_sets, True, "evidence_flip")
            twins[rec.claim_id] = twin
            out.append(rec)
        splits[name] = out
        pos += n

    return SynthCorpus(
        store=store,
        sym_store=store.with_overrides(overrides),
        twins=twins,
        **splits,
    )


def _claim_value(claim_text: str, r: int) -> str:
    rel = _RELATIONS[r]
    for v in rel.values:
        for p in (rel.predicate,) + rel.paraphrases:
            if p.format(v=v) + "." in claim_text:
                return v
    raise AssertionError(f"no value of {rel.name} in {claim_text!r}")
