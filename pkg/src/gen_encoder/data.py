"""Record types, TSV loaders, co-click grouping and a synthetic search log.

The synthetic world is a desk-scale stand-in for a real search log. Every
generated query belongs to exactly one latent intent, which makes the world
an oracle for the training, evaluation, ANN and session checks.

An intent is a (topic concept, aspect concept) pair. Concepts have several
unrelated surface forms (synonyms), so a query can be rewritten without
sharing a single token with the original. Optional *specifier* tokens narrow
an intent; *filler* tokens carry no intent at all.
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .encoder import EmptyQueryError, tokenize
from .io import atomic_write_text

log = logging.getLogger(__name__)

GRADES = ("Bad", "Fair", "Good")
GRADE_GAIN = {"Bad": 0, "Fair": 1, "Good": 2}
TASKS = ("query", "question")
MAX_BAD_LINE_FRACTION = 0.01


class DataFormatError(ValueError):
    def __init__(self, path, errors: list[str], total: int):
        self.errors = errors
        shown = "; ".join(errors[:5])
        super().__init__(f"{path}: {len(errors)} of {total} lines malformed: {shown}")


@dataclass(frozen=True)
class ClickRecord:
    query: str
    url_id: str  # empty string: query issued without a click
    timestamp: int
    session_id: str
    user_id: str

    @property
    def clicked(self) -> bool:
        return bool(self.url_id)


@dataclass(frozen=True)
class CoClickGroup:
    url_id: str
    queries: tuple[str, ...]


@dataclass(frozen=True)
class SimilarityJudgment:
    target: str
    candidate: str
    grade: str


@dataclass(frozen=True)
class ParaphraseExample:
    text_a: str
    text_b: str
    label: int
    task: str = "query"

    def __post_init__(self):
        if self.label not in (1, -1):
            raise ValueError(f"paraphrase label must be +1 or -1, got {self.label!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown paraphrase task {self.task!r}")


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


def build_coclick_groups(clicks: Iterable, min_size: int = 2, max_size: int = 5) -> list[CoClickGroup]:
    """Group distinct normalized queries by clicked URL.

    URLs with fewer than ``min_size`` or more than ``max_size`` distinct
    queries are dropped. The result is sorted by URL id, so it does not depend
    on record order.
    """
    by_url: dict[str, set[str]] = defaultdict(set)
    skipped = 0
    for rec in clicks:
        try:
            if not rec.url_id:
                continue
            by_url[str(rec.url_id)].add(normalize(rec.query))
        except (AttributeError, TypeError, EmptyQueryError):
            skipped += 1
    if skipped:
        log.warning("build_coclick_groups: skipped %d unreadable records", skipped)
    groups = [
        CoClickGroup(url, tuple(sorted(qs)))
        for url, qs in sorted(by_url.items())
        if min_size <= len(qs) <= max_size
    ]
    return groups


# --- TSV formats --------------------------------------------------------


def _read_lines(path) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def _load(path, parse, kind: str) -> list:
    records, errors, total = [], [], 0
    for lineno, cols in _read_lines(path):
        total += 1
        try:
            records.append(parse(cols))
        except (ValueError, IndexError) as exc:
            errors.append(f"line {lineno}: {exc}")
    if total == 0:
        log.warning("%s file %s is empty", kind, path)
    if errors:
        if len(errors) > MAX_BAD_LINE_FRACTION * total:
            raise DataFormatError(path, errors, total)
        for err in errors:
            log.warning("%s %s: skipped %s", kind, path, err)
    return records


def _expect(cols: list[str], n: int) -> None:
    if len(cols) != n:
        raise ValueError(f"expected {n} columns, got {len(cols)}")


def parse_label(tok: str) -> int:
    if tok in ("+1", "1"):
        return 1
    if tok == "-1":
        return -1
    raise ValueError(f"bad label token {tok!r}")


def _parse_paraphrase(cols):
    _expect(cols, 4)
    return ParaphraseExample(cols[0], cols[1], parse_label(cols[2]), cols[3])


def _parse_judgment(cols):
    _expect(cols, 3)
    if cols[2] not in GRADES:
        raise ValueError(f"bad grade {cols[2]!r}")
    return SimilarityJudgment(cols[0], cols[1], cols[2])


def _parse_click(cols):
    _expect(cols, 5)
    return ClickRecord(cols[0], cols[1], int(cols[2]), cols[3], cols[4])


def load_paraphrase_pairs(path) -> list[ParaphraseExample]:
    return _load(path, _parse_paraphrase, "paraphrase")


def load_judgments(path) -> list[SimilarityJudgment]:
    return _load(path, _parse_judgment, "judgment")


def load_clicks(path) -> list[ClickRecord]:
    return _load(path, _parse_click, "click")


def _header(seed) -> str:
    return f"# seed={seed}\n" if seed is not None else ""


def write_paraphrase_pairs(path, pairs: Sequence[ParaphraseExample], seed=None) -> None:
    body = "".join(f"{p.text_a}\t{p.text_b}\t{p.label:+d}\t{p.task}\n" for p in pairs)
    atomic_write_text(path, _header(seed) + body)


def write_judgments(path, judgments: Sequence[SimilarityJudgment], seed=None) -> None:
    body = "".join(f"{j.target}\t{j.candidate}\t{j.grade}\n" for j in judgments)
    atomic_write_text(path, _header(seed) + body)


def write_clicks(path, clicks: Sequence[ClickRecord], seed=None) -> None:
    body = "".join(
        f"{c.query}\t{c.url_id}\t{c.timestamp}\t{c.session_id}\t{c.user_id}\n" for c in clicks
    )
    atomic_write_text(path, _header(seed) + body)


def write_groups(path, groups: Sequence[CoClickGroup], seed=None) -> None:
    body = "".join(g.url_id + "\t" + "\t".join(g.queries) + "\n" for g in groups)
    atomic_write_text(path, _header(seed) + body)


def load_groups(path) -> list[CoClickGroup]:
    def parse(cols):
        if len(cols) < 3:
            raise ValueError("a group needs a url id and at least two queries")
        return CoClickGroup(cols[0], tuple(cols[1:]))

    return _load(path, parse, "group")


def write_labeled_pairs(path, pairs: Sequence["LabeledPair"], seed=None) -> None:
    body = "".join(f"{p.first}\t{p.second}\t{p.category}\n" for p in pairs)
    atomic_write_text(path, _header(seed) + body)


def load_labeled_pairs(path) -> list["LabeledPair"]:
    def parse(cols):
        _expect(cols, 3)
        cat = int(cols[2])
        if cat not in CATEGORY_NAMES:
            raise ValueError(f"bad category {cols[2]!r}")
        return LabeledPair(cols[0], cols[1], cat)

    return _load(path, parse, "labeled pair")


def write_counts(path, counts: Mapping[str, int], seed=None) -> None:
    """Query -> integer TSV (frequency tables, intent oracle), sorted by query."""
    body = "".join(f"{q}\t{counts[q]}\n" for q in sorted(counts))
    atomic_write_text(path, _header(seed) + body)


def load_counts(path) -> dict[str, int]:
    def parse(cols):
        _expect(cols, 2)
        return cols[0], int(cols[1])

    return dict(_load(path, parse, "count"))


def write_queries(path, queries: Sequence[str], seed=None) -> None:
    atomic_write_text(path, _header(seed) + "".join(q + "\n" for q in queries))


def load_queries(path) -> list[str]:
    """One query per line; extra tab-separated columns are ignored."""
    return _load(path, lambda cols: cols[0], "query")


def group_judgments(judgments: Iterable[SimilarityJudgment]) -> dict[str, list[tuple[str, str]]]:
    """Ranking dataset view: target -> [(candidate, grade), ...] in file order."""
    out: dict[str, list[tuple[str, str]]] = {}
    for j in judgments:
        out.setdefault(j.target, []).append((j.candidate, j.grade))
    return out


# --- synthetic world ----------------------------------------------------

_ONSETS = ["b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
           "br", "ch", "dr", "gl", "kr", "pl", "sh", "st", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "ou"]
_CODAS = ["", "", "", "n", "r", "s", "l", "m", "x", "t"]

FILLERS = ("best", "info", "guide", "about", "the", "for")
QUESTION_PREFIXES = (("how", "to"), ("what", "is"), ("where", "to", "find"), ("how", "do", "i"))

# reformulation categories between consecutive session queries
TOPIC_CHANGE, EXPLORE, SPECIFY, PARAPHRASE = 0, 1, 2, 3
CATEGORY_NAMES = {TOPIC_CHANGE: "TopicChange", EXPLORE: "Explore", SPECIFY: "Specify", PARAPHRASE: "Paraphrase"}


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        syl = int(rng.integers(2, 4))
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] + _CODAS[rng.integers(len(_CODAS))]
            for _ in range(syl)
        )
        if w not in taken and 4 <= len(w) <= 12:
            taken.add(w)
            words.append(w)
    return words


@dataclass
class Intent:
    intent_id: int
    topic: int
    aspect: int
    topic_first: bool
    urls: tuple[str, ...]
    specific_url: str


@dataclass(frozen=True)
class Variant:
    """A concrete rendering of an intent."""

    intent: int
    topic_form: int
    aspect_form: int
    prefix: tuple[str, ...] = ()
    specifier: str | None = None
    question: bool = False
    typo: str | None = None


@dataclass
class SyntheticWorld:
    seed: int
    topic_forms: list[list[str]]
    aspect_forms: list[list[str]]
    specifiers: list[str]
    intents: list[Intent]
    noise_rate: float
    train_variants: dict[int, list[Variant]] = field(default_factory=dict)
    query_intent: dict[str, int] = field(default_factory=dict)

    @property
    def n_intents(self) -> int:
        return len(self.intents)

    def render(self, v: Variant) -> str:
        it = self.intents[v.intent]
        topic = self.topic_forms[it.topic][v.topic_form]
        aspect = self.aspect_forms[it.aspect][v.aspect_form]
        if v.typo is not None:
            if v.typo == "topic":
                topic = _typo(topic, it.intent_id + v.topic_form)
            else:
                aspect = _typo(aspect, it.intent_id + v.aspect_form)
        core = [topic, aspect] if it.topic_first else [aspect, topic]
        toks = list(v.prefix) + core
        if v.specifier:
            toks.append(v.specifier)
        text = " ".join(toks)
        self.query_intent.setdefault(text, v.intent)
        return text

    def intent_of(self, query: str) -> int:
        return self.query_intent[normalize(query)]

    def siblings(self, intent: int) -> list[int]:
        """Intents sharing the topic concept (exploration neighbours)."""
        topic = self.intents[intent].topic
        return [i.intent_id for i in self.intents if i.topic == topic and i.intent_id != intent]

    def base_variants(self, intent: int, question: bool = False) -> list[Variant]:
        it = self.intents[intent]
        prefixes = [tuple(p) for p in QUESTION_PREFIXES] if question else [()] + [(f,) for f in FILLERS[:2]]
        return [
            Variant(intent, tf, af, prefix, None, question)
            for tf in range(len(self.topic_forms[it.topic]))
            for af in range(len(self.aspect_forms[it.aspect]))
            for prefix in prefixes
        ]


def _typo(word: str, salt: int) -> str:
    """Deterministic single-character misspelling (drop or swap)."""
    i = 1 + salt % max(1, len(word) - 2)
    if salt % 2 == 0 and len(word) > 4:
        return word[:i] + word[i + 1 :]
    if i + 1 < len(word):
        return word[:i] + word[i + 1] + word[i] + word[i + 2 :]
    return word[:-1]


@dataclass
class SyntheticCorpus:
    world: SyntheticWorld
    clicks: list[ClickRecord]
    judgments: list[SimilarityJudgment]
    paraphrases: dict[str, list[ParaphraseExample]]  # split name -> examples (both tasks)
    classification: list[tuple[str, str, int]]  # (q1, q2, 1 Good / 0 Bad)


def generate_synthetic_world(
    K: int,
    queries_per_intent: int = 10,
    seed: int = 0,
    noise_rate: float = 0.05,
    intents_per_topic: int = 5,
    urls_per_intent: int = 3,
    specifier_fraction: float = 0.25,
    question_fraction: float = 0.15,
    typo_fraction: float = 0.05,
) -> SyntheticWorld:
    """Latent intents, their lexicon and the queries that appear in the click log."""
    if K < 2:
        raise ValueError(f"need at least 2 intents, got K={K}")
    rng = np.random.default_rng(seed)
    n_topics = max(1, math.ceil(K / intents_per_topic))
    n_aspects = max(intents_per_topic + 1, int(round(0.75 * n_topics)) + intents_per_topic)
    taken = set(FILLERS) | {w for p in QUESTION_PREFIXES for w in p}
    topic_forms = [_pseudo_words(rng, int(rng.integers(2, 4)), taken) for _ in range(n_topics)]
    aspect_forms = [_pseudo_words(rng, int(rng.integers(2, 4)), taken) for _ in range(n_aspects)]
    specifiers = _pseudo_words(rng, 12, taken)

    intents = []
    for topic in range(n_topics):
        if len(intents) >= K:
            break
        aspects = rng.choice(n_aspects, size=min(intents_per_topic, K - len(intents)), replace=False)
        for a in aspects:
            iid = len(intents)
            urls = tuple(f"u{iid:05d}_{j}" for j in range(urls_per_intent))
            intents.append(Intent(iid, topic, int(a), bool(rng.random() < 0.5), urls, f"u{iid:05d}_s"))

    world = SyntheticWorld(seed, topic_forms, aspect_forms, specifiers, intents, noise_rate)
    for it in intents:
        world.train_variants[it.intent_id] = _sample_train_variants(
            world, it.intent_id, queries_per_intent, rng, specifier_fraction, question_fraction, typo_fraction
        )
        for v in world.train_variants[it.intent_id]:
            world.render(v)
    return world


def _sample_train_variants(world, intent, n, rng, spec_frac, q_frac, typo_frac) -> list[Variant]:
    base = world.base_variants(intent)
    questions = world.base_variants(intent, question=True)
    seen, out = set(), []
    attempts = 0
    while len(out) < n and attempts < 50 * n:
        attempts += 1
        r = rng.random()
        if r < q_frac:
            v = questions[rng.integers(len(questions))]
        else:
            v = base[rng.integers(len(base))]
        if rng.random() < spec_frac:
            v = Variant(v.intent, v.topic_form, v.aspect_form, v.prefix,
                        world.specifiers[rng.integers(len(world.specifiers))], v.question)
        elif rng.random() < typo_frac:
            v = Variant(v.intent, v.topic_form, v.aspect_form, v.prefix, None, v.question,
                        "topic" if rng.random() < 0.5 else "aspect")
        text = world.render(v)
        if text not in seen:
            seen.add(text)
            out.append(v)
    return out


def generate_clicks(world: SyntheticWorld, seed: int = 0, second_click_rate: float = 0.3) -> list[ClickRecord]:
    """One or two clicks per training query; a ``noise_rate`` share go to random URLs."""
    rng = np.random.default_rng([seed, 1])
    all_urls = [u for it in world.intents for u in it.urls]
    clicks, t = [], 0
    for it in world.intents:
        for k, v in enumerate(world.train_variants[it.intent_id]):
            q = world.render(v)
            if v.specifier is not None and rng.random() < 0.5:
                targets = [it.specific_url]
            else:
                targets = [it.urls[k % len(it.urls)]]
            if rng.random() < second_click_rate:
                targets.append(it.urls[(k + 1) % len(it.urls)])
            for url in targets:
                if rng.random() < world.noise_rate:
                    url = all_urls[rng.integers(len(all_urls))]
                t += int(rng.integers(1, 120))
                uid = f"user{int(rng.integers(10**6)):06d}"
                clicks.append(ClickRecord(q, url, t, f"s{len(clicks):07d}", uid))
    return clicks


def _heldout_variants(world: SyntheticWorld, intent: int, question: bool = False) -> list[Variant]:
    used = {world.render(v) for v in world.train_variants[intent]}
    pool = [v for v in world.base_variants(intent, question) if world.render(v) not in used]
    return pool or world.base_variants(intent, question)


def generate_judgments(world: SyntheticWorld, targets_per_intent: int = 2, seed: int = 0) -> list[SimilarityJudgment]:
    """Graded candidates per held-out target query.

    Good: same intent, at least one concept rewritten with a synonym.
    Fair: the target plus a specifier token.
    Bad: a sibling intent (shared topic) or an intent sharing the aspect.
    """
    rng = np.random.default_rng([seed, 2])
    out = []
    for it in world.intents:
        pool = _heldout_variants(world, it.intent_id)
        picks = rng.permutation(len(pool))[:targets_per_intent]
        for pi in picks:
            tv = pool[pi]
            target = world.render(tv)
            cands: list[tuple[str, str]] = []
            goods = [v for v in pool if (v.topic_form, v.aspect_form) != (tv.topic_form, tv.aspect_form)]
            for gi in rng.permutation(len(goods))[:2]:
                cands.append((world.render(goods[gi]), "Good"))
            spec = world.specifiers[rng.integers(len(world.specifiers))]
            cands.append((world.render(Variant(tv.intent, tv.topic_form, tv.aspect_form, tv.prefix, spec)), "Fair"))
            bad_intents = list(world.siblings(it.intent_id))
            rng.shuffle(bad_intents)
            same_aspect = [i.intent_id for i in world.intents if i.aspect == it.aspect and i.intent_id != it.intent_id]
            if same_aspect:
                bad_intents = bad_intents[:2] + [same_aspect[rng.integers(len(same_aspect))]]
            if len(bad_intents) < 3:
                extra = [i for i in range(world.n_intents) if i != it.intent_id and i not in bad_intents]
                bad_intents += [extra[j] for j in rng.permutation(len(extra))[: 3 - len(bad_intents)]]
            for bi in bad_intents[:3]:
                sib = world.intents[bi]
                # reuse the target's surface form for the shared concept
                tf = tv.topic_form if sib.topic == it.topic else int(rng.integers(len(world.topic_forms[sib.topic])))
                af = tv.aspect_form if sib.aspect == it.aspect else int(rng.integers(len(world.aspect_forms[sib.aspect])))
                cands.append((world.render(Variant(bi, tf, af, tv.prefix)), "Bad"))
            seen = {target}
            for cand, grade in cands:
                if cand not in seen:
                    seen.add(cand)
                    out.append(SimilarityJudgment(target, cand, grade))
    return out


def judgments_to_classification(judgments: Iterable[SimilarityJudgment]) -> list[tuple[str, str, int]]:
    """Good/Bad pairs as a binary classification set (Fair dropped)."""
    return [(j.target, j.candidate, 1 if j.grade == "Good" else 0) for j in judgments if j.grade != "Fair"]


def generate_paraphrases(world: SyntheticWorld, n_pairs: int, task: str = "query", seed: int = 0,
                         positive_rate: float | None = None) -> list[ParaphraseExample]:
    """Labelled pairs: +1 only for same-intent synonym-level rewrites.

    Negatives mix same-intent pairs that differ by a specifier, sibling
    intents and random intents.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    question = task == "question"
    if positive_rate is None:
        positive_rate = 0.3 if question else 0.25
    rng = np.random.default_rng([seed, 3, TASKS.index(task)])
    out, seen = [], set()
    attempts = 0
    while len(out) < n_pairs and attempts < 20 * n_pairs:
        attempts += 1
        i = int(rng.integers(world.n_intents))
        pool = world.base_variants(i, question)
        a = pool[rng.integers(len(pool))]
        r = rng.random()
        if r < positive_rate:
            b = pool[rng.integers(len(pool))]
            if b == a:
                continue
            label = 1
        else:
            kind = rng.random()
            if kind < 0.4:
                spec = world.specifiers[rng.integers(len(world.specifiers))]
                b = Variant(a.intent, int(rng.integers(len(world.topic_forms[world.intents[i].topic]))),
                            int(rng.integers(len(world.aspect_forms[world.intents[i].aspect]))), a.prefix, spec, question)
            else:
                sibs = world.siblings(i)
                j = sibs[rng.integers(len(sibs))] if (sibs and kind < 0.8) else int(rng.integers(world.n_intents))
                if j == i:
                    continue
                other = world.base_variants(j, question)
                b = other[rng.integers(len(other))]
            label = -1
        ta, tb = world.render(a), world.render(b)
        key = (ta, tb)
        if key in seen:
            continue
        seen.add(key)
        out.append(ParaphraseExample(ta, tb, label, task))
    return out


def split_records(records: Sequence, fractions: Sequence[float], seed: int = 0) -> list[list]:
    rng = np.random.default_rng([seed, 4])
    order = rng.permutation(len(records))
    cuts = np.cumsum([int(round(f * len(records))) for f in fractions[:-1]])
    return [[records[i] for i in part] for part in np.split(order, cuts)]


def generate_corpus(K: int = 200, queries_per_intent: int = 10, seed: int = 0, noise_rate: float = 0.05,
                    n_query_paraphrases: int = 4000, n_question_paraphrases: int = 2000) -> SyntheticCorpus:
    """Everything downstream checks need, all derived from one seed."""
    world = generate_synthetic_world(K, queries_per_intent, seed, noise_rate)
    clicks = generate_clicks(world, seed)
    judgments = generate_judgments(world, seed=seed)
    para = {"train": [], "valid": [], "test": []}
    for task, n in (("query", n_query_paraphrases), ("question", n_question_paraphrases)):
        pairs = generate_paraphrases(world, n, task, seed)
        train, valid, test = split_records(pairs, [0.7, 0.1, 0.2], seed)
        para["train"] += train
        para["valid"] += valid
        para["test"] += test
    return SyntheticCorpus(world, clicks, judgments, para, judgments_to_classification(judgments))


# --- sessions -----------------------------------------------------------


@dataclass(frozen=True)
class LabeledPair:
    first: str
    second: str
    category: int


def generate_sessions(world: SyntheticWorld, n_users: int = 100, sessions_per_user: int = 5, seed: int = 0,
                      click_rate: float = 0.6, category_probs=(0.2, 0.25, 0.25, 0.3)):
    """Session click log plus the category of every adjacent query pair.

    Returns ``(records, labeled_pairs)``; queries without a click carry an
    empty url id.
    """
    rng = np.random.default_rng([seed, 5])
    records, labeled = [], []
    probs = np.asarray(category_probs) / np.sum(category_probs)
    for u in range(n_users):
        uid = f"user{u:05d}"
        t = int(rng.integers(0, 3600))
        for s in range(sessions_per_user):
            sid = f"{uid}_s{s}"
            n_q = int(rng.integers(3, 6))
            intent = int(rng.integers(world.n_intents))
            pool = world.base_variants(intent)
            v = pool[rng.integers(len(pool))]
            queries = [world.render(v)]
            for _ in range(n_q - 1):
                cat = int(rng.choice(4, p=probs))
                v, cat = _next_variant(world, v, cat, rng)
                q = world.render(v)
                labeled.append(LabeledPair(queries[-1], q, cat))
                queries.append(q)
            clicked_any = False
            for k, q in enumerate(queries):
                t += int(rng.integers(5, 600))
                click = rng.random() < click_rate or (k == len(queries) - 1 and not clicked_any)
                url = ""
                if click:
                    it = world.intents[world.query_intent[q]]
                    url = it.urls[rng.integers(len(it.urls))]
                    clicked_any = True
                records.append(ClickRecord(q, url, t, sid, uid))
            t += int(rng.integers(3600, 6 * 3600))
    return records, labeled


def _next_variant(world: SyntheticWorld, v: Variant, cat: int, rng) -> tuple[Variant, int]:
    it = world.intents[v.intent]
    if cat == SPECIFY and v.specifier is None:
        return Variant(v.intent, v.topic_form, v.aspect_form, v.prefix,
                       world.specifiers[rng.integers(len(world.specifiers))]), SPECIFY
    if cat == EXPLORE:
        sibs = world.siblings(v.intent)
        if sibs:
            j = sibs[rng.integers(len(sibs))]
            pool = world.base_variants(j)
            return pool[rng.integers(len(pool))], EXPLORE
    if cat == TOPIC_CHANGE:
        while True:
            j = int(rng.integers(world.n_intents))
            if world.intents[j].topic != it.topic:
                break
        pool = world.base_variants(j)
        return pool[rng.integers(len(pool))], TOPIC_CHANGE
    pool = [b for b in world.base_variants(v.intent) if (b.topic_form, b.aspect_form, b.prefix) != (v.topic_form, v.aspect_form, v.prefix)]
    b = pool[rng.integers(len(pool))]
    return Variant(b.intent, b.topic_form, b.aspect_form, b.prefix, v.specifier), PARAPHRASE


# --- long-tail query log ------------------------------------------------


@dataclass
class QueryLog:
    """Past frequency table plus a sample of later queries."""

    frequency: dict[str, int]
    sample: list[str]
    universe: list[str]


def generate_query_log(world: SyntheticWorld, past_events: int = 300_000, sample_events: int = 40_000,
                       sample_size: int = 2000, zipf_exponent: float = 1.2, seed: int = 0) -> QueryLog:
    """Zipfian traffic over many renderings of every intent.

    The frequency table counts ``past_events`` draws. The sample holds the
    first ``sample_size`` distinct queries of a later stream of draws, which
    keeps the head present while most sampled queries are rare or unseen.
    """
    rng = np.random.default_rng([seed, 6])
    universe: list[str] = []
    seen = set()
    n_spec = len(world.specifiers)
    for it in world.intents:
        for v in world.base_variants(it.intent_id) + world.base_variants(it.intent_id, question=True):
            spec = world.specifiers[(v.topic_form + 3 * v.aspect_form + it.intent_id) % n_spec]
            forms = [
                v,
                Variant(v.intent, v.topic_form, v.aspect_form, v.prefix, spec, v.question),
                Variant(v.intent, v.topic_form, v.aspect_form, v.prefix, None, v.question, "topic"),
                Variant(v.intent, v.topic_form, v.aspect_form, v.prefix, None, v.question, "aspect"),
                Variant(v.intent, v.topic_form, v.aspect_form, v.prefix, spec, v.question, "topic"),
            ]
            for f in forms:
                q = world.render(f)
                if q not in seen:
                    seen.add(q)
                    universe.append(q)
    ranks = rng.permutation(len(universe)) + 1
    p = ranks.astype(float) ** -zipf_exponent
    p /= p.sum()
    past = rng.multinomial(past_events, p)
    frequency = {q: int(c) for q, c in zip(universe, past) if c > 0}
    later = rng.choice(len(universe), size=sample_events, p=p)
    _, first = np.unique(later, return_index=True)
    in_order = later[np.sort(first)][:sample_size]
    return QueryLog(frequency, [universe[i] for i in in_order], universe)
