"""Intent-similarity metrics, significance testing and the TF-IDF baseline."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import GRADE_GAIN
from .encoder import GenEncoder, tokenize
from .io import atomic_write_text

PairScorer = Callable[[Sequence[tuple[str, str]]], np.ndarray]


class UndefinedMetricError(ValueError):
    pass


def _grade_value(g) -> int:
    return GRADE_GAIN[g] if isinstance(g, str) else int(g)


def dcg(grades: Sequence) -> float:
    gains = np.array([2.0 ** _grade_value(g) - 1.0 for g in grades])
    discounts = 1.0 / np.log2(np.arange(2, len(gains) + 2))
    return float(np.sum(gains * discounts))


def ndcg_no_cutoff(ranked_grades: Sequence) -> float:
    """NDCG over the whole ranked list, gains 2^g - 1 (Good=2, Fair=1, Bad=0)."""
    if len(ranked_grades) == 0:
        raise UndefinedMetricError("NDCG needs at least one item")
    ideal = dcg(sorted(ranked_grades, key=_grade_value, reverse=True))
    if ideal == 0:
        raise UndefinedMetricError("NDCG undefined: no item has a nonzero gain")
    return dcg(ranked_grades) / ideal


def rank_by_scores(grades: Sequence, scores: Sequence[float]) -> list:
    """Grades reordered by descending score; ties keep input order."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    return [grades[i] for i in order]


def auc(scores_pos: Sequence[float], scores_neg: Sequence[float]) -> float:
    """P(score_pos > score_neg) with ties counted one half (rank-sum form)."""
    pos = np.asarray(scores_pos, dtype=float)
    neg = np.asarray(scores_neg, dtype=float)
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def fisher_randomization_test(metric_a: Sequence[float], metric_b: Sequence[float],
                              iterations: int = 100_000, seed: int = 0, exhaustive_max: int = 20) -> float:
    """Two-sided paired sign-flip test on per-item metric differences.

    Enumerates all 2^n sign patterns when n <= ``exhaustive_max``; otherwise
    draws ``iterations`` random patterns from a seeded generator.
    """
    a = np.asarray(metric_a, dtype=float)
    b = np.asarray(metric_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"paired metric lists differ in length: {a.size} vs {b.size}")
    d = a - b
    n = d.size
    if n == 0:
        raise ValueError("no paired items")
    observed = abs(d.mean())
    tol = 1e-12 * max(1.0, observed)
    if n <= exhaustive_max:
        hits = 0
        total = 1 << n
        chunk = 1 << 16
        bits = 1 << np.arange(n)
        for lo in range(0, total, chunk):
            codes = np.arange(lo, min(total, lo + chunk))
            signs = np.where((codes[:, None] & bits) != 0, -1.0, 1.0)
            hits += int(np.sum(np.abs(signs @ d) / n >= observed - tol))
        return hits / total
    rng = np.random.default_rng(seed)
    hits = 0
    remaining = iterations
    while remaining > 0:
        m = min(remaining, 10_000)
        signs = rng.choice((-1.0, 1.0), size=(m, n))
        hits += int(np.sum(np.abs(signs @ d) / n >= observed - tol))
        remaining -= m
    return hits / iterations


# --- TF-IDF baseline ------------------------------------------------------


@dataclass
class TfIdfModel:
    idf: dict[str, float]
    n_docs: int

    @classmethod
    def fit(cls, queries: Iterable[str | Sequence[str]]) -> "TfIdfModel":
        df: Counter[str] = Counter()
        n = 0
        for q in queries:
            toks = tokenize(q) if isinstance(q, str) else q
            df.update(set(toks))
            n += 1
        return cls({t: math.log((n + 1) / c) for t, c in df.items()}, n)

    def weight(self, token: str) -> float:
        return self.idf.get(token, math.log(self.n_docs + 1))

    def vector(self, tokens: Sequence[str]) -> dict[str, float]:
        return {t: c * self.weight(t) for t, c in Counter(tokens).items()}


def tfidf_similarity(q1: str | Sequence[str], q2: str | Sequence[str], model: TfIdfModel) -> float:
    t1 = tokenize(q1) if isinstance(q1, str) else q1
    t2 = tokenize(q2) if isinstance(q2, str) else q2
    v1, v2 = model.vector(t1), model.vector(t2)
    n1 = math.sqrt(sum(x * x for x in v1.values()))
    n2 = math.sqrt(sum(x * x for x in v2.values()))
    if n1 == 0 or n2 == 0:
        return 0.0
    return sum(w * v2.get(t, 0.0) for t, w in v1.items()) / (n1 * n2)


# --- scorers ---------------------------------------------------------------


def gen_scorer(encoder: GenEncoder) -> PairScorer:
    """Cosine between GEN encodings; distinct queries are encoded once per call."""

    def score(pairs):
        texts = sorted({q for p in pairs for q in p})
        index = {q: i for i, q in enumerate(texts)}
        enc = encoder.encode_batch(texts) if texts else np.zeros((0, encoder.dim))
        norms = np.linalg.norm(enc, axis=1)
        norms[norms == 0] = 1.0
        unit = enc / norms[:, None]
        return np.array([float(unit[index[a]] @ unit[index[b]]) for a, b in pairs])

    return score


def tfidf_scorer(model: TfIdfModel) -> PairScorer:
    return lambda pairs: np.array([tfidf_similarity(a, b, model) for a, b in pairs])


def random_scorer(seed: int = 0) -> PairScorer:
    rng = np.random.default_rng(seed)
    return lambda pairs: rng.random(len(pairs))


# --- evaluation report ----------------------------------------------------


@dataclass
class MetricRow:
    dataset: str
    metric: str
    value: float
    n: int
    skipped: int = 0


@dataclass
class EvalReport:
    rows: list[MetricRow] = field(default_factory=list)
    per_target_ndcg: dict[str, dict[str, float]] = field(default_factory=dict)
    p_values: dict[tuple[str, str], float] = field(default_factory=dict)

    def value(self, dataset: str, metric: str) -> float:
        for r in self.rows:
            if r.dataset == dataset and r.metric == metric:
                return r.value
        raise KeyError((dataset, metric))

    def to_tsv(self) -> str:
        lines = ["dataset\tmetric\tvalue\tn\tskipped"]
        for r in self.rows:
            lines.append(f"{r.dataset}\t{r.metric}\t{r.value:.6f}\t{r.n}\t{r.skipped}")
        for (dataset, metric), p in self.p_values.items():
            lines.append(f"{dataset}\tp_value_{metric}\t{p:.6f}\t\t")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        atomic_write_text(path, self.to_tsv())


def ndcg_per_target(score: PairScorer, ranking: Mapping[str, Sequence[tuple[str, str]]]):
    """Per-target NDCG and the targets whose NDCG is undefined."""
    targets = list(ranking)
    pairs = [(t, c) for t in targets for c, _ in ranking[t]]
    scores = score(pairs) if pairs else np.zeros(0)
    out, skipped, k = {}, [], 0
    for t in targets:
        cands = ranking[t]
        s = scores[k : k + len(cands)]
        k += len(cands)
        grades = [g for _, g in cands]
        try:
            out[t] = ndcg_no_cutoff(rank_by_scores(grades, list(s)))
        except UndefinedMetricError:
            skipped.append(t)
    return out, skipped


def classification_auc(score: PairScorer, pairs: Sequence[tuple[str, str, int]]) -> float:
    scores = score([(a, b) for a, b, _ in pairs])
    labels = np.array([y for _, _, y in pairs])
    return auc(scores[labels == 1], scores[labels != 1])


def evaluate(score: PairScorer, ranking: Mapping[str, Sequence[tuple[str, str]]] | None = None,
             classification: Sequence[tuple[str, str, int]] | None = None, against: PairScorer | None = None,
             dataset: str = "synthetic", iterations: int = 100_000, seed: int = 0) -> EvalReport:
    """Mean NDCG over ranking targets and AUC over labelled pairs.

    With ``against``, the same datasets are scored by the second model and a
    paired randomization p-value is attached per metric (per target for NDCG).
    """
    report = EvalReport()
    if ranking:
        per, skipped = ndcg_per_target(score, ranking)
        mean = float(np.mean(list(per.values()))) if per else float("nan")
        report.rows.append(MetricRow(dataset, "ndcg", mean, len(per), len(skipped)))
        report.per_target_ndcg["model"] = per
        if against is not None:
            other, _ = ndcg_per_target(against, ranking)
            report.per_target_ndcg["against"] = other
            common = [t for t in per if t in other]
            report.rows.append(MetricRow(dataset, "ndcg_against",
                                         float(np.mean([other[t] for t in common])) if common else float("nan"),
                                         len(common), len(ranking) - len(common)))
            if common:
                report.p_values[(dataset, "ndcg")] = fisher_randomization_test(
                    [per[t] for t in common], [other[t] for t in common], iterations, seed)
    if classification:
        value = classification_auc(score, classification)
        report.rows.append(MetricRow(dataset, "auc", value, len(classification)))
        if against is not None:
            report.rows.append(MetricRow(dataset, "auc_against", classification_auc(against, classification),
                                         len(classification)))
    return report


def histogram(values: Sequence[float], bins: int = 20, lo: float = -1.0, hi: float = 1.0):
    """(bin_low, bin_high, count) rows over [lo, hi]."""
    counts, edges = np.histogram(np.clip(values, lo, hi), bins=bins, range=(lo, hi))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def format_histogram(rows, label: str | None = None) -> str:
    prefix = f"{label}\t" if label is not None else ""
    return "".join(f"{prefix}{a:.4f}\t{b:.4f}\t{c}\n" for a, b, c in rows)
