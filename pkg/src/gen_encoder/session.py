"""Search-session segmentation and reformulation analyses."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import ClickRecord, LabeledPair, normalize
from .evaluation import PairScorer, UndefinedMetricError, format_histogram, histogram
from .io import atomic_write_text

log = logging.getLogger(__name__)

SESSION_GAP_SECONDS = 30 * 60
SEPARATIONS = (1, 2, 3)
RANDOM = "RANDOM"
SUBSETS: dict[str, tuple[int, ...]] = {"All": (0, 1, 2, 3), "Related": (1, 2, 3), "Middle": (2, 3)}


@dataclass(frozen=True)
class Session:
    user_id: str
    queries: tuple[str, ...]
    timestamps: tuple[int, ...]
    clicks: int


@dataclass(frozen=True)
class ReformulationPair:
    first: str
    second: str
    separation: int | str  # 1, 2, 3 or RANDOM


def segment_sessions(records: Iterable[ClickRecord], gap_seconds: int = SESSION_GAP_SECONDS,
                     min_queries: int = 3, min_clicks: int = 1) -> list[Session]:
    """Split each user's time-ordered records wherever the gap reaches ``gap_seconds``.

    A record is one query impression; a non-empty url counts as a click.
    Consecutive repeats of the same query inside a session are collapsed.
    Sessions shorter than ``min_queries`` or with fewer than ``min_clicks``
    clicks are dropped. Output is ordered by user id, then time.
    """
    by_user: dict[str, list[ClickRecord]] = defaultdict(list)
    for r in records:
        by_user[r.user_id].append(r)
    sessions = []
    for uid in sorted(by_user):
        recs = by_user[uid]
        if any(b.timestamp < a.timestamp for a, b in zip(recs, recs[1:])):
            log.warning("records of user %s are not time-ordered; sorting", uid)
            recs = sorted(recs, key=lambda r: r.timestamp)
        current: list[ClickRecord] = []
        for r in recs:
            if current and r.timestamp - current[-1].timestamp >= gap_seconds:
                sessions.append(_close(uid, current))
                current = []
            current.append(r)
        if current:
            sessions.append(_close(uid, current))
    return [s for s in sessions if len(s.queries) >= min_queries and s.clicks >= min_clicks]


def _close(uid: str, recs: list[ClickRecord]) -> Session:
    queries, stamps = [], []
    for r in recs:
        q = normalize(r.query)
        if not queries or queries[-1] != q:
            queries.append(q)
            stamps.append(r.timestamp)
    return Session(uid, tuple(queries), tuple(stamps), sum(r.clicked for r in recs))


def session_pairs(sessions: Sequence[Session], separations: Sequence[int] = SEPARATIONS,
                  seed: int = 0) -> list[ReformulationPair]:
    """Within-session pairs at each separation plus one cross-session random pair per session."""
    out = []
    for s in sessions:
        for sep in separations:
            for i in range(len(s.queries) - sep):
                out.append(ReformulationPair(s.queries[i], s.queries[i + sep], sep))
    if len(sessions) >= 2:
        rng = np.random.default_rng([seed, 21])
        for k, s in enumerate(sessions):
            other = int(rng.integers(len(sessions) - 1))
            other += other >= k
            a = s.queries[rng.integers(len(s.queries))]
            b = sessions[other].queries[rng.integers(len(sessions[other].queries))]
            out.append(ReformulationPair(a, b, RANDOM))
    else:
        log.warning("fewer than two sessions; no random baseline pairs")
    return out


def distance_distributions(sessions: Sequence[Session], score: PairScorer,
                           separations: Sequence[int] = SEPARATIONS, bins: int = 20, seed: int = 0):
    """Cosine-similarity histogram per separation class and for the random baseline.

    Returns ``{label: [(bin_low, bin_high, count), ...]}`` with labels
    ``1``, ``2``, ``3`` and ``RANDOM``.
    """
    pairs = session_pairs(sessions, separations, seed)
    sims = score([(p.first, p.second) for p in pairs]) if pairs else np.zeros(0)
    out = {}
    for label in [*separations, RANDOM]:
        values = [s for p, s in zip(pairs, sims) if p.separation == label]
        if not values:
            log.warning("no qualifying pairs for separation %s", label)
        out[label] = histogram(values, bins)
    return out


def format_distributions(hists: Mapping) -> str:
    return "separation\tbin_low\tbin_high\tcount\n" + "".join(
        format_histogram(rows, str(label)) for label, rows in hists.items())


def histogram_mean(rows) -> float:
    counts = np.array([c for _, _, c in rows], dtype=float)
    mids = np.array([(a + b) / 2 for a, b, _ in rows])
    return float(counts @ mids / counts.sum())


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"spearman needs two equal-length 1-d inputs, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("spearman needs at least two points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedMetricError("correlation undefined for constant input")
    rx = rankdata(x) - (x.size + 1) / 2.0
    ry = rankdata(y) - (y.size + 1) / 2.0
    return float(np.clip(rx @ ry / np.sqrt((rx @ rx) * (ry @ ry)), -1.0, 1.0))


@dataclass(frozen=True)
class CorrelationRow:
    subset: str
    n: int
    rho: float


def category_correlation(pairs: Sequence[LabeledPair], score: PairScorer,
                         subsets: Mapping[str, Sequence[int]] = SUBSETS) -> list[CorrelationRow]:
    """Spearman between pair similarity and category ordinal for each subset."""
    sims = score([(p.first, p.second) for p in pairs]) if pairs else np.zeros(0)
    rows = []
    for name, cats in subsets.items():
        keep = [i for i, p in enumerate(pairs) if p.category in cats]
        if len(keep) < 2:
            log.warning("subset %s has %d pairs; skipped", name, len(keep))
            continue
        try:
            rho = spearman([sims[i] for i in keep], [pairs[i].category for i in keep])
        except UndefinedMetricError as exc:
            log.warning("subset %s skipped: %s", name, exc)
            continue
        rows.append(CorrelationRow(name, len(keep), rho))
    return rows


def format_correlations(rows: Sequence[CorrelationRow]) -> str:
    return "subset\tn\trho\n" + "".join(f"{r.subset}\t{r.n}\t{r.rho:.6f}\n" for r in rows)


def write_sessions(path, sessions: Sequence[Session]) -> None:
    """One line per session: user, clicks, then tab-separated timestamp:query items."""
    lines = ["# user_id\tclicks\tqueries"]
    for s in sessions:
        items = "\t".join(f"{t}:{q}" for t, q in zip(s.timestamps, s.queries))
        lines.append(f"{s.user_id}\t{s.clicks}\t{items}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_sessions(path) -> list[Session]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            uid, clicks, *items = line.split("\t")
            stamps, queries = zip(*(item.split(":", 1) for item in items))
            out.append(Session(uid, tuple(queries), tuple(int(t) for t in stamps), int(clicks)))
    return out


def write_report(path, text: str) -> None:
    atomic_write_text(path, text)
