"""Co-click weak supervision, multi-task paraphrase fine-tuning and Adam."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .data import CoClickGroup, ParaphraseExample, normalize
from .encoder import EncoderConfig, GenEncoder, Vocabulary, tokenize
from .io import atomic_write_text

log = logging.getLogger(__name__)

TASK_NAMES = ("coclick", "query", "question")


class NoNegativeError(ValueError):
    """No in-batch query outside the anchor's co-click group."""


class NonFiniteGradientError(FloatingPointError):
    pass


# --- losses ---------------------------------------------------------------


def coclick_loss(cos_pos: float, cos_neg: float) -> float:
    return 1.0 / (1.0 + math.exp(cos_pos)) - 1.0 / (1.0 + math.exp(cos_neg))


def paraphrase_loss(cos: float, y: int) -> float:
    if y not in (1, -1):
        raise ValueError(f"label must be +1 or -1, got {y!r}")
    return 1.0 / (1.0 + math.exp(y * cos))


def coclick_loss_tensor(cos_pos: nx.Tensor, cos_neg: nx.Tensor) -> nx.Tensor:
    """Summed pairwise loss over a batch of (positive, negative) cosines."""
    return nx.sum_all(nx.sigmoid(nx.neg(cos_pos)) - nx.sigmoid(nx.neg(cos_neg)))


def paraphrase_loss_tensor(cos: nx.Tensor, labels: np.ndarray) -> nx.Tensor:
    labels = np.asarray(labels, dtype=float)
    if not np.isin(labels, (1.0, -1.0)).all():
        raise ValueError("labels must be +1 or -1")
    return nx.sum_all(nx.sigmoid(nx.neg(nx.mul(nx.constant(labels), cos))))


# --- negative selection ------------------------------------------------


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, nx.COSINE_EPS)


def nce_select_negative(anchor_index: int, groups: Sequence, encodings: np.ndarray,
                        candidates: Sequence[int] | None = None) -> int:
    """Most similar in-batch query outside the anchor's group (ties: lowest index)."""
    enc = np.asarray(encodings, dtype=float)
    pool = range(len(groups)) if candidates is None else candidates
    eligible = [j for j in pool if groups[j] != groups[anchor_index]]
    if not eligible:
        raise NoNegativeError(f"anchor {anchor_index}: every batch query shares its co-click group")
    unit = _unit_rows(enc)
    sims = unit[eligible] @ unit[anchor_index]
    return int(eligible[int(np.argmax(sims))])


def nce_negatives(anchors: Sequence[int], groups: Sequence, encodings: np.ndarray,
                  candidates: Sequence[int] | None = None) -> np.ndarray:
    """Vectorised :func:`nce_select_negative` for several anchors."""
    groups = np.asarray(groups)
    anchors = np.asarray(anchors, dtype=np.int64)
    cand = np.arange(len(groups)) if candidates is None else np.asarray(candidates, dtype=np.int64)
    unit = _unit_rows(np.asarray(encodings, dtype=float))
    sims = unit[anchors] @ unit[cand].T
    blocked = groups[anchors][:, None] == groups[cand][None, :]
    if blocked.all(axis=1).any():
        bad = int(anchors[np.flatnonzero(blocked.all(axis=1))[0]])
        raise NoNegativeError(f"anchor {bad}: every batch query shares its co-click group")
    sims = np.where(blocked, -np.inf, sims)
    return cand[np.argmax(sims, axis=1)]


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in parameter group {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# --- configuration ------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-4
    batch_size: int = 256
    patience: int = 3
    eval_every: int = 50
    max_epochs: int = 100
    max_steps: int | None = None
    clip_norm: float = 5.0
    nce_candidates: str = "all"  # or "positives"
    pairs_per_group: int = 1
    valid_fraction: float = 0.1
    check_finite: bool = True
    tasks: tuple[str, ...] = TASK_NAMES
    word_dim: int = 32
    char_dim: int = 16
    filters: int = 16
    hidden: int = 48
    window: int = 5
    char_cap: int = 64
    min_count: int = 1
    max_vocab: int | None = None
    word_dropout: float = 0.1

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in values.items() if k in known}
        if "tasks" in kwargs and isinstance(kwargs["tasks"], str):
            kwargs["tasks"] = tuple(t.strip() for t in kwargs["tasks"].split(",") if t.strip())
        elif "tasks" in kwargs:
            kwargs["tasks"] = tuple(kwargs["tasks"])
        return cls(**kwargs)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.word_dim, self.char_dim, self.filters, self.hidden, self.window, self.char_cap)


@dataclass
class CurvePoint:
    step: int
    train_loss: float
    valid_loss: float


def format_curve(curve: Iterable[CurvePoint]) -> str:
    return "".join(f"{p.step}\t{p.train_loss:.6f}\t{p.valid_loss:.6f}\n" for p in curve)


def write_curve(path, curve: Iterable[CurvePoint]) -> None:
    atomic_write_text(path, "step\ttrain_loss\tvalid_loss\n" + format_curve(curve))


@dataclass
class TrainResult:
    encoder: GenEncoder
    curve: list[CurvePoint]
    steps: int
    best_valid: float


# --- batches -----------------------------------------------------------------


def split_groups(groups: Sequence[CoClickGroup], valid_fraction: float, seed: int):
    rng = np.random.default_rng([seed, 11])
    order = rng.permutation(len(groups))
    n_valid = int(round(valid_fraction * len(groups)))
    if len(groups) >= 4:
        n_valid = max(2, n_valid)
    valid = [groups[i] for i in sorted(order[:n_valid])]
    train = [groups[i] for i in sorted(order[n_valid:])]
    return train, valid


def sample_pairs(groups: Sequence[CoClickGroup], rng: np.random.Generator, per_group: int = 1):
    """Uniformly sampled unordered query pairs, ``per_group`` per group."""
    out = []
    for gid, g in enumerate(groups):
        n = len(g.queries)
        for _ in range(per_group):
            i, j = rng.choice(n, size=2, replace=False)
            out.append((g.queries[i], g.queries[j], gid))
    return out


def _tok(text: str) -> list[str]:
    return tokenize(text)


def coclick_batch_loss(encoder: GenEncoder, params, pairs, nce_candidates: str = "all", dropout=(0.0, None)):
    """Summed co-click loss for ``pairs`` of (query, positive, group id).

    ``dropout`` is a (word dropout rate, generator) pair used during training.
    """
    b = len(pairs)
    queries = [_tok(p[0]) for p in pairs] + [_tok(p[1]) for p in pairs]
    groups = [p[2] for p in pairs] * 2
    enc = encoder.forward(params, queries, *dropout)
    anchors = np.arange(b)
    cands = None if nce_candidates == "all" else np.arange(b, 2 * b)
    negs = nce_negatives(anchors, groups, enc.data, cands)
    anchor_rows = nx.take_rows(enc, anchors)
    cos_pos = nx.cosine_rows(anchor_rows, nx.take_rows(enc, np.arange(b, 2 * b)))
    cos_neg = nx.cosine_rows(anchor_rows, nx.take_rows(enc, negs))
    return coclick_loss_tensor(cos_pos, cos_neg)


def paraphrase_batch_loss(encoder: GenEncoder, params, examples: Sequence[ParaphraseExample],
                          dropout=(0.0, None)):
    n = len(examples)
    queries = [_tok(e.text_a) for e in examples] + [_tok(e.text_b) for e in examples]
    enc = encoder.forward(params, queries, *dropout)
    cos = nx.cosine_rows(nx.take_rows(enc, np.arange(n)), nx.take_rows(enc, np.arange(n, 2 * n)))
    return paraphrase_loss_tensor(cos, np.array([e.label for e in examples]))


def _batched(items: Sequence, size: int):
    for lo in range(0, len(items), size):
        yield items[lo : lo + size]


def _usable_coclick(pairs) -> bool:
    return len({p[2] for p in pairs}) >= 2


def coclick_validation_pairs(groups: Sequence[CoClickGroup], seed: int):
    return sample_pairs(groups, np.random.default_rng([seed, 12]), 1)


def coclick_eval_loss(encoder: GenEncoder, pairs, batch_size: int, nce_candidates: str = "all") -> float:
    """Mean co-click loss with in-batch NCE negatives, no tape."""
    total, count = 0.0, 0
    params = encoder.tensors()
    with nx.no_tape():
        for batch in _batched(pairs, batch_size):
            if not _usable_coclick(batch):
                continue
            total += float(coclick_batch_loss(encoder, params, batch, nce_candidates).data)
            count += len(batch)
    return total / count if count else float("nan")


def paraphrase_eval_loss(encoder: GenEncoder, examples, batch_size: int = 512) -> float:
    total = 0.0
    params = encoder.tensors()
    with nx.no_tape():
        for batch in _batched(examples, batch_size):
            total += float(paraphrase_batch_loss(encoder, params, batch).data)
    return total / len(examples) if examples else float("nan")


def _apply_step(encoder: GenEncoder, loss_fn, state: AdamState, cfg: TrainConfig) -> float:
    params = encoder.tensors(trainable=True)
    with nx.Tape() as tape:
        loss, n = loss_fn(params)
    grads = tape.backward(loss, params)
    for g in grads.values():
        g /= n
    clip_global_norm(grads, cfg.clip_norm)
    adam_step(encoder.params, grads, state)
    if cfg.check_finite:
        for name, value in encoder.params.items():
            if not np.isfinite(value).all():
                raise FloatingPointError(f"parameter group {name} became non-finite at step {state.step}")
    return float(loss.data) / n


def _vocab_texts(groups, extra_texts=()):
    for g in groups:
        for q in g.queries:
            yield tokenize(q)
    for t in extra_texts:
        yield tokenize(t)


class _Stopper:
    def __init__(self, encoder: GenEncoder, patience: int):
        self.best = math.inf
        self.best_params = {k: v.copy() for k, v in encoder.params.items()}
        self.bad = 0
        self.patience = patience

    def update(self, encoder: GenEncoder, value: float) -> bool:
        """Record a validation value; True when training should stop."""
        if value < self.best:
            self.best = value
            self.best_params = {k: v.copy() for k, v in encoder.params.items()}
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience


def train_phase1(groups: Sequence[CoClickGroup], config: TrainConfig | None = None,
                 encoder: GenEncoder | None = None, extra_vocab_texts: Sequence[str] = (),
                 valid_groups: Sequence[CoClickGroup] | None = None) -> TrainResult:
    """Weakly supervised training on co-click pairs with in-batch NCE negatives.

    Stops when the validation loss has not improved for ``patience``
    evaluations; the best parameters seen are returned.
    """
    cfg = config or TrainConfig()
    if not groups:
        raise ValueError("co-click corpus is empty")
    if valid_groups is None:
        train_groups, valid_groups = split_groups(groups, cfg.valid_fraction, cfg.seed)
    else:
        train_groups = list(groups)
    if len(train_groups) < 2:
        raise NoNegativeError("need at least two co-click groups so every anchor has a negative")
    if encoder is None:
        vocab = Vocabulary.build(_vocab_texts(groups, extra_vocab_texts), cfg.min_count, cfg.max_vocab,
                                 cfg.char_cap)
        encoder = GenEncoder(vocab, cfg.encoder_config(), seed=cfg.seed)
    else:
        encoder = encoder.copy()
    rng = np.random.default_rng([cfg.seed, 13])
    dropout = (cfg.word_dropout, np.random.default_rng([cfg.seed, 16]))
    state = AdamState(lr=cfg.lr)
    valid_pairs = coclick_validation_pairs(valid_groups, cfg.seed) if valid_groups else []

    def valid_loss() -> float:
        return coclick_eval_loss(encoder, valid_pairs, cfg.batch_size, cfg.nce_candidates)

    v0 = valid_loss()
    curve = [CurvePoint(0, float("nan"), v0)]
    stopper = _Stopper(encoder, cfg.patience)
    stopper.update(encoder, v0)
    running, n_running, step = 0.0, 0, 0
    stop = cfg.max_steps == 0
    for _epoch in range(cfg.max_epochs):
        if stop:
            break
        pairs = sample_pairs(train_groups, rng, cfg.pairs_per_group)
        order = rng.permutation(len(pairs))
        pairs = [pairs[i] for i in order]
        for batch in _batched(pairs, cfg.batch_size):
            if not _usable_coclick(batch):
                continue

            def loss_fn(params, batch=batch):
                return coclick_batch_loss(encoder, params, batch, cfg.nce_candidates, dropout), len(batch)

            running += _apply_step(encoder, loss_fn, state, cfg)
            n_running += 1
            step += 1
            if step % cfg.eval_every == 0:
                v = valid_loss()
                curve.append(CurvePoint(step, running / n_running, v))
                log.info("phase1 step=%d train=%.5f valid=%.5f", step, running / n_running, v)
                running, n_running = 0.0, 0
                if stopper.update(encoder, v):
                    stop = True
                    break
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
                break
    if n_running:
        v = valid_loss()
        curve.append(CurvePoint(step, running / n_running, v))
        stopper.update(encoder, v)
    encoder.params = stopper.best_params
    return TrainResult(encoder, curve, step, stopper.best)


def train_phase2(encoder: GenEncoder, coclick_groups: Sequence[CoClickGroup],
                 query_paraphrases: Sequence[ParaphraseExample],
                 question_paraphrases: Sequence[ParaphraseExample],
                 config: TrainConfig | None = None,
                 valid: dict[str, Sequence] | None = None) -> TrainResult:
    """Multi-task fine-tuning: co-click + query paraphrase + question paraphrase.

    Every mini-batch is a random mix of the active tasks' examples and the
    objective is the unweighted sum of the task losses. ``valid`` maps task
    names to validation data (co-click groups or paraphrase examples); by
    default a slice of each training set is held out.
    """
    cfg = config or TrainConfig()
    tasks = tuple(cfg.tasks)
    if not tasks or any(t not in TASK_NAMES for t in tasks):
        raise ValueError(f"tasks must be a non-empty subset of {TASK_NAMES}, got {tasks}")
    data = {"coclick": list(coclick_groups), "query": list(query_paraphrases),
            "question": list(question_paraphrases)}
    for t in tasks:
        if not data[t]:
            raise ValueError(f"phase-2 dataset for task {t!r} is empty")
    encoder = encoder.copy()
    if valid is None:
        valid = {}
        for t in tasks:
            if t == "coclick":
                data[t], valid[t] = split_groups(data[t], cfg.valid_fraction, cfg.seed)
            else:
                rng_v = np.random.default_rng([cfg.seed, 14, TASK_NAMES.index(t)])
                order = rng_v.permutation(len(data[t]))
                n_valid = max(1, int(round(cfg.valid_fraction * len(order))))
                valid[t] = [data[t][i] for i in sorted(order[:n_valid])]
                data[t] = [data[t][i] for i in sorted(order[n_valid:])]
    valid_pairs = coclick_validation_pairs(valid.get("coclick", []), cfg.seed) if "coclick" in tasks else []

    def valid_loss() -> float:
        total = 0.0
        for t in tasks:
            if t == "coclick":
                total += coclick_eval_loss(encoder, valid_pairs, cfg.batch_size, cfg.nce_candidates)
            else:
                total += paraphrase_eval_loss(encoder, list(valid.get(t, [])))
        return total

    rng = np.random.default_rng([cfg.seed, 15])
    dropout = (cfg.word_dropout, np.random.default_rng([cfg.seed, 17]))
    state = AdamState(lr=cfg.lr)
    v0 = valid_loss()
    curve = [CurvePoint(0, float("nan"), v0)]
    stopper = _Stopper(encoder, cfg.patience)
    stopper.update(encoder, v0)
    running, n_running, step = 0.0, 0, 0
    stop = cfg.max_steps == 0
    for _epoch in range(cfg.max_epochs):
        if stop:
            break
        items: list[tuple[str, object]] = []
        if "coclick" in tasks:
            items += [("coclick", p) for p in sample_pairs(data["coclick"], rng, cfg.pairs_per_group)]
        for t in ("query", "question"):
            if t in tasks:
                items += [(t, e) for e in data[t]]
        order = rng.permutation(len(items))
        items = [items[i] for i in order]
        for batch in _batched(items, cfg.batch_size):

            def loss_fn(params, batch=batch):
                terms = []
                n = 0
                pairs = [x for t, x in batch if t == "coclick"]
                if pairs and _usable_coclick(pairs):
                    terms.append(coclick_batch_loss(encoder, params, pairs, cfg.nce_candidates, dropout))
                    n += len(pairs)
                for t in ("query", "question"):
                    ex = [x for tt, x in batch if tt == t]
                    if ex:
                        terms.append(paraphrase_batch_loss(encoder, params, ex, dropout))
                        n += len(ex)
                total = terms[0]
                for term in terms[1:]:
                    total = total + term
                return total, n

            if not any(t != "coclick" for t, _ in batch) and not _usable_coclick([x for _, x in batch]):
                continue
            running += _apply_step(encoder, loss_fn, state, cfg)
            n_running += 1
            step += 1
            if step % cfg.eval_every == 0:
                v = valid_loss()
                curve.append(CurvePoint(step, running / n_running, v))
                log.info("phase2 step=%d train=%.5f valid=%.5f", step, running / n_running, v)
                running, n_running = 0.0, 0
                if stopper.update(encoder, v):
                    stop = True
                    break
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
                break
    if n_running:
        v = valid_loss()
        curve.append(CurvePoint(step, running / n_running, v))
        stopper.update(encoder, v)
    encoder.params = stopper.best_params
    return TrainResult(encoder, curve, step, stopper.best)
