"""Command-line entry point: ``gen-encoder <command> ...``.

Every command accepts ``--config FILE`` (key = value lines); flags given on
the command line win over file values. Logs go to stderr as one JSON object
per line with a stable ``event`` field; a failure ends with an ``error``
event and a nonzero exit status.
"""
from __future__ import annotations

import argparse
import json
import logging
import struct
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as D
from .ann import DEFAULT_RADII, AnnIndex, build_index, format_bins, frequency_bins, neighbor_lists, tail_stats
from .encoder import GenEncoder
from .evaluation import EvalReport, TfIdfModel, evaluate, format_histogram, gen_scorer, histogram, random_scorer, tfidf_scorer
from .io import atomic_write_bytes, atomic_write_text, load_config, parse_config
from .session import (category_correlation, distance_distributions, format_correlations, format_distributions,
                      read_sessions, segment_sessions, write_sessions)
from .training import TrainConfig, split_groups, train_phase1, train_phase2, write_curve

log = logging.getLogger("gen_encoder.cli")

ENCODING_HEADER = struct.Struct("<II")  # count, dim
EVAL_KEYS = ("judgments", "classification", "test_paraphrases", "eval_data")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        out = {"event": getattr(record, "event", "log"), "level": record.levelname.lower(),
               "logger": record.name, "time": round(record.created, 3)}
        out.update(getattr(record, "fields", {}))
        if not hasattr(record, "event") or record.args:
            out["message"] = record.getMessage()
        return json.dumps(out, sort_keys=False)


def emit(event: str, **values) -> None:
    log.info(event, extra={"event": event, "fields": values})


# --- encodings file ------------------------------------------------------


def write_encodings(path, matrix: np.ndarray, queries) -> Path:
    """Binary (count, dim) header + float32 rows; ids go to ``<path>.ids.tsv``."""
    matrix = np.asarray(matrix)
    blob = ENCODING_HEADER.pack(*matrix.shape) + matrix.astype("<f4").tobytes()
    atomic_write_bytes(path, blob)
    ids_path = Path(str(path) + ".ids.tsv")
    atomic_write_text(ids_path, "".join(f"{i}\t{q}\n" for i, q in enumerate(queries)))
    return ids_path


def read_encodings(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < ENCODING_HEADER.size:
        raise CliError("format", f"{path}: too short for an encodings file")
    count, dim = ENCODING_HEADER.unpack_from(blob)
    if len(blob) != ENCODING_HEADER.size + 4 * count * dim:
        raise CliError("format", f"{path}: size does not match header ({count} x {dim})")
    return np.frombuffer(blob, dtype="<f4", offset=ENCODING_HEADER.size).reshape(count, dim).astype(np.float64)


def read_id_map(path) -> list[str]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            idx, query = line.rstrip("\n").split("\t", 1)
            if int(idx) != len(out):
                raise CliError("format", f"{path}:{lineno}: ids must be 0..n-1 in order")
            out.append(query)
    return out


# --- config resolution -----------------------------------------------------


def resolve(args: argparse.Namespace, allowed: set[str]) -> dict:
    """Config-file values overlaid by explicitly given flags and ``--set`` pairs."""
    values = load_config(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError("usage", f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values.update(parse_config(f"{key} = {raw}"))
    for key, value in vars(args).items():
        if key in ("config", "set", "func", "command", "verb") or value is None:
            continue
        values[key] = value
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise CliError("config", f"unknown configuration keys: {', '.join(unknown)}")
    return values


def need(values: dict, key: str):
    if values.get(key) in (None, ""):
        raise CliError("usage", f"missing required setting '{key}' (flag --{key.replace('_', '-')})")
    return values[key]


def load_model(path) -> GenEncoder:
    return GenEncoder.load(path)


# --- commands -----------------------------------------------------------------

GEN_KEYS = {"seed", "out", "K", "queries_per_intent", "noise_rate", "query_paraphrases", "question_paraphrases",
            "users", "sessions_per_user", "log_events", "sample_events", "sample_size", "zipf_exponent"}


def cmd_gen_data(args) -> None:
    v = resolve(args, GEN_KEYS)
    seed = int(v["seed"])
    out = Path(need(v, "out"))
    corpus = D.generate_corpus(int(v.get("K", 200)), int(v.get("queries_per_intent", 10)), seed,
                               float(v.get("noise_rate", 0.05)), int(v.get("query_paraphrases", 4000)),
                               int(v.get("question_paraphrases", 2000)))
    world = corpus.world
    D.write_clicks(out / "clicks.tsv", corpus.clicks, seed)
    groups = D.build_coclick_groups(corpus.clicks)
    D.write_groups(out / "groups.tsv", groups, seed)
    D.write_judgments(out / "judgments.tsv", corpus.judgments, seed)
    for split, rows in corpus.paraphrases.items():
        D.write_paraphrase_pairs(out / f"paraphrases.{split}.tsv", rows, seed)
    records, labeled = D.generate_sessions(world, int(v.get("users", 100)), int(v.get("sessions_per_user", 5)), seed)
    D.write_clicks(out / "session_clicks.tsv", records, seed)
    D.write_labeled_pairs(out / "session_pairs.tsv", labeled, seed)
    qlog = D.generate_query_log(world, int(v.get("log_events", 300_000)), int(v.get("sample_events", 40_000)),
                                int(v.get("sample_size", 2000)), float(v.get("zipf_exponent", 1.2)), seed)
    D.write_counts(out / "frequency.tsv", qlog.frequency, seed)
    D.write_queries(out / "log_queries.tsv", sorted(qlog.frequency), seed)
    D.write_queries(out / "sample.tsv", qlog.sample, seed)
    D.write_counts(out / "intents.tsv", world.query_intent, seed)
    emit("gen_data.done", out=str(out), clicks=len(corpus.clicks), groups=len(groups),
         judgments=len(corpus.judgments), sessions_records=len(records), log_queries=len(qlog.frequency))


TRAIN_KEYS = {f.name for f in fields(TrainConfig)} | {
    "phase", "output", "groups", "clicks", "paraphrases", "valid_paraphrases", "vocab_texts", "init", "curve",
} | set(EVAL_KEYS)


def _reject_eval_inputs(v: dict) -> None:
    for key in EVAL_KEYS:
        if v.get(key):
            raise CliError("config", f"'{key}' is an evaluation dataset and may not be read by train")
    for key in ("groups", "clicks", "paraphrases", "valid_paraphrases", "vocab_texts"):
        paths = v.get(key) or []
        for p in [paths] if isinstance(paths, str) else paths:
            name = Path(p).name
            if "judgment" in name or ".test." in name:
                raise CliError("config", f"{key}={p} looks like an evaluation dataset; train refuses it")


def _train_groups(v: dict):
    if v.get("groups"):
        return D.load_groups(v["groups"])
    if v.get("clicks"):
        return D.build_coclick_groups(D.load_clicks(v["clicks"]))
    raise CliError("usage", "train needs --groups or --clicks")


def cmd_train(args) -> None:
    v = resolve(args, TRAIN_KEYS)
    _reject_eval_inputs(v)
    cfg = TrainConfig.from_dict(v)
    output = need(v, "output")
    groups = _train_groups(v)
    started = time.time()
    if int(v["phase"]) == 1:
        extra = []
        vocab_paths = v.get("vocab_texts") or []
        for p in [vocab_paths] if isinstance(vocab_paths, str) else vocab_paths:
            extra += [t for e in D.load_paraphrase_pairs(p) for t in (e.text_a, e.text_b)]
        if v.get("init"):
            raise CliError("config", "phase 1 starts from scratch; 'init' is only valid for phase 2")
        result = train_phase1(groups, cfg, extra_vocab_texts=extra)
    else:
        encoder = load_model(need(v, "init"))
        para = D.load_paraphrase_pairs(need(v, "paraphrases"))
        valid = None
        if v.get("valid_paraphrases"):
            vp = D.load_paraphrase_pairs(v["valid_paraphrases"])
            groups, valid_groups = split_groups(groups, cfg.valid_fraction, cfg.seed)
            valid = {"coclick": valid_groups, "query": [e for e in vp if e.task == "query"],
                     "question": [e for e in vp if e.task == "question"]}
        result = train_phase2(encoder, groups, [e for e in para if e.task == "query"],
                              [e for e in para if e.task == "question"], cfg, valid)
    result.encoder.save(output)
    if v.get("curve"):
        write_curve(v["curve"], result.curve)
    emit("train.done", phase=int(v["phase"]), steps=result.steps, best_valid=result.best_valid,
         seconds=round(time.time() - started, 2), output=str(output))


ENCODE_KEYS = {"model", "input", "output", "batch_size"}


def cmd_encode(args) -> None:
    v = resolve(args, ENCODE_KEYS)
    encoder = load_model(need(v, "model"))
    queries = D.load_queries(need(v, "input"))
    matrix = encoder.encode_batch(queries, int(v.get("batch_size", 512)))
    ids = write_encodings(need(v, "output"), matrix, queries)
    emit("encode.done", count=len(queries), dim=encoder.dim, output=str(v["output"]), ids=str(ids))


EVAL_CMD_KEYS = {"model", "against", "checkpoint", "judgments", "paraphrases", "idf_corpus", "output",
                 "iterations", "seed", "histogram"}


def _scorer(kind: str, v: dict):
    if kind == "gen":
        return gen_scorer(load_model(need(v, "checkpoint")))
    if kind == "tfidf":
        return tfidf_scorer(TfIdfModel.fit(D.load_queries(need(v, "idf_corpus"))))
    if kind == "random":
        return random_scorer(int(v.get("seed", 0)))
    raise CliError("usage", f"unknown model {kind!r}; expected gen, tfidf or random")


def cmd_eval(args) -> None:
    v = resolve(args, EVAL_CMD_KEYS)
    score = _scorer(v.get("model", "gen"), v)
    against = _scorer(v["against"], v) if v.get("against") else None
    iterations, seed = int(v.get("iterations", 100_000)), int(v.get("seed", 0))
    report = EvalReport()
    hist_text = ""
    if v.get("judgments"):
        judgments = D.load_judgments(v["judgments"])
        part = evaluate(score, D.group_judgments(judgments), D.judgments_to_classification(judgments), against,
                        "judgments", iterations, seed)
        report.rows += part.rows
        report.p_values.update(part.p_values)
        if v.get("histogram"):
            sims = score([(j.target, j.candidate) for j in judgments])
            for grade in D.GRADES:
                hist_text += format_histogram(histogram([s for s, j in zip(sims, judgments) if j.grade == grade]),
                                              grade)
    if v.get("paraphrases"):
        para = D.load_paraphrase_pairs(v["paraphrases"])
        for task in D.TASKS:
            rows = [(e.text_a, e.text_b, e.label) for e in para if e.task == task]
            if rows:
                part = evaluate(score, None, rows, against, f"{task}_paraphrase", iterations, seed)
                report.rows += part.rows
    if not report.rows:
        raise CliError("usage", "eval needs --judgments and/or --paraphrases")
    if v.get("output"):
        report.write(v["output"])
    else:
        sys.stdout.write(report.to_tsv())
    if hist_text:
        atomic_write_text(v["histogram"], "label\tbin_low\tbin_high\tcount\n" + hist_text)
    emit("eval.done", rows=len(report.rows), **{f"{r.dataset}.{r.metric}": round(r.value, 6) for r in report.rows})


ANN_KEYS = {"encodings", "output", "m", "ef_construction", "ef_search", "seed", "index", "model", "query", "ids",
            "k", "radius", "sample", "frequency", "intents", "radii", "penalty", "histogram"}


def cmd_ann_build(args) -> None:
    v = resolve(args, ANN_KEYS)
    x = read_encodings(need(v, "encodings"))
    started = time.time()
    index = build_index(x, m=int(v.get("m", 16)), ef_construction=int(v.get("ef_construction", 200)),
                        ef_search=int(v.get("ef_search", 64)), seed=int(v.get("seed", 0)))
    index.save(need(v, "output"))
    emit("ann_build.done", count=len(index), dim=index.dim, levels=index.max_level + 1,
         seconds=round(time.time() - started, 2), output=str(v["output"]))


def cmd_ann_query(args) -> None:
    v = resolve(args, ANN_KEYS)
    index = AnnIndex.load(need(v, "index"))
    encoder = load_model(need(v, "model"))
    names = read_id_map(v["ids"]) if v.get("ids") else None
    query = need(v, "query")
    self_id = names.index(query) if names and query in names else None
    hits = index.search(encoder.encode(query), int(v.get("k", 10)), float(v.get("radius", 2.0)), self_id)
    lines = ["rank\tid\tdistance\tquery"]
    for r, h in enumerate(hits, 1):
        lines.append(f"{r}\t{h.query_id}\t{h.distance:.6f}\t{names[h.query_id] if names else ''}")
    text = "\n".join(lines) + "\n"
    if v.get("output"):
        atomic_write_text(v["output"], text)
    else:
        sys.stdout.write(text)


def _parse_penalty(raw) -> dict:
    if raw is None:
        return {"head": 1.0, "torso": 1.0, "tail": 0.47}
    if isinstance(raw, (int, float)):
        return {t: float(raw) for t in ("head", "torso", "tail")}
    out = {"head": 1.0, "torso": 1.0, "tail": 1.0}
    for part in str(raw).split(","):
        tier, _, value = part.partition("=")
        if tier.strip() not in out:
            raise CliError("usage", f"bad penalty entry {part!r}; use head=..,torso=..,tail=..")
        out[tier.strip()] = float(value)
    return out


def cmd_ann_tail_stats(args) -> None:
    v = resolve(args, ANN_KEYS)
    index = AnnIndex.load(need(v, "index"))
    encoder = load_model(need(v, "model"))
    names = read_id_map(need(v, "ids"))
    if len(names) != len(index):
        raise CliError("format", f"id map has {len(names)} entries, index has {len(index)}")
    sample = D.load_queries(need(v, "sample"))
    frequency = D.load_counts(need(v, "frequency"))
    intents = D.load_counts(need(v, "intents"))
    radii = v.get("radii", DEFAULT_RADII)
    radii = tuple(float(r) for r in (radii.split(",") if isinstance(radii, str) else radii))
    k = int(v.get("k", 10))
    enc = encoder.encode_batch(sample)

    def intent_of(q):
        if q not in intents:
            raise CliError("format", f"query {q!r} has no entry in the intent oracle")
        return intents[q]

    rows = tail_stats(sample, enc, index, names, frequency, intent_of, radii, k)
    text = "tier\tradius\tn\tcoverage\tmean_neighbors\tco_intent\n" + "".join(r.as_tsv() + "\n" for r in rows)
    atomic_write_text(need(v, "output"), text)
    if v.get("histogram"):
        penalty = _parse_penalty(v.get("penalty"))
        position = {q: i for i, q in enumerate(names)}
        nb = neighbor_lists(index, enc, [position.get(q) for q in sample], k, max(radii))
        hist = format_bins(frequency_bins(sample, frequency, None, names), "none")
        for r in radii:
            hist += format_bins(frequency_bins(sample, frequency, nb, names, r, penalty), f"{r:.2f}")
        atomic_write_text(v["histogram"], "radius\tlog2_bin\tfraction\n" + hist)
    emit("tail_stats.done", samples=len(sample), output=str(v["output"]))


SESSION_KEYS = {"clicks", "output", "gap", "sessions", "scorer", "checkpoint", "idf_corpus", "bins", "seed",
                "pairs"}


def cmd_session_segment(args) -> None:
    v = resolve(args, SESSION_KEYS)
    sessions = segment_sessions(D.load_clicks(need(v, "clicks")), int(v.get("gap", 1800)))
    write_sessions(need(v, "output"), sessions)
    emit("session_segment.done", sessions=len(sessions), output=str(v["output"]))


def cmd_session_histogram(args) -> None:
    v = resolve(args, SESSION_KEYS)
    sessions = read_sessions(need(v, "sessions"))
    hists = distance_distributions(sessions, _scorer(v.get("scorer", "gen"), v), bins=int(v.get("bins", 20)),
                                   seed=int(v.get("seed", 0)))
    atomic_write_text(need(v, "output"), format_distributions(hists))
    emit("session_histogram.done", sessions=len(sessions), output=str(v["output"]))


def cmd_session_correlate(args) -> None:
    v = resolve(args, SESSION_KEYS)
    pairs = D.load_labeled_pairs(need(v, "pairs"))
    rows = category_correlation(pairs, _scorer(v.get("scorer", "gen"), v))
    atomic_write_text(need(v, "output"), format_correlations(rows))
    emit("session_correlate.done", **{r.subset: round(r.rho, 6) for r in rows})


# --- parser ---------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gen-encoder", description="GEN query-intent encoder toolkit")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic world's datasets")
    _common(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")
    p.add_argument("--K", type=int)
    p.add_argument("--queries-per-intent", type=int)
    p.add_argument("--noise-rate", type=float)
    p.add_argument("--users", type=int)
    p.add_argument("--log-events", type=int)
    p.add_argument("--sample-size", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="phase-1 co-click training or phase-2 multi-task fine-tuning")
    _common(p)
    p.add_argument("--phase", type=int, choices=(1, 2), required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--output")
    p.add_argument("--groups")
    p.add_argument("--clicks")
    p.add_argument("--paraphrases")
    p.add_argument("--valid-paraphrases")
    p.add_argument("--vocab-texts", nargs="*")
    p.add_argument("--init")
    p.add_argument("--curve")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--eval-every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode queries to a float32 matrix")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval", help="NDCG / AUC report with optional significance test")
    _common(p)
    p.add_argument("--model", choices=("gen", "tfidf", "random"))
    p.add_argument("--against", choices=("gen", "tfidf", "random"))
    p.add_argument("--checkpoint")
    p.add_argument("--judgments")
    p.add_argument("--paraphrases")
    p.add_argument("--idf-corpus")
    p.add_argument("--output")
    p.add_argument("--histogram")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ann", help="approximate-neighbour index")
    verbs = p.add_subparsers(dest="verb", required=True)
    b = verbs.add_parser("build")
    _common(b)
    b.add_argument("--encodings")
    b.add_argument("--output")
    b.add_argument("--m", type=int)
    b.add_argument("--ef-construction", type=int)
    b.add_argument("--ef-search", type=int)
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_ann_build)
    q = verbs.add_parser("query")
    _common(q)
    for flag in ("--index", "--model", "--query", "--ids", "--output"):
        q.add_argument(flag)
    q.add_argument("--k", type=int)
    q.add_argument("--radius", type=float)
    q.set_defaults(func=cmd_ann_query)
    t = verbs.add_parser("tail-stats")
    _common(t)
    for flag in ("--index", "--model", "--ids", "--sample", "--frequency", "--intents", "--output", "--radii",
                 "--penalty", "--histogram"):
        t.add_argument(flag)
    t.add_argument("--k", type=int)
    t.set_defaults(func=cmd_ann_tail_stats)

    p = sub.add_parser("session", help="session segmentation and reformulation analyses")
    verbs = p.add_subparsers(dest="verb", required=True)
    s = verbs.add_parser("segment")
    _common(s)
    s.add_argument("--clicks")
    s.add_argument("--output")
    s.add_argument("--gap", type=int)
    s.set_defaults(func=cmd_session_segment)
    for name, func, inputs in (("histogram", cmd_session_histogram, ("--sessions",)),
                               ("correlate", cmd_session_correlate, ("--pairs",))):
        s = verbs.add_parser(name)
        _common(s)
        for flag in (*inputs, "--checkpoint", "--idf-corpus", "--output"):
            s.add_argument(flag)
        s.add_argument("--scorer", choices=("gen", "tfidf", "random"))
        if name == "histogram":
            s.add_argument("--bins", type=int)
            s.add_argument("--seed", type=int)
        s.set_defaults(func=func)
    return parser


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger("gen_encoder")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    del args.log_level
    try:
        args.func(args)
    except CliError as exc:
        _error(exc.kind, str(exc))
        return 2 if exc.kind in ("usage", "config") else 1
    except (OSError, ValueError, KeyError) as exc:
        _error(type(exc).__name__, str(exc))
        return 1
    return 0


def _error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"event": "error", "kind": kind, "message": message}) + "\n")


if __name__ == "__main__":
    raise SystemExit(main())
