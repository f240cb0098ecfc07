"""
Neighbours for rare queries
===========================

Most distinct queries in a log are rare. An approximate-neighbour index
over query encodings lets a rare query borrow the counts of its close
neighbours. This script trains a small model, indexes every query seen in
a Zipfian log, and looks at what the neighbours buy us per frequency tier.
"""

# %%
import logging

from gen_encoder.ann import build_index, format_bins, frequency_bins, neighbor_lists, tail_stats, tier_of
from gen_encoder.data import build_coclick_groups, generate_corpus, generate_query_log
from gen_encoder.training import TrainConfig, train_phase1

logging.basicConfig(level=logging.WARNING)

corpus = generate_corpus(K=40, seed=2, n_query_paraphrases=400, n_question_paraphrases=200)
extra = [t for p in corpus.paraphrases["train"] for t in (p.text_a, p.text_b)]
encoder = train_phase1(build_coclick_groups(corpus.clicks),
                       TrainConfig(lr=1e-3, batch_size=32, eval_every=50, patience=4, max_steps=600),
                       extra_vocab_texts=extra).encoder

# %%
# The log
# -------
# Past traffic gives a frequency table; a later stream gives the sample we
# want frequencies for. Typos and narrowing words make many sampled
# queries unseen.

qlog = generate_query_log(corpus.world, past_events=100_000, sample_events=20_000, sample_size=1000, seed=2)
names = sorted(qlog.frequency)
tiers = [tier_of(qlog.frequency.get(q, 0)) for q in qlog.sample]
print(len(names), "distinct past queries;", {t: tiers.count(t) for t in ("head", "torso", "tail")})

# %%
# Index and probe
# ---------------
# The probe itself is excluded when it is already indexed.

index = build_index(encoder.encode_batch(names), m=16, ef_construction=200, seed=0)
probes = encoder.encode_batch(qlog.sample)
position = {q: i for i, q in enumerate(names)}
self_ids = [position.get(q) for q in qlog.sample]

q = next(q for q in qlog.sample if q not in position)
print("unseen probe:", q)
for hit in index.search(encoder.encode(q), k=5, radius=0.15):
    print(f"   {hit.distance:.3f}  {names[hit.query_id]}")

# %%
# Per-tier coverage and intent agreement
# --------------------------------------
# Shrinking the radius returns fewer neighbours that agree more often.
# With only 100k past events no query passes the head threshold, so that
# tier is empty here.

print("tier\tradius\tn\tcoverage\tmean_neighbors\tco_intent")
for row in tail_stats(qlog.sample, probes, index, names, qlog.frequency, corpus.world.intent_of):
    print(row.as_tsv())

# %%
# Frequency augmentation
# ----------------------
# ``-inf`` is the unseen bin. Adding neighbour counts empties most of it.

lists = neighbor_lists(index, probes, self_ids, k=10, radius=0.15)
print(format_bins(frequency_bins(qlog.sample, qlog.frequency, None, names), "none"), end="")
print(format_bins(frequency_bins(qlog.sample, qlog.frequency, lists, names, 0.15), "0.15"), end="")
