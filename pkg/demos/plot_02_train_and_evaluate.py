"""
Training on a synthetic click log
=================================

A synthetic world hides a latent intent behind every query. Queries that
lead to the same clicked URL form co-click groups; those groups are the
only training signal in phase 1. Phase 2 adds labelled paraphrase pairs.
Because the world knows every query's intent, we can score the result
with graded judgments it generates itself.
"""

# %%
# Generate a world
# ----------------
# Forty intents keep the run short.

import logging

import numpy as np

from gen_encoder.data import build_coclick_groups, generate_corpus, group_judgments
from gen_encoder.evaluation import TfIdfModel, auc, evaluate, gen_scorer, tfidf_scorer
from gen_encoder.training import TrainConfig, train_phase1, train_phase2

logging.basicConfig(level=logging.WARNING)

corpus = generate_corpus(K=40, queries_per_intent=10, seed=1, n_query_paraphrases=800, n_question_paraphrases=400)
groups = build_coclick_groups(corpus.clicks)
print(len(corpus.clicks), "clicks ->", len(groups), "co-click groups")
print("example group:", groups[0].queries)

# %%
# Phase 1
# -------
# Each step draws anchor/positive pairs from distinct groups. The negative
# for an anchor is the most similar in-batch query from another group.

cfg = TrainConfig(lr=1e-3, batch_size=32, eval_every=50, patience=4, max_steps=600, seed=0)
extra = [t for p in corpus.paraphrases["train"] for t in (p.text_a, p.text_b)]
p1 = train_phase1(groups, cfg, extra_vocab_texts=extra)
for point in p1.curve[:: max(1, len(p1.curve) // 6)]:
    print(f"step {point.step:4d}  valid {point.valid_loss:+.4f}")

# %%
# Ranking against TF-IDF
# ----------------------
# Good candidates share the target's intent but often none of its words.
# Bag-of-words cannot see that; the encoder can.

ranking = group_judgments(corpus.judgments)
idf = TfIdfModel.fit([r.query for r in corpus.clicks])
report = evaluate(gen_scorer(p1.encoder), ranking, corpus.classification, against=tfidf_scorer(idf),
                  iterations=20_000)
print(report.to_tsv())

# %%
# Phase 2
# -------
# Fine-tuning on paraphrase labels sharpens the boundary between a true
# rewrite and a query that merely adds a narrowing word.

train = corpus.paraphrases["train"]
p2 = train_phase2(p1.encoder, groups, [p for p in train if p.task == "query"],
                  [p for p in train if p.task == "question"],
                  TrainConfig(lr=1e-3, batch_size=32, eval_every=25, patience=3, max_steps=300, seed=0))


def paraphrase_auc(encoder):
    test = corpus.paraphrases["test"]
    s = gen_scorer(encoder)([(p.text_a, p.text_b) for p in test])
    y = np.array([p.label for p in test])
    return auc(s[y == 1], s[y == -1])


print(f"paraphrase AUC  phase 1 {paraphrase_auc(p1.encoder):.3f}  phase 2 {paraphrase_auc(p2.encoder):.3f}")
