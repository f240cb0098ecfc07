"""
What encodings say about search sessions
========================================

Users reformulate. Consecutive queries in a session are usually closer
in intent than two queries picked from different sessions, and the kind
of reformulation (changing topic, exploring a sibling, narrowing,
rephrasing) should line up with encoding similarity.
"""

# %%
import logging


from gen_encoder.data import CATEGORY_NAMES, build_coclick_groups, generate_corpus, generate_sessions
from gen_encoder.evaluation import gen_scorer, random_scorer
from gen_encoder.session import (RANDOM, category_correlation, distance_distributions, format_correlations,
                                 histogram_mean, segment_sessions)
from gen_encoder.training import TrainConfig, train_phase1

logging.basicConfig(level=logging.WARNING)

corpus = generate_corpus(K=40, seed=3, n_query_paraphrases=400, n_question_paraphrases=200)
extra = [t for p in corpus.paraphrases["train"] for t in (p.text_a, p.text_b)]
encoder = train_phase1(build_coclick_groups(corpus.clicks),
                       TrainConfig(lr=1e-3, batch_size=32, eval_every=50, patience=4, max_steps=600),
                       extra_vocab_texts=extra).encoder

# %%
# Segmenting
# ----------
# A silence of thirty minutes or more ends a session. Sessions need three
# distinct queries and at least one click.

records, labeled = generate_sessions(corpus.world, n_users=60, sessions_per_user=4, seed=3)
sessions = segment_sessions(records)
print(len(records), "records ->", len(sessions), "sessions")
print("first session:", " | ".join(sessions[0].queries))

# %%
# Similarity by distance within the session
# -----------------------------------------
# Mean cosine of query pairs one, two and three steps apart, against
# a random cross-session baseline.

hists = distance_distributions(sessions, gen_scorer(encoder), seed=0)
for label, rows in hists.items():
    print(f"{str(label):>7}  pairs {sum(c for *_, c in rows):4d}  mean cosine {histogram_mean(rows):+.3f}")

# %%
# Reformulation categories
# ------------------------
# Categories are ordered by how much intent they keep:
# TopicChange < Explore < Specify < Paraphrase.

print({k: v for k, v in CATEGORY_NAMES.items()})
print("GEN")
print(format_correlations(category_correlation(labeled, gen_scorer(encoder))), end="")
print("random scorer")
print(format_correlations(category_correlation(labeled, random_scorer(0))), end="")
