"""
Gradients by tape, then a first encoding
========================================

The encoder is built on a small reverse-mode engine over float64 numpy
arrays. This script records a tiny computation, pulls gradients back
through it, checks them against finite differences, and then encodes a
handful of queries with an untrained model.
"""

# %%
# A recorded computation
# ----------------------
# ``nx.parameter`` marks an array as something we want gradients for.
# Anything computed inside a ``Tape`` block is recorded.

import numpy as np

from gen_encoder import numerics as nx

w = nx.parameter(np.array([[0.5, -1.0], [2.0, 0.25]]), name="w")
x = nx.Tensor(np.array([[1.0, 2.0]]))
with nx.Tape() as tape:
    loss = nx.sum_all(nx.tanh(x @ w))
grads = tape.backward(loss, {"w": w})
print("loss", float(loss.data))
print("dloss/dw\n", grads["w"])

# %%
# Central differences agree to about 1e-10 here.


w_probe = w.data.copy()


def f():
    with nx.no_tape():
        return float(nx.sum_all(nx.tanh(x @ nx.Tensor(w_probe))).data)


numeric = nx.numerical_gradient(f, w_probe)
print("max abs difference", np.abs(numeric - grads["w"]).max())

# %%
# An untrained encoder
# --------------------
# Queries are tokenized, mapped through a word path and a character CNN,
# read by a bidirectional GRU and mixed with the mean term vector. The
# desk-size configuration gives 144-dimensional encodings.

from gen_encoder.encoder import EncoderConfig, GenEncoder, Vocabulary, tokenize

known = ["cheap flights to paris", "paris flights", "chocolate cake recipe"]
vocab = Vocabulary.build([tokenize(q) for q in known])
queries = known + ["chocolat cake"]
encoder = GenEncoder(vocab, EncoderConfig(), seed=0)
E = encoder.encode_batch(queries)
print("encoding shape", E.shape)

unit = E / np.linalg.norm(E, axis=1, keepdims=True)
print(np.round(unit @ unit.T, 3))

# %%
# The misspelled ``chocolat`` is out of vocabulary. Its word slot is the
# shared OOV row, so only the character path tells it apart from any other
# unknown word. Training with word dropout teaches that path to carry
# identity; see the next demo.
print("word id of 'chocolat':", vocab.word_id("chocolat"), "(OOV)")
