"""The GEN query encoder: term embeddings, character CNN and the mix encoder.

A query is tokenized, every distinct term is embedded once (word highway
path concatenated with a character-CNN highway path), the padded term
sequence is read by a bi-directional GRU, and the two final GRU states are
joined with the mean term vector and passed through a tanh residual layer.
"""
from __future__ import annotations

import struct
import unicodedata
from collections import Counter
from dataclasses import dataclass, asdict
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

PAD_ID, OOV_ID = 0, 1
PAD_CHAR, UNK_CHAR = 0, 1

CHECKPOINT_MAGIC = b"GENENC\x00\x01"
CHECKPOINT_VERSION = 1


class EmptyQueryError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _strip_punct(token: str) -> str:
    lo, hi = 0, len(token)
    while lo < hi and unicodedata.category(token[lo]).startswith("P"):
        lo += 1
    while hi > lo and unicodedata.category(token[hi - 1]).startswith("P"):
        hi -= 1
    return token[lo:hi]


def tokenize(raw: str) -> list[str]:
    """Lowercase, split on whitespace, strip punctuation at token edges.

    >>> tokenize("Horse Racing")
    ['horse', 'racing']
    """
    tokens = [_strip_punct(t) for t in raw.lower().split()]
    tokens = [t for t in tokens if t]
    if not tokens:
        raise EmptyQueryError(f"query is empty after normalization: {raw!r}")
    return tokens


@dataclass(frozen=True)
class EncoderConfig:
    word_dim: int = 32
    char_dim: int = 16
    filters: int = 16
    hidden: int = 48
    window: int = 5
    char_cap: int = 64

    @property
    def term_dim(self) -> int:
        return self.word_dim + self.filters

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden + self.term_dim

    @classmethod
    def paper_scale(cls) -> "EncoderConfig":
        """Dimensions of the full-size model (1324-d output)."""
        return cls(word_dim=200, char_dim=200, filters=100, hidden=512, window=5, char_cap=1000)


class Vocabulary:
    """Word and character id maps with reserved padding/unknown ids."""

    def __init__(self, tokens: Sequence[str], chars: Sequence[str]):
        self.id_to_token = ["<pad>", "<oov>"] + [t for t in tokens if t not in ("<pad>", "<oov>")]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        self.id_to_char = ["\x00", "\x01"] + list(chars)
        self.char_to_id = {c: i for i, c in enumerate(self.id_to_char)}
        if len(self.token_to_id) != len(self.id_to_token) or len(self.char_to_id) != len(self.id_to_char):
            raise ValueError("vocabulary entries must be unique")

    @classmethod
    def build(cls, queries: Iterable[Sequence[str]], min_count: int = 1, max_size: int | None = None,
              char_cap: int = 64) -> "Vocabulary":
        words: Counter[str] = Counter()
        chars: Counter[str] = Counter()
        for toks in queries:
            words.update(toks)
            for t in toks:
                chars.update(t)
        kept = sorted((w for w, c in words.items() if c >= min_count), key=lambda w: (-words[w], w))
        if max_size is not None:
            kept = kept[: max(0, max_size - 2)]
        ch = sorted(chars, key=lambda c: (-chars[c], c))[: max(0, char_cap - 2)]
        return cls(kept, ch)

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def n_chars(self) -> int:
        return len(self.id_to_char)

    def word_id(self, token: str) -> int:
        return self.token_to_id.get(token, OOV_ID)

    def char_ids(self, token: str) -> list[int]:
        return [self.char_to_id.get(c, UNK_CHAR) for c in token]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.id_to_token == other.id_to_token
            and self.id_to_char == other.id_to_char
        )


def param_shapes(cfg: EncoderConfig, n_words: int, n_chars: int) -> dict[str, tuple[int, ...]]:
    """Every learnable array, in checkpoint order."""
    d, f, h, t = cfg.word_dim, cfg.filters, cfg.hidden, cfg.term_dim
    shapes: dict[str, tuple[int, ...]] = {
        "word_emb": (n_words, d),
        "word_gate": (d, d),
        "word_proj": (d, d),
        "char_emb": (n_chars, cfg.char_dim),
        "conv_w": (cfg.window * cfg.char_dim, f),
        "conv_b": (f,),
        "char_gate1": (f, f),
        "char_proj1": (f, f),
        "char_gate2": (f, f),
        "char_proj2": (f, f),
    }
    for direction in ("fwd", "bwd"):
        for gate in ("r", "z", "n"):
            shapes[f"gru_{direction}_W{gate}"] = (t, h)
        for gate in ("r", "z", "n"):
            shapes[f"gru_{direction}_U{gate}"] = (h, h)
        for gate in ("r", "z", "n"):
            shapes[f"gru_{direction}_b{gate}"] = (h,)
    shapes["residual"] = (cfg.output_dim, cfg.output_dim)
    return shapes


def init_params(cfg: EncoderConfig, n_words: int, n_chars: int, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg, n_words, n_chars).items():
        if name in ("word_emb", "char_emb"):
            params[name] = rng.uniform(-0.05, 0.05, size=shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def _highway(x: Tensor, gate_w: Tensor, proj_w: Tensor) -> Tensor:
    gate = nx.sigmoid(x @ gate_w)
    proj = nx.relu(x @ proj_w)
    return gate * proj + nx.one_minus(gate) * x


def _char_windows(char_lists: list[list[int]], window: int) -> tuple[np.ndarray, np.ndarray]:
    """Char-id windows (n, n_windows, window) and their validity mask."""
    width = max(window, max(len(c) for c in char_lists))
    n_win = width - window + 1
    padded = np.full((len(char_lists), width), PAD_CHAR, dtype=np.int64)
    for i, chars in enumerate(char_lists):
        padded[i, : len(chars)] = chars
    offsets = np.arange(n_win)[:, None] + np.arange(window)[None, :]
    windows = padded[:, offsets]
    counts = np.array([max(1, len(c) - window + 1) for c in char_lists])
    mask = np.arange(n_win)[None, :] < counts[:, None]
    return windows, mask


def term_vectors(p: dict[str, Tensor], word_ids: np.ndarray, char_lists: list[list[int]],
                 cfg: EncoderConfig) -> Tensor:
    """(n_terms, term_dim) matrix: word highway path followed by char path."""
    word = _highway(nx.take_rows(p["word_emb"], word_ids), p["word_gate"], p["word_proj"])

    windows, mask = _char_windows(char_lists, cfg.window)
    n, n_win, w = windows.shape
    emb = nx.take_rows(p["char_emb"], windows.reshape(-1))
    emb = nx.reshape(emb, (n * n_win, w * cfg.char_dim))
    conv = nx.tanh(nx.add(emb @ p["conv_w"], p["conv_b"]))
    pooled = nx.max_over_positions(nx.reshape(conv, (n, n_win, cfg.filters)), mask)
    char = _highway(pooled, p["char_gate1"], p["char_proj1"])
    char = _highway(char, p["char_gate2"], p["char_proj2"])
    return nx.concat([word, char], axis=1)


def _gru_final_state(p: dict[str, Tensor], prefix: str, xproj: dict[str, Tensor],
                     steps: list[np.ndarray], masks: list[np.ndarray], batch: int, hidden: int) -> Tensor:
    h = nx.constant(np.zeros((batch, hidden)))
    for rows, m in zip(steps, masks):
        xr, xz, xn = (nx.take_rows(xproj[g], rows) for g in "rzn")
        r = nx.sigmoid(xr + h @ p[f"{prefix}_Ur"])
        z = nx.sigmoid(xz + h @ p[f"{prefix}_Uz"])
        n = nx.tanh(xn + (r * h) @ p[f"{prefix}_Un"])
        h_new = nx.one_minus(z) * n + z * h
        if m.all():
            h = h_new
        else:
            keep = nx.constant(np.repeat(m[:, None], hidden, axis=1).astype(float))
            h = keep * h_new + nx.one_minus(keep) * h
    return h


def encode_tensor(p: dict[str, Tensor], queries: Sequence[Sequence[str]], vocab: Vocabulary,
                  cfg: EncoderConfig, word_dropout: float = 0.0,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Differentiable GEN encodings for a batch of tokenized queries, (B, output_dim).

    With ``word_dropout`` > 0 each distinct token of the batch loses its word
    id (becomes OOV) with that probability, so only its characters remain.
    """
    if not queries:
        raise EmptyQueryError("empty batch")
    for i, q in enumerate(queries):
        if len(q) == 0:
            raise EmptyQueryError(f"query {i} has no tokens")

    unique: dict[str, int] = {}
    for q in queries:
        for tok in q:
            unique.setdefault(tok, len(unique))
    terms_list = list(unique)
    word_ids = np.array([vocab.word_id(t) for t in terms_list], dtype=np.int64)
    if word_dropout > 0.0:
        word_ids[rng.random(len(word_ids)) < word_dropout] = OOV_ID
    char_lists = [vocab.char_ids(t) or [UNK_CHAR] for t in terms_list]
    terms = term_vectors(p, word_ids, char_lists, cfg)

    batch = len(queries)
    lengths = np.array([len(q) for q in queries])
    longest = int(lengths.max())
    pos = np.zeros((batch, longest), dtype=np.int64)
    for b, q in enumerate(queries):
        pos[b, : len(q)] = [unique[t] for t in q]
    valid = np.arange(longest)[None, :] < lengths[:, None]

    h = cfg.hidden
    finals = {}
    for direction in ("fwd", "bwd"):
        prefix = f"gru_{direction}"
        xproj = {g: nx.add(terms @ p[f"{prefix}_W{g}"], p[f"{prefix}_b{g}"]) for g in "rzn"}
        steps, masks = [], []
        for t in range(longest):
            if direction == "fwd":
                idx = np.full(batch, t)
            else:
                idx = np.clip(lengths - 1 - t, 0, None)
            steps.append(pos[np.arange(batch), idx])
            masks.append(valid[:, t])
        finals[direction] = _gru_final_state(p, prefix, xproj, steps, masks, batch, h)

    seq_terms = nx.reshape(nx.take_rows(terms, pos.reshape(-1)), (batch, longest, cfg.term_dim))
    bow = nx.mean_over_positions(seq_terms, valid)
    q_cat = nx.concat([finals["bwd"], finals["fwd"], bow], axis=1)
    return nx.tanh(q_cat + nx.relu(q_cat @ p["residual"]))


class GenEncoder:
    """Vocabulary, dimensions and parameter arrays of one GEN model."""

    def __init__(self, vocab: Vocabulary, config: EncoderConfig | None = None,
                 params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.vocab = vocab
        self.config = config or EncoderConfig()
        if vocab.n_chars > self.config.char_cap:
            raise ValueError(f"character vocabulary {vocab.n_chars} exceeds cap {self.config.char_cap}")
        shapes = param_shapes(self.config, len(vocab), vocab.n_chars)
        if params is None:
            params = init_params(self.config, len(vocab), vocab.n_chars, seed)
        for name, shape in shapes.items():
            if name not in params or params[name].shape != shape:
                got = None if name not in params else params[name].shape
                raise ValueError(f"parameter {name}: expected shape {shape}, got {got}")
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in shapes}

    @property
    def dim(self) -> int:
        return self.config.output_dim

    def copy(self) -> "GenEncoder":
        return GenEncoder(self.vocab, self.config, {k: v.copy() for k, v in self.params.items()})

    def tensors(self, trainable: bool = False) -> dict[str, Tensor]:
        if trainable:
            return {k: nx.parameter(v, name=k) for k, v in self.params.items()}
        return {k: nx.Tensor(v) for k, v in self.params.items()}

    def forward(self, params: dict[str, Tensor], queries: Sequence[Sequence[str]],
                word_dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        return encode_tensor(params, queries, self.vocab, self.config, word_dropout, rng)

    def embed_term(self, token: str) -> np.ndarray:
        with nx.no_tape():
            p = self.tensors()
            chars = self.vocab.char_ids(token) or [UNK_CHAR]
            out = term_vectors(p, np.array([self.vocab.word_id(token)]), [chars], self.config)
        return out.data[0]

    def encode(self, query: str | Sequence[str]) -> np.ndarray:
        tokens = tokenize(query) if isinstance(query, str) else list(query)
        if not tokens:
            raise EmptyQueryError("query has no tokens")
        with nx.no_tape():
            return encode_tensor(self.tensors(), [tokens], self.vocab, self.config).data[0]

    def encode_batch(self, queries: Sequence[str | Sequence[str]], batch_size: int = 512) -> np.ndarray:
        """Encode many queries; row ``i`` is bitwise equal to ``encode(queries[i])``."""
        toks = []
        for i, q in enumerate(queries):
            try:
                t = tokenize(q) if isinstance(q, str) else list(q)
                if not t:
                    raise EmptyQueryError("query has no tokens")
            except EmptyQueryError as exc:
                raise EmptyQueryError(f"query {i}: {exc}") from None
            toks.append(t)
        out = np.zeros((len(toks), self.dim))
        p = self.tensors()
        with nx.no_tape():
            for lo in range(0, len(toks), batch_size):
                chunk = toks[lo : lo + batch_size]
                out[lo : lo + len(chunk)] = encode_tensor(p, chunk, self.vocab, self.config).data
        return out

    # checkpoint layout: magic, version, dims, vocab blocks, float32 arrays
    def save(self, path) -> None:
        from .io import atomic_write_bytes

        atomic_write_bytes(path, self.to_bytes())

    def to_bytes(self) -> bytes:
        c = self.config
        parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
        parts.append(struct.pack("<8I", c.word_dim, c.filters, c.hidden, c.window,
                                 len(self.vocab), self.vocab.n_chars, c.char_dim, c.char_cap))
        for items in (self.vocab.id_to_token, self.vocab.id_to_char):
            for item in items:
                raw = item.encode("utf-8")
                parts.append(struct.pack("<I", len(raw)))
                parts.append(raw)
        for name in param_shapes(c, len(self.vocab), self.vocab.n_chars):
            parts.append(self.params[name].astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def load(cls, path) -> "GenEncoder":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GenEncoder":
        if blob[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a GEN encoder checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", blob, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        dw, f, h, w, n_words, n_chars, dc, cap = struct.unpack_from("<8I", blob, 12)
        off = 12 + 32

        def read_items(n):
            nonlocal off
            items = []
            for _ in range(n):
                (length,) = struct.unpack_from("<I", blob, off)
                off += 4
                items.append(blob[off : off + length].decode("utf-8"))
                off += length
            return items

        try:
            tokens = read_items(n_words)
            chars = read_items(n_chars)
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupt vocabulary block: {exc}") from None
        if tokens[:2] != ["<pad>", "<oov>"] or chars[:2] != ["\x00", "\x01"]:
            raise CheckpointError("vocabulary block is missing reserved entries")
        cfg = EncoderConfig(word_dim=dw, char_dim=dc, filters=f, hidden=h, window=w, char_cap=cap)
        vocab = Vocabulary(tokens[2:], chars[2:])
        params = {}
        for name, shape in param_shapes(cfg, n_words, n_chars).items():
            size = int(np.prod(shape)) * 4
            if off + size > len(blob):
                raise CheckpointError(f"checkpoint truncated while reading {name}")
            params[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=off).reshape(shape).astype(np.float64)
            off += size
        if off != len(blob):
            raise CheckpointError(f"{len(blob) - off} trailing bytes after parameter block")
        return cls(vocab, cfg, params)

    def config_dict(self) -> dict:
        return asdict(self.config)
