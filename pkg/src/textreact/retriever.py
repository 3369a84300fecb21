"""SMILES-to-text dual encoder, contrastive training, embedding index and exact MIPS."""

from __future__ import annotations

import copy
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .data.records import Corpus, ReactionRecord
from .data.vocab import CLS, PAD, Vocabs, chem_input_tokens, tokenize_text
from .errors import TextReactError
from .nn import functional as F
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.optim import Adam, Schedule, ShapeMismatch
from .nn.transformer import Encoder, TransformerConfig, init_parameters

log = logging.getLogger(__name__)

INDEX_MAGIC = b"TXIX"


class EmptyInput(TextReactError, ValueError):
    pass


class CorpusTooSmall(TextReactError, ValueError):
    pass


class NoTrainingPairs(TextReactError, ValueError):
    pass


class EmptyCorpus(TextReactError, ValueError):
    pass


class EmptyIndex(TextReactError, ValueError):
    pass


class MissingGold(TextReactError, ValueError):
    pass


@dataclass
class RetrieverConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 256
    dropout_rate: float = 0.0
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    warmup_fraction: float = 0.1
    seed: int = 0

    def model_config(self, vocab_size: int) -> TransformerConfig:
        return TransformerConfig(
            vocab_size, self.d_model, self.n_heads, self.n_layers, self.d_ff, self.max_len, self.dropout_rate
        )


class DualEncoder(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        self.chem = Encoder(cfg)
        self.text = Encoder(cfg)

    @property
    def dim(self) -> int:
        return self.cfg.d_model


# ---------------------------------------------------------------- tokenization


def query_ids(vocabs: Vocabs, record: ReactionRecord) -> list[int]:
    return [CLS] + vocabs.encode(chem_input_tokens(record))


def text_ids(vocabs: Vocabs, text: str) -> list[int]:
    return [CLS] + vocabs.encode(tokenize_text(text))


def _truncate(ids: Sequence[int], max_len: int) -> list[int]:
    if len(ids) > max_len:
        log.warning("input of %d tokens truncated to max_len=%d", len(ids), max_len)
        return list(ids[:max_len])
    return list(ids)


def encode(encoder: Encoder, token_ids: Sequence[int]) -> torch.Tensor:
    """Pooled position-0 vector of one sequence, no normalization."""
    if len(token_ids) == 0:
        raise EmptyInput("cannot encode an empty token sequence")
    ids = torch.tensor([_truncate(token_ids, encoder.cfg.max_len)], dtype=torch.long)
    return encoder(ids)[1][0]


def pad_batch(seqs: Sequence[Sequence[int]], max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    seqs = [_truncate(s, max_len) for s in seqs]
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), PAD, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


def encode_batch(encoder: Encoder, seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    if any(len(s) == 0 for s in seqs):
        raise EmptyInput("cannot encode an empty token sequence")
    ids, mask = pad_batch(seqs, encoder.cfg.max_len)
    return encoder(ids, mask)[1]


@torch.no_grad()
def encode_many(encoder: Encoder, seqs: Sequence[Sequence[int]], exact: bool = True, batch_size: int = 64) -> np.ndarray:
    """Encode many sequences.  ``exact`` encodes one at a time so every row is
    bit-identical to :func:`encode`; otherwise length-sorted padded batches are used."""
    out = np.zeros((len(seqs), encoder.cfg.d_model), dtype=np.float32)
    if exact:
        for i, s in enumerate(seqs):
            out[i] = encode(encoder, s).numpy()
        return out
    order = sorted(range(len(seqs)), key=lambda i: len(seqs[i]))
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        out[chunk] = encode_batch(encoder, [seqs[i] for i in chunk]).numpy()
    return out


# ---------------------------------------------------------------- loss / negatives


def contrastive_loss(queries: torch.Tensor, paragraphs: torch.Tensor) -> torch.Tensor:
    """Sum over queries of -log softmax(S_i)[i] with S = queries @ paragraphs^T.

    Paragraph row i is the positive for query i; rows n..2n-1 are extra negatives.
    """
    n = queries.shape[0]
    if queries.dim() != 2 or paragraphs.dim() != 2 or paragraphs.shape != (2 * n, queries.shape[1]):
        raise ShapeMismatch(f"expected paragraphs of shape (2n, d) for queries {tuple(queries.shape)}, got {tuple(paragraphs.shape)}")
    scores = queries @ paragraphs.t()
    logp = F.log_softmax(scores)
    idx = torch.arange(n)
    return -logp[idx, idx].sum()


def sample_negatives(corpus_ids: Sequence[str], positive_ids: Iterable[str], n: int, rng: np.random.Generator) -> list[str]:
    """n distinct ids drawn uniformly from the corpus, never one of the batch positives."""
    positives = set(positive_ids)
    if len(corpus_ids) < n + len(positives):
        raise CorpusTooSmall(f"corpus of {len(corpus_ids)} cannot supply {n} negatives for {len(positives)} positives")
    eligible = [pid for pid in corpus_ids if pid not in positives]
    if len(eligible) < n:
        raise CorpusTooSmall(f"only {len(eligible)} eligible negatives, need {n}")
    picks = rng.choice(len(eligible), size=n, replace=False)
    return [eligible[i] for i in picks]


# ---------------------------------------------------------------- index / search


@dataclass(frozen=True)
class RetrievalResult:
    hits: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> list[str]:
        return [pid for pid, _ in self.hits]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.hits]


class EmbeddingIndex:
    """Immutable (ids, M x d float32 matrix) pair."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise ShapeMismatch(f"{len(ids)} ids vs matrix {matrix.shape}")
        self._ids = tuple(ids)
        self._matrix = matrix
        self._matrix.setflags(write=False)
        self._wide = matrix.astype(np.float64)
        self._wide.setflags(write=False)
        ranks = np.empty(len(ids), dtype=np.int64)
        ranks[np.argsort(np.array(ids, dtype=object), kind="stable")] = np.arange(len(ids))
        self._id_rank = ranks
        self._pos = {pid: i for i, pid in enumerate(self._ids)}

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    def row(self, pid: str) -> np.ndarray:
        return self._matrix[self._pos[pid]]

    def scores(self, query) -> np.ndarray:
        """float64 dot products, accumulated over dimensions left to right."""
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise ShapeMismatch(f"query dim {q.shape[0]} vs index dim {self.dim}")
        out = np.zeros(len(self), dtype=np.float64)
        for j in range(self.dim):
            out += self._wide[:, j] * q[j]
        return out

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(struct.pack("<II", self.dim, len(self)))
            for pid in self._ids:
                raw = pid.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
            fh.write(self._matrix.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != INDEX_MAGIC:
            raise ValueError(f"{path}: not a TXIX index")
        d, m = struct.unpack_from("<II", data, 4)
        pos = 12
        ids = []
        for _ in range(m):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            ids.append(data[pos : pos + n].decode("utf-8"))
            pos += n
        matrix = np.frombuffer(data, dtype="<f4", count=m * d, offset=pos).reshape(m, d)
        return cls(ids, matrix)


def build_index(text_encoder: Encoder, corpus: Corpus, vocabs: Vocabs) -> EmbeddingIndex:
    if not len(corpus):
        raise EmptyCorpus("cannot index an empty corpus")
    seqs = [text_ids(vocabs, p.text) for p in corpus]
    return EmbeddingIndex(corpus.ids, encode_many(text_encoder, seqs, exact=True))


def mips_search(index: EmbeddingIndex, query, k: int, allowed: np.ndarray | None = None) -> RetrievalResult:
    """Exact top-k by inner product; ties go to the smaller id.

    ``allowed`` optionally restricts the search to a boolean row mask.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise EmptyIndex("search on an empty index")
    scores = index.scores(query)
    rows = np.arange(len(index)) if allowed is None else np.flatnonzero(allowed)
    if rows.size == 0:
        return RetrievalResult(())
    neg = -scores[rows]
    if k < rows.size:
        cut = np.partition(neg, k - 1)[k - 1]
        keep = neg <= cut
        rows, neg = rows[keep], neg[keep]
    order = np.lexsort((index._id_rank[rows], neg))[:k]
    return RetrievalResult(tuple((index.ids[r], float(scores[r])) for r in rows[order]))


def recall_at_k(results: Sequence[RetrievalResult | Sequence[str]], gold_ids: Sequence[str | None], ks=(1, 3, 10)) -> dict[int, float]:
    if len(results) != len(gold_ids):
        raise ValueError("one gold id per result list expected")
    if not results:
        raise ValueError("no queries")
    hits = {k: 0 for k in ks}
    for res, gold in zip(results, gold_ids):
        if gold is None:
            raise MissingGold("query without a gold paragraph id")
        ranked = res.ids if isinstance(res, RetrievalResult) else list(res)
        for k in ks:
            hits[k] += gold in ranked[:k]
    return {k: hits[k] / len(results) for k in ks}


# ---------------------------------------------------------------- training


@dataclass
class RetrieverHistory:
    losses: list[float] = field(default_factory=list)
    valid_r1: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_r1: float = -1.0
    seconds: float = 0.0


def new_dual_encoder(cfg: RetrieverConfig, vocab_size: int) -> DualEncoder:
    model = DualEncoder(cfg.model_config(vocab_size))
    init_parameters(model, cfg.seed)
    return model


def _paired(records: Sequence[ReactionRecord], corpus: Corpus) -> list[ReactionRecord]:
    return [r for r in records if r.paired and r.text_id is not None and r.text_id in corpus]


@torch.no_grad()
def quick_recall(model: DualEncoder, records, corpus: Corpus, vocabs: Vocabs, text_cache=None, ks=(1, 3, 10)) -> dict[int, float]:
    """Recall over the full corpus using padded batched encodings (training-time validation)."""
    texts = text_cache if text_cache is not None else [text_ids(vocabs, p.text) for p in corpus]
    index = EmbeddingIndex(corpus.ids, encode_many(model.text, texts, exact=False))
    queries = encode_many(model.chem, [query_ids(vocabs, r) for r in records], exact=False)
    res = [mips_search(index, q, max(ks)) for q in queries]
    return recall_at_k(res, [r.text_id for r in records], ks)


def train_retriever(
    cfg: RetrieverConfig,
    records: Sequence[ReactionRecord],
    corpus: Corpus,
    vocabs: Vocabs,
    valid_records: Sequence[ReactionRecord] = (),
) -> tuple[DualEncoder, RetrieverHistory]:
    """Contrastive training with in-batch plus sampled negatives; returns the best-validation model."""
    pairs = _paired(records, corpus)
    if not pairs:
        raise NoTrainingPairs("no training record has a paragraph in the corpus")
    valid = _paired(valid_records, corpus)
    model = new_dual_encoder(cfg, len(vocabs))
    history = RetrieverHistory()
    if cfg.epochs <= 0:
        return model, history

    rng = np.random.default_rng(cfg.seed)
    corpus_ids = corpus.ids
    text_cache = {p.id: text_ids(vocabs, p.text) for p in corpus}
    q_cache = [query_ids(vocabs, r) for r in pairs]
    steps_per_epoch = -(-len(pairs) // cfg.batch_size)
    opt = Adam(model.named_parameters(), Schedule(cfg.lr, steps_per_epoch * cfg.epochs, cfg.warmup_fraction, "linear"))
    best_state = copy.deepcopy(model.state_dict())
    ordered_texts = [text_cache[pid] for pid in corpus_ids]
    t0 = time.time()
    model.train()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            pos_ids = [pairs[i].text_id for i in batch]
            negs = sample_negatives(corpus_ids, pos_ids, len(batch), rng)
            q = encode_batch(model.chem, [q_cache[i] for i in batch])
            p = encode_batch(model.text, [text_cache[pid] for pid in pos_ids + negs])
            loss = contrastive_loss(q, p)
            F.backward(loss, [p_ for _, p_ in opt.params])
            opt.step()
            total += loss.item()
        history.losses.append(total / len(perm))
        model.eval()
        r1 = quick_recall(model, valid, corpus, vocabs, ordered_texts, ks=(1,))[1] if valid else -history.losses[-1]
        model.train()
        history.valid_r1.append(r1)
        if r1 > history.best_r1:
            history.best_r1, history.best_epoch = r1, epoch
            best_state = copy.deepcopy(model.state_dict())
        log.info("retriever epoch %d loss %.4f valid R@1 %.4f", epoch, history.losses[-1], r1)
    model.load_state_dict(best_state)
    model.eval()
    history.seconds = time.time() - t0
    return model, history


def save_retriever(path, model: DualEncoder, cfg: RetrieverConfig, extra: dict | None = None) -> None:
    config = {"kind": "retriever", "train": asdict(cfg), "model": model.cfg.to_dict(), **(extra or {})}
    save_checkpoint(path, config, model.state_dict())


def load_retriever(path) -> tuple[DualEncoder, dict]:
    config, state = load_checkpoint(path)
    if config.get("kind") != "retriever":
        raise ValueError(f"{path}: not a retriever checkpoint")
    model = DualEncoder(TransformerConfig(**config["model"]))
    model.load_state_dict(state)
    model.eval()
    return model, config


# ---------------------------------------------------------------- batch retrieval


def query_vectors(model: DualEncoder, records: Sequence[ReactionRecord], vocabs: Vocabs) -> np.ndarray:
    return encode_many(model.chem, [query_ids(vocabs, r) for r in records], exact=True)


def rank_records(
    model: DualEncoder,
    index: EmbeddingIndex,
    records: Sequence[ReactionRecord],
    vocabs: Vocabs,
    K: int,
    allowed: np.ndarray | None = None,
    append_gold: bool = False,
) -> dict[str, list[tuple[str, float]]]:
    """Top-K (id, score) lists per record.  ``append_gold`` adds a missing gold
    id at the end with its true score (training-time neighbour lists)."""
    if model.dim != index.dim:
        raise ShapeMismatch(f"encoder dim {model.dim} vs index dim {index.dim}")
    out = {}
    for r, q in zip(records, query_vectors(model, records, vocabs)):
        hits = list(mips_search(index, q, K, allowed).hits)
        if append_gold and r.text_id is not None and r.text_id not in {pid for pid, _ in hits}:
            pos = index._pos.get(r.text_id)
            if pos is not None:
                hits.append((r.text_id, float(index.scores(q)[pos])))
        out[r.id] = hits
    return out
