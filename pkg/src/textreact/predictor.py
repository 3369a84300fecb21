"""Text-augmented predictor: input assembly, neighbour sampling, span masking,
the three task heads, the combined loss, beam search and training."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .chem import parse_smiles, tokenize_smiles, write_smiles_ordered
from .data.records import Center, ConditionSet, Corpus, ReactionRecord, RetroLabel, SLOTS
from .data.vocab import (
    BOS,
    CLS,
    EOS,
    MASK,
    NB0,
    PAD,
    SEP,
    Vocabs,
    chem_input_tokens,
    retro_target_tokens,
    smiles_tokens,
    tokenize_text,
)
from .data.vocab import MAX_NEIGHBORS
from .errors import TextReactError
from .nn import functional as F
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.optim import Adam, Schedule
from .nn.transformer import DecoderStack, Encoder, Linear, TokenDecoder, TransformerConfig, init_parameters

log = logging.getLogger(__name__)

TASKS = ("rcr", "retro_tf", "retro_tb")
SPECIAL_SEGMENT = -1  # [CLS], [SEP] and [NBj] positions
NO_TEMPLATE = 0


class PoolTooSmall(TextReactError, ValueError):
    pass


class SmilesAloneTooLong(TextReactError, ValueError):
    pass


class NoMaskedPositions(TextReactError, ValueError):
    pass


class SlotVocabMismatch(TextReactError, ValueError):
    pass


class TargetTooLong(TextReactError, ValueError):
    pass


class CenterOutOfRange(TextReactError, ValueError):
    pass


class NoNeighborsInEnsembleMode(TextReactError, ValueError):
    pass


class IndexEncoderDimMismatch(TextReactError, ValueError):
    pass


# ---------------------------------------------------------------- neighbours


@dataclass
class NeighborPolicy:
    alpha: float = 0.8
    K: int = 10
    k: int = 3
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 1 <= self.k <= self.K:
            raise ValueError(f"need 1 <= k <= K, got k={self.k} K={self.K}")
        if self.mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {self.mode!r}")


def sample_neighbors(policy: NeighborPolicy, gold_id, ranked_ids: Sequence[str], rng: np.random.Generator) -> list[str]:
    """Pick the k paragraph ids that accompany one chemistry input.

    train: with probability alpha, k distinct uniform draws from the top-K;
    otherwise the gold id followed by the best k-1 other ids.
    infer: the top-k ids.
    """
    k = policy.k
    if policy.mode == "infer":
        if len(ranked_ids) < k:
            raise PoolTooSmall(f"{len(ranked_ids)} candidates for k={k}")
        return list(ranked_ids[:k])
    if rng.random() < policy.alpha:
        pool = list(ranked_ids[: policy.K])
        if len(pool) < k:
            raise PoolTooSmall(f"{len(pool)} candidates for k={k}")
        return [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
    if gold_id is None:
        raise ValueError("train mode needs the gold id")
    rest = [pid for pid in ranked_ids if pid != gold_id][: k - 1]
    if len(rest) < k - 1:
        raise PoolTooSmall(f"{len(rest)} non-gold candidates for k={k}")
    return [gold_id] + rest


# ---------------------------------------------------------------- input assembly


@dataclass
class PredictorInput:
    token_ids: list[int]
    segments: list[int]  # 0 = SMILES, j + 1 = TEXT_j, SPECIAL_SEGMENT = structural token
    text_ids: list[str] = field(default_factory=list)
    smiles_offset: int = 1  # position of the first SMILES token

    @property
    def attention_mask(self) -> list[bool]:
        return [True] * len(self.token_ids)

    def __len__(self) -> int:
        return len(self.token_ids)


def assemble_input(
    smiles_ids: Sequence[int], neighbor_texts: Sequence[Sequence[int]], max_len: int, text_ids: Sequence[str] = ()
) -> PredictorInput:
    """[CLS] SMILES [SEP] [NB0] TEXT_0 [NB1] TEXT_1 ... [SEP], cut from the right."""
    if len(neighbor_texts) > MAX_NEIGHBORS:
        raise ValueError(f"at most {MAX_NEIGHBORS} neighbours supported")
    ids = [CLS] + list(smiles_ids) + [SEP]
    seg = [SPECIAL_SEGMENT] + [0] * len(smiles_ids) + [SPECIAL_SEGMENT]
    if len(ids) > max_len:
        raise SmilesAloneTooLong(f"SMILES segment needs {len(ids)} positions, max_len={max_len}")
    if neighbor_texts and len(ids) + 1 < max_len:
        body, body_seg = [], []
        for j, text in enumerate(neighbor_texts):
            body += [NB0 + j] + list(text)
            body_seg += [SPECIAL_SEGMENT] + [j + 1] * len(text)
        room = max_len - len(ids) - 1
        ids += body[:room] + [SEP]
        seg += body_seg[:room] + [SPECIAL_SEGMENT]
    return PredictorInput(ids, seg, list(text_ids))


# ---------------------------------------------------------------- masking


@dataclass
class MaskingConfig:
    poisson_lambda: float = 3.0
    target_ratio: float = 0.15
    max_span: int = 10
    mask_id: int = MASK

    def __post_init__(self):
        if not 0.0 < self.target_ratio < 1.0:
            raise ValueError("target_ratio must lie in (0, 1)")
        if self.poisson_lambda <= 0:
            raise ValueError("poisson_lambda must be positive")
        if self.max_span < 1:
            raise ValueError("max_span must be >= 1")


def mask_spans(inp: PredictorInput, cfg: MaskingConfig, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Span corruption confined to single segments.

    Repeatedly picks an unmasked maskable start position uniformly and masks a
    span of clamp(Poisson(lambda), 1, max_span) positions, clipped at the end
    of its segment, until ceil(target_ratio * n_maskable) positions are masked.
    The final span is also clipped so the count never passes
    floor(target_ratio * n_maskable) + max_span - 1, which keeps the masked
    fraction within [ratio, ratio + (max_span - 1) / n] for any n.
    """
    ids = list(inp.token_ids)
    labels = [F.IGNORE_ID] * len(ids)
    seg = inp.segments
    maskable = [i for i, s in enumerate(seg) if s != SPECIAL_SEGMENT]
    target = math.ceil(cfg.target_ratio * len(maskable))
    cap = max(math.floor(cfg.target_ratio * len(maskable)) + cfg.max_span - 1, target)
    masked = np.zeros(len(ids), dtype=bool)
    count = 0
    while count < target:
        free = [i for i in maskable if not masked[i]]
        start = free[int(rng.integers(len(free)))]
        length = min(max(int(rng.poisson(cfg.poisson_lambda)), 1), cfg.max_span)
        end = start
        while end < len(ids) and end - start < length and seg[end] == seg[start] and count < cap:
            if not masked[end]:
                masked[end] = True
                count += 1
            end += 1
    for i in np.flatnonzero(masked):
        labels[i] = ids[i]
        ids[i] = cfg.mask_id
    return ids, labels


# ---------------------------------------------------------------- model


@dataclass
class PredictorConfig:
    task: str = "rcr"
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 128
    max_len: int = 384
    max_target_len: int = 96
    dropout_rate: float = 0.0
    alpha: float | None = None  # None -> 0.8 for rcr, 0.2 for retro
    K: int = 10
    k: int = 3
    mask_lambda: float = 3.0
    mask_ratio: float = 0.15
    max_span: int = 10
    lambda_mlm: float = 0.1
    use_masking: bool = True
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    warmup_fraction: float = 0.02
    randomize_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not 0 <= self.k <= self.K:
            raise ValueError("need 0 <= k <= K")

    @property
    def policy_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 0.8 if self.task == "rcr" else 0.2

    def encoder_config(self, vocab_size: int) -> TransformerConfig:
        return TransformerConfig(vocab_size, self.d_model, self.n_heads, self.n_layers, self.d_ff, self.max_len, self.dropout_rate)

    def decoder_config(self, vocab_size: int) -> TransformerConfig:
        return TransformerConfig(
            vocab_size, self.d_model, self.n_heads, self.dec_layers, self.d_ff, max(self.max_target_len, 8), self.dropout_rate
        )

    def masking(self) -> MaskingConfig:
        return MaskingConfig(self.mask_lambda, self.mask_ratio, self.max_span)


class ConditionDecoder(nn.Module):
    """Five-step causal decoder; step t reads slot t-1's embedding and scores slot t."""

    def __init__(self, cfg: TransformerConfig, slot_sizes: Sequence[int]):
        super().__init__()
        self.slot_sizes = list(slot_sizes)
        d = cfg.d_model
        self.start = nn.Parameter(torch.empty(d))
        self.pos = nn.Parameter(torch.empty(len(slot_sizes), d))
        self.emb = nn.ParameterList(nn.Parameter(torch.empty(n, d)) for n in slot_sizes[:-1])
        self.stack = DecoderStack(cfg)
        self.heads = nn.ModuleList(Linear(d, n) for n in slot_sizes)

    def forward(self, prefix: torch.Tensor, memory, memory_mask):
        """prefix (B, T) of slot ids for steps 0..T-1 (T <= 5) -> per-step log-probs list."""
        b, t = prefix.shape
        steps = [self.start.expand(b, -1)]
        for s in range(1, t):
            steps.append(self.emb[s - 1][prefix[:, s - 1]])
        x = torch.stack(steps, 1) + self.pos[:t]
        h = self.stack(x, memory, memory_mask)
        return [F.log_softmax(self.heads[s](h[:, s])) for s in range(t)]


class RetroTBHeads(nn.Module):
    def __init__(self, d_model: int, n_templates: int):
        super().__init__()
        self.n_templates = n_templates
        self.atom = Linear(d_model, n_templates + 1)
        self.bond = Linear(2 * d_model, n_templates + 1)

    def forward(self, hidden: torch.Tensor, atom_pos: Sequence[int], bonds: Sequence[tuple[int, int]]):
        """Logits for every atom then every bond of one product (index 0 = no template)."""
        h = hidden[list(atom_pos)]
        out = [self.atom(h)]
        if bonds:
            a = torch.tensor([x for x, _ in bonds])
            b = torch.tensor([y for _, y in bonds])
            out.append(self.bond(torch.cat([h[a], h[b]], dim=-1)))
        return torch.cat(out, 0)


class PredictorModel(nn.Module):
    def __init__(self, cfg: PredictorConfig, vocab_size: int, slot_sizes: Sequence[int] = (), n_templates: int = 0):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.slot_sizes = list(slot_sizes)
        self.n_templates = n_templates
        enc = cfg.encoder_config(vocab_size)
        self.encoder = Encoder(enc)
        self.mlm = Linear(cfg.d_model, vocab_size)
        if cfg.task == "rcr":
            if len(self.slot_sizes) != len(SLOTS):
                raise SlotVocabMismatch(f"expected {len(SLOTS)} slot vocabularies, got {len(self.slot_sizes)}")
            self.head = ConditionDecoder(cfg.decoder_config(vocab_size), self.slot_sizes)
        elif cfg.task == "retro_tf":
            self.head = TokenDecoder(cfg.decoder_config(vocab_size))
        else:
            self.head = RetroTBHeads(cfg.d_model, n_templates)

    def encode(self, ids: torch.Tensor, mask: torch.Tensor):
        return self.encoder(ids, mask)[0]

    def meta(self) -> dict:
        return {
            "kind": "predictor",
            "predictor": asdict(self.cfg),
            "vocab_size": self.vocab_size,
            "slot_sizes": self.slot_sizes,
            "n_templates": self.n_templates,
        }


def new_predictor(cfg: PredictorConfig, vocabs: Vocabs) -> PredictorModel:
    model = PredictorModel(cfg, len(vocabs), vocabs.slot_sizes, vocabs.n_templates)
    init_parameters(model, cfg.seed)
    return model


def save_predictor(path, model: PredictorModel, extra: dict | None = None) -> None:
    save_checkpoint(path, {**model.meta(), **(extra or {})}, model.state_dict())


def load_predictor(path) -> tuple[PredictorModel, dict]:
    config, state = load_checkpoint(path)
    if config.get("kind") != "predictor":
        raise ValueError(f"{path}: not a predictor checkpoint")
    cfg = PredictorConfig(**config["predictor"])
    model = PredictorModel(cfg, config["vocab_size"], config["slot_sizes"], config["n_templates"])
    model.load_state_dict(state)
    model.eval()
    return model, config


# ---------------------------------------------------------------- losses


def pad_inputs(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), pad, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


def mlm_loss(model: PredictorModel, hidden: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if not bool((labels != F.IGNORE_ID).any()):
        raise NoMaskedPositions("no masked position carries a label")
    return F.cross_entropy(model.mlm(hidden), labels)


def rcr_forward_loss(model: PredictorModel, hidden, mask, conditions: torch.Tensor) -> torch.Tensor:
    """Mean over the five teacher-forced steps of the batch-mean NLL.  ``conditions`` is (B, 5)."""
    sizes = model.slot_sizes
    if conditions.dim() != 2 or conditions.shape[1] != len(sizes):
        raise SlotVocabMismatch(f"conditions must be (B, {len(sizes)})")
    for s, n in enumerate(sizes):
        if int(conditions[:, s].min()) < 0 or int(conditions[:, s].max()) >= n:
            raise SlotVocabMismatch(f"slot {SLOTS[s]} id outside its vocabulary of {n}")
    logps = model.head(conditions, hidden, mask)
    steps = [-lp.gather(1, conditions[:, s : s + 1]).mean() for s, lp in enumerate(logps)]
    return torch.stack(steps).mean()


def retro_target_ids(vocabs: Vocabs, reactants: Sequence[str]) -> list[int]:
    return [BOS] + vocabs.encode(retro_target_tokens(reactants)) + [EOS]


def retro_tf_loss(model: PredictorModel, hidden, mask, targets: Sequence[Sequence[int]]) -> torch.Tensor:
    """Teacher-forced NLL; each target is [BOS] tokens [EOS]."""
    limit = model.head.cfg.max_len
    for t in targets:
        if len(t) - 1 > limit:
            raise TargetTooLong(f"target of {len(t) - 1} steps exceeds {limit}")
    inp, _ = pad_inputs([t[:-1] for t in targets])
    out, _ = pad_inputs([t[1:] for t in targets], pad=F.IGNORE_ID)
    logits = model.head(inp, hidden, mask)
    return F.cross_entropy(logits, out)


@dataclass
class CenterMap:
    """Atom token positions (in the assembled input) and bonds (lower atom first) of a product."""

    atom_pos: list[int]
    bonds: list[tuple[int, int]]

    @property
    def n_centers(self) -> int:
        return len(self.atom_pos) + len(self.bonds)

    def index_of(self, center: Center) -> int:
        n = len(self.atom_pos)
        if center.kind == "atom":
            if not 0 <= center.atom_a < n:
                raise CenterOutOfRange(f"atom {center.atom_a} outside product of {n} atoms")
            return center.atom_a
        pair = tuple(sorted((center.atom_a, center.atom_b)))
        try:
            return n + self.bonds.index(pair)
        except ValueError:
            raise CenterOutOfRange(f"bond {pair} is not a bond of the product") from None

    def center_at(self, i: int) -> Center:
        n = len(self.atom_pos)
        return Center("atom", i) if i < n else Center("bond", *self.bonds[i - n])


def center_map(product: str, offset: int) -> CenterMap:
    g = parse_smiles(product)
    return CenterMap([offset + a.token_pos for a in g.atoms], sorted((min(b.a, b.b), max(b.a, b.b)) for b in g.bonds))


def retro_tb_loss(model: PredictorModel, hidden, maps: Sequence[CenterMap], labels: Sequence[tuple[int, Center]]) -> torch.Tensor:
    """Mean cross-entropy over every candidate center of every product in the batch:
    the labelled center against its template, all others against NO_TEMPLATE."""
    logits, targets = [], []
    for b, (cmap, (tid, center)) in enumerate(zip(maps, labels)):
        t = torch.full((cmap.n_centers,), NO_TEMPLATE, dtype=torch.long)
        if not 0 <= tid < model.n_templates:
            raise CenterOutOfRange(f"template id {tid} outside [0, {model.n_templates})")
        t[cmap.index_of(center)] = tid + 1
        logits.append(model.head(hidden[b], cmap.atom_pos, cmap.bonds))
        targets.append(t)
    return F.cross_entropy(torch.cat(logits, 0), torch.cat(targets, 0))


def total_loss(pred_loss: torch.Tensor, mlm: torch.Tensor | float, lambda_mlm: float = 0.1) -> torch.Tensor:
    if lambda_mlm == 0:
        return pred_loss
    return pred_loss + lambda_mlm * mlm


# ---------------------------------------------------------------- beam search


StepFn = Callable[[list[tuple[int, ...]], int], np.ndarray]


def beam_search(step_fn: StepFn, beam_width: int, max_steps: int, eos: int | None = None) -> list[tuple[tuple[int, ...], float]]:
    """Length-unnormalized beam search.

    ``step_fn(prefixes, t)`` returns an (n, V_t) array of next-token
    log-probabilities for the live prefixes.  Finished hypotheses (ending in
    ``eos``) stay in the pool with their score.  Ties break toward the
    lexicographically smaller id sequence.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    beams: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    for t in range(max_steps):
        live = [b for b in beams if not (eos is not None and b[0] and b[0][-1] == eos)]
        if not live:
            break
        pool = [b for b in beams if b not in live]
        logp = np.asarray(step_fn([seq for seq, _ in live], t), dtype=np.float64)
        for (seq, score), row in zip(live, logp):
            width = min(beam_width, row.shape[0])
            top = np.argpartition(-row, width - 1)[:width] if width < row.shape[0] else np.arange(row.shape[0])
            # extend the cut with every token tied with the cut-off so tie-breaking stays exact
            if width < row.shape[0]:
                cut = row[top].min()
                top = np.flatnonzero(row >= cut)
            pool.extend((seq + (int(v),), score + float(row[v])) for v in top)
        pool.sort(key=lambda h: (-h[1], h[0]))
        beams = pool[:beam_width]
    return beams


def greedy_decode(step_fn: StepFn, max_steps: int, eos: int | None = None) -> tuple[tuple[int, ...], float]:
    seq: tuple[int, ...] = ()
    score = 0.0
    for t in range(max_steps):
        totals = score + np.asarray(step_fn([seq], t), dtype=np.float64)[0]
        best = int(np.flatnonzero(totals == totals.max())[0])
        seq, score = seq + (best,), float(totals[best])
        if eos is not None and best == eos:
            break
    return seq, score


# ---------------------------------------------------------------- inference


@dataclass
class Encoded:
    """Encoder memory for a batch of alternative inputs of one record."""

    hidden: torch.Tensor
    mask: torch.Tensor
    inputs: list[PredictorInput]


def encode_inputs(model: PredictorModel, inputs: Sequence[PredictorInput]) -> Encoded:
    ids, mask = pad_inputs([i.token_ids for i in inputs])
    return Encoded(model.encode(ids, mask), mask, list(inputs))


def mixture_step(model: PredictorModel, enc: Encoded, weights: np.ndarray) -> StepFn:
    """Step function mixing per-input token distributions with ``weights``."""
    task = model.cfg.task
    n_in = enc.hidden.shape[0]
    w = torch.as_tensor(weights, dtype=torch.float64)

    def step(prefixes, t):
        n = len(prefixes)
        hid = enc.hidden.repeat(n, 1, 1)
        msk = enc.mask.repeat(n, 1)
        rep = [p for p in prefixes for _ in range(n_in)]
        if task == "rcr":
            prefix = torch.tensor([list(p) + [0] for p in rep], dtype=torch.long)
            logp = model.head(prefix, hid, msk)[t]
        else:
            prefix = torch.tensor([[BOS] + list(p) for p in rep], dtype=torch.long)
            logp = F.log_softmax(model.head(prefix, hid, msk)[:, -1])
        probs = logp.double().exp().view(n, n_in, -1)
        if n_in == 1:
            return logp.double().view(n, -1).numpy()
        mixed = (probs * w.view(1, -1, 1)).sum(1)
        return mixed.clamp_min(1e-300).log().numpy()

    return step


@dataclass
class Prediction:
    rank: int
    score: float
    payload: dict


def _decode_payload(model: PredictorModel, vocabs: Vocabs, seq: Sequence[int]) -> dict:
    if model.cfg.task == "rcr":
        cond = vocabs.decode_conditions(seq)
        return {"conditions": dict(zip(SLOTS, cond.as_tuple()))}
    body = [i for i in seq if i != EOS]
    smiles = "".join(vocabs.decode(body))
    return {"reactants": sorted(smiles.split(".")) if smiles else []}


@dataclass
class PredictOptions:
    ensemble_separate: bool = False
    smiles_only: bool = False
    text_only: bool = False
    beam_width: int = 10


def record_smiles_ids(vocabs: Vocabs, record: ReactionRecord, task: str) -> list[int]:
    toks = smiles_tokens(record.product) if task != "rcr" else chem_input_tokens(record)
    return vocabs.encode(toks)


def build_inputs(
    model: PredictorModel,
    vocabs: Vocabs,
    record: ReactionRecord,
    retrieved: Sequence[tuple[str, float]],
    text_cache: dict,
    opts: PredictOptions,
) -> tuple[list[PredictorInput], np.ndarray]:
    cfg = model.cfg
    smiles = record_smiles_ids(vocabs, record, cfg.task)
    if opts.text_only:
        smiles = [MASK] * len(smiles)
    hits = [] if opts.smiles_only or cfg.k == 0 else list(retrieved[: cfg.k])
    if opts.ensemble_separate:
        if not hits:
            raise NoNeighborsInEnsembleMode(f"{record.id}: no neighbours to ensemble over")
        inputs = [assemble_input(smiles, [text_cache[pid]], cfg.max_len, [pid]) for pid, _ in hits]
        scores = np.array([s for _, s in hits], dtype=np.float64)
        w = np.exp(scores - scores.max())
        return inputs, w / w.sum()
    texts = [text_cache[pid] for pid, _ in hits]
    return [assemble_input(smiles, texts, cfg.max_len, [pid for pid, _ in hits])], np.ones(1)


@torch.no_grad()
def predict_topn(
    model: PredictorModel,
    vocabs: Vocabs,
    record: ReactionRecord,
    retrieved: Sequence[tuple[str, float]],
    n: int,
    text_cache: dict,
    opts: PredictOptions | None = None,
) -> list[Prediction]:
    """Top-n predictions for one record given its ranked (paragraph id, score) list."""
    opts = opts or PredictOptions()
    model.eval()
    inputs, weights = build_inputs(model, vocabs, record, retrieved, text_cache, opts)
    enc = encode_inputs(model, inputs)
    width = max(opts.beam_width, n)
    if model.cfg.task == "retro_tb":
        return _predict_tb(model, enc, weights, record, width)[:n]
    step = mixture_step(model, enc, weights)
    if model.cfg.task == "rcr":
        hyps = beam_search(step, width, len(SLOTS))
    else:
        hyps = beam_search(step, width, model.cfg.max_target_len, eos=EOS)
    return [Prediction(r + 1, s, _decode_payload(model, vocabs, seq)) for r, (seq, s) in enumerate(hyps[:n])]


def _predict_tb(model: PredictorModel, enc: Encoded, weights: np.ndarray, record: ReactionRecord, n: int) -> list[Prediction]:
    cmap = center_map(record.product, enc.inputs[0].smiles_offset)
    probs = 0
    for b in range(enc.hidden.shape[0]):
        logits = model.head(enc.hidden[b], cmap.atom_pos, cmap.bonds)
        probs = probs + weights[b] * F.softmax(logits.double()).numpy()
    scores = probs[:, 1:]  # drop NO_TEMPLATE
    flat = np.argsort(-scores, axis=None, kind="stable")[:n]
    out = []
    for r, f in enumerate(flat):
        c, t = divmod(int(f), scores.shape[1])
        center = cmap.center_at(c)
        out.append(Prediction(r + 1, float(np.log(max(scores[c, t], 1e-300))), {"template_id": t, "center": asdict(center)}))
    return out


def expand_templates(preds: list[Prediction], product: str, table: dict | None) -> list[Prediction]:
    """Attach reactants from a template expansion table where one exists."""
    if not table:
        return preds
    for p in preds:
        tid = p.payload.get("template_id")
        reactants = table.get(tid, {}).get(product)
        if reactants is not None:
            p.payload["reactants"] = sorted(reactants)
    return preds


def prediction_line(record_id: str, preds: Sequence[Prediction], neighbors: Sequence[str]) -> dict:
    return {
        "id": record_id,
        "predictions": [{"rank": p.rank, "score": p.score, **p.payload} for p in preds],
        "neighbors": list(neighbors),
    }


# ---------------------------------------------------------------- training


def randomize_record_smiles(record: ReactionRecord, task: str, seed: int) -> tuple[list[str], Center | None]:
    """Random-order SMILES tokens for the chemistry input; remaps a retro center."""
    center = None
    if task != "rcr":
        text, order = write_smiles_ordered(parse_smiles(record.product), seed)
        label = record.label
        if isinstance(label, RetroLabel) and label.center is not None:
            new = {old: i for i, old in enumerate(order)}
            c = label.center
            center = Center(c.kind, new[c.atom_a], None if c.atom_b is None else new[c.atom_b])
        return smiles_tokens(text), center
    reactants = [write_smiles_ordered(parse_smiles(s), seed + 7919 * (i + 1))[0] for i, s in enumerate(record.reactants)]
    product = write_smiles_ordered(parse_smiles(record.product), seed)[0]
    return chem_input_tokens(record, reactants, product), None


@dataclass
class TrainingExample:
    record: ReactionRecord
    ranked: list[str]  # retrieval top-K plus the gold id if absent


@dataclass
class PredictorHistory:
    losses: list[float] = field(default_factory=list)
    valid_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_valid: float = -math.inf
    seconds: float = 0.0


class SamplerLog:
    """Optional hook recording each call to the neighbour sampler."""

    def __init__(self):
        self.calls: list[tuple] = []

    def __call__(self, policy, gold, ranked, rng):
        out = sample_neighbors(policy, gold, ranked, rng)
        self.calls.append((gold, tuple(ranked), tuple(out)))
        return out


def _example_input(model: PredictorModel, vocabs: Vocabs, ex: TrainingExample, text_cache, policy, rng, sampler):
    cfg = model.cfg
    rec = ex.record
    center = rec.label.center if isinstance(rec.label, RetroLabel) else None
    if rng.random() < cfg.randomize_prob:
        toks, new_center = randomize_record_smiles(rec, "rcr" if cfg.task == "rcr" else "retro", int(rng.integers(2**31)))
        smiles = vocabs.encode(toks)
        center = new_center if new_center is not None else center
        product = None
        if cfg.task == "retro_tb":
            product = "".join(toks)
    else:
        smiles = record_smiles_ids(vocabs, rec, cfg.task)
        product = rec.product
    pids = sampler(policy, rec.text_id, ex.ranked, rng) if cfg.k > 0 else []
    inp = assemble_input(smiles, [text_cache[p] for p in pids], cfg.max_len, pids)
    return inp, center, product


def batch_loss(model: PredictorModel, vocabs: Vocabs, batch: Sequence[TrainingExample], text_cache, policy, rng, sampler=sample_neighbors):
    """Combined loss for one batch (one encoder pass over the masked inputs)."""
    cfg = model.cfg
    inputs, centers, products = [], [], []
    for ex in batch:
        inp, center, product = _example_input(model, vocabs, ex, text_cache, policy, rng, sampler)
        inputs.append(inp)
        centers.append(center)
        products.append(product)
    use_mlm = cfg.use_masking and cfg.lambda_mlm > 0
    if cfg.use_masking:
        masked = [mask_spans(i, cfg.masking(), rng) for i in inputs]
        ids, mask = pad_inputs([m for m, _ in masked])
        labels, _ = pad_inputs([l for _, l in masked], pad=F.IGNORE_ID)
    else:
        ids, mask = pad_inputs([i.token_ids for i in inputs])
        labels = None
    hidden = model.encode(ids, mask)
    if cfg.task == "rcr":
        cond = torch.tensor([vocabs.encode_conditions(ex.record.label) for ex in batch], dtype=torch.long)
        pred = rcr_forward_loss(model, hidden, mask, cond)
    elif cfg.task == "retro_tf":
        pred = retro_tf_loss(model, hidden, mask, [retro_target_ids(vocabs, ex.record.reactants) for ex in batch])
    else:
        maps = [center_map(p, i.smiles_offset) for p, i in zip(products, inputs)]
        pred = retro_tb_loss(model, hidden, maps, [(ex.record.label.template_id, c) for ex, c in zip(batch, centers)])
    mlm = mlm_loss(model, hidden, labels) if use_mlm and bool((labels != F.IGNORE_ID).any()) else 0.0
    return total_loss(pred, mlm, cfg.lambda_mlm if use_mlm else 0.0)


def text_cache_for(vocabs: Vocabs, corpus: Corpus) -> dict[str, list[int]]:
    return {p.id: vocabs.encode(tokenize_text(p.text)) for p in corpus}


def is_correct(task: str, pred: Prediction, record: ReactionRecord) -> bool:
    if task == "rcr":
        return tuple(pred.payload["conditions"][s] for s in SLOTS) == record.label.as_tuple()
    if task == "retro_tb" and "reactants" not in pred.payload:
        c = record.label.center
        return pred.payload["template_id"] == record.label.template_id and Center(**pred.payload["center"]) == c
    return sorted(pred.payload["reactants"]) == sorted(record.reactants)


def quick_accuracy(model, vocabs, examples: Sequence[tuple[ReactionRecord, list]], text_cache, table=None) -> float:
    """Greedy top-1 accuracy in inference mode (training-time validation)."""
    hits = 0
    for rec, retrieved in examples:
        preds = predict_topn(model, vocabs, rec, retrieved, 1, text_cache, PredictOptions(beam_width=1))
        if model.cfg.task == "retro_tb":
            preds = expand_templates(preds, rec.product, table)
        hits += bool(preds) and is_correct(model.cfg.task, preds[0], rec)
    return hits / max(len(examples), 1)


def train_predictor(
    cfg: PredictorConfig,
    train: Sequence[TrainingExample],
    vocabs: Vocabs,
    text_cache: dict,
    valid: Sequence[tuple[ReactionRecord, list]] = (),
    sampler=sample_neighbors,
    table: dict | None = None,
) -> tuple[PredictorModel, PredictorHistory]:
    """Supervised training with the neighbour policy, random SMILES order and the MLM term.

    ``train`` carries each record's ranked neighbour ids; ``valid`` pairs
    records with inference-time (id, score) lists.  Keeps the best-validation model.
    """
    model = new_predictor(cfg, vocabs)
    history = PredictorHistory()
    if cfg.epochs <= 0 or not train:
        return model, history
    rng = np.random.default_rng(cfg.seed)
    policy = NeighborPolicy(cfg.policy_alpha, cfg.K, max(cfg.k, 1), "train")
    steps = -(-len(train) // cfg.batch_size) * cfg.epochs
    opt = Adam(model.named_parameters(), Schedule(cfg.lr, steps, cfg.warmup_fraction, "cosine"))
    best = copy.deepcopy(model.state_dict())
    t0 = time.time()
    for epoch in range(cfg.epochs):
        model.train()
        perm = rng.permutation(len(train))
        total, n_batches = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            batch = [train[i] for i in perm[start : start + cfg.batch_size]]
            loss = batch_loss(model, vocabs, batch, text_cache, policy, rng, sampler)
            F.backward(loss, [p for _, p in opt.params])
            opt.step()
            total += loss.item()
            n_batches += 1
        history.losses.append(total / n_batches)
        score = quick_accuracy(model, vocabs, valid, text_cache, table) if valid else -history.losses[-1]
        history.valid_acc.append(score)
        if score > history.best_valid:
            history.best_valid, history.best_epoch = score, epoch
            best = copy.deepcopy(model.state_dict())
        log.info("predictor epoch %d loss %.4f valid %.4f", epoch, history.losses[-1], score)
    model.load_state_dict(best)
    model.eval()
    history.seconds = time.time() - t0
    return model, history
