"""Finite-difference checks of the retriever and every predictor head on tiny models."""

from __future__ import annotations

import numpy as np
import torch

from .data.records import Center
from .data.vocab import NB0, SPECIALS
from .nn import functional as F
from .nn.gradcheck import TOLERANCE, grad_check
from .nn.transformer import TransformerConfig, init_parameters
from .predictor import (
    CenterMap,
    PredictorConfig,
    PredictorModel,
    mlm_loss,
    pad_inputs,
    rcr_forward_loss,
    retro_tb_loss,
    retro_tf_loss,
    total_loss,
)
from .retriever import DualEncoder, contrastive_loss, encode_batch

VOCAB = len(SPECIALS) + 12
TINY = dict(d_model=16, n_heads=2, n_layers=1, dec_layers=1, d_ff=32, max_len=24, max_target_len=8)


def _seqs(rng: np.random.Generator, n: int, lo: int, hi: int) -> list[list[int]]:
    return [rng.integers(NB0 + 10, VOCAB, size=int(rng.integers(lo, hi + 1))).tolist() for _ in range(n)]


def retriever_case(seed: int = 0):
    rng = np.random.default_rng(seed)
    model = DualEncoder(TransformerConfig(VOCAB, 16, 2, 1, 32, 24))
    init_parameters(model, seed, emb_std=0.5)
    queries, paragraphs = _seqs(rng, 3, 3, 7), _seqs(rng, 6, 4, 10)

    def loss_fn(m):
        return contrastive_loss(encode_batch(m.chem, queries), encode_batch(m.text, paragraphs))

    return model, loss_fn


def predictor_case(task: str, seed: int = 0, lambda_mlm: float = 0.1):
    rng = np.random.default_rng(seed)
    cfg = PredictorConfig(task=task, **TINY)
    slot_sizes = [3, 4, 2, 4, 3]
    model = PredictorModel(cfg, VOCAB, slot_sizes, n_templates=3)
    init_parameters(model, seed, emb_std=0.5)
    inputs = _seqs(rng, 2, 6, 10)
    ids, mask = pad_inputs(inputs)
    labels = torch.full_like(ids, F.IGNORE_ID)
    labels[0, 2], labels[1, 3] = int(ids[0, 2]), int(ids[1, 3])
    conds = torch.tensor([[int(rng.integers(n)) for n in slot_sizes] for _ in range(2)])
    targets = [[5] + t + [6] for t in _seqs(rng, 2, 2, 5)]
    maps = [CenterMap([1, 2, 3, 4], [(0, 1), (1, 2), (2, 3)]), CenterMap([1, 3, 5], [(0, 1), (0, 2)])]
    labels_tb = [(1, Center("bond", 1, 2)), (2, Center("atom", 2))]

    def loss_fn(m):
        hidden = m.encode(ids, mask)
        if task == "rcr":
            pred = rcr_forward_loss(m, hidden, mask, conds)
        elif task == "retro_tf":
            pred = retro_tf_loss(m, hidden, mask, targets)
        else:
            pred = retro_tb_loss(m, hidden, maps, labels_tb)
        return total_loss(pred, mlm_loss(m, hidden, labels), lambda_mlm)

    return model, loss_fn


def run_suite(seed: int = 0, n_coords: int = 200) -> list[dict]:
    cases = [("retriever", *retriever_case(seed))]
    for task in ("rcr", "retro_tf", "retro_tb"):
        cases.append((f"predictor_{task}", *predictor_case(task, seed)))
    results = []
    for name, model, loss_fn in cases:
        for precision in (64, 32):
            rep = grad_check(model, loss_fn, n_coords=n_coords, seed=seed, precision=precision)
            results.append(
                {
                    "name": f"{name}/{precision}",
                    "precision": precision,
                    "max_rel_err": rep.max_rel_err,
                    "worst_param": rep.worst_param,
                    "n_checked": rep.n_checked,
                    "floor": rep.floor,
                    "passed": bool(rep.max_rel_err <= TOLERANCE[precision]),
                }
            )
    return results
