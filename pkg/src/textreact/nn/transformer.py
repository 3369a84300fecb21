"""Pre-norm transformer encoder and decoder with learned positions and GELU feed-forward."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from ..errors import TextReactError
from . import functional as F


# torch's fused kernel; the explicit softmax path is kept for reference and tests
FUSED_ATTENTION = True


class SequenceTooLong(TextReactError, ValueError):
    pass


class IdOutOfRange(TextReactError, ValueError):
    pass


@dataclass
class TransformerConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 256
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        y = x @ self.weight.t()
        return y + self.bias if self.bias is not None else y


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = Linear(d_model, d_model)
        # a key bias only shifts each score row, which softmax ignores
        self.k = Linear(d_model, d_model, bias=False)
        self.v = Linear(d_model, d_model)
        self.o = Linear(d_model, d_model)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

    def weights(self, x, memory=None, mask=None):
        """Explicit attention probabilities (B, heads, Tq, Tk); reference path."""
        src = x if memory is None else memory
        q, k = self._split(self.q(x)), self._split(self.k(src))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores.masked_fill(~mask, torch.finfo(scores.dtype).min)
        return F.softmax(scores)

    def forward(self, x, memory=None, mask=None):
        """``mask`` broadcasts to (B, heads, Tq, Tk); True marks visible keys."""
        src = x if memory is None else memory
        v = self._split(self.v(src))
        if FUSED_ATTENTION:
            q, k = self._split(self.q(x)), self._split(self.k(src))
            out = torch.nn.functional.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        else:
            out = self.weights(x, memory, mask) @ v
        return self.o(out.transpose(1, 2).reshape(x.shape))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.up = Linear(d_model, d_ff)
        self.down = Linear(d_ff, d_model)

    def forward(self, x):
        return self.down(F.gelu(self.up(x)))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)
        self.drop = nn.Dropout(cfg.dropout_rate)

    def forward(self, x, mask):
        x = x + self.drop(self.attn(self.ln1(x), mask=mask))
        return x + self.drop(self.ff(self.ln2(x)))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.ln1 = LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln3 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)
        self.drop = nn.Dropout(cfg.dropout_rate)

    def forward(self, x, self_mask, memory, memory_mask):
        x = x + self.drop(self.self_attn(self.ln1(x), mask=self_mask))
        if memory is not None and memory.shape[1] > 0:
            x = x + self.drop(self.cross_attn(self.ln2(x), memory=memory, mask=memory_mask))
        return x + self.drop(self.ff(self.ln3(x)))


def _check_ids(cfg: TransformerConfig, ids: torch.Tensor) -> None:
    if ids.shape[-1] > cfg.max_len:
        raise SequenceTooLong(f"sequence length {ids.shape[-1]} exceeds max_len={cfg.max_len}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= cfg.vocab_size):
        raise IdOutOfRange(f"token ids must lie in [0, {cfg.vocab_size})")


class Encoder(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        self.tok = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.pos = nn.Parameter(torch.empty(cfg.max_len, cfg.d_model))
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_layers))
        self.ln_f = LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout_rate)

    def embed(self, ids):
        return self.drop(self.tok[ids] + self.pos[: ids.shape[-1]])

    def forward(self, ids: torch.Tensor, attention_mask: torch.Tensor | None = None):
        """ids (B, L) -> (hidden (B, L, d), pooled (B, d)); pooled is position 0."""
        _check_ids(self.cfg, ids)
        if attention_mask is None:
            attention_mask = torch.ones_like(ids, dtype=torch.bool)
        mask = attention_mask.bool()[:, None, None, :]
        x = self.embed(ids)
        for block in self.blocks:
            x = block(x, mask)
        h = self.ln_f(x)
        return h, h[:, 0]


def causal_mask(t: int, device=None) -> torch.Tensor:
    return torch.tril(torch.ones(t, t, dtype=torch.bool, device=device))[None, None]


class DecoderStack(nn.Module):
    """Blocks + final norm over already-embedded inputs."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_layers))
        self.ln_f = LayerNorm(cfg.d_model)

    def forward(self, x, memory=None, memory_mask=None):
        t = x.shape[1]
        self_mask = causal_mask(t, x.device)
        mem_mask = None if memory_mask is None else memory_mask.bool()[:, None, None, :]
        for block in self.blocks:
            x = block(x, self_mask, memory, mem_mask)
        return self.ln_f(x)


class TokenDecoder(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        self.tok = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.pos = nn.Parameter(torch.empty(cfg.max_len, cfg.d_model))
        self.stack = DecoderStack(cfg)
        self.out = Linear(cfg.d_model, cfg.vocab_size)
        self.drop = nn.Dropout(cfg.dropout_rate)

    def forward(self, prefix_ids, memory=None, memory_mask=None):
        """prefix (B, T) -> logits (B, T, V)."""
        _check_ids(self.cfg, prefix_ids)
        x = self.drop(self.tok[prefix_ids] + self.pos[: prefix_ids.shape[1]])
        return self.out(self.stack(x, memory, memory_mask))


def encoder_forward(encoder: Encoder, token_ids, attention_mask=None):
    return encoder(token_ids, attention_mask)


def decoder_forward(decoder: TokenDecoder, target_prefix_ids, memory, memory_mask=None):
    return decoder(target_prefix_ids, memory, memory_mask)


def init_parameters(module: nn.Module, seed: int, emb_std: float = 0.1) -> None:
    """Seeded initialisation: Xavier-uniform matrices, N(0, emb_std) embeddings, zero biases, unit gains."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain":
                p.fill_(1.0)
            elif leaf == "bias":
                p.zero_()
            elif leaf in ("tok", "pos") or p.dim() == 1:
                p.normal_(0.0, emb_std, generator=gen)
            else:
                fan_out, fan_in = p.shape[0], p.shape[-1]
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                p.uniform_(-bound, bound, generator=gen)
