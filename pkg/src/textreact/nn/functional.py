"""Numerically careful primitives used by every model in the package."""

from __future__ import annotations

import torch

from ..errors import TextReactError

IGNORE_ID = -100


class AllPositionsIgnored(TextReactError, ValueError):
    pass


class NonScalarLoss(TextReactError, ValueError):
    pass


def softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = v - v.amax(dim=dim, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = v - v.amax(dim=dim, keepdim=True).detach()
    return shifted - shifted.exp().sum(dim=dim, keepdim=True).log()


def logsumexp(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    m = v.amax(dim=dim, keepdim=True).detach()
    return (v - m).exp().sum(dim=dim).log() + m.squeeze(dim)


def layer_norm(v: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """(v - mean) / sqrt(var + eps) * gain + bias over the last axis (biased variance)."""
    return torch.nn.functional.layer_norm(v, v.shape[-1:], gain, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact erf form: 0.5 x (1 + erf(x / sqrt 2))."""
    return torch.nn.functional.gelu(x, approximate="none")


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, ignore_id: int = IGNORE_ID) -> torch.Tensor:
    """Mean negative log-likelihood over positions whose target is not ``ignore_id``.

    ``logits`` is (..., V) and ``targets`` the matching (...) integer tensor.
    """
    logits = logits.reshape(-1, logits.shape[-1])
    targets = targets.reshape(-1)
    keep = targets != ignore_id
    if not bool(keep.any()):
        raise AllPositionsIgnored("every target position is ignored")
    logp = log_softmax(logits[keep])
    picked = logp.gather(1, targets[keep].unsqueeze(1)).squeeze(1)
    return -picked.mean()


def backward(loss: torch.Tensor, params=None) -> None:
    """Zero the gradients of ``params`` then accumulate d(loss)/d(param)."""
    if loss.dim() != 0:
        raise NonScalarLoss(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if params is not None:
        for p in params:
            p.grad = None
    loss.backward()
