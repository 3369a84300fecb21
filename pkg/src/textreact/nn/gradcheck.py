from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn


TOLERANCE = {64: 1e-6, 32: 1e-4}
NOISE_FACTOR = 10.0


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    n_checked: int
    floor: float = 0.0

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def _grads(model: nn.Module, names) -> dict[str, torch.Tensor]:
    return {
        n: (p.grad.detach().double() if p.grad is not None else torch.zeros_like(p, dtype=torch.float64))
        for n, p in model.named_parameters()
        if n in names
    }


def noise_floor(loss: float, grad_inf: float, step: float, precision: int, tol: float) -> float:
    """Gradient magnitude below which a relative error of ``tol`` cannot be resolved.

    A central difference of a float64 loss carries roundoff of about
    eps64 * |loss| / step; a float32 backward pass adds about eps32 * |grad|_inf.
    Both bounds get a safety factor of ``NOISE_FACTOR``.
    """
    noise = np.finfo(np.float64).eps * max(abs(loss), 1.0) / step
    if precision != 64:
        noise += np.finfo(np.float32).eps * grad_inf
    return float(max(NOISE_FACTOR * noise / tol, 1e-8))


def grad_check(
    model: nn.Module,
    loss_fn: Callable[[nn.Module], torch.Tensor],
    n_coords: int = 200,
    step: float = 1e-5,
    seed: int = 0,
    precision: int = 64,
    tol: float | None = None,
) -> GradCheckReport:
    """Compare autograd gradients with central differences on random coordinates.

    The numerical side always runs on a float64 copy.  With ``precision=32``
    the analytic gradient comes from a float32 copy of the same parameters.
    ``loss_fn`` must be deterministic.  Frozen parameters are skipped.

    Relative error is |a - n| / max(|a|, |n|, floor) with ``floor`` from
    :func:`noise_floor`, so coordinates whose true gradient is near zero are
    held to the roundoff level in absolute terms rather than compared
    relatively against noise.
    """
    tol = TOLERANCE[precision] if tol is None else tol
    ref = copy.deepcopy(model).double()
    analytic_model = ref if precision == 64 else copy.deepcopy(model).float()
    names = [n for n, p in ref.named_parameters() if p.requires_grad]
    if not names:
        raise ValueError("model has no trainable parameters")

    # frozen parameters still set the roundoff scale, so the analytic pass differentiates everything
    if analytic_model is ref:
        analytic_model = copy.deepcopy(ref)
    for p in analytic_model.parameters():
        p.requires_grad_(True)
    analytic_model.zero_grad(set_to_none=True)
    loss = loss_fn(analytic_model)
    loss.backward()
    grads = _grads(analytic_model, names)
    grad_inf = max(float(g.abs().max()) for g in _grads(analytic_model, [n for n, _ in analytic_model.named_parameters()]).values())

    params = dict(ref.named_parameters())
    sizes = np.array([params[n].numel() for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = np.arange(total) if total <= n_coords else np.sort(rng.choice(total, n_coords, replace=False))
    bounds = np.cumsum(sizes)

    worst, worst_name = 0.0, names[0]
    with torch.no_grad():
        floor = noise_floor(loss_fn(ref).item(), grad_inf, step, precision, tol)
        for coord in flat:
            k = int(np.searchsorted(bounds, coord, side="right"))
            name = names[k]
            offset = int(coord - (bounds[k - 1] if k else 0))
            p = params[name].view(-1)
            orig = p[offset].item()
            p[offset] = orig + step
            plus = loss_fn(ref).item()
            p[offset] = orig - step
            minus = loss_fn(ref).item()
            p[offset] = orig
            numeric = (plus - minus) / (2 * step)
            a = grads[name].view(-1)[offset].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if rel > worst:
                worst, worst_name = rel, name
    return GradCheckReport(worst, worst_name, len(flat), floor)
