"""Central finite-difference check of the training loss gradient.

ReLU and max-pool make the network piecewise smooth. With BatchNorm over the
handful of values in a tiny config, a 1e-4 parameter step moves some
pre-activations by more than their distance to zero, so the raw difference
quotient straddles a kink and measures the jump rather than the derivative.
:func:`frozen_kinks` pins the ReLU masks and max-pool argmax of the
unperturbed pass; the perturbed passes then evaluate the loss on the same
smooth piece on which autograd differentiates.
"""

from __future__ import annotations

import contextlib
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F


class _PinnedReLU(nn.Module):
    def __init__(self):
        super().__init__()
        self.mask = None
        self.record = True

    def forward(self, x):
        if self.record:
            self.mask = (x > 0).to(x.dtype)
            return F.relu(x)
        return x * self.mask


class _PinnedMaxPool3d(nn.Module):
    def __init__(self, pool: nn.MaxPool3d):
        super().__init__()
        self.args = (pool.kernel_size, pool.stride, pool.padding, pool.dilation, pool.ceil_mode)
        self.indices = None
        self.record = True

    def forward(self, x):
        if self.record:
            out, self.indices = F.max_pool3d(x, *self.args, return_indices=True)
            return out
        flat = x.flatten(2)
        idx = self.indices.flatten(2)
        return flat.gather(2, idx).reshape(self.indices.shape)


def _swap(model: nn.Module):
    swapped = []
    targets = [(parent, name, child) for parent in model.modules()
               for name, child in parent.named_children()]
    for parent, name, child in targets:
        if isinstance(child, nn.ReLU):
            new = _PinnedReLU()
        elif isinstance(child, nn.MaxPool3d):
            new = _PinnedMaxPool3d(child)
        else:
            continue
        setattr(parent, name, new)
        swapped.append((parent, name, child, new))
    return swapped


@contextlib.contextmanager
def frozen_kinks(model: nn.Module, loss_fn: Callable[[], torch.Tensor]):
    """Inside the block, ``loss_fn`` reuses the activation pattern of one reference pass."""
    swapped = _swap(model)
    try:
        with torch.no_grad():
            loss_fn()
        for *_, new in swapped:
            new.record = False
        yield
    finally:
        for parent, name, old, _ in swapped:
            setattr(parent, name, old)


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-7) -> float:
    denom = max(float(a.norm()), float(b.norm()), floor)
    return float((a - b).norm()) / denom


def check_gradients(model: nn.Module, loss_fn: Callable[[], torch.Tensor],
                    step: float = 1e-4, max_elements: int | None = None,
                    generator: torch.Generator | None = None,
                    pin_kinks: bool = True) -> dict[str, float]:
    """Relative error between autograd and central differences, per parameter tensor.

    ``loss_fn`` must be a deterministic closure over ``model``. With
    ``max_elements`` only that many randomly chosen entries of each tensor are
    perturbed, and the error is computed on those entries.
    """
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    analytic = {n: p.grad.detach().reshape(-1).clone()
                for n, p in model.named_parameters() if p.requires_grad}
    ctx = frozen_kinks(model, loss_fn) if pin_kinks else contextlib.nullcontext()
    errors = {}
    with ctx, torch.no_grad():
        for name, p in model.named_parameters():
            if name not in analytic:
                continue
            flat = p.view(-1)
            if max_elements is None or flat.numel() <= max_elements:
                idx = torch.arange(flat.numel())
            else:
                idx = torch.randperm(flat.numel(), generator=generator)[:max_elements]
            numeric = torch.empty(len(idx), dtype=flat.dtype)
            for j, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * step)
            errors[name] = relative_error(analytic[name][idx], numeric)
    return errors
