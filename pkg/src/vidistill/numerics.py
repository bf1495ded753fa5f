"""Differentiable-array substrate.

Tensors, reverse-mode gradients and all primitives come from torch; this
module adds the pieces the rest of the package relies on: a central
difference oracle, a stop-gradient primitive, precision switching and a
finiteness guard.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator

import torch


class NonFiniteError(FloatingPointError):
    """Raised when a computation yields NaN or Inf."""


def stop_grad(x: torch.Tensor) -> torch.Tensor:
    """Identity forward, zero backward."""
    return x.detach()


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


@contextlib.contextmanager
def precision(dtype: torch.dtype) -> Iterator[None]:
    """Temporarily switch torch's default floating dtype (float32 / float64)."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def population_var(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Variance along ``dim`` dividing by the extent (not extent - 1)."""
    mean = x.mean(dim=dim, keepdim=True)
    return ((x - mean) ** 2).mean(dim=dim)


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise RuntimeError("loss is detached from any parameter")
    loss.backward()


def finite_difference_gradient(
    f: Callable[[torch.Tensor], torch.Tensor],
    params: torch.Tensor,
    step: float = 1e-5,
    check_determinism: bool = True,
) -> torch.Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``f`` receives a perturbed copy of ``params`` and must be deterministic;
    when ``check_determinism`` is set it is evaluated twice at the base point
    and a mismatch raises ``ValueError``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = params.detach().clone()
    with torch.no_grad():
        if check_determinism:
            a, b = float(f(base.clone())), float(f(base.clone()))
            if a != b:
                raise ValueError("f is not deterministic at the base point")
        grad = torch.zeros_like(base)
        flat = base.view(-1)
        gflat = grad.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            hi = float(f(base.clone()))
            flat[i] = orig - step
            lo = float(f(base.clone()))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """max|a-b| / max(max|a|, max|b|, tiny), the norm used by the gradient checks."""
    num = (a - b).abs().max().item()
    den = max(a.abs().max().item(), b.abs().max().item(), 1e-12)
    return num / den


def autograd_gradient(f: Callable[[torch.Tensor], torch.Tensor], params: torch.Tensor) -> torch.Tensor:
    p = params.detach().clone().requires_grad_(True)
    backward(f(p))
    return p.grad.detach()
