"""AdamW with global gradient-norm clipping."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch

from .numerics import NonFiniteError


class AdamW:
    def __init__(
        self,
        params: Sequence[torch.nn.Parameter],
        lr: float = 2.0e-6,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        max_grad_norm: float | None = 10.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        sq = sum(float((p.grad.double() ** 2).sum()) for p in self.params if p.grad is not None)
        return math.sqrt(sq)

    @torch.no_grad()
    def step(self) -> float:
        """Clip, then update in place. Returns the pre-clip global grad norm."""
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
        if not math.isfinite(norm):
            raise NonFiniteError("non-finite gradient")
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-6)
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            if self.weight_decay:
                p.mul_(1.0 - self.lr * self.weight_decay)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-self.lr)
        return norm

    def state_entries(self, prefix: str, names: Sequence[str]) -> dict[str, np.ndarray]:
        out = {f"{prefix}/step": np.array([self.step_count])}
        for n, m, v in zip(names, self.m, self.v):
            out[f"{prefix}/m/{n}"] = m.numpy()
            out[f"{prefix}/v/{n}"] = v.numpy()
        return out

    def load_entries(self, prefix: str, names: Sequence[str], entries) -> None:
        self.step_count = int(entries[f"{prefix}/step"][0])
        for n, m, v in zip(names, self.m, self.v):
            m.copy_(torch.from_numpy(entries[f"{prefix}/m/{n}"]))
            v.copy_(torch.from_numpy(entries[f"{prefix}/v/{n}"]))


def optimizer_step(opt: AdamW, params=None, grads=None) -> float:
    """Functional entry point: optionally install ``grads`` then take one step."""
    if grads is not None:
        for p, g in zip(params if params is not None else opt.params, grads):
            p.grad = g.clone()
    return opt.step()
