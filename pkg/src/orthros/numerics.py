"""Tensor math, losses and the optimizer used to train the model.

Tensors and reverse-mode differentiation come from torch; the optimizer and
learning-rate schedule are implemented here so their behaviour is explicit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Tuple

import torch
from torch import Tensor

Parameter = torch.nn.Parameter


def set_default_precision(double: bool) -> None:
    torch.set_default_dtype(torch.float64 if double else torch.float32)


def _check_finite(x: Tensor) -> None:
    if not torch.isfinite(x).all():
        raise ValueError("non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x)
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise IndexError(f"axis {axis} out of range for rank {x.dim()}")
    shifted = x - x.max(dim=axis, keepdim=True).values.detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.max(dim=axis, keepdim=True).values.detach()
    return shifted - shifted.exp().sum(dim=axis, keepdim=True).log()


def token_nll(logits: Tensor, targets: Tensor, smoothing: float = 0.0) -> Tensor:
    """Per-position smoothed cross-entropy, same leading shape as ``targets``.

    Targets outside ``[0, V)`` produce garbage that the caller must mask out.
    """
    V = logits.shape[-1]
    lp = log_softmax(logits, -1)
    safe = targets.clamp(0, V - 1)
    nll = -lp.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    if smoothing > 0.0:
        # q = (1 - eps) * onehot + eps / V
        nll = (1.0 - smoothing) * nll - smoothing * lp.mean(dim=-1)
    return nll


def cross_entropy(
    logits: Tensor, targets: Tensor, ignore_index: int = -100, smoothing: float = 0.0
) -> Tensor:
    """Mean smoothed cross-entropy over positions whose target is not ignored."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    logits = logits.reshape(-1, logits.shape[-1])
    if logits.shape[0] != targets.shape[0]:
        raise ValueError("logits/targets position count mismatch")
    keep = targets != ignore_index
    V = logits.shape[-1]
    if ((targets[keep] < 0) | (targets[keep] >= V)).any():
        raise ValueError("target id out of range")
    if not keep.any():
        raise ValueError("empty loss")
    nll = token_nll(logits[keep], targets[keep], smoothing)
    return nll.mean()


def backward(loss: Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError("backward() needs a scalar loss")
    loss.backward()


def noam_lr(step: int, d_model: int, warmup: int, constant: float) -> float:
    if step < 1:
        raise ValueError("noam_lr: step must be >= 1")
    return constant * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup_steps: int = 25000
    lr_constant: float = 5.0
    d_model: int = 256
    step: int = 0
    exp_avg: Dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, Tensor] = field(default_factory=dict)

    def lr(self, step: int | None = None) -> float:
        return noam_lr(self.step + 1 if step is None else step,
                       self.d_model, self.warmup_steps, self.lr_constant)


@torch.no_grad()
def adam_step(params: Iterable[Tuple[str, Parameter]], state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update in place. Gradients are left for the caller to zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params:
        g = p.grad
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        if m.shape != p.shape:
            raise ValueError(f"moment shape mismatch for {name}")
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


def finite_difference_check(
    loss_fn, params: Dict[str, Tensor], n_coords: int = 50, h: float = 1e-5, seed: int = 0
) -> float:
    """Largest relative error between autograd and central differences.

    ``loss_fn()`` must be a pure function of the current parameter values.
    Coordinates are sampled uniformly over all parameters with nonzero size.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for k, p in params.items()}
    names = [k for k, p in params.items() if p.numel() > 0]
    sizes = [params[k].numel() for k in names]
    total = sum(sizes)
    gen = torch.Generator().manual_seed(seed)
    flat = torch.randint(0, total, (n_coords,), generator=gen).tolist()
    worst = 0.0
    with torch.no_grad():
        for idx in flat:
            for k, s in zip(names, sizes):
                if idx < s:
                    break
                idx -= s
            p = params[k].view(-1)
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss_fn().item()
            p[idx] = orig - h
            down = loss_fn().item()
            p[idx] = orig
            num = (up - down) / (2 * h)
            ana = analytic[k].view(-1)[idx].item()
            scale = max(abs(num), abs(ana), 1e-6)
            if not math.isfinite(num):
                return math.inf
            worst = max(worst, abs(num - ana) / scale)
    return worst
