"""Central finite-difference oracle for checking autograd gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

FD_STEP = 1e-5


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``, elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@torch.no_grad()
def central_difference(
    fn: Callable[[], torch.Tensor],
    tensor: torch.Tensor,
    indices: Sequence[int] | None = None,
    step: float = FD_STEP,
) -> np.ndarray:
    """Numerical d fn() / d tensor.flat[i] for each requested flat index.

    ``fn`` takes no arguments and must read ``tensor`` by reference; the
    tensor is perturbed in place and restored afterwards.
    """
    flat = tensor.view(-1)
    if indices is None:
        indices = range(flat.numel())
    out = []
    for i in indices:
        orig = flat[i].item()
        flat[i] = orig + step
        f_plus = float(fn())
        flat[i] = orig - step
        f_minus = float(fn())
        flat[i] = orig
        out.append((f_plus - f_minus) / (2 * step))
    return np.asarray(out)


def check_gradient(
    fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], step: float = FD_STEP
) -> float:
    """Max relative error between autograd and central differences of ``fn(*inputs)``.

    ``fn`` must return a scalar.  Inputs must be float64 leaf tensors.
    """
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    value = fn(*leaves)
    grads = torch.autograd.grad(value, leaves, allow_unused=True)
    worst = 0.0
    for k, (leaf, g) in enumerate(zip(leaves, grads)):
        analytic = np.zeros(leaf.numel()) if g is None else g.detach().reshape(-1).numpy()
        probe = leaf.detach().clone()
        others = [x.detach() for x in leaves]

        def closure():
            args = list(others)
            args[k] = probe
            return fn(*args)

        numeric = central_difference(closure, probe, step=step)
        worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst
