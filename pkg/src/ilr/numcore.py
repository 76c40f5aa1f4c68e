"""Dense tensor operations with reverse-mode gradients.

Tensors are ``torch.Tensor`` values; torch's dynamic graph records every
operation on the forward pass and replays it in reverse on ``backward``.
The functions here add the shape validation the model relies on and a
central-difference oracle that is independent of the autograd path.
"""

from __future__ import annotations

import math
import os
from typing import Callable, Sequence

import torch

Tensor = torch.Tensor

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def set_threads(n: int | None = None) -> int:
    """Cap intra-op parallelism; ``ILR_THREADS`` wins when ``n`` is None."""
    if n is None:
        n = int(os.environ.get("ILR_THREADS", "1"))
    n = max(1, n)
    torch.set_num_threads(n)
    return n


def resolve_dtype(name: str | torch.dtype) -> torch.dtype:
    if isinstance(name, torch.dtype):
        return name
    try:
        return DTYPES[name]
    except KeyError:
        raise ValueError(f"unsupported dtype {name!r}; use float32 or float64") from None


def tensor(data, requires_grad: bool = False, dtype: str | torch.dtype = "float64") -> Tensor:
    t = torch.as_tensor(data, dtype=resolve_dtype(dtype)).clone()
    if any(s == 0 for s in t.shape):
        raise ValueError(f"zero-extent shape {tuple(t.shape)} rejected")
    t.requires_grad_(requires_grad)
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is a matrix and ``a`` may carry leading batch dims."""
    if b.dim() != 2 or a.dim() < 2:
        raise ValueError(f"matmul needs a[...,m,k] and b[k,n], got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape[-1]} vs {b.shape[0]}")
    return a @ b


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    # row-vector over the trailing axis, or a python-style scalar tensor
    if b.dim() == 1 and b.shape[0] == a.shape[-1]:
        return
    if b.dim() == 0:
        return
    raise ValueError(f"incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return a * b


def scale(a: Tensor, c: float) -> Tensor:
    return a * c


def neg(a: Tensor) -> Tensor:
    return -a


def silu(x: Tensor) -> Tensor:
    """``x * sigmoid(x)``."""
    return torch.nn.functional.silu(x)


def softmax_rows(x: Tensor, mask: Tensor | None = None) -> Tensor:
    """Row softmax over the last axis, with an optional additive mask.

    ``mask`` entries are 0, finite biases, or ``-inf``; a row that is
    entirely ``-inf`` cannot be normalised and is rejected.
    """
    if mask is not None:
        try:
            ok = torch.broadcast_shapes(mask.shape, x.shape) == x.shape
        except RuntimeError:
            ok = False
        if not ok:
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match scores {tuple(x.shape)}")
        if torch.isneginf(mask).all(dim=-1).any():
            raise ValueError("softmax row is fully masked")
        x = x + mask
    # torch's kernel subtracts the row max before exponentiating
    return torch.softmax(x, dim=-1)


def rms_norm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    if eps <= 0:
        raise ValueError("rms_norm eps must be positive")
    if weight.dim() != 1 or weight.shape[0] != x.shape[-1]:
        raise ValueError(f"norm weight {tuple(weight.shape)} does not match features {x.shape[-1]}")
    inv = torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + eps)
    return x * inv * weight


def _as_ids(ids) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    return ids


def embedding_gather(table: Tensor, ids) -> Tensor:
    ids = _as_ids(ids)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ValueError(f"token id out of range [0, {table.shape[0]})")
    # indexing backward is a scatter-add, so repeated ids accumulate
    return table[ids]


def cross_entropy_mean(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row softmax of ``logits``."""
    targets = _as_ids(targets)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(
            f"targets shape {tuple(targets.shape)} does not match logits {tuple(logits.shape)}"
        )
    V = logits.shape[-1]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= V):
        raise ValueError(f"target id out of range [0, {V})")
    return token_nll(logits, targets).mean()


def token_nll(logits: Tensor, targets) -> Tensor:
    """Per-position negative log-likelihood, log-sum-exp stabilised."""
    targets = _as_ids(targets)
    lse = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return lse - picked


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it; uses accumulate."""
    if loss.numel() != 1 or loss.dim() != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss was not produced by recorded operations")
    loss.backward()


def grad(loss: Tensor, inputs: Sequence[Tensor], grad_output: Tensor | None = None,
         retain_graph: bool = False) -> list[Tensor]:
    """Vector-Jacobian product of ``loss`` with respect to ``inputs``.

    Unused inputs get zero gradients instead of ``None``.
    """
    out = torch.autograd.grad(
        loss, list(inputs), grad_outputs=grad_output, retain_graph=retain_graph, allow_unused=True
    )
    return [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, out)]


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, step: float = 1e-5) -> Tensor:
    """Central differences ``(f(x+h e_i) - f(x-h e_i)) / 2h`` for every element of ``x``.

    ``f`` is called on a perturbed copy; ``x`` itself is left unchanged.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    base = x.detach().clone()
    flat = base.view(-1)
    out = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            fp = float(f(base))
            flat[i] = orig - step
            fm = float(f(base))
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * step)
    return out.view_as(x)


def max_rel_error(a: Tensor, b: Tensor, floor: float = 1e-8) -> float:
    """``max |a-b| / max(|a|, |b|, floor)`` elementwise."""
    a = a.detach().to(torch.float64)
    b = b.detach().to(torch.float64)
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return float(((a - b).abs() / denom).max()) if a.numel() else 0.0


def max_abs_diff(a: Tensor, b: Tensor) -> float:
    return float((a.detach().to(torch.float64) - b.detach().to(torch.float64)).abs().max())


def global_norm(tensors: Sequence[Tensor]) -> float:
    return math.sqrt(sum(float((t.detach().to(torch.float64) ** 2).sum()) for t in tensors))


def finite_diff_grad_batched(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
                             indices: Sequence[int] | None = None, chunk: int = 512) -> Tensor:
    """Central differences evaluated many perturbations at a time with ``vmap``.

    ``f`` must be written with torch ops so it can be vectorised; it is only
    ever evaluated, never differentiated. With ``indices`` only those flat
    elements are perturbed and the returned vector holds just their slopes.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    base = x.detach().reshape(-1)
    idx = torch.arange(base.numel()) if indices is None else torch.as_tensor(indices, dtype=torch.long)
    fv = torch.func.vmap(lambda v: f(v.view_as(x)))
    out = torch.empty(len(idx), dtype=base.dtype)
    with torch.no_grad():
        for s in range(0, len(idx), chunk):
            ii = idx[s:s + chunk]
            n = len(ii)
            X = base.repeat(2 * n, 1)
            rows = torch.arange(n)
            X[rows, ii] += step
            X[rows + n, ii] -= step
            vals = fv(X)
            out[s:s + n] = (vals[:n] - vals[n:]) / (2.0 * step)
    return out.view_as(x) if indices is None else out


def grad_check_error(analytic: Tensor, numeric: Tensor, atol: float = 1e-8) -> float:
    """Worst ``|a-n| / max(|a|,|n|)`` over elements whose difference exceeds ``atol``."""
    a = analytic.detach().to(torch.float64).reshape(-1)
    n = numeric.detach().to(torch.float64).reshape(-1)
    diff = (a - n).abs()
    sel = diff > atol
    if not bool(sel.any()):
        return 0.0
    return float((diff[sel] / torch.maximum(a.abs(), n.abs())[sel]).max())
