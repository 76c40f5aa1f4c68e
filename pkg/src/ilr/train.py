"""AdamW with warmup + cosine schedule, global-norm clipping, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import torch

from ilr import numcore as nc
from ilr.data import Batch
from ilr.model import ModelParams, save_checkpoint
from ilr.recurrence import Strategy, forward, strategy_to_dict, validate

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    warmup_fraction: float = 0.1
    total_steps: int = 500
    batch_size: int = 16
    seq_len: int = 128
    grad_clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    dtype: str = "float32"
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be > 0")
        if self.total_steps < 0 or self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("total_steps >= 0, batch_size >= 1 and seq_len >= 1 required")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        nc.resolve_dtype(self.dtype)

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_fraction * self.total_steps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# Reference hyperparameters. Step counts give ~500M tokens at batch 64 x 1024.
PAPER_SMALL_TRAIN = TrainConfig(learning_rate=3e-3, warmup_fraction=0.10, total_steps=7630,
                                batch_size=64, seq_len=1024, grad_clip_norm=1.0)
PAPER_LARGE_TRAIN = TrainConfig(learning_rate=1e-3, warmup_fraction=0.02, total_steps=7630,
                                batch_size=64, seq_len=1024, grad_clip_norm=1.0)
DESK_SMALL_TRAIN = TrainConfig(learning_rate=3e-3, warmup_fraction=0.10, total_steps=500,
                               batch_size=16, seq_len=128, grad_clip_norm=1.0)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``learning_rate``, then cosine decay to 0 at ``total_steps``."""
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = cfg.warmup_steps
    if warm and step < warm:
        return cfg.learning_rate * step / warm
    if total == warm:
        return cfg.learning_rate
    progress = (step - warm) / (total - warm)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: dict[str, torch.Tensor], max_norm: float, step: int | None = None) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; return the factor."""
    if not max_norm > 0:
        raise ValueError("max_norm must be > 0")
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {name}" + (f" at step {step}" if step is not None else ""))
    norm = nc.global_norm(list(grads.values()))
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for g in grads.values():
        g.mul_(factor)
    return factor


@dataclass
class AdamWState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def decays(name: str) -> bool:
    """Weight decay applies to matrices only: not norms, not embeddings."""
    return not (name.endswith("norm") or name in ("tok_emb", "pos_emb"))


def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamWState,
               lr: float, cfg: TrainConfig) -> None:
    """One in-place AdamW update with bias correction and decoupled weight decay."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if cfg.weight_decay and decays(name):
                p.mul_(1.0 - lr * cfg.weight_decay)
            denom = (v / c2).sqrt_().add_(cfg.adam_eps)
            p.addcdiv_(m / c1, denom, value=-lr)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    layer_grad_norms: list[list[float]] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def summary(self, strategy: Strategy) -> dict:
        return {
            "strategy": strategy_to_dict(strategy),
            "steps": len(self.losses),
            "initial_loss": self.losses[0] if self.losses else None,
            "final_loss": self.losses[-1] if self.losses else None,
            "min_loss": min(self.losses) if self.losses else None,
            "max_grad_norm": max(self.grad_norms) if self.grad_norms else None,
            "checkpoints": list(self.checkpoints),
        }


def train(params: ModelParams, batches: Iterator[Batch], strategy: Strategy, cfg: TrainConfig,
          out_dir: str | Path | None = None, log_path: str | Path | None = None) -> TrainReport:
    """Train ``params`` in place for ``cfg.total_steps`` steps.

    One JSON record per step goes to ``log_path`` when given. Checkpoints
    land in ``out_dir`` every ``cfg.checkpoint_every`` steps and at the end.
    A non-finite loss raises :class:`NumericalError` before any update, so
    checkpoints already written stay the last good ones.
    """
    validate(strategy, params.config)
    report = TrainReport()
    named = dict(params.named_tensors())
    state = AdamWState()
    out_dir = Path(out_dir) if out_dir is not None else None
    meta = {"strategy": strategy_to_dict(strategy), "train": cfg.to_dict()}
    logf = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for step in range(cfg.total_steps):
            batch = next(batches)
            params.zero_grad()
            logits, _ = forward(params, torch.as_tensor(batch.inputs), strategy)
            loss = nc.cross_entropy_mean(logits, torch.as_tensor(batch.targets))
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise NumericalError(f"non-finite loss {loss_val} at step {step}")
            nc.backward(loss)
            grads = {n: t.grad for n, t in named.items()}
            for n, g in grads.items():
                if g is None:
                    grads[n] = torch.zeros_like(named[n])
            layer_norms = [
                nc.global_norm([grads[f"layers.{i}.{n}"] for n, _ in layer.named()])
                for i, layer in enumerate(params.layers)
            ]
            gnorm = nc.global_norm(list(grads.values()))
            clip_global_norm(grads, cfg.grad_clip_norm, step)
            lr = lr_at(step, cfg)
            adamw_step(named, grads, state, lr, cfg)

            report.losses.append(loss_val)
            report.lrs.append(lr)
            report.grad_norms.append(gnorm)
            report.layer_grad_norms.append(layer_norms)
            if logf is not None:
                logf.write(json.dumps({"step": step, "loss": loss_val, "lr": lr, "grad_norm": gnorm,
                                       "layer_grad_norms": layer_norms}) + "\n")
            done = step + 1
            if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                report.checkpoints.append(_checkpoint(out_dir, params, meta, done))
            if step % 50 == 0:
                log.info("step %d loss %.4f lr %.2e gnorm %.3f", step, loss_val, lr, gnorm)
        if out_dir is not None and cfg.total_steps:
            path = str(out_dir / "final.ilr")
            save_checkpoint(path, params, {**meta, "step": cfg.total_steps})
            report.checkpoints.append(path)
    finally:
        if logf is not None:
            logf.close()
        params.zero_grad()
    return report


def _checkpoint(out_dir: Path, params: ModelParams, meta: dict, step: int) -> str:
    path = str(out_dir / f"step{step:06d}.ilr")
    save_checkpoint(path, params, {**meta, "step": step})
    return path


def to_dtype(params: ModelParams, dtype: str | torch.dtype) -> ModelParams:
    dt = nc.resolve_dtype(dtype)
    return params.map(lambda t: t.detach().to(dt).clone().requires_grad_(True))
