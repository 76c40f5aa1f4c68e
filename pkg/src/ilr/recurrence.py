"""Intra-layer recurrence, block recurrence, and the gradient oracles.

Under a reuse map ``[r_1, ..., r_L]`` layer ``l`` is applied ``r_l`` times
in a row to its own output with the same weights. Block recurrence instead
runs the whole stack ``steps`` times, feeding ``x_t = h_{t-1} + e`` into
each pass with ``h_0 = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import torch

from ilr import numcore as nc
from ilr.model import (
    LayerParams,
    ModelConfig,
    ModelParams,
    embed,
    layer_forward,
    lm_head,
)
from ilr.numcore import Tensor


@dataclass(frozen=True)
class ReuseMap:
    counts: tuple[int, ...]

    def __init__(self, counts: Sequence[int]):
        object.__setattr__(self, "counts", tuple(int(c) for c in counts))
        if not self.counts:
            raise ValueError("reuse map is empty")
        bad = [c for c in self.counts if c < 1]
        if bad:
            raise ValueError(f"reuse counts must be >= 1, got {list(self.counts)}")

    def __len__(self) -> int:
        return len(self.counts)

    def __iter__(self):
        return iter(self.counts)

    @property
    def effective_depth(self) -> int:
        return sum(self.counts)

    def __str__(self) -> str:
        return "[" + ",".join(map(str, self.counts)) + "]"


@dataclass(frozen=True)
class Baseline:
    def label(self) -> str:
        return "baseline"


@dataclass(frozen=True)
class IntraLayer:
    map: ReuseMap

    def __init__(self, map: ReuseMap | Sequence[int]):
        object.__setattr__(self, "map", map if isinstance(map, ReuseMap) else ReuseMap(map))

    def label(self) -> str:
        return f"ilr{self.map}"


@dataclass(frozen=True)
class Block:
    steps: int

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError(f"block steps must be >= 1, got {self.steps}")

    def label(self) -> str:
        return f"block(r={self.steps})"


Strategy = Union[Baseline, IntraLayer, Block]


def strategy_to_dict(s: Strategy) -> dict:
    if isinstance(s, Baseline):
        return {"strategy": "baseline"}
    if isinstance(s, IntraLayer):
        return {"strategy": "ilr", "map": list(s.map.counts)}
    if isinstance(s, Block):
        return {"strategy": "block", "steps": s.steps}
    raise TypeError(f"not a strategy: {s!r}")


def strategy_from_dict(d: dict) -> Strategy:
    kind = d.get("strategy")
    expected = {"baseline": {"strategy"}, "ilr": {"strategy", "map"}, "block": {"strategy", "steps"}}
    if kind not in expected:
        raise ValueError(f"unknown strategy {kind!r}; expected baseline, ilr or block")
    if set(d) != expected[kind]:
        raise ValueError(f"{kind} strategy takes keys {sorted(expected[kind])}, got {sorted(d)}")
    if kind == "baseline":
        return Baseline()
    if kind == "ilr":
        if not isinstance(d["map"], list) or not all(isinstance(c, int) for c in d["map"]):
            raise ValueError("ilr map must be a list of integers")
        return IntraLayer(ReuseMap(d["map"]))
    if not isinstance(d["steps"], int):
        raise ValueError("block steps must be an integer")
    return Block(d["steps"])


def validate(strategy: Strategy, config: ModelConfig) -> None:
    """Raise ``ValueError`` if ``strategy`` does not fit ``config``."""
    if isinstance(strategy, IntraLayer):
        n = len(strategy.map)
        if n != config.n_layers:
            raise ValueError(f"map length {n} ≠ layers {config.n_layers}")
    elif isinstance(strategy, Block):
        if strategy.steps < 1:
            raise ValueError("block steps must be >= 1")
    elif not isinstance(strategy, Baseline):
        raise TypeError(f"not a strategy: {strategy!r}")


def effective_depth(strategy: Strategy, n_layers: int) -> int:
    if isinstance(strategy, Baseline):
        return n_layers
    if isinstance(strategy, IntraLayer):
        return strategy.map.effective_depth
    return strategy.steps * n_layers


def layer_counts(strategy: Strategy, n_layers: int) -> list[int]:
    """Applications of each layer per forward pass."""
    if isinstance(strategy, Baseline):
        return [1] * n_layers
    if isinstance(strategy, IntraLayer):
        return list(strategy.map.counts)
    return [strategy.steps] * n_layers


@dataclass
class ForwardTrace:
    """Intermediate states of one forward pass.

    ``states[l][k]`` is the output of the (k+1)-th application of layer l
    (ILR), ``block_inputs``/``block_outputs`` hold ``x_t``/``h_t`` (block
    mode). ``layer_inputs[l]`` is the state entering layer l's first
    application.
    """

    embedding: Tensor
    states: list[list[Tensor]] = field(default_factory=list)
    layer_inputs: list[Tensor] = field(default_factory=list)
    block_inputs: list[Tensor] = field(default_factory=list)
    block_outputs: list[Tensor] = field(default_factory=list)

    def flat_states(self) -> list[tuple[str, Tensor]]:
        if self.block_outputs:
            out = []
            for t, h in enumerate(self.block_outputs):
                out.append((f"step{t + 1}", h))
            return out
        return [(f"L{l + 1}.{k + 1}", h) for l, hs in enumerate(self.states) for k, h in enumerate(hs)]


def forward_ilr(params: ModelParams, token_ids, reuse: ReuseMap | Sequence[int],
                capture: bool = False) -> tuple[Tensor, ForwardTrace | None]:
    """Logits under a reuse map; layer weights are shared across re-entries."""
    reuse = reuse if isinstance(reuse, ReuseMap) else ReuseMap(reuse)
    cfg = params.config
    validate(IntraLayer(reuse), cfg)
    e = embed(params, token_ids)
    positions = list(range(e.shape[-2]))
    trace = ForwardTrace(embedding=e) if capture else None
    h = e
    for layer, r in zip(params.layers, reuse.counts):
        if trace is not None:
            trace.layer_inputs.append(h)
            trace.states.append([])
        for _ in range(r):
            # positions are the original token positions on every re-entry
            h = layer_forward(h, layer, cfg, positions)
            if trace is not None:
                trace.states[-1].append(h)
    return lm_head(params, h), trace


def forward_block(params: ModelParams, token_ids, steps: int,
                  capture: bool = False) -> tuple[Tensor, ForwardTrace | None]:
    """Logits under block recurrence with ``x_t = h_{t-1} + e`` and ``h_0 = 0``."""
    if steps < 1:
        raise ValueError("block steps must be >= 1")
    cfg = params.config
    e = embed(params, token_ids)
    positions = list(range(e.shape[-2]))
    trace = ForwardTrace(embedding=e) if capture else None
    h = torch.zeros_like(e)
    for _ in range(steps):
        x = nc.add(h, e)
        if trace is not None:
            trace.block_inputs.append(x)
        h = x
        for layer in params.layers:
            h = layer_forward(h, layer, cfg, positions)
        if trace is not None:
            trace.block_outputs.append(h)
    return lm_head(params, h), trace


def forward(params: ModelParams, token_ids, strategy: Strategy,
            capture: bool = False) -> tuple[Tensor, ForwardTrace | None]:
    validate(strategy, params.config)
    if isinstance(strategy, Block):
        return forward_block(params, token_ids, strategy.steps, capture)
    if isinstance(strategy, IntraLayer):
        return forward_ilr(params, token_ids, strategy.map, capture)
    return forward_ilr(params, token_ids, [1] * params.config.n_layers, capture)


def loss_fn(params: ModelParams, inputs, targets, strategy: Strategy) -> Tensor:
    logits, _ = forward(params, inputs, strategy)
    return nc.cross_entropy_mean(logits, targets)


# --- unrolled oracle --------------------------------------------------------

def unroll(params: ModelParams, reuse: ReuseMap | Sequence[int],
           tied: bool = True) -> tuple[ModelParams, list[int]]:
    """Plain ``sum(r)``-layer model whose layers are copies of the ILR layers.

    With ``tied=True`` the copies are the very same tensors; otherwise each
    copy is an independent leaf holding identical values, so its gradient
    can be read off separately. Also returns the source layer of each copy.
    """
    reuse = reuse if isinstance(reuse, ReuseMap) else ReuseMap(reuse)
    validate(IntraLayer(reuse), params.config)
    source = [l for l, r in enumerate(reuse.counts) for _ in range(r)]
    cfg = replace(params.config, n_layers=len(source))

    def copy(t):
        c = t.detach().clone()
        c.requires_grad_(True)
        return c

    layers = [params.layers[l] if tied else params.layers[l].map(copy) for l in source]
    return ModelParams(config=cfg, tok_emb=params.tok_emb, layers=layers,
                       final_norm=params.final_norm, head=params.head, pos_emb=params.pos_emb), source


# --- gradient oracles --------------------------------------------------------

def _suffix(params: ModelParams, h: Tensor, counts: Sequence[int], start: int, positions) -> Tensor:
    """Logits from the state entering layer ``start``."""
    cfg = params.config
    for layer, r in zip(params.layers[start:], counts[start:]):
        for _ in range(r):
            h = layer_forward(h, layer, cfg, positions)
    return lm_head(params, h)


@dataclass
class InputGradient:
    """``dL/dh^{(l-1)}`` computed end to end and by an explicit reverse sweep."""

    layer: int
    autodiff: Tensor
    explicit: Tensor
    deltas: list[Tensor]  # deltas[k] = dL/dh^{(l,k)} for k = 0..r_l (k=0 is the layer input)


def input_gradient_oracle(params: ModelParams, inputs, targets, reuse: ReuseMap | Sequence[int],
                          layer: int) -> InputGradient:
    """Compare autodiff ``dL/dh^{(l-1)}`` with a chain of vector-Jacobian products.

    ``layer`` is 0-based. The explicit route differentiates only the network
    suffix above layer ``layer`` to get the error signal at its last
    recurrence, then walks back through the ``r_l`` applications one
    Jacobian at a time.
    """
    reuse = reuse if isinstance(reuse, ReuseMap) else ReuseMap(reuse)
    cfg = params.config
    validate(IntraLayer(reuse), cfg)
    if not 0 <= layer < cfg.n_layers:
        raise ValueError(f"layer {layer} out of range [0, {cfg.n_layers})")
    logits, trace = forward_ilr(params, inputs, reuse, capture=True)
    loss = nc.cross_entropy_mean(logits, targets)
    h_in = trace.layer_inputs[layer]
    (auto,) = nc.grad(loss, [h_in])

    positions = list(range(h_in.shape[-2]))
    states = [h_in.detach()] + [s.detach() for s in trace.states[layer]]
    r = reuse.counts[layer]
    top = states[-1].clone().requires_grad_(True)
    suffix_loss = nc.cross_entropy_mean(_suffix(params, top, reuse.counts, layer + 1, positions), targets)
    (delta,) = nc.grad(suffix_loss, [top])
    deltas = [delta]
    lp = params.layers[layer]
    for k in range(r, 0, -1):
        x = states[k - 1].clone().requires_grad_(True)
        y = layer_forward(x, lp, cfg, positions)
        (delta,) = nc.grad(y, [x], grad_output=delta)
        deltas.append(delta)
    deltas.reverse()
    return InputGradient(layer=layer, autodiff=auto, explicit=delta, deltas=deltas)


@dataclass
class GradientDecomposition:
    """Per-recurrence contributions to ``dL/dtheta^{(l)}``.

    Each entry is a list aligned with ``LayerParams.tensors()``.
    ``contributions`` come from stop-gradient reruns, ``vjp_contributions``
    from the explicit error signals; both should sum to ``total``.
    """

    layer: int
    contributions: list[list[Tensor]]
    vjp_contributions: list[list[Tensor]]
    total: list[Tensor]

    def summed(self, which: str = "contributions") -> list[Tensor]:
        parts = getattr(self, which)
        return [sum(ts) for ts in zip(*parts)]


def _forward_with_live_application(params: ModelParams, inputs, reuse: ReuseMap, layer: int,
                                   live_k: int, frozen: LayerParams) -> Tensor:
    cfg = params.config
    e = embed(params, inputs)
    positions = list(range(e.shape[-2]))
    h = e
    for l, (lp, r) in enumerate(zip(params.layers, reuse.counts)):
        for k in range(r):
            use = lp if (l != layer or k == live_k) else frozen
            h = layer_forward(h, use, cfg, positions)
    return lm_head(params, h)


def param_gradient_decomposition(params: ModelParams, inputs, targets,
                                 reuse: ReuseMap | Sequence[int], layer: int) -> GradientDecomposition:
    reuse = reuse if isinstance(reuse, ReuseMap) else ReuseMap(reuse)
    cfg = params.config
    validate(IntraLayer(reuse), cfg)
    if not 0 <= layer < cfg.n_layers:
        raise ValueError(f"layer {layer} out of range [0, {cfg.n_layers})")
    theta = params.layers[layer].tensors()
    frozen = params.layers[layer].map(lambda t: t.detach())

    logits, _ = forward_ilr(params, inputs, reuse)
    total = nc.grad(nc.cross_entropy_mean(logits, targets), theta)

    contributions = []
    for k in range(reuse.counts[layer]):
        logits = _forward_with_live_application(params, inputs, reuse, layer, k, frozen)
        contributions.append(nc.grad(nc.cross_entropy_mean(logits, targets), theta))

    ig = input_gradient_oracle(params, inputs, targets, reuse, layer)
    _, trace = forward_ilr(params, inputs, reuse, capture=True)
    states = [trace.layer_inputs[layer].detach()] + [s.detach() for s in trace.states[layer]]
    positions = list(range(states[0].shape[-2]))
    vjp = []
    for k in range(reuse.counts[layer]):
        y = layer_forward(states[k], params.layers[layer], cfg, positions)
        vjp.append(nc.grad(y, theta, grad_output=ig.deltas[k + 1]))
    return GradientDecomposition(layer=layer, contributions=contributions,
                                 vjp_contributions=vjp, total=total)


# --- logit probe --------------------------------------------------------------

@dataclass
class ProbeEntry:
    label: str
    probs: Tensor       # [..., T, V]
    top_ids: Tensor     # [..., T, k]
    top_probs: Tensor   # [..., T, k]


def logit_probe(params: ModelParams, trace: ForwardTrace, top_k: int = 5) -> list[ProbeEntry]:
    """Decode every traced state through the final norm and head."""
    out = []
    with torch.no_grad():
        for label, h in trace.flat_states():
            probs = torch.softmax(lm_head(params, h.detach()), dim=-1)
            p, ids = probs.topk(min(top_k, probs.shape[-1]), dim=-1)
            out.append(ProbeEntry(label=label, probs=probs, top_ids=ids, top_probs=p))
    return out
