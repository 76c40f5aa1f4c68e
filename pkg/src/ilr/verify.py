"""Oracle suite: finite differences, tied unrolls, gradient decompositions, equivalences.

Every check compares two independently computed quantities and records the
measured error next to its tolerance. ``run_suite`` runs them all; the CLI
``verify`` command and the acceptance tests both sit on top of it.
"""

from __future__ import annotations

import json
import math
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ilr import numcore as nc
from ilr.analysis import flops_table, forward_flops
from ilr.data import load_token_cache, save_token_cache, tokenize_bytes
from ilr.model import (
    DESK_SMALL,
    PAPER_SMALL,
    TINY,
    ModelConfig,
    ModelParams,
    PosMode,
    alibi_bias,
    apply_rope,
    attention,
    attention_scores,
    embed,
    flatten,
    init_params,
    layer_forward,
    lm_head,
    load_checkpoint,
    save_checkpoint,
    unflatten,
)
from ilr.recurrence import (
    Baseline,
    Block,
    IntraLayer,
    _suffix,
    forward,
    forward_ilr,
    input_gradient_oracle,
    param_gradient_decomposition,
    unroll,
)

F64 = torch.float64


@dataclass
class Check:
    name: str
    tolerance: float
    measured: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: measured {self.measured:.3e} (tolerance {self.tolerance:.1e})"


def within(name: str, measured: float, tol: float) -> Check:
    return Check(name, tol, float(measured), bool(measured <= tol))


def exact(name: str, measured: float) -> Check:
    return Check(name, 0.0, float(measured), bool(measured == 0.0))


@dataclass
class Problem:
    params: ModelParams
    inputs: torch.Tensor
    targets: torch.Tensor


def make_problem(config: ModelConfig = TINY, seed: int = 0, T: int | None = None,
                 std: float | None = None) -> Problem:
    """Random float64 model and token data.

    The default ``std`` (0.3 at width 16, shrinking as 1/sqrt(width)) is far
    above the training init so every nonlinearity is exercised away from
    its linear regime.
    """
    T = config.max_seq_len if T is None else T
    if std is None:
        std = 0.3 * math.sqrt(16 / config.hidden_dim)
    params = init_params(config, seed, dtype=F64, std=std)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for layer in params.layers:
            layer.attn_norm.uniform_(0.5, 1.5, generator=gen)
            layer.mlp_norm.uniform_(0.5, 1.5, generator=gen)
        params.final_norm.uniform_(0.5, 1.5, generator=gen)
    ids = torch.randint(0, config.vocab_size, (T + 1,), generator=gen)
    return Problem(params, ids[:-1], ids[1:])


# --- numcore -----------------------------------------------------------------

def _fd_check(name: str, f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
              tol: float = 1e-7, step: float = 1e-5) -> Check:
    x = x.detach().clone().requires_grad_(True)
    (g,) = nc.grad(f(x), [x])
    num = nc.finite_diff_grad(f, x, step)
    return within(name, nc.grad_check_error(g, num, atol=1e-12), tol)


def check_numcore(seed: int = 0) -> list[Check]:
    gen = torch.Generator().manual_seed(seed)

    def rnd(*shape):
        return torch.rand(*shape, generator=gen, dtype=F64) * 2 - 1

    checks = []
    a, b = rnd(3, 4), rnd(4, 2)
    w = rnd(3, 2)
    checks.append(_fd_check("numcore: matmul grad wrt a vs finite differences",
                            lambda x: (nc.matmul(x, b) * w).sum(), a))
    checks.append(_fd_check("numcore: matmul grad wrt b vs finite differences",
                            lambda x: (nc.matmul(a, x) * w).sum(), b))
    checks.append(_fd_check("numcore: silu grad at x=1 vs finite differences",
                            lambda x: nc.silu(x).sum(), torch.ones(1, dtype=F64)))
    s, ws = rnd(4, 5), rnd(4, 5)
    mask = torch.zeros(4, 5, dtype=F64)
    mask[0, 3:] = float("-inf")
    out = nc.softmax_rows(s, mask)
    checks.append(within("numcore: softmax rows sum to 1", float((out.sum(-1) - 1).abs().max()), 1e-12))
    checks.append(_fd_check("numcore: softmax grad vs finite differences",
                            lambda x: (nc.softmax_rows(x, mask) * ws).sum(), s))
    v, nw, wv = rnd(3, 6), rnd(6), rnd(3, 6)
    checks.append(_fd_check("numcore: rms_norm grad vs finite differences",
                            lambda x: (nc.rms_norm(x, nw, 1e-5) * wv).sum(), v))
    table, we = rnd(5, 3), rnd(4, 3)
    ids = [1, 3, 1, 0]
    checks.append(_fd_check("numcore: embedding grad vs finite differences",
                            lambda x: (nc.embedding_gather(x, ids) * we).sum(), table))
    logits = rnd(3, 5) * 3
    tg = [4, 0, 2]
    scalar = 0.0
    for t in range(3):
        row = [float(z) for z in logits[t]]
        mx = max(row)
        scalar += -(row[tg[t]] - (mx + math.log(sum(math.exp(z - mx) for z in row))))
    scalar /= 3
    checks.append(within("numcore: cross entropy vs scalar oracle",
                         abs(float(nc.cross_entropy_mean(logits, tg)) - scalar), 1e-12))
    checks.append(_fd_check("numcore: cross entropy grad vs finite differences",
                            lambda x: nc.cross_entropy_mean(x, tg), logits))
    return checks


# --- gradients through the recurrent model -----------------------------------

def model_gradient_error(prob: Problem, strategy, step: float = 1e-4, atol: float = 1e-8,
                         samples: int | None = None, seed: int = 0) -> dict[str, float]:
    """Per-tensor relative error of autodiff gradients against central differences."""
    params = prob.params
    params.zero_grad()
    logits, _ = forward(params, prob.inputs, strategy)
    nc.backward(nc.cross_entropy_mean(logits, prob.targets))
    analytic = torch.cat([t.grad.reshape(-1) for t in params.tensors()])
    params.zero_grad()
    flat = flatten(params)

    def loss(v):
        lg, _ = forward(unflatten(params, v), prob.inputs, strategy)
        return nc.cross_entropy_mean(lg, prob.targets)

    if samples is None:
        idx = None
    else:
        rng = np.random.default_rng(seed)
        idx, off = [], 0
        for t in params.tensors():
            k = min(samples, t.numel())
            idx.extend((off + rng.choice(t.numel(), size=k, replace=False)).tolist())
            off += t.numel()
        idx = sorted(idx)
    numeric = nc.finite_diff_grad_batched(loss, flat, step, indices=idx)
    if idx is not None:
        analytic = analytic[torch.as_tensor(idx)]
        owners = _owners(params, idx)
    else:
        owners = _owners(params, range(flat.numel()))
    errors = {}
    for name in dict(params.named_tensors()):
        sel = [i for i, o in enumerate(owners) if o == name]
        errors[name] = nc.grad_check_error(analytic[sel], numeric[sel], atol)
    return errors


def _owners(params: ModelParams, flat_indices) -> list[str]:
    bounds, off = [], 0
    for name, t in params.named_tensors():
        bounds.append((off + t.numel(), name))
        off += t.numel()
    out, b = [], 0
    for i in flat_indices:
        while i >= bounds[b][0]:
            b += 1
        out.append(bounds[b][1])
    return out


def check_model_gradient(config: ModelConfig = TINY, reuse=(3, 2), samples: int | None = None,
                         tol: float = 1e-4) -> list[Check]:
    prob = make_problem(config)
    errs = model_gradient_error(prob, IntraLayer(list(reuse)), samples=samples)
    worst = max(errs, key=errs.get)
    return [within(f"model grad vs finite differences, map {list(reuse)}, "
                   f"{config.pos_mode.value} (worst: {worst})", errs[worst], tol)]


def _normalized(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = float(b.detach().abs().max())
    return nc.max_abs_diff(a, b) / scale if scale > 0 else nc.max_abs_diff(a, b)


def check_input_gradient(config: ModelConfig = TINY, reuse=(3, 2), fd: bool = True) -> list[Check]:
    prob = make_problem(config)
    checks = []
    for l in range(config.n_layers):
        ig = input_gradient_oracle(prob.params, prob.inputs, prob.targets, list(reuse), l)
        checks.append(within(f"input grad layer {l + 1} (r={reuse[l]}): Jacobian sweep vs autodiff",
                             _normalized(ig.explicit, ig.autodiff), 1e-9))
        if fd:
            _, trace = forward_ilr(prob.params, prob.inputs, list(reuse), capture=True)
            h0 = trace.layer_inputs[l].detach()
            positions = list(range(h0.shape[-2]))

            def loss(h, l=l):
                return nc.cross_entropy_mean(_suffix(prob.params, h, list(reuse), l, positions), prob.targets)

            num = nc.finite_diff_grad_batched(loss, h0, 1e-4)
            checks.append(within(f"input grad layer {l + 1}: autodiff vs finite differences",
                                 nc.grad_check_error(ig.autodiff, num, 1e-8), 1e-4))
    return checks


def check_decomposition(config: ModelConfig = TINY, reuse=(3, 2)) -> list[Check]:
    prob = make_problem(config)
    checks = []
    for l in range(config.n_layers):
        dec = param_gradient_decomposition(prob.params, prob.inputs, prob.targets, list(reuse), l)
        stop = max(_normalized(a, b) for a, b in zip(dec.summed(), dec.total))
        vjp = max(_normalized(a, b) for a, b in zip(dec.summed("vjp_contributions"), dec.total))
        checks.append(within(f"param grad layer {l + 1} (r={reuse[l]}): sum of stop-gradient "
                             f"contributions vs autodiff", stop, 1e-10))
        checks.append(within(f"param grad layer {l + 1} (r={reuse[l]}): sum of error-signal "
                             f"contributions vs autodiff", vjp, 1e-10))
    return checks


def check_equivalences(config: ModelConfig = TINY, reuse=(3, 2)) -> list[Check]:
    mode = config.pos_mode.value
    prob = make_problem(config)
    p = prob.params
    ones = [1] * config.n_layers
    with torch.no_grad():
        base, _ = forward(p, prob.inputs, Baseline())
        ilr1, _ = forward(p, prob.inputs, IntraLayer(ones))
        blk1, _ = forward(p, prob.inputs, Block(1))
        ilr, _ = forward_ilr(p, prob.inputs, list(reuse))
        unrolled, _ = forward(unroll(p, list(reuse), tied=True)[0], prob.inputs, Baseline())
    checks = [
        within(f"{mode}: baseline vs ILR all-ones logits", nc.max_abs_diff(base, ilr1), 1e-12),
        within(f"{mode}: baseline vs block(1) logits", nc.max_abs_diff(base, blk1), 1e-12),
        within(f"{mode}: ILR {list(reuse)} vs tied unroll logits", nc.max_abs_diff(ilr, unrolled), 1e-12),
    ]
    p.zero_grad()
    logits, _ = forward_ilr(p, prob.inputs, list(reuse))
    nc.backward(nc.cross_entropy_mean(logits, prob.targets))
    ilr_grads = [[t.grad.clone() for t in layer.tensors()] for layer in p.layers]
    p.zero_grad()
    untied, source = unroll(p, list(reuse), tied=False)
    logits, _ = forward(untied, prob.inputs, Baseline())
    nc.backward(nc.cross_entropy_mean(logits, prob.targets))
    worst = 0.0
    for l, layer in enumerate(p.layers):
        copies = [untied.layers[i] for i, s in enumerate(source) if s == l]
        for j in range(len(layer.tensors())):
            summed = sum(c.tensors()[j].grad for c in copies)
            worst = max(worst, nc.max_abs_diff(ilr_grads[l][j], summed))
    p.zero_grad()
    checks.append(within(f"{mode}: ILR param grads vs summed untied-copy grads", worst, 1e-10))
    return checks


def check_positional(seed: int = 0) -> list[Check]:
    checks = []
    rope_cfg = replace(TINY, pos_mode=PosMode.ROPE)
    prob = make_problem(rope_cfg, seed)
    e = embed(prob.params, prob.inputs).detach()
    T = e.shape[0]
    pos = list(range(T))
    layer = prob.params.layers[0]
    s0 = attention_scores(e, layer, rope_cfg, pos)
    s7 = attention_scores(e, layer, rope_cfg, [p + 7 for p in pos])
    checks.append(within("rope: attention scores invariant to +7 position shift", nc.max_abs_diff(s0, s7), 1e-10))
    q = torch.randn(T, 2, 8, dtype=F64, generator=torch.Generator().manual_seed(seed))
    k = torch.randn(T, 2, 8, dtype=F64, generator=torch.Generator().manual_seed(seed + 1))
    q0, k0 = apply_rope(q, k, [0] * T)
    checks.append(exact("rope: position 0 is the identity", max(nc.max_abs_diff(q0, q), nc.max_abs_diff(k0, k))))
    qr, _ = apply_rope(q, k, pos)
    norm_err = float((qr.reshape(T, 2, 4, 2).norm(dim=-1) - q.reshape(T, 2, 4, 2).norm(dim=-1)).abs().max())
    checks.append(within("rope: per-pair norms preserved", norm_err, 1e-12))

    bias = alibi_bias(8, 12)
    diag = float(torch.diagonal(bias, dim1=-2, dim2=-1).abs().max())
    shift = 0.0
    for i in range(11):
        for j in range(i + 1):
            shift = max(shift, float((bias[:, i, j] - bias[:, i + 1, j + 1]).abs().max()))
    checks.append(exact("alibi: zero bias on the diagonal", diag))
    checks.append(exact("alibi: bias depends only on distance", shift))
    below = bias[:, torch.ones(12, 12, dtype=torch.bool).tril()]
    checks.append(exact("alibi: bias <= 0 on and below the diagonal", float(below.clamp(min=0).max()) + 0.0))

    nope_cfg = replace(TINY, pos_mode=PosMode.NOPE)
    prob = make_problem(nope_cfg, seed)
    x = embed(prob.params, prob.inputs).detach()
    a = attention(x, prob.params.layers[0], nope_cfg, pos)
    b = attention(x, prob.params.layers[0], nope_cfg, [p + 5 for p in pos])
    checks.append(exact("nope: attention ignores the positions argument", nc.max_abs_diff(a, b)))

    learned_cfg = replace(TINY, pos_mode=PosMode.LEARNED, n_layers=4)
    checks.extend(check_learned_once(learned_cfg, [2, 1, 1, 1], seed))
    return checks


def check_learned_once(config: ModelConfig, reuse, seed: int = 0) -> list[Check]:
    """Learned positions enter once at the embedding and never on re-entry."""
    prob = make_problem(config, seed)
    p = prob.params
    T = prob.inputs.shape[-1]
    pos = list(range(T))
    logits, trace = forward_ilr(p, prob.inputs, reuse, capture=True)
    with torch.no_grad():
        h = p.tok_emb[prob.inputs] + p.pos_emb[:T]
        for layer, r in zip(p.layers, reuse):
            for _ in range(r):
                h = layer_forward(h, layer, config, pos)
        manual = lm_head(p, h)
    checks = [exact(f"learned: ILR {list(reuse)} equals one position add then plain layers",
                    nc.max_abs_diff(logits, manual))]
    loss = nc.cross_entropy_mean(logits, prob.targets)
    g_pos, g_e = nc.grad(loss, [p.pos_emb, trace.embedding])
    checks.append(within("learned: position-table grad equals embedding-output grad (single add)",
                         nc.max_abs_diff(g_pos[:T], g_e), 1e-15))
    checks.append(exact("learned: unused position rows get no gradient", float(g_pos[T:].abs().max()) if T < len(g_pos) else 0.0))
    return checks


def check_flops() -> list[Check]:
    tab = flops_table(PAPER_SMALL, 1024, 500_000_000)
    r1 = tab["ratios"]["reuse_single_layer"]
    r2 = tab["ratios"]["doubled_depth"]
    absolute = tab["baseline"]["training"]
    return [
        exact("flops: reuse-one-layer / baseline layer FLOPs = 1.25", abs(r1 - 1.25)),
        exact("flops: doubled depth / baseline layer FLOPs = 2.0", abs(r2 - 2.0)),
        within("flops: doubled-depth ratio vs measured 8.24/4.13 (relative)", abs(r2 / (8.24 / 4.13) - 1), 0.02),
        within("flops: Small baseline training FLOPs at 500M tokens vs 4.13e15 (relative)",
               abs(absolute / 4.13e15 - 1), 0.25),
        exact("flops: block(2) layer FLOPs = 2x baseline",
              abs(forward_flops(PAPER_SMALL, Block(2), 1024).layer_flops
                  - 2 * forward_flops(PAPER_SMALL, Baseline(), 1024).layer_flops)),
    ]


def check_roundtrips(seed: int = 0) -> list[Check]:
    checks = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for dtype in ("float64", "float32"):
            cfg = replace(TINY, pos_mode=PosMode.LEARNED)
            p = init_params(cfg, seed, dtype=dtype)
            path = tmp / f"ck_{dtype}.ilr"
            save_checkpoint(path, p, {"strategy": {"strategy": "ilr", "map": [2, 1]}})
            q, header = load_checkpoint(path)
            same = all(torch.equal(a.detach(), b.detach()) and a.dtype == b.dtype
                       for a, b in zip(p.tensors(), q.tensors()))
            same = same and q.config == p.config and header["strategy"]["map"] == [2, 1]
            checks.append(exact(f"checkpoint round trip ({dtype}) bit-exact", 0.0 if same else 1.0))
        ids = tokenize_bytes(bytes(range(256)) * 3)
        save_token_cache(tmp / "c.toks", ids)
        back = load_token_cache(tmp / "c.toks")
        checks.append(exact("token cache round trip bit-exact", 0.0 if np.array_equal(ids, back) else 1.0))
    from ilr.config import RunConfig, preset

    ok = True
    for name in ("paper-small", "paper-large", "desk-small", "tiny"):
        rc = preset(name)
        again = RunConfig.from_dict(json.loads(json.dumps(rc.to_dict())))
        ok = ok and again == rc and again.to_dict() == rc.to_dict()
    checks.append(exact("run config parse/serialize/parse fixed point", 0.0 if ok else 1.0))
    return checks


def run_suite(scale: str = "tiny", log: Callable[[str], None] | None = None) -> list[Check]:
    """All oracle checks; ``scale='small'`` uses the desk config with sampled finite differences."""
    if scale not in ("tiny", "small"):
        raise ValueError(f"unknown scale {scale!r}")
    checks: list[Check] = []

    def add(items):
        for c in items:
            checks.append(c)
            if log:
                log(c.line())

    add(check_numcore())
    if scale == "tiny":
        base = TINY
        reuse = (3, 2)
        samples = None
    else:
        base = replace(DESK_SMALL, max_seq_len=16)
        reuse = (3, 2, 1, 2)
        samples = 24
    for mode in PosMode:
        cfg = replace(base, pos_mode=mode)
        add(check_model_gradient(cfg, reuse, samples=samples))
        add(check_equivalences(cfg, reuse))
    add(check_input_gradient(base, reuse))
    add(check_decomposition(base, reuse))
    add(check_positional())
    add(check_flops())
    add(check_roundtrips())
    return checks
