"""LLaMA-style decoder layers with four positional-encoding modes.

A layer is a plain function of ``(x, LayerParams)`` so that the recurrence
engine can call the same layer repeatedly on its own output.

Weights are stored input-major (``x @ W``): projections are ``d x d``,
the SwiGLU gate/up weights ``d x mlp_hidden`` and the head ``d x V``.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from ilr import numcore as nc
from ilr.numcore import Tensor


class PosMode(str, enum.Enum):
    NOPE = "nope"
    ROPE = "rope"
    LEARNED = "learned"
    ALIBI = "alibi"


def default_mlp_hidden(d: int) -> int:
    """round(8d/3), rounded up to a multiple of 8."""
    h = round(8 * d / 3)
    return 8 * math.ceil(h / 8)


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 257
    max_seq_len: int = 128
    mlp_hidden: int | None = None
    pos_mode: PosMode = PosMode.ROPE
    rope_theta: float = 10000.0
    rmsnorm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "pos_mode", PosMode(self.pos_mode))
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", default_mlp_hidden(self.hidden_dim))
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def validate(self) -> None:
        for name in ("hidden_dim", "n_layers", "n_heads", "vocab_size", "max_seq_len", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.pos_mode is PosMode.ROPE:
            if self.head_dim % 2:
                raise ValueError(f"RoPE needs an even head_dim, got {self.head_dim}")
            if not self.rope_theta > 1:
                raise ValueError("rope_theta must be > 1")
        if not self.rmsnorm_eps > 0:
            raise ValueError("rmsnorm_eps must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pos_mode"] = self.pos_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# Published shapes; vocab and seq lengths are the reference ones, not the byte-level desk ones.
PAPER_SMALL = ModelConfig(hidden_dim=128, n_layers=4, n_heads=4, vocab_size=1024, max_seq_len=1024)
PAPER_LARGE = ModelConfig(hidden_dim=768, n_layers=8, n_heads=8, vocab_size=32000, max_seq_len=1024)
DESK_SMALL = ModelConfig(hidden_dim=64, n_layers=4, n_heads=4, vocab_size=257, max_seq_len=128)
TINY = ModelConfig(hidden_dim=16, n_layers=2, n_heads=2, vocab_size=32, max_seq_len=8)

LAYER_MATRICES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")
LAYER_NORMS = ("attn_norm", "mlp_norm")


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    attn_norm: Tensor
    mlp_norm: Tensor

    def tensors(self) -> list[Tensor]:
        return [getattr(self, n) for n in LAYER_MATRICES + LAYER_NORMS]

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for n in LAYER_MATRICES + LAYER_NORMS:
            yield n, getattr(self, n)

    def map(self, fn) -> "LayerParams":
        return LayerParams(**{n: fn(t) for n, t in self.named()})


@dataclass
class ModelParams:
    config: ModelConfig
    tok_emb: Tensor
    layers: list[LayerParams]
    final_norm: Tensor
    head: Tensor
    pos_emb: Tensor | None = None

    def __post_init__(self):
        if len(self.layers) != self.config.n_layers:
            raise ValueError(f"{len(self.layers)} layers for a config with n_layers={self.config.n_layers}")

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "tok_emb", self.tok_emb
        if self.pos_emb is not None:
            yield "pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            for n, t in layer.named():
                yield f"layers.{i}.{n}", t
        yield "final_norm", self.final_norm
        yield "head", self.head

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def num_params(self) -> int:
        return sum(t.numel() for t in self.tensors())

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.dtype

    def map(self, fn) -> "ModelParams":
        """New parameter set with ``fn`` applied to every tensor."""
        return ModelParams(
            config=self.config,
            tok_emb=fn(self.tok_emb),
            layers=[layer.map(fn) for layer in self.layers],
            final_norm=fn(self.final_norm),
            head=fn(self.head),
            pos_emb=None if self.pos_emb is None else fn(self.pos_emb),
        )

    def clone(self, requires_grad: bool | None = None) -> "ModelParams":
        def _c(t):
            c = t.detach().clone()
            c.requires_grad_(t.requires_grad if requires_grad is None else requires_grad)
            return c
        return self.map(_c)

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors():
            t.requires_grad_(flag)
        return self

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None


def flatten(params: ModelParams) -> Tensor:
    return torch.cat([t.detach().reshape(-1) for t in params.tensors()])


def unflatten(template: ModelParams, flat: Tensor) -> ModelParams:
    """Parameter set whose tensors are views into ``flat`` (layout of ``template``)."""
    named = list(template.named_tensors())
    parts = torch.split(flat, [t.numel() for _, t in named])
    d = {n: p.reshape(t.shape) for (n, t), p in zip(named, parts)}
    layers = [LayerParams(**{k: d[f"layers.{i}.{k}"] for k in LAYER_MATRICES + LAYER_NORMS})
              for i in range(template.config.n_layers)]
    return ModelParams(config=template.config, tok_emb=d["tok_emb"], layers=layers,
                       final_norm=d["final_norm"], head=d["head"], pos_emb=d.get("pos_emb"))


def count_params(config: ModelConfig) -> int:
    d, V, m = config.hidden_dim, config.vocab_size, config.mlp_hidden
    per_layer = 4 * d * d + 3 * d * m + 2 * d
    n = 2 * V * d + config.n_layers * per_layer + d
    if config.pos_mode is PosMode.LEARNED:
        n += config.max_seq_len * d
    return n


def init_params(config: ModelConfig, seed: int, dtype: str | torch.dtype = "float64",
                std: float = 0.02) -> ModelParams:
    """Normal(0, std^2) matrices, unit norm weights; identical values for either dtype."""
    dtype = nc.resolve_dtype(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    d, V, m = config.hidden_dim, config.vocab_size, config.mlp_hidden

    def normal(*shape):
        w = torch.randn(*shape, generator=gen, dtype=torch.float64) * std
        return w.to(dtype)

    def ones(n):
        return torch.ones(n, dtype=dtype)

    tok = normal(V, d)
    pos = normal(config.max_seq_len, d) if config.pos_mode is PosMode.LEARNED else None
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerParams(
            wq=normal(d, d), wk=normal(d, d), wv=normal(d, d), wo=normal(d, d),
            w_gate=normal(d, m), w_up=normal(d, m), w_down=normal(m, d),
            attn_norm=ones(d), mlp_norm=ones(d),
        ))
    params = ModelParams(config=config, tok_emb=tok, layers=layers, final_norm=ones(d),
                         head=normal(d, V), pos_emb=pos)
    return params.requires_grad_(True)


def embed(params: ModelParams, token_ids) -> Tensor:
    """Token rows, plus learned position rows 0..T-1 in LEARNED mode (added only here)."""
    cfg = params.config
    ids = torch.as_tensor(token_ids, dtype=torch.long)
    T = ids.shape[-1]
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    e = nc.embedding_gather(params.tok_emb, ids)
    if cfg.pos_mode is PosMode.LEARNED:
        e = e + params.pos_emb[:T]
    return e


def rope_angles(positions, head_dim: int, theta: float, dtype=torch.float64) -> tuple[Tensor, Tensor]:
    if head_dim % 2:
        raise ValueError(f"RoPE needs an even head_dim, got {head_dim}")
    pos = torch.as_tensor(positions, dtype=torch.float64)
    inv_freq = theta ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    ang = pos[:, None] * inv_freq[None, :]
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def _rotate(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    # x: [..., T, H, hd]; cos/sin: [T, hd/2] broadcast over heads
    c = cos[:, None, :]
    s = sin[:, None, :]
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out_even = x_even * c - x_odd * s
    out_odd = x_even * s + x_odd * c
    return torch.stack((out_even, out_odd), dim=-1).flatten(-2)


def apply_rope(q: Tensor, k: Tensor, positions, theta: float = 10000.0) -> tuple[Tensor, Tensor]:
    """Rotate each (2i, 2i+1) pair of q and k by ``pos * theta**(-2i/hd)``."""
    T, hd = q.shape[-3], q.shape[-1]
    if len(positions) != T:
        raise ValueError(f"{len(positions)} positions for sequence length {T}")
    cos, sin = rope_angles(positions, hd, theta, dtype=q.dtype)
    return _rotate(q, cos, sin), _rotate(k, cos, sin)


def alibi_slopes(n_heads: int) -> Tensor:
    if n_heads < 1:
        raise ValueError("n_heads must be >= 1")
    h = torch.arange(1, n_heads + 1, dtype=torch.float64)
    return 2.0 ** (-8.0 * h / n_heads)


def alibi_bias(n_heads: int, T: int, dtype=torch.float64) -> Tensor:
    """``bias[h, i, j] = -slope_h * (i - j)`` below the diagonal, 0 above (masked separately)."""
    i = torch.arange(T, dtype=torch.float64)[:, None]
    j = torch.arange(T, dtype=torch.float64)[None, :]
    dist = (i - j).clamp(min=0)
    return (-alibi_slopes(n_heads)[:, None, None] * dist).to(dtype)


def causal_mask(T: int, dtype=torch.float64) -> Tensor:
    m = torch.zeros(T, T, dtype=dtype)
    return m.masked_fill(torch.ones(T, T, dtype=torch.bool).triu(1), float("-inf"))


def attention_scores(x: Tensor, layer: LayerParams, cfg: ModelConfig, positions) -> Tensor:
    """Pre-softmax scores ``[..., H, T, T]`` including any ALiBi bias, excluding the causal mask."""
    q, k, _ = _qkv(x, layer, cfg, positions)
    s = (q @ k.transpose(-1, -2)) / math.sqrt(cfg.head_dim)
    if cfg.pos_mode is PosMode.ALIBI:
        s = s + alibi_bias(cfg.n_heads, x.shape[-2], dtype=x.dtype)
    return s


def _qkv(x: Tensor, layer: LayerParams, cfg: ModelConfig, positions):
    *lead, T, d = x.shape
    H, hd = cfg.n_heads, cfg.head_dim
    q = nc.matmul(x, layer.wq).reshape(*lead, T, H, hd)
    k = nc.matmul(x, layer.wk).reshape(*lead, T, H, hd)
    v = nc.matmul(x, layer.wv).reshape(*lead, T, H, hd)
    if cfg.pos_mode is PosMode.ROPE:
        q, k = apply_rope(q, k, positions, cfg.rope_theta)
    # -> [..., H, T, hd]
    return q.transpose(-2, -3), k.transpose(-2, -3), v.transpose(-2, -3)


def attention(x: Tensor, layer: LayerParams, cfg: ModelConfig, positions) -> Tensor:
    """Causal multi-head self-attention on ``x[..., T, d]``."""
    *lead, T, d = x.shape
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if d != cfg.hidden_dim:
        raise ValueError(f"hidden size {d} does not match config {cfg.hidden_dim}")
    q, k, v = _qkv(x, layer, cfg, positions)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(cfg.head_dim)
    mask = causal_mask(T, dtype=x.dtype)
    if cfg.pos_mode is PosMode.ALIBI:
        mask = mask + alibi_bias(cfg.n_heads, T, dtype=x.dtype)
    w = nc.softmax_rows(scores, mask)
    out = (w @ v).transpose(-2, -3).reshape(*lead, T, d)
    return nc.matmul(out, layer.wo)


def swiglu(u: Tensor, layer: LayerParams) -> Tensor:
    gate = nc.silu(nc.matmul(u, layer.w_gate))
    return nc.matmul(nc.mul(gate, nc.matmul(u, layer.w_up)), layer.w_down)


def layer_forward(x: Tensor, layer: LayerParams, cfg: ModelConfig, positions) -> Tensor:
    """One pre-norm decoder block: the re-enterable layer function."""
    eps = cfg.rmsnorm_eps
    h = nc.add(x, attention(nc.rms_norm(x, layer.attn_norm, eps), layer, cfg, positions))
    return nc.add(h, swiglu(nc.rms_norm(h, layer.mlp_norm, eps), layer))


def lm_head(params: ModelParams, h: Tensor) -> Tensor:
    return nc.matmul(nc.rms_norm(h, params.final_norm, params.config.rmsnorm_eps), params.head)


def positions_for(T: int) -> list[int]:
    return list(range(T))


# --- checkpoint container -------------------------------------------------

MAGIC = b"ILR1"


def save_checkpoint(path: str | Path, params: ModelParams, meta: dict | None = None) -> None:
    """Write ``params`` to the flat binary container.

    Layout: magic, element width (u32: 4 or 8), header JSON (u64 length +
    UTF-8), tensor count (u64), then per tensor: name (u32 length + bytes),
    rank (u32), extents (u64 each), little-endian elements.
    """
    width = 8 if params.dtype == torch.float64 else 4
    header = {"model": params.config.to_dict(), **(meta or {})}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    named = list(params.named_tensors())
    np_dtype = "<f8" if width == 8 else "<f4"
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", width))
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(struct.pack("<Q", len(named)))
        for name, t in named:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.dim()))
            f.write(struct.pack(f"<{t.dim()}Q", *t.shape))
            f.write(t.detach().cpu().numpy().astype(np_dtype, copy=False).tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(params, header)``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an ILR1 checkpoint")
    off = 4
    (width,) = struct.unpack_from("<I", data, off); off += 4
    if width not in (4, 8):
        raise ValueError(f"{path}: bad element width {width}")
    (hlen,) = struct.unpack_from("<Q", data, off); off += 8
    header = json.loads(data[off:off + hlen].decode("utf-8")); off += hlen
    (n,) = struct.unpack_from("<Q", data, off); off += 8
    np_dtype = np.dtype("<f8" if width == 8 else "<f4")
    tensors = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<I", data, off); off += 4
        name = data[off:off + nlen].decode("utf-8"); off += nlen
        (rank,) = struct.unpack_from("<I", data, off); off += 4
        shape = struct.unpack_from(f"<{rank}Q", data, off); off += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype=np_dtype, count=count, offset=off).reshape(shape)
        off += count * width
        tensors[name] = torch.from_numpy(arr.astype(np_dtype.newbyteorder("="), copy=True))
    config = ModelConfig.from_dict(header["model"])
    layers = []
    for i in range(config.n_layers):
        layers.append(LayerParams(**{k: tensors.pop(f"layers.{i}.{k}") for k in LAYER_MATRICES + LAYER_NORMS}))
    params = ModelParams(
        config=config,
        tok_emb=tensors.pop("tok_emb"),
        layers=layers,
        final_norm=tensors.pop("final_norm"),
        head=tensors.pop("head"),
        pos_emb=tensors.pop("pos_emb", None),
    )
    if tensors:
        raise ValueError(f"{path}: unexpected tensors {sorted(tensors)}")
    return params.requires_grad_(True), header
