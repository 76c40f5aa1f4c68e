"""Perplexity evaluation, the analytical FLOPs model, and reuse-map sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ilr import numcore as nc
from ilr.data import Corpus, batch_stream, windows
from ilr.model import ModelConfig, ModelParams, PosMode, init_params
from ilr.recurrence import (
    Baseline,
    Block,
    IntraLayer,
    Strategy,
    effective_depth,
    forward,
    layer_counts,
    strategy_from_dict,
    strategy_to_dict,
    validate,
)
from ilr.seeds import derive_seed
from ilr.train import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    strategy: dict
    pos_mode: str
    perplexity: float
    tokens: int
    nll_mean: float
    nll_std: float
    seq_len: int

    def to_dict(self) -> dict:
        return asdict(self)


def token_nlls(params: ModelParams, strategy: Strategy, tokens: np.ndarray, seq_len: int,
               batch_size: int = 16) -> np.ndarray:
    win = windows(tokens, seq_len)
    if len(win) == 0:
        raise ValueError(f"test split of {len(tokens)} tokens holds no full window of length {seq_len + 1}")
    out = []
    with torch.no_grad():
        for i in range(0, len(win), batch_size):
            w = torch.as_tensor(win[i:i + batch_size])
            logits, _ = forward(params, w[:, :-1], strategy)
            out.append(nc.token_nll(logits.to(torch.float64), w[:, 1:]).reshape(-1).numpy())
    return np.concatenate(out)


def perplexity(params: ModelParams, strategy: Strategy, test_tokens: np.ndarray, seq_len: int,
               batch_size: int = 16) -> EvalReport:
    """exp(mean NLL) over every non-overlapping full window of ``test_tokens``."""
    if len(test_tokens) == 0:
        raise ValueError("test split is empty")
    validate(strategy, params.config)
    nll = token_nlls(params, strategy, test_tokens, seq_len, batch_size)
    mean = float(nll.mean())
    return EvalReport(
        strategy=strategy_to_dict(strategy),
        pos_mode=params.config.pos_mode.value,
        perplexity=math.exp(mean),
        tokens=int(nll.size),
        nll_mean=mean,
        nll_std=float(nll.std()),
        seq_len=seq_len,
    )


# --- FLOPs ------------------------------------------------------------------

@dataclass
class FlopsReport:
    strategy: dict
    seq_len: int
    tokens: int
    attention: float
    mlp: float
    norms: float
    head: float
    embedding: float
    per_layer: list[float]
    layer_flops: float
    forward: float
    training: float
    effective_depth: int
    causal_attention: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def layer_pass_flops(config: ModelConfig, T: int, causal: bool = True) -> dict[str, float]:
    """FLOPs of one application of one layer on a length-T sequence (multiply-add = 2).

    With ``causal`` the score and value products are counted only over the
    T(T+1)/2 unmasked query/key pairs; otherwise over all T^2.
    """
    d, m = config.hidden_dim, config.mlp_hidden
    proj = 2 * 4 * T * d * d
    pairs = T * (T + 1) / 2 if causal else T * T
    core = 2 * 2 * pairs * d
    return {
        "attention": float(proj + core),
        "mlp": float(2 * 3 * T * d * m),
        "norms": float(2 * rms_norm_flops(T, d)),
    }


def rms_norm_flops(T: int, d: int) -> float:
    # square, reduce, rescale, weight
    return 4.0 * T * d


def forward_flops(config: ModelConfig, strategy: Strategy, seq_len: int, tokens: int | None = None,
                  causal: bool = True) -> FlopsReport:
    """Analytical forward and training FLOPs.

    Training counts the backward pass as twice the forward:
    ``3 * forward * tokens / seq_len``. ``tokens`` defaults to one sequence.
    """
    validate(strategy, config)
    T = seq_len
    tokens = T if tokens is None else tokens
    counts = layer_counts(strategy, config.n_layers)
    one = layer_pass_flops(config, T, causal)
    per_pass = sum(one.values())
    per_layer = [per_pass * r for r in counts]
    n = sum(counts)
    head = 2.0 * T * config.hidden_dim * config.vocab_size
    norms = one["norms"] * n + rms_norm_flops(T, config.hidden_dim)
    attention = one["attention"] * n
    mlp = one["mlp"] * n
    total = attention + mlp + norms + head
    return FlopsReport(
        strategy=strategy_to_dict(strategy),
        seq_len=T,
        tokens=int(tokens),
        attention=attention,
        mlp=mlp,
        norms=norms,
        head=head,
        embedding=0.0,
        per_layer=per_layer,
        layer_flops=sum(per_layer),
        forward=total,
        training=3.0 * total * tokens / T,
        effective_depth=effective_depth(strategy, config.n_layers),
        causal_attention=causal,
    )


def flops_table(config: ModelConfig, seq_len: int, tokens: int, strategy: Strategy | None = None,
                causal: bool = True) -> dict:
    """Baseline, reuse-one-layer ``[1,2,1,...]`` and doubled-depth reports plus their ratios."""
    L = config.n_layers
    single = [1] * L
    single[1 if L > 1 else 0] = 2
    rows = {
        "baseline": forward_flops(config, Baseline(), seq_len, tokens, causal),
        "reuse_single_layer": forward_flops(config, IntraLayer(single), seq_len, tokens, causal),
        "doubled_depth": forward_flops(config, IntraLayer([2] * L), seq_len, tokens, causal),
    }
    base = rows["baseline"]
    out = {name: r.to_dict() for name, r in rows.items()}
    out["ratios"] = {
        "reuse_single_layer": rows["reuse_single_layer"].layer_flops / base.layer_flops,
        "doubled_depth": rows["doubled_depth"].layer_flops / base.layer_flops,
        "reuse_single_layer_training": rows["reuse_single_layer"].training / base.training,
        "doubled_depth_training": rows["doubled_depth"].training / base.training,
    }
    if strategy is not None:
        out["requested"] = forward_flops(config, strategy, seq_len, tokens, causal).to_dict()
    return out


# --- sweeps -------------------------------------------------------------------

CSV_COLUMNS = ("strategy", "reuse_map", "pos_mode", "seed", "perplexity", "train_flops")


@dataclass
class SweepRow:
    strategy: str
    reuse_map: str
    pos_mode: str
    seed: int
    perplexity: float
    train_flops: float
    status: str = "ok"
    final_loss: float | None = None
    error: str | None = None


def _reuse_label(s: Strategy) -> str:
    return str(s.map) if isinstance(s, IntraLayer) else "-"


def _run_one(args) -> SweepRow:
    tokens, train_end, config_d, strategy_d, cfg_d, seed = args
    config = ModelConfig.from_dict(config_d)
    strategy = strategy_from_dict(strategy_d)
    cfg = TrainConfig.from_dict(cfg_d)
    corpus = Corpus(tokens=tokens, train_end=train_end)
    label = strategy.label()
    flops = forward_flops(config, strategy, cfg.seq_len,
                          tokens=cfg.total_steps * cfg.batch_size * cfg.seq_len).training
    try:
        params = init_params(config, derive_seed(seed, "init"), dtype=cfg.dtype)
        stream = batch_stream(corpus.train, cfg.batch_size, cfg.seq_len, derive_seed(seed, "batch-order"))
        report = train(params, stream, strategy, replace(cfg, seed=seed))
        ev = perplexity(params, strategy, corpus.test, cfg.seq_len, cfg.batch_size)
        return SweepRow(label, _reuse_label(strategy), config.pos_mode.value, seed, ev.perplexity, flops,
                        final_loss=report.losses[-1] if report.losses else None)
    except Exception as exc:  # a failed run is reported, the sweep continues
        log.warning("run %s seed %d failed: %s", label, seed, exc)
        return SweepRow(label, _reuse_label(strategy), config.pos_mode.value, seed, float("nan"), flops,
                        status="failed", error=str(exc))


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.strategy, r.reuse_map, r.pos_mode, r.seed, repr(float(r.perplexity)),
                        repr(float(r.train_flops))])
        return buf.getvalue()

    @staticmethod
    def parse_csv(text: str) -> list[dict]:
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rec["seed"] = int(rec["seed"])
            rec["perplexity"] = float(rec["perplexity"])
            rec["train_flops"] = float(rec["train_flops"])
            rows.append(rec)
        return rows

    def table(self) -> dict:
        """Summary keyed by strategy -> pos_mode -> per-seed values and mean."""
        out: dict[str, dict] = {}
        for r in self.rows:
            cell = out.setdefault(r.strategy, {"reuse_map": r.reuse_map}).setdefault(
                r.pos_mode, {"seeds": {}, "mean": None})
            cell["seeds"][str(r.seed)] = r.perplexity if r.status == "ok" else None
        for row in out.values():
            for k, cell in row.items():
                if k == "reuse_map":
                    continue
                vals = [v for v in cell["seeds"].values() if v is not None]
                cell["mean"] = float(np.mean(vals)) if vals else None
        return out

    def to_json(self) -> dict:
        rows = []
        for r in self.rows:
            d = asdict(r)
            if math.isnan(d["perplexity"]):
                d["perplexity"] = None
            rows.append(d)
        return {"rows": rows, "table": self.table()}

    def format_table(self) -> str:
        tab = self.table()
        modes = sorted({r.pos_mode for r in self.rows})
        lines = ["| strategy | reuse map | " + " | ".join(modes) + " |",
                 "|---|---|" + "---|" * len(modes)]
        for name, row in tab.items():
            cells = []
            for m in modes:
                mean = row.get(m, {}).get("mean")
                cells.append("failed" if mean is None else f"{mean:.3f}")
            lines.append(f"| {name} | {row['reuse_map']} | " + " | ".join(cells) + " |")
        return "\n".join(lines)


def sweep(corpus: Corpus, config: ModelConfig, strategies: Sequence[Strategy], cfg: TrainConfig,
          seeds: Sequence[int], pos_modes: Sequence[PosMode | str] | None = None,
          jobs: int = 1) -> SweepResult:
    """Train and evaluate one model per (pos mode, strategy, seed).

    Every strategy starts from the same initial weights for a given seed and
    pos mode, and sees the same batch order.
    """
    if not strategies:
        raise ValueError("sweep needs at least one strategy")
    if not seeds:
        raise ValueError("sweep needs at least one seed")
    for s in strategies:
        validate(s, config)
    modes = [PosMode(m) for m in pos_modes] if pos_modes else [config.pos_mode]
    jobs_args = []
    for mode in modes:
        mc = replace(config, pos_mode=mode).to_dict()
        for s in strategies:
            for seed in seeds:
                jobs_args.append((corpus.tokens, corpus.train_end, mc, strategy_to_dict(s),
                                  cfg.to_dict(), int(seed)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=nc.set_threads, initargs=(1,)) as ex:
            rows = list(ex.map(_run_one, jobs_args))
    else:
        rows = [_run_one(a) for a in jobs_args]
    return SweepResult(rows=rows)


def write_sweep(result: SweepResult, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "sweep.csv"
    json_path = out_dir / "sweep.json"
    csv_path.write_text(result.to_csv(), encoding="utf-8")
    json_path.write_text(json.dumps(result.to_json(), indent=2), encoding="utf-8")
    return csv_path, json_path
