import itertools
import json
import math

import numpy as np
import pytest
import torch

from ilr.data import Batch, stdlib_text, tokenize_bytes
from ilr.model import DESK_SMALL, TINY, init_params, load_checkpoint
from ilr.recurrence import Baseline, IntraLayer
from ilr.train import (
    AdamWState,
    NumericalError,
    TrainConfig,
    adamw_step,
    clip_global_norm,
    decays,
    lr_at,
    train,
)


class TestSchedule:
    cfg = TrainConfig(learning_rate=1e-3, warmup_fraction=0.1, total_steps=100)

    def test_warmup_start_and_peak(self):
        assert lr_at(0, self.cfg) == 0.0
        assert lr_at(5, self.cfg) == pytest.approx(5e-4)
        assert lr_at(10, self.cfg) == pytest.approx(1e-3)

    def test_cosine_midpoint_and_end(self):
        assert lr_at(55, self.cfg) == pytest.approx(5e-4)
        assert lr_at(100, self.cfg) == pytest.approx(0.0, abs=1e-18)

    def test_monotone_after_warmup(self):
        lrs = [lr_at(s, self.cfg) for s in range(10, 101)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(101, self.cfg)

    def test_no_warmup(self):
        cfg = TrainConfig(learning_rate=2.0, warmup_fraction=0.0, total_steps=10)
        assert lr_at(0, cfg) == 2.0

    @pytest.mark.parametrize("kw", [dict(warmup_fraction=1.0), dict(grad_clip_norm=0.0), dict(total_steps=-1),
                                    dict(dtype="float16")])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestClip:
    def test_three_four_five(self):
        g = {"a": torch.tensor([3.0]), "b": torch.tensor([4.0])}
        factor = clip_global_norm(g, 1.0)
        assert factor == pytest.approx(0.2)
        assert g["a"].item() == pytest.approx(0.6) and g["b"].item() == pytest.approx(0.8)

    def test_under_threshold_untouched(self):
        g = {"a": torch.tensor([0.3, 0.4])}
        assert clip_global_norm(g, 1.0) == 1.0
        assert g["a"].tolist() == pytest.approx([0.3, 0.4])

    def test_nonfinite_names_param_and_step(self):
        g = {"layers.0.wq": torch.tensor([float("nan")])}
        with pytest.raises(NumericalError, match="layers.0.wq.*step 7"):
            clip_global_norm(g, 1.0, step=7)


class TestAdamW:
    def test_scalar_oracle(self):
        cfg = TrainConfig(weight_decay=0.1, beta1=0.9, beta2=0.99, adam_eps=1e-8)
        w0, lr = 0.7, 0.01
        p = {"w": torch.tensor([w0], dtype=torch.float64)}
        st = AdamWState()
        m = v = 0.0
        w = w0
        for t, g in enumerate([0.5, -0.2, 0.3], start=1):
            adamw_step(p, {"w": torch.tensor([g], dtype=torch.float64)}, st, lr, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.99 * v + 0.01 * g * g
            w = w * (1 - lr * 0.1)
            w = w - lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.99 ** t)) + 1e-8)
            assert abs(p["w"].item() - w) <= 1e-12

    def test_decay_exclusions(self):
        assert decays("layers.0.wq") and decays("head")
        for name in ("tok_emb", "pos_emb", "final_norm", "layers.1.attn_norm", "layers.1.mlp_norm"):
            assert not decays(name)

    def test_decay_term_with_zero_gradient(self):
        cfg = TrainConfig(weight_decay=0.5)
        p = {"head": torch.tensor([2.0], dtype=torch.float64),
             "final_norm": torch.tensor([2.0], dtype=torch.float64)}
        g = {k: torch.zeros(1, dtype=torch.float64) for k in p}
        adamw_step(p, g, AdamWState(), 0.1, cfg)
        assert p["head"].item() == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-15)
        assert p["final_norm"].item() == 2.0


def _one_batch(config, B=4, T=128):
    ids = tokenize_bytes(stdlib_text(100_000))[: B * (T + 1)].reshape(B, T + 1)
    return Batch(ids[:, :-1], ids[:, 1:])


class TestLoop:
    def test_zero_steps(self, tmp_path):
        p = init_params(TINY, 0)
        before = [t.detach().clone() for t in p.tensors()]
        r = train(p, iter([]), Baseline(), TrainConfig(total_steps=0, seq_len=8), out_dir=tmp_path)
        assert r.losses == [] and r.checkpoints == []
        assert all(torch.equal(a, b) for a, b in zip(before, p.tensors()))

    def test_overfit_single_batch(self):
        b = _one_batch(DESK_SMALL)
        cfg = TrainConfig(total_steps=200, batch_size=4, seq_len=128)
        p = init_params(DESK_SMALL, 0, dtype="float32")
        r = train(p, itertools.repeat(b), Baseline(), cfg)
        losses = np.array(r.losses)
        assert losses[-1] < 0.1 * losses[0]
        # never worse than 50 steps earlier once warmup is over
        w = cfg.warmup_steps
        assert all(losses[i + 50] <= losses[i] for i in range(w, len(losses) - 50))

    def test_log_and_checkpoints(self, tmp_path):
        toks = torch.randint(0, 32, (4, 9), generator=torch.Generator().manual_seed(0)).numpy()
        b = Batch(toks[:, :-1], toks[:, 1:])
        cfg = TrainConfig(total_steps=6, batch_size=4, seq_len=8, checkpoint_every=3, dtype="float64")
        p = init_params(TINY, 0)
        r = train(p, itertools.repeat(b), IntraLayer([2, 1]), cfg, out_dir=tmp_path, log_path=tmp_path / "log.jsonl")
        recs = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [x["step"] for x in recs] == list(range(6))
        assert [x["loss"] for x in recs] == r.losses
        assert len(recs[0]["layer_grad_norms"]) == 2
        assert [c.rsplit("/", 1)[-1] for c in r.checkpoints] == ["step000003.ilr", "step000006.ilr", "final.ilr"]
        q, header = load_checkpoint(tmp_path / "final.ilr")
        assert header["strategy"] == {"strategy": "ilr", "map": [2, 1]}
        assert all(torch.equal(a.detach(), b.detach()) for a, b in zip(p.tensors(), q.tensors()))

    def test_nan_loss_raises(self):
        p = init_params(TINY, 0)
        with torch.no_grad():
            p.head.fill_(float("nan"))
        b = Batch(np.zeros((1, 8), dtype=np.int64), np.zeros((1, 8), dtype=np.int64))
        with pytest.raises(NumericalError, match="step 0"):
            train(p, itertools.repeat(b), Baseline(), TrainConfig(total_steps=3, batch_size=1, seq_len=8))

    def test_bit_identical_rerun(self):
        toks = torch.randint(0, 32, (4, 9), generator=torch.Generator().manual_seed(1)).numpy()
        b = Batch(toks[:, :-1], toks[:, 1:])
        cfg = TrainConfig(total_steps=10, batch_size=4, seq_len=8, dtype="float32")
        runs = []
        for _ in range(2):
            p = init_params(TINY, 0, dtype="float32")
            r = train(p, itertools.repeat(b), IntraLayer([1, 3]), cfg)
            runs.append((r.losses, [t.detach().clone() for t in p.tensors()]))
        assert runs[0][0] == runs[1][0]
        assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))
