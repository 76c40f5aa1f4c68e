import json

import pytest

from ilr.cli import main
from ilr.config import ConfigError, RunConfig, load_run_config, preset


def write_config(tmp_path, **overrides):
    d = preset("tiny").to_dict()
    d.update(overrides)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(d))
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    assert main(["train", "tiny", "--out", str(out)]) == 0
    return out


class TestConfig:
    @pytest.mark.parametrize("name", ["paper-small", "paper-large", "desk-small", "tiny"])
    def test_fixed_point(self, name):
        rc = preset(name)
        assert RunConfig.from_dict(json.loads(json.dumps(rc.to_dict()))) == rc

    def test_unknown_key(self, tmp_path):
        path = write_config(tmp_path, extra=1)
        with pytest.raises(ConfigError, match="extra"):
            load_run_config(str(path))

    def test_map_mismatch(self, tmp_path):
        path = write_config(tmp_path, strategy={"strategy": "ilr", "map": [1, 1, 1]})
        with pytest.raises(ConfigError, match="map length 3"):
            load_run_config(str(path))

    def test_seq_len_over_max(self, tmp_path):
        d = preset("tiny").to_dict()
        d["train"]["seq_len"] = 64
        path = tmp_path / "c.json"
        path.write_text(json.dumps(d))
        with pytest.raises(ConfigError, match="max_seq_len"):
            load_run_config(str(path))

    def test_seed_propagates(self):
        rc = RunConfig.from_dict({**preset("tiny").to_dict(), "seed": 9})
        assert rc.train.seed == 9


class TestTrain:
    def test_missing_corpus(self, tmp_path, capsys):
        missing = tmp_path / "absent.txt"
        path = write_config(tmp_path, data={"paths": [str(missing)]})
        assert main(["train", str(path), "--out", str(tmp_path / "o")]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_unknown_preset(self, capsys):
        assert main(["train", "no-such-thing"]) == 2
        assert "no-such-thing" in capsys.readouterr().err

    def test_outputs(self, tiny_run):
        summary = json.loads((tiny_run / "summary.json").read_text())
        assert summary["train"]["steps"] == 20
        assert summary["eval"]["perplexity"] < 257
        assert (tiny_run / "final.ilr").exists() and (tiny_run / "train.png").exists()
        assert len((tiny_run / "train_log.jsonl").read_text().splitlines()) == 20

    def test_rerun_identical(self, tiny_run, tmp_path):
        assert main(["train", "tiny", "--out", str(tmp_path), "--no-plots"]) == 0
        a = json.loads((tmp_path / "summary.json").read_text())
        b = json.loads((tiny_run / "summary.json").read_text())
        a["train"].pop("checkpoints"), b["train"].pop("checkpoints")
        assert a == b
        assert (tmp_path / "final.ilr").read_bytes() == (tiny_run / "final.ilr").read_bytes()

    def test_corpus_file(self, tmp_path):
        corpus = tmp_path / "c.txt"
        corpus.write_bytes(b"hello world, " * 400)
        path = write_config(tmp_path, data={"paths": [str(corpus)], "cache": str(tmp_path / "c.toks")})
        assert main(["train", str(path), "--out", str(tmp_path / "o"), "--no-plots"]) == 0
        assert (tmp_path / "c.toks").exists()


class TestEval:
    def test_bad_checkpoint(self, tmp_path, capsys):
        assert main(["eval", str(tmp_path / "x.ilr"), "--corpus", "y"]) == 2
        assert "x.ilr" in capsys.readouterr().err

    def test_override_all_ones_equals_baseline(self, tiny_run, tmp_path, capsys):
        corpus = tmp_path / "c.txt"
        corpus.write_bytes(bytes(range(32, 127)) * 40)
        ck = str(tiny_run / "final.ilr")
        capsys.readouterr()
        assert main(["eval", ck, "--corpus", str(corpus), "--strategy", '{"strategy":"baseline"}']) == 0
        base = json.loads(capsys.readouterr().out)
        assert main(["eval", ck, "--corpus", str(corpus), "--strategy", '{"strategy":"ilr","map":[1,1]}']) == 0
        ones = json.loads(capsys.readouterr().out)
        assert base["perplexity"] == ones["perplexity"]
        assert main(["eval", ck, "--corpus", str(corpus), "--strategy", '{"strategy":"ilr","map":[1]}']) == 2


class TestFlops:
    def test_ratios(self, capsys, tmp_path):
        assert main(["flops", "paper-small", "--tokens", "500000000", "--out", str(tmp_path)]) == 0
        tab = json.loads(capsys.readouterr().out)
        assert tab["ratios"]["reuse_single_layer"] == 1.25
        assert tab["ratios"]["doubled_depth"] == 2.0
        assert (tmp_path / "flops.png").exists()

    def test_full_attention_flag(self, capsys):
        assert main(["flops", "paper-small", "--full-attention"]) == 0
        assert json.loads(capsys.readouterr().out)["baseline"]["causal_attention"] is False


class TestSweep:
    def test_empty_strategies(self, tmp_path, capsys):
        d = preset("tiny").to_dict()
        d["sweep"]["strategies"] = []
        path = tmp_path / "s.json"
        path.write_text(json.dumps(d))
        assert main(["sweep", str(path)]) == 2
        assert "empty" in capsys.readouterr().err

    def test_tiny(self, tmp_path, capsys):
        assert main(["sweep", "tiny", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[0] == "strategy,reuse_map,pos_mode,seed,perplexity,train_flops"
        assert len(lines) == 3
        assert (tmp_path / "sweep.png").exists()


def test_verify_tiny(capsys):
    assert main(["verify"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_probe(tiny_run, capsys, tmp_path):
    capsys.readouterr()
    assert main(["probe", str(tiny_run / "final.ilr"), "--text", "the model", "--top-k", "2",
                 "--out", str(tmp_path)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert [s["state"] for s in rep["states"]] == ["L1.1", "L1.2", "L2.1"]
    assert len(rep["states"][0]["top"]) == 2
    assert (tmp_path / "probe.png").exists()


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["flops"])
    assert exc.value.code == 2
