import hashlib
import json

import numpy as np
import pytest

from tree_power import cli
from tree_power import dataset as D
from tree_power import evalbench as E

SMALL = {
    "network": {"L": 4, "N": 2, "mc_realizations": 20},
    "plan": [[2, 4, 3], [3, 4, 2]],
    "test_plan": [[2, 4, 2]],
    "train": {"epochs": 1, "batch_size": 4},
    "model": {"d_enc": 8, "d_mod": 16, "A": 2, "S": 1, "decoder_hidden": 16},
    "bench": {"K": [10, 40], "L": 4, "reps": 30, "warmup": 5},
}


def write_config(tmp_path, cfg=SMALL, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def small(tmp_path):
    conf = write_config(tmp_path)
    train = tmp_path / "train.jsonl"
    assert cli.main(["generate", "--config", conf, "--seed", "3", "--out", str(train)]) == 0
    return conf, train


class TestConfig:
    def test_presets(self):
        desk = cli.load_config(None, "desk")
        assert desk["plan"] == [[2, 9, 500], [4, 9, 500]]
        assert desk["network"] == {"L": 9, "N": 2, "mc_realizations": 100}
        paper = cli.load_config(None, "paper")
        assert sum(c for _, _, c in paper["plan"]) == 40_000
        assert {K for K, _, _ in paper["plan"]} == {2, 4, 6, 8, 10}

    def test_override_merges(self, tmp_path):
        cfg = cli.load_config(write_config(tmp_path, {"network": {"N": 4}}), "desk")
        assert cfg["network"] == {"L": 9, "N": 4, "mc_realizations": 100}

    @pytest.mark.parametrize("bad,field", [
        ({"plan": [[2, 9, 0]]}, "plan[0].count"),
        ({"plan": [[2, 9]]}, "plan[0]"),
        ({"test_plan": []}, "test_plan"),
        ({"format_version": 7}, "format_version"),
        ({"dataset": {"position_scaling": "global"}}, "position_scaling"),
    ])
    def test_invalid(self, tmp_path, bad, field):
        with pytest.raises(cli.ConfigError, match=field.replace("[", r"\[").replace("]", r"\]")):
            cli.load_config(write_config(tmp_path, bad), "desk")

    def test_missing_and_garbage(self, tmp_path):
        with pytest.raises(cli.ConfigError, match="not found"):
            cli.load_config(tmp_path / "none.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(cli.ConfigError, match="invalid JSON"):
            cli.load_config(tmp_path / "bad.json")


class TestGenerate:
    def test_round_trip_and_summary(self, tmp_path, capsys):
        train = tmp_path / "t.jsonl"
        assert cli.main(["generate", "--config", write_config(tmp_path), "--seed", "3", "--out", str(train)]) == 0
        ds = D.load(train)
        assert [(s.K, s.L) for s in ds.samples] == [(2, 4)] * 3 + [(3, 4)] * 2
        out = capsys.readouterr().out
        assert "K=2 L=4: 3 samples" in out and "oracle failures: 0" in out

    def test_identical_hash(self, small, tmp_path):
        conf, train = small
        again = tmp_path / "again.jsonl"
        assert cli.main(["generate", "--config", conf, "--seed", "3", "--out", str(again)]) == 0
        assert sha(train) == sha(again)

    def test_count_zero_exit_2(self, tmp_path, capsys):
        conf = write_config(tmp_path, dict(SMALL, plan=[[2, 4, 0]]))
        assert cli.main(["generate", "--config", conf, "--seed", "1", "--out", str(tmp_path / "x")]) == 2
        assert "plan[0].count" in capsys.readouterr().err

    def test_seed_required(self, tmp_path, capsys):
        conf = write_config(tmp_path)
        assert cli.main(["generate", "--config", conf, "--out", str(tmp_path / "x")]) == 2
        assert "seed" in capsys.readouterr().err

    def test_desk_preset(self, desk_run):
        ds = D.load(desk_run["train"])
        assert len(ds) == 1000
        assert sorted({(s.K, s.L) for s in ds.samples}) == [(2, 9), (4, 9)]
        assert sum(s.K == 2 for s in ds.samples) == 500


class TestTrain:
    def test_smoke(self, small, tmp_path):
        conf, train = small
        model = tmp_path / "m.ttpm"
        assert cli.main(["train", "--config", conf, "--seed", "0", "--data", str(train), "--out", str(model)]) == 0
        assert model.is_file() and (tmp_path / "m_loss.csv").is_file()
        params, cfg, extra = cli.tr.load_params(model)
        assert cfg.d_mod == 16 and "meta" in extra

    def test_deterministic_loss_csv(self, small, tmp_path):
        conf, train = small
        for name in ("a", "b"):
            assert cli.main(["train", "--config", conf, "--seed", "0", "--data", str(train),
                             "--out", str(tmp_path / f"{name}.ttpm")]) == 0
        a = (tmp_path / "a_loss.csv").read_text().splitlines()
        b = (tmp_path / "b_loss.csv").read_text().splitlines()
        # the wall-clock column differs between runs
        assert [r.rsplit(",", 1)[0] for r in a] == [r.rsplit(",", 1)[0] for r in b]

    def test_resume(self, small, tmp_path):
        conf, train = small
        out = str(tmp_path / "r.ttpm")
        assert cli.main(["train", "--config", conf, "--seed", "0", "--data", str(train), "--out", out]) == 0
        assert cli.main(["train", "--config", conf, "--seed", "0", "--data", str(train), "--out", out,
                         "--epochs", "2", "--resume"]) == 0
        assert len((tmp_path / "r_loss.csv").read_text().splitlines()) == 3

    def test_missing_dataset_exit_2(self, tmp_path, capsys):
        conf = write_config(tmp_path)
        code = cli.main(["train", "--config", conf, "--seed", "0", "--data", str(tmp_path / "no.jsonl"),
                         "--out", str(tmp_path / "m.ttpm")])
        assert code == 2 and "data" in capsys.readouterr().err

    def test_non_finite_exit_3(self, small, tmp_path, monkeypatch):
        conf, train = small

        def boom(*a, **kw):
            raise cli.tr.NonFiniteLossError("non-finite loss at epoch 1, batch 0")

        monkeypatch.setattr(cli.tr, "fit", boom)
        assert cli.main(["train", "--config", conf, "--seed", "0", "--data", str(train),
                         "--out", str(tmp_path / "m.ttpm")]) == 3


class TestEvalBenchOracle:
    def test_oracle_injection_zero_gap(self, small, tmp_path):
        conf, _ = small
        test = tmp_path / "test.jsonl"
        assert cli.main(["generate", "--config", conf, "--seed", "4", "--split", "test", "--out", str(test)]) == 0
        out = tmp_path / "eval"
        assert cli.main(["eval", "--config", conf, "--data", str(test), "--predictor", "oracle",
                         "--out", str(out)]) == 0
        header, rows = E.read_csv(out / "se_table.csv")
        assert len(rows) == 1
        assert float(rows[0][header.index("gap_ul")]) == 0.0
        assert float(rows[0][header.index("gap_dl")]) == 0.0

    def test_model_eval_writes_reports(self, small, tmp_path):
        conf, train = small
        model = tmp_path / "m.ttpm"
        assert cli.main(["train", "--config", conf, "--seed", "0", "--data", str(train), "--out", str(model)]) == 0
        out = tmp_path / "eval"
        assert cli.main(["eval", "--config", conf, "--checkpoint", str(model), "--data", str(train),
                         "--out", str(out)]) == 0
        for name in ("cdf_ul.csv", "cdf_dl.csv", "se_table.csv", "flops.csv", "summary.txt"):
            assert (out / name).is_file()
        assert "latency: not run" in (out / "summary.txt").read_text()

    def test_eval_needs_checkpoint(self, small, tmp_path):
        conf, train = small
        assert cli.main(["eval", "--config", conf, "--data", str(train), "--out", str(tmp_path / "e")]) == 2

    def test_bench_rows(self, tmp_path):
        conf = write_config(tmp_path)
        out = tmp_path / "bench"
        assert cli.main(["bench", "--config", conf, "--out", str(out)]) == 0
        header, rows = E.read_csv(out / "latency.csv")
        for kind in ("tree", "full_attention"):
            assert [r[header.index("K")] for r in rows if r[0] == kind] == ["10", "40"]
        _, frows = E.read_csv(out / "flops.csv")
        assert len(frows) == 4

    def test_oracle_single_user(self, tmp_path, capsys):
        conf = write_config(tmp_path)
        out = tmp_path / "o.json"
        assert cli.main(["oracle", "--config", conf, "--seed", "7", "--K", "1", "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "p_UL (mW): 100.0000" in text and "p_DL (mW): 800.0000" in text
        res = json.loads(out.read_text())
        np.testing.assert_allclose(res["p_ul"], [0.1])
        np.testing.assert_allclose(res["p_dl"], [4 * 0.2])

    def test_threads_validated(self, tmp_path):
        assert cli.main(["oracle", "--seed", "1", "--threads", "0"]) == 2

    def test_module_entry_point(self):
        import subprocess
        import sys
        res = subprocess.run([sys.executable, "-m", "tree_power", "--help"], capture_output=True, text=True)
        assert res.returncode == 0
        for cmd in ("generate", "train", "eval", "bench", "oracle"):
            assert cmd in res.stdout
