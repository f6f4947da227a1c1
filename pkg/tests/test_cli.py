"""Command-line entry points, driven in-process through ``main(argv)``."""

import csv

import numpy as np
import pytest

from banlab import attention
from banlab.cli import main

TINY_CONFIG = """\
# small sizes so a run takes well under a second
n_train = 120
n_val = 40
M = 12
N = 8
K = 8
C = 8
K_att = 12
E = 6
epochs = 2
batch_size = 32
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    code = main(["experiment", "--config", str(cfg), "--out", str(root / "out"), "--glimpses", "2", "--seeds", "3"])
    assert code == 0
    return root / "out"


class TestVerify:
    def test_all_groups_pass(self, tmp_path, capsys):
        assert main(["verify", "--out", str(tmp_path)]) == 0
        rows = list(csv.DictReader((tmp_path / "verify.csv").open()))
        assert len(rows) >= 12 and all(r["status"] == "PASS" for r in rows)
        assert "check groups passed" in capsys.readouterr().out

    def test_corrupted_kernel_is_named(self, tmp_path, monkeypatch, capsys):
        real = attention.ban_apply

        def broken(*args, **kw):
            out = real(*args, **kw)
            return attention.Tensor(out.data * 1.001)

        monkeypatch.setattr(attention, "ban_apply", broken)
        assert main(["verify", "--out", str(tmp_path), "--only", "ban_oracle,masked_softmax"]) == 1
        err = capsys.readouterr().err
        assert "ban_oracle" in err and "masked_softmax" not in err

    def test_unknown_group(self, tmp_path, capsys):
        assert main(["verify", "--out", str(tmp_path), "--only", "nonsense"]) == 2
        assert "nonsense" in capsys.readouterr().err


class TestExperimentAndExport:
    def test_experiment_outputs(self, trained_run):
        run = trained_run / "runs" / "bilinear-residual-g2-s3"
        assert (trained_run / "summary.csv").exists()
        assert {p.name for p in run.iterdir()} == {"metrics.csv", "checkpoint", "config.txt"}
        header = next(csv.reader((run / "metrics.csv").open()))
        assert header[-2:] == ["entropy_g1", "entropy_g2"]

    def test_export_grids_and_marginals(self, trained_run, tmp_path):
        run = trained_run / "runs" / "bilinear-residual-g2-s3"
        assert main(["export", "--checkpoint", str(run), "--sample", "1", "--out", str(tmp_path)]) == 0
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["sample1_attention_g1.csv", "sample1_attention_g2.csv",
                         "sample1_marginal_g1.csv", "sample1_marginal_g2.csv"]
        for g in (1, 2):
            grid = np.array([[float(v) for v in r[1:]] for r in list(csv.reader((tmp_path / f"sample1_attention_g{g}.csv").open()))[1:]])
            assert abs(grid.sum() - 1.0) <= 1e-9
            marg = [float(r[2]) for r in list(csv.reader((tmp_path / f"sample1_marginal_g{g}.csv").open()))[1:]]
            assert abs(sum(marg) - 1.0) <= 1e-9 and marg == sorted(marg, reverse=True)

    def test_export_bad_sample(self, trained_run, tmp_path):
        run = trained_run / "runs" / "bilinear-residual-g2-s3"
        assert main(["export", "--checkpoint", str(run), "--sample", "999", "--out", str(tmp_path)]) == 2

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert main(["export", "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2
        assert "no run config" in capsys.readouterr().err

    def test_bad_config_line(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochs 3\n")
        assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_export_rejects_unitary(self, tiny_config, tmp_path):
        out = tmp_path / "u"
        assert main(["experiment", "--config", str(tiny_config), "--out", str(out), "--kinds", "unitary"]) == 0
        assert main(["export", "--checkpoint", str(out / "runs" / "unitary-residual-g1-s0"), "--out", str(tmp_path)]) == 2


class TestBench:
    def test_small_bench_writes_ratios(self, tmp_path, capsys):
        code = main(["bench", "--phi", "4,8", "--repeats", "3", "--warmup", "1", "--out", str(tmp_path)])
        assert code in (0, 1)  # tiny sizes are timer-noise dominated; only the outputs are checked here
        rows = {r["ratio"]: r for r in csv.DictReader((tmp_path / "bench_ratios.csv").open())}
        assert {"bilinear_forward_8/4", "cost_forward_4", "cost_forward_backward_8", "reference_cost_ratio"} <= set(rows)
        assert float(rows["reference_cost_ratio"]["value"]) == pytest.approx(284 / 190, abs=1e-4)
        timing = list(csv.DictReader((tmp_path / "bench.csv").open()))
        assert len(timing) == 2 * 2 * 2

    def test_bad_phi_list(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["bench", "--phi", "a,b", "--out", str(tmp_path)])
