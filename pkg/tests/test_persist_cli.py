import json
import math

import numpy as np
import pytest

from mmilab import persist
from mmilab.cli import main
from mmilab.persist import ConfigError, FormatError
from mmilab.training import flat_start, ml_accumulate


SMALL = """\
schema_version = 1

[run]
iters = 2
ml_iters = 3
e_values = [0.5, 1.0]

[task]
train_utterances = 6
test_utterances = 2
words_per_utterance = [2, 3]
seed = 3

[lattice]
max_len = 4
"""


def write_config(tmp_path, text=SMALL):
    p = tmp_path / "cfg.toml"
    p.write_text(text)
    return str(p)


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


class TestModelRoundTrip:
    def test_bit_exact(self, tmp_path, small_mle):
        persist.save_model(small_mle, tmp_path / "m.json")
        back = persist.load_model(tmp_path / "m.json")
        np.testing.assert_array_equal(back.means, small_mle.means)
        np.testing.assert_array_equal(back.variances, small_mle.variances)
        np.testing.assert_array_equal(back.floor, small_mle.floor)
        assert back.phone_states == small_mle.phone_states

    def test_wrong_format_rejected(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"format": "other", "version": 1}))
        with pytest.raises(FormatError):
            persist.load_model(tmp_path / "m.json")

    def test_task_round_trip(self, small_spec, small_task):
        spec, task = persist.task_from_dict(json.loads(persist.dumps(persist.task_to_dict(small_spec, small_task))))
        assert spec == small_spec
        for a, b in zip(task.train, small_task.train):
            np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(task.train_lm.logp, small_task.train_lm.logp)


class TestCsv:
    def test_seventeen_digits(self, tmp_path):
        x = [math.pi, 1 / 3, -1e-300, None, 7]
        persist.write_csv(tmp_path / "a.csv", ("a", "b", "c", "d", "e"), [x])
        row = persist.read_csv(tmp_path / "a.csv")[0]
        assert row["a"] == math.pi and row["b"] == 1 / 3 and row["c"] == -1e-300
        assert row["d"] is None and row["e"] == 7

    def test_fmt(self):
        assert persist.fmt(None) == ""
        assert persist.fmt(3) == "3"
        assert float(persist.fmt(0.1)) == 0.1


class TestConfig:
    def test_defaults(self):
        cfg = persist.parse_config({"schema_version": 1})
        assert cfg.lattice.kappa == cfg.ebw.kappa

    def test_missing_schema(self):
        with pytest.raises(ConfigError, match="schema_version"):
            persist.parse_config({})

    def test_unknown_key_names_path(self):
        with pytest.raises(ConfigError, match=r"task\.bogus"):
            persist.parse_config({"schema_version": 1, "task": {"bogus": 1}})

    def test_wrong_type(self):
        with pytest.raises(ConfigError, match=r"run\.iters"):
            persist.parse_config({"schema_version": 1, "run": {"iters": "ten"}})

    def test_kappa_propagates(self):
        cfg = persist.parse_config({"schema_version": 1, "lattice": {"kappa": 3.0}})
        assert cfg.ebw.kappa == 3.0

    def test_kappa_conflict(self):
        with pytest.raises(ConfigError, match="kappa"):
            persist.parse_config({"schema_version": 1, "lattice": {"kappa": 3.0}, "ebw": {"kappa": 2.0}})

    def test_invalid_value_from_contract(self):
        with pytest.raises(ConfigError, match="lattice"):
            persist.parse_config({"schema_version": 1, "lattice": {"eps": 2.0}})

    def test_echo_reparses(self):
        cfg = persist.parse_config({"schema_version": 1, "task": {"seed": 9}, "run": {"iters": 4}})
        again = persist.parse_config(json.loads(persist.dumps(persist.config_to_dict(cfg))))
        assert again.task == cfg.task and again.iters == 4


class TestCliErrors:
    def test_unknown_key_exit_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "schema_version = 1\n[task]\nbogus = 1\n")
        assert main(["gen", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "task.bogus" in capsys.readouterr().err

    def test_bad_toml_exit_2(self, tmp_path):
        cfg = write_config(tmp_path, "schema_version = = 1\n")
        assert main(["gen", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_missing_config_exit_5(self, tmp_path):
        assert main(["gen", "--config", str(tmp_path / "nope.toml")]) == 5

    def test_missing_bundle_exit_5(self, tmp_path):
        assert main(["train-ml", "--config", write_config(tmp_path), "--out", str(tmp_path / "empty")]) == 5

    def test_bad_flag_exit_2(self):
        assert main(["run-regime", "--regime", "sideways"]) == 2

    def test_bad_subcommand_exit_2(self):
        assert main(["frobnicate"]) == 2

    def test_starved_reference_exit_4(self, monkeypatch, capsys):
        from mmilab import cli
        from mmilab.criteria import ReferenceStarvedError

        def boom(cfg):
            raise ReferenceStarvedError("tr0007", 12)

        monkeypatch.setattr(cli, "cmd_run_regime", boom)
        assert main(["run-regime"]) == 4
        err = capsys.readouterr().err
        assert "tr0007" in err and "iteration 12" in err

    def test_training_failure_exit_3(self, monkeypatch):
        from mmilab import cli

        def boom(cfg):
            raise cli.TrainingError("non-finite log-likelihood")

        monkeypatch.setattr(cli, "cmd_train_ml", boom)
        assert main(["train-ml"]) == 3


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen -> train-ml -> run-regime twice into separate directories."""
    outs = []
    for name in ("a", "b"):
        root = tmp_path_factory.mktemp(name)
        cfg = write_config(root)
        out = root / "out"
        assert main(["gen", "--config", cfg, "--out", str(out)]) == 0
        assert main(["train-ml", "--config", cfg, "--out", str(out)]) == 0
        assert main(["run-regime", "--config", cfg, "--out", str(out)]) == 0
        outs.append(out)
    return outs


class TestPipeline:
    def test_gen_reproducible(self, pipeline):
        a, b = pipeline
        assert manifest(a) == manifest(b)

    def test_run_reproducible(self, pipeline):
        a, b = pipeline
        da, db = a / "mmi-fixed-E1", b / "mmi-fixed-E1"
        assert manifest(da) == manifest(db)
        assert all(persist.verify_manifest(da).values())

    def test_iteration_csv(self, pipeline):
        rows = persist.read_csv(pipeline[0] / "mmi-fixed-E1" / "iterations.csv")
        assert [r["iter"] for r in rows] == [0, 1, 2]
        assert list(rows[0]) == list(persist.CSV_COLUMNS)
        assert rows[0]["param_dist"] == 0.0

    def test_svgs_written(self, pipeline):
        d = pipeline[0] / "mmi-fixed-E1"
        for name in ("criterion_wer.svg", "numden.svg", "param_dist.svg"):
            assert (d / name).read_text().lstrip().startswith("<?xml")

    def test_ml_log_matches_reevaluation(self, pipeline):
        """Final CSV row equals an independent likelihood evaluation of the stored model."""
        out = pipeline[0]
        _, task = persist.task_from_dict(persist.read_json(out / "task.json"))
        mle = persist.load_model(out / "mle.json")
        _, total, frames, _ = ml_accumulate(mle, task.train, task.lexicon)
        rows = persist.read_csv(out / "ml_log.csv")
        assert len(rows) == 4
        assert rows[-1]["ll_pf"] == pytest.approx(total / frames, abs=1e-12)
        assert np.all(np.diff([r["ll_pf"] for r in rows]) >= -1e-6)
        assert all(persist.verify_manifest(out).values())

    def test_ml_zero_iterations_is_flat_start(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "o"
        assert main(["gen", "--config", cfg, "--out", str(out)]) == 0
        assert main(["train-ml", "--config", cfg, "--out", str(out), "--iters", "0"]) == 0
        _, task = persist.task_from_dict(persist.read_json(out / "task.json"))
        flat = flat_start(task.true_model, task.train.all_frames())
        m = persist.load_model(out / "mle.json")
        np.testing.assert_array_equal(m.means, flat.means)
        assert len(persist.read_csv(out / "ml_log.csv")) == 1

    def test_config_mismatch_exit_2(self, pipeline, tmp_path):
        cfg = write_config(tmp_path, SMALL.replace("seed = 3", "seed = 4"))
        assert main(["train-ml", "--config", cfg, "--out", str(pipeline[0])]) == 2

    def test_analyze_self(self, pipeline, tmp_path, capsys):
        m = pipeline[0] / "mle.json"
        assert main(["analyze", str(m), str(m), "--out", str(tmp_path / "an")]) == 0
        rep = json.loads((tmp_path / "an" / "analysis.json").read_text())
        assert rep["log_volume_ratio"] == 0.0 and rep["volume_ratio"] == 1.0
        assert rep["fraction_negative_v"] == 0.0
        assert "log_volume_ratio\t0" in capsys.readouterr().out

    def test_analyze_doubled_means(self, pipeline, tmp_path):
        m = persist.load_model(pipeline[0] / "mle.json")
        persist.save_model(m.with_params(2 * m.means, m.variances), tmp_path / "big.json")
        assert main(["analyze", str(pipeline[0] / "mle.json"), str(tmp_path / "big.json"),
                     "--out", str(tmp_path / "an")]) == 0
        rep = json.loads((tmp_path / "an" / "analysis.json").read_text())
        assert rep["log_volume_ratio"] == pytest.approx(m.dim * math.log(2))
        assert rep["volume_ratio"] == pytest.approx(2.0 ** m.dim)

    def test_zero_iterations(self, pipeline, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["run-regime", "--config", cfg, "--out", str(pipeline[1]), "--iters", "0", "--E", "2"]) == 0
        rows = persist.read_csv(pipeline[1] / "mmi-fixed-E2" / "iterations.csv")
        assert len(rows) == 1

    def test_e_sweep(self, pipeline, capsys):
        cfg = write_config(pipeline[1].parent)
        assert main(["e-sweep", "--config", cfg, "--out", str(pipeline[1])]) == 0
        rows = persist.read_csv(pipeline[1] / "e-sweep" / "e_sweep.csv")
        assert sorted({r["E"] for r in rows}) == [0.5, 1.0]
        assert "decreases" in capsys.readouterr().out
