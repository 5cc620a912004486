"""Config parsing, command dispatch, exit codes and artifact layout."""

import json
from pathlib import Path

import numpy as np
import pytest

from pivotalign import cli
from pivotalign.cli import (corpus_hash, main, resolve_train_config,
                            run_dir_name, select_checkpoints)
from pivotalign.config import (DEFAULT_SEED, ExperimentConfig, load_config,
                               parse_config)
from pivotalign.errors import CheckpointError, ConfigError
from pivotalign.training import TrainConfig, read_log_csv

TINY_CONF = """\
# desk-size experiment
seed = 5
corpus.n_train_high = 24
corpus.n_train_low = 16
corpus.n_valid = 12
corpus.n_test = 6
corpus.n_fewshot = 8

model.d_model = 16
model.n_heads = 2
model.d_ffn = 32
model.n_enc_layers = 1
model.n_dec_layers = 1
model.n_img_layers = 1

train.max_epochs = 2
train.warmup_steps = 4
train.batch_tokens = 120
eval.beam_size = 2
eval.max_decode_len = 8
finetune.pairs = 4
finetune.seeds = 2
finetune.epochs = 1
"""


class TestConfigParsing:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg == ExperimentConfig()
        assert cfg.seed == DEFAULT_SEED

    def test_known_keys_and_coercion(self):
        cfg = parse_config(
            "seed = 3\n"
            "train.max_epochs = 7\n"
            "train.contrast.lambda_s = 0.5\n"
            "train.use_l2_loss = true\n"
            "model.d_model = 32\n"
            "corpus.n_test = 9\n"
            "eval.beam_size = 2\n"
            "finetune.pairs = 50\n")
        assert cfg.seed == 3
        assert cfg.train.max_epochs == 7
        assert cfg.train.contrast.lambda_s == 0.5
        assert cfg.train.use_l2_loss is True
        assert cfg.model_overrides == {"d_model": 32}
        assert cfg.corpus.n_test == 9
        assert cfg.decode.beam_size == 2
        assert cfg.finetune.pairs == 50

    def test_comments_and_blank_lines(self):
        cfg = parse_config("\n# note\ntrain.max_epochs = 3  # trailing\n\n")
        assert cfg.train.max_epochs == 3

    @pytest.mark.parametrize("text", [
        "no equals sign",
        "train.max_epochs = ",
        " = 3",
        "train.max_epochs = six",
        "train.dropout_p = often",
        "train.use_l2_loss = yes",
        "mystery.key = 1",
        "train.nope = 1",
        "seed = 1\nseed = 2",
        "model.vocab_size = 10",
        "train.contrast = x",
        "train.contrast.tau_s = -1.0",
        "corpus.n_valid = 0",
    ])
    def test_rejected_inputs(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_seed_fills_train_and_finetune(self):
        cfg = parse_config("seed = 77")
        assert cfg.train.seed == 77 and cfg.finetune.seed == 77
        cfg = parse_config("seed = 77\ntrain.seed = 5")
        assert cfg.train.seed == 5 and cfg.finetune.seed == 77

    def test_env_seed_overrides_everything(self, monkeypatch):
        monkeypatch.setenv("PIVOT_ALIGN_SEED", "99")
        cfg = parse_config("seed = 1\ntrain.seed = 2\nfinetune.seed = 3")
        assert (cfg.seed, cfg.train.seed, cfg.finetune.seed) == (99, 99, 99)
        assert load_config(None).seed == 99

    def test_env_seed_must_be_integer(self, monkeypatch):
        monkeypatch.setenv("PIVOT_ALIGN_SEED", "lucky")
        with pytest.raises(ConfigError):
            load_config(None)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.conf")

    def test_model_config_carries_overrides(self):
        cfg = parse_config("model.d_model = 32\nmodel.n_heads = 8")
        model = cfg.model_config(vocab_size=76)
        assert (model.vocab_size, model.d_model, model.n_heads) == (76, 32, 8)

    def test_flattened_covers_sections(self):
        flat = ExperimentConfig().flattened()
        for key in ("seed", "corpus.n_test", "model.d_model",
                    "train.lr_peak", "train.contrast.tau_s",
                    "finetune.pairs", "eval.beam_size"):
            assert key in flat
        assert "model.vocab_size" not in flat


class TestModeMapping:
    BASE = TrainConfig()

    def test_baseline_zeroes_both_weights(self):
        cfg = resolve_train_config(self.BASE, "baseline")
        assert cfg.contrast.lambda_s == 0.0 and cfg.contrast.lambda_t == 0.0

    def test_sctr_zeroes_token_weight(self):
        cfg = resolve_train_config(self.BASE, "s-ctr")
        assert cfg.contrast.lambda_s == self.BASE.contrast.lambda_s
        assert cfg.contrast.lambda_t == 0.0

    def test_full_mode_keeps_weights(self):
        assert resolve_train_config(self.BASE, "s+t-ctr") == self.BASE

    def test_ablations(self):
        cfg = resolve_train_config(self.BASE, "s+t-ctr", ("no-target", "l2"))
        assert cfg.contrast.include_target_contrast is False
        assert cfg.use_l2_loss is True
        assert run_dir_name("s+t-ctr", ("no-target",)) == "s+t-ctr-no-target"

    def test_unknown_names_rejected(self):
        with pytest.raises(ConfigError):
            resolve_train_config(self.BASE, "s`t")
        with pytest.raises(ConfigError):
            resolve_train_config(self.BASE, "s+t-ctr", ("dropout",))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A workdir with a tiny corpus and one trained run per variant."""
    work = tmp_path_factory.mktemp("cli")
    (work / "tiny.conf").write_text(TINY_CONF, encoding="utf-8")
    assert main(["gen", "--workdir", str(work), "--config", "tiny.conf"]) == 0
    for mode in ("baseline", "s+t-ctr"):
        rc = main(["train", "--workdir", str(work), "--config", "tiny.conf",
                   "--mode", mode])
        assert rc == 0
    return work


def run(work, *argv) -> int:
    return main([argv[0], "--workdir", str(work), "--config", "tiny.conf",
                 *argv[1:]])


class TestGen:
    def test_layout_and_manifest(self, workspace):
        data = workspace / "data"
        assert (data / "vocab.txt").exists()
        assert (data / "languages.json").exists()
        assert (data / "corpus" / "train.jsonl").exists()
        assert list((data / "images").glob("*.ppm"))
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["command"] == "gen"
        assert manifest["seed"] == 5
        assert manifest["corpus_hash"] == corpus_hash(data)
        assert manifest["config"]["train.max_epochs"] == 2

    def test_rerun_is_identical(self, workspace, capsys):
        before = corpus_hash(workspace / "data")
        assert run(workspace, "gen") == 0
        capsys.readouterr()
        assert corpus_hash(workspace / "data") == before

    def test_malformed_config_fails_clean(self, tmp_path, capsys):
        (tmp_path / "bad.conf").write_text("what is this", encoding="utf-8")
        rc = main(["gen", "--workdir", str(tmp_path), "--config", "bad.conf"])
        assert rc == 2
        assert not (tmp_path / "data").exists()
        assert "error" in capsys.readouterr().err

    def test_unwritable_out_dir(self, tmp_path, capsys):
        (tmp_path / "blocker").write_text("file, not a directory")
        rc = main(["gen", "--workdir", str(tmp_path), "--out", "blocker/data"])
        assert rc == 2
        assert "error" in capsys.readouterr().err


class TestTrain:
    def test_artifacts(self, workspace):
        run_dir = workspace / "runs" / "baseline"
        assert (run_dir / "ckpt-0.pvck").exists()
        assert (run_dir / "ckpt-1.pvck").exists()
        assert (run_dir / "log.csv").exists()
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert "runs/baseline/ckpt-1.pvck" in manifest["checkpoints"]

    def test_baseline_log_has_no_contrast(self, workspace):
        records = read_log_csv(workspace / "runs" / "baseline" / "log.csv")
        assert all(r.s_ctr == 0.0 and r.t_ctr == 0.0 and r.l2 == 0.0
                   for r in records)

    def test_sctr_log_has_no_token_term(self, workspace, tmp_path):
        rc = run(workspace, "train", "--mode", "s-ctr", "--out", "runs/sc")
        assert rc == 0
        records = read_log_csv(workspace / "runs" / "sc" / "log.csv")
        assert all(r.t_ctr == 0.0 for r in records)
        assert any(r.s_ctr != 0.0 for r in records)

    def test_l2_ablation_swaps_columns(self, workspace):
        rc = run(workspace, "train", "--mode", "s+t-ctr", "--ablate", "l2",
                 "--out", "runs/l2")
        assert rc == 0
        records = read_log_csv(workspace / "runs" / "l2" / "log.csv")
        assert all(r.s_ctr == 0.0 and r.t_ctr == 0.0 for r in records)
        assert any(r.l2 != 0.0 for r in records)

    def test_unknown_mode_exits_two(self, workspace):
        with pytest.raises(SystemExit) as exc:
            run(workspace, "train", "--mode", "magic")
        assert exc.value.code == 2

    def test_unknown_ablation_exits_two(self, workspace, capsys):
        rc = run(workspace, "train", "--mode", "s+t-ctr", "--ablate", "oops",
                 "--out", "runs/x")
        assert rc == 2
        assert "ablation" in capsys.readouterr().err

    def test_retrain_is_byte_identical(self, workspace, tmp_path):
        first_log = (workspace / "runs" / "baseline" / "log.csv").read_bytes()
        first_ckpt = (workspace / "runs" / "baseline" / "ckpt-1.pvck").read_bytes()
        rc = run(workspace, "train", "--mode", "baseline", "--out", "runs/b2")
        assert rc == 0
        assert (workspace / "runs" / "b2" / "log.csv").read_bytes() == first_log
        assert (workspace / "runs" / "b2" / "ckpt-1.pvck").read_bytes() == first_ckpt


class TestEval:
    def test_translate_report(self, workspace, capsys):
        rc = run(workspace, "eval", "--ckpt", "runs/s+t-ctr",
                 "--task", "translate", "--out", "eval-tr")
        assert rc == 0
        lines = (workspace / "eval-tr" / "translate.csv").read_text().splitlines()
        assert lines[0] == "task,bleu,n,seed"
        tasks = [l.split(",")[0] for l in lines[1:]]
        assert tasks == ["zs-lo1", "zs-lo2", "sup-hi"]
        assert "BLEU" in capsys.readouterr().out

    def test_avg_last_one_equals_final_checkpoint(self, workspace):
        rc = run(workspace, "eval", "--ckpt", "runs/s+t-ctr", "--avg-last", "1",
                 "--task", "translate", "--out", "eval-a")
        assert rc == 0
        rc = run(workspace, "eval", "--ckpt", "runs/s+t-ctr/ckpt-1.pvck",
                 "--task", "translate", "--out", "eval-b")
        assert rc == 0
        a = (workspace / "eval-a" / "translate.csv").read_bytes()
        b = (workspace / "eval-b" / "translate.csv").read_bytes()
        assert a == b

    def test_retrieve_report(self, workspace, capsys):
        rc = run(workspace, "eval", "--ckpt", "runs/s+t-ctr",
                 "--task", "retrieve", "--out", "eval-ret")
        assert rc == 0
        lines = (workspace / "eval-ret" / "retrieval.csv").read_text().splitlines()
        assert lines[0] == "task,K,recall"
        rows = [l.split(",") for l in lines[1:]]
        assert {r[0] for r in rows} == {"ret-hi", "ret-lo1", "ret-lo2"}
        for task in ("ret-hi", "ret-lo1", "ret-lo2"):
            recalls = [float(r[2]) for r in rows if r[0] == task]
            assert recalls == sorted(recalls)
        assert "R@1" in capsys.readouterr().out

    def test_attention_export(self, workspace):
        rc = run(workspace, "eval", "--ckpt", "runs/s+t-ctr",
                 "--task", "attn", "--out", "eval-attn")
        assert rc == 0
        out = workspace / "eval-attn"
        rate_lines = (out / "attn_rate.csv").read_text().splitlines()
        assert rate_lines[0] == "task,value,n"
        assert len(rate_lines) == 3
        assert list((out / "attn" / "lo1").glob("*.csv"))
        assert list((out / "attn" / "lo1").glob("*.pgm"))

    def test_reprs_export(self, workspace):
        rc = run(workspace, "eval", "--ckpt", "runs/s+t-ctr",
                 "--task", "reprs", "--out", "eval-reprs")
        assert rc == 0
        out = workspace / "eval-reprs"
        header = (out / "reprs.csv").read_text().splitlines()[0]
        assert header.startswith("id,lang,r0")
        assert header.endswith("pc1,pc2")
        assert (out / "overlap.csv").exists()

    def test_missing_checkpoint_exits_three(self, workspace, capsys):
        rc = run(workspace, "eval", "--ckpt", "runs/ghost.pvck",
                 "--task", "translate", "--out", "eval-x")
        assert rc == 3
        assert "error" in capsys.readouterr().err

    def test_incompatible_checkpoint_exits_three(self, workspace, capsys):
        wide = TINY_CONF.replace("model.d_model = 16", "model.d_model = 24")
        (workspace / "wide.conf").write_text(wide, encoding="utf-8")
        rc = main(["eval", "--workdir", str(workspace), "--config",
                   "wide.conf", "--ckpt", "runs/s+t-ctr",
                   "--task", "translate", "--out", "eval-y"])
        assert rc == 3
        assert "error" in capsys.readouterr().err


class TestSelectCheckpoints:
    def test_run_dir_expansion_orders_by_epoch(self, workspace):
        picks = select_checkpoints([workspace / "runs" / "baseline"], 2)
        assert [p.name for p in picks] == ["ckpt-0.pvck", "ckpt-1.pvck"]
        picks = select_checkpoints([workspace / "runs" / "baseline"], 1)
        assert [p.name for p in picks] == ["ckpt-1.pvck"]

    def test_empty_dir_rejected(self, tmp_path):
        with pytest.raises(CheckpointError):
            select_checkpoints([tmp_path], 1)

    def test_bad_avg_last(self, workspace):
        with pytest.raises(ConfigError):
            select_checkpoints([workspace / "runs" / "baseline"], 0)


class TestFinetune:
    def test_report_and_checkpoints(self, workspace, capsys):
        rc = run(workspace, "finetune", "--ckpt", "runs/s+t-ctr",
                 "--lang", "lo1", "--out", "ft")
        assert rc == 0
        out = workspace / "ft"
        assert (out / "ft-lo1-p4-r0.pvck").exists()
        assert (out / "ft-lo1-p4-r1.pvck").exists()
        lines = (out / "fewshot.csv").read_text().splitlines()
        tasks = [l.split(",")[0] for l in lines[1:]]
        assert tasks == ["ft-lo1-r0", "ft-lo1-r1", "ft-lo1-mean", "ft-lo1-std"]
        assert "mean" in capsys.readouterr().out

    def test_zero_pairs_rejected(self, workspace, capsys):
        rc = run(workspace, "finetune", "--ckpt", "runs/s+t-ctr",
                 "--pairs", "0", "--out", "ft0")
        assert rc == 2
        capsys.readouterr()

    def test_oversized_pool_rejected(self, workspace, capsys):
        rc = run(workspace, "finetune", "--ckpt", "runs/s+t-ctr",
                 "--pairs", "999", "--out", "ftbig")
        assert rc == 2
        capsys.readouterr()

    def test_unknown_language_rejected(self, workspace, capsys):
        rc = run(workspace, "finetune", "--ckpt", "runs/s+t-ctr",
                 "--lang", "hi", "--out", "fthi")
        assert rc == 2
        capsys.readouterr()


class TestReproduce:
    def test_full_grid_and_determinism(self, tmp_path, capsys):
        for sub in ("one", "two"):
            work = tmp_path / sub
            work.mkdir()
            (work / "tiny.conf").write_text(TINY_CONF, encoding="utf-8")
            rc = main(["reproduce", "--workdir", str(work),
                       "--config", "tiny.conf"])
            assert rc == 0
        capsys.readouterr()
        one, two = tmp_path / "one", tmp_path / "two"
        table = (one / "acceptance_table.csv").read_text().splitlines()
        assert table[0].startswith("run,bleu_zs_lo1")
        assert [l.split(",")[0] for l in table[1:]] == [
            "baseline", "s-ctr", "s+t-ctr", "s+t-ctr-no-target", "s+t-ctr-l2"]
        # the whole grid reproduces byte for byte
        assert corpus_hash(one / "data") == corpus_hash(two / "data")
        for rel in ("acceptance_table.csv", "manifest.json",
                    "runs/s+t-ctr/log.csv", "runs/s+t-ctr/ckpt-1.pvck",
                    "runs/baseline/eval/translate.csv",
                    "runs/s+t-ctr/fewshot/fewshot.csv"):
            assert (one / rel).read_bytes() == (two / rel).read_bytes(), rel
