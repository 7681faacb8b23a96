import json

import numpy as np
import pytest

from signseq.cli import main
from signseq.data import load_checkpoint

SMALL = [
    "corpus.n_gloss=5", "corpus.d_in=6", "corpus.n_train=12", "corpus.n_dev=4",
    "corpus.n_test=4", "corpus.min_glosses=2", "corpus.max_glosses=3",
    "corpus.min_frames=6", "corpus.max_frames=8",
    "model.d_model=16", "model.heads=2", "model.enc_layers=1", "model.dec_layers=1",
    "gathering.l=3", "gathering.gamma=1.34", "attention.max_dist=8",
    "training.steps=30", "training.batch_size=4", "training.warmup=10",
    "training.save_every=10", "training.average_last=3",
    "decoding.max_len=6", "decoding.ctc_beam=3", "decoding.beam=3",
]


def run(argv):
    return main(argv)


def sets(extra=()):
    out = []
    for s in list(SMALL) + list(extra):
        out.extend(["--set", s])
    return out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliwork")
    data = root / "data"
    rund = root / "run"
    assert run(["generate-data", "--out", str(data)] + sets()) == 0
    assert run(["train", "--data", str(data), "--out", str(rund), "--quiet"] + sets()) == 0
    return root


class TestGenerateData:
    def test_writes_three_splits(self, workdir, capsys):
        assert {(workdir / "data" / f"{s}.bin").exists() for s in ("train", "dev", "test")} == {True}

    def test_reruns_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(["generate-data", "--out", str(a)] + sets()) == 0
        assert run(["generate-data", "--out", str(b)] + sets()) == 0
        for split in ("train", "dev", "test"):
            assert (a / f"{split}.bin").read_bytes() == (b / f"{split}.bin").read_bytes()


class TestTrain:
    def test_outputs(self, workdir):
        rund = workdir / "run"
        assert (rund / "metrics.jsonl").exists()
        assert (rund / "ckpt_000030.bin").exists()
        assert (rund / "ckpt_avg.bin").exists()
        lines = [json.loads(x) for x in (rund / "metrics.jsonl").read_text().splitlines()]
        assert lines[0]["type"] == "config"
        steps = [x for x in lines if x["type"] == "step"]
        assert len(steps) == 30
        assert steps[-1]["step"] == 30
        assert all(set(x) >= {"step", "lr", "total", "ctc_loss", "ce_loss"} for x in steps)

    def test_training_deterministic(self, workdir, tmp_path):
        rerun = tmp_path / "rerun"
        assert run(["train", "--data", str(workdir / "data"), "--out", str(rerun),
                    "--quiet"] + sets()) == 0
        assert (rerun / "metrics.jsonl").read_bytes() == \
            (workdir / "run" / "metrics.jsonl").read_bytes()
        assert (rerun / "ckpt_avg.bin").read_bytes() == \
            (workdir / "run" / "ckpt_avg.bin").read_bytes()

    def test_checkpoint_carries_config(self, workdir):
        ck = load_checkpoint(workdir / "run" / "ckpt_avg.bin")
        assert ck.config["corpus"]["n_gloss"] == 5
        assert ck.config["training"]["steps"] == 30

    def test_mismatched_dataset_rejected(self, workdir, capsys):
        code = run(["train", "--data", str(workdir / "data"), "--out", "/tmp/nope",
                    "--quiet"] + sets(["corpus.noise=0.9"]))
        assert code == 1
        assert "different corpus config" in capsys.readouterr().err


class TestEvaluate:
    def test_report_and_reruns_identical(self, workdir, tmp_path, capsys):
        ckpt = str(workdir / "run" / "ckpt_avg.bin")
        r1, r2 = tmp_path / "e1.jsonl", tmp_path / "e2.jsonl"
        for r in (r1, r2):
            assert run(["evaluate", "--ckpt", ckpt, "--data", str(workdir / "data"),
                        "--split", "dev", "--out", str(r)]) == 0
        assert r1.read_bytes() == r2.read_bytes()
        lines = [json.loads(x) for x in r1.read_text().splitlines()]
        kinds = [x["type"] for x in lines]
        assert kinds == ["config", "loss", "recognition", "translation"]
        rec = lines[kinds.index("recognition")]
        assert 0.0 <= rec["wer"]
        assert rec["sub_rate"] + rec["del_rate"] + rec["ins_rate"] == pytest.approx(rec["wer"])
        out = capsys.readouterr().out
        assert "wer=" in out and "bleu4=" in out

    def test_set_overrides_decoding(self, workdir, tmp_path, capsys):
        ckpt = str(workdir / "run" / "ckpt_avg.bin")
        r = tmp_path / "e.jsonl"
        assert run(["evaluate", "--ckpt", ckpt, "--data", str(workdir / "data"),
                    "--split", "dev", "--out", str(r),
                    "--set", "decoding.translate=false",
                    "--set", "decoding.ctc_mode=greedy"]) == 0
        kinds = [json.loads(x)["type"] for x in r.read_text().splitlines()]
        assert "translation" not in kinds
        assert "bleu4" not in capsys.readouterr().out


class TestDecode:
    def test_per_sample_records(self, workdir, tmp_path):
        ckpt = str(workdir / "run" / "ckpt_avg.bin")
        out = tmp_path / "hyp.jsonl"
        assert run(["decode", "--ckpt", ckpt, "--data", str(workdir / "data"),
                    "--split", "test", "--out", str(out), "--limit", "2"]) == 0
        lines = [json.loads(x) for x in out.read_text().splitlines()]
        assert lines[0]["type"] == "config"
        samples = lines[1:]
        assert len(samples) == 2
        for s in samples:
            assert set(s) >= {"index", "gloss_ref", "gloss_hyp", "word_ref", "word_hyp",
                              "sentence_bleu_smoothed"}
            assert all(1 <= g <= 5 for g in s["gloss_ref"])


class TestAverageCkpt:
    def test_average(self, workdir, tmp_path):
        rund = workdir / "run"
        out = tmp_path / "avg.bin"
        assert run(["average-ckpt", str(rund / "ckpt_000020.bin"),
                    str(rund / "ckpt_000030.bin"), "--out", str(out)]) == 0
        a = load_checkpoint(rund / "ckpt_000020.bin").params
        b = load_checkpoint(rund / "ckpt_000030.bin").params
        got = load_checkpoint(out).params
        for k in got:
            assert np.allclose(got[k], (a[k].astype(np.float64) + b[k]) / 2.0, atol=1e-7)

    def test_single_input_rejected(self, workdir, capsys):
        code = run(["average-ckpt", str(workdir / "run" / "ckpt_000030.bin"),
                    "--out", "/tmp/x.bin"])
        assert code == 1
        assert "at least two" in capsys.readouterr().err


class TestAblate:
    def test_tiny_grid_end_to_end(self, workdir, tmp_path, capsys):
        out = tmp_path / "abl"
        cfg_extra = ["ablate.steps=4", "ablate.eval_split=dev",
                     "decoding.translate=false", "decoding.ctc_mode=greedy"]
        assert run(["ablate", "--data", str(workdir / "data"), "--out", str(out),
                    "--groups", "attention_terms", "--quiet"] + sets(cfg_extra)) == 0
        summary = [json.loads(x) for x in (out / "summary.jsonl").read_text().splitlines()]
        assert summary[0]["type"] == "config"
        cells = [x for x in summary if x["type"] == "cell"]
        assert {c["cell"] for c in cells} == {"c2c", "c2c_c2p_p2c", "all_terms"}
        for c in cells:
            assert np.isfinite(c["wer"]) and np.isfinite(c["total_loss"])
        # one report per cell directory
        reports = list(out.glob("attention_terms/*/report.jsonl"))
        assert len(reports) == 3
        for rp in reports:
            kinds = [json.loads(x)["type"] for x in rp.read_text().splitlines()]
            assert kinds[:3] == ["config", "loss", "recognition"]

    def test_unknown_group_rejected(self, workdir, capsys):
        code = run(["ablate", "--data", str(workdir / "data"), "--out", "/tmp/abl2",
                    "--groups", "nosuch", "--quiet"] + sets())
        assert code == 1
        assert "unknown ablation group" in capsys.readouterr().err


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as e:
            run(["train", "--nonsense"])
        assert e.value.code == 1

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as e:
            run(["frobnicate"])
        assert e.value.code == 1

    def test_bad_override_is_user_error(self, tmp_path, capsys):
        assert run(["generate-data", "--out", str(tmp_path / "d"),
                    "--set", "corpus.nglos=5"]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_missing_data_dir_is_user_error(self, capsys):
        assert run(["train", "--data", "/tmp/definitely-missing-dir",
                    "--out", "/tmp/r", "--quiet"]) == 1

    def test_corrupt_checkpoint_is_user_error(self, workdir, tmp_path, capsys):
        p = tmp_path / "bad.bin"
        raw = bytearray((workdir / "run" / "ckpt_avg.bin").read_bytes())
        raw[20] ^= 0xFF
        p.write_bytes(bytes(raw))
        assert run(["evaluate", "--ckpt", str(p), "--data", str(workdir / "data"),
                    "--split", "dev", "--out", str(tmp_path / "r.jsonl")]) == 1
        assert "checksum" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_impossible_tolerance_exits_2(self, capsys):
        code = run(["gradcheck", "--which", "primitives", "--tol", "1e-15"])
        assert code == 2
        out = capsys.readouterr().out
        assert "FAIL" in out and "backend: ctc=" in out

    def test_primitives_pass(self, capsys):
        assert run(["gradcheck", "--which", "primitives"]) == 0
        assert "PASS primitives" in capsys.readouterr().out
