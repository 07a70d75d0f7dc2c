import json

import numpy as np
import pytest

from vidadv.checkpoint import load_models
from vidadv.cli import float_list, int_list, main, parse_attack, UsageError
from vidadv.data import load_clip, load_dataset_dir
from vidadv.evaluation import read_table_tsv

DATA_FLAGS = ["--classes", "4", "--frames", "8", "--height", "8", "--width", "8",
              "--n-train", "3", "--n-val", "1", "--n-test", "2"]
FAST = ["--epochs", "1", "--batch-size", "6", "--steps", "1"]


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def data_dir(workdir):
    assert run("gen-data", *DATA_FLAGS, "--seed", 3, "--out", workdir / "data") == 0
    return workdir / "data"


@pytest.fixture(scope="module")
def benign_ckpt(workdir, data_dir):
    assert run("train", "--data", data_dir, *FAST, "--out", workdir / "benign") == 0
    return workdir / "benign" / "model.ckpt"


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


class TestParsers:
    def test_ranges(self):
        assert float_list("0..12") == [0, 2, 4, 6, 8, 10, 12]
        assert float_list("1..3") == [1, 2, 3]
        assert float_list("0.25:1:0.25") == [0.25, 0.5, 0.75, 1.0]
        assert float_list("0,2,4") == [0, 2, 4]
        assert int_list("1,2,5,10") == [1, 2, 5, 10]

    def test_attack_tokens(self):
        assert parse_attack("clean") is None
        s = parse_attack("pgd:8")
        assert (s.variant, s.eps, s.alpha, s.steps) == ("pgd", 8.0, 2.0, 5)
        assert parse_attack("masked-pgd:4:1", steps=3).alpha == 1.0
        with pytest.raises(UsageError, match="valid names"):
            parse_attack("deepfool:8")


class TestGenData:
    def test_layout_and_manifest(self, data_dir):
        m = manifest(data_dir)
        assert m["command"] == "gen-data" and m["seed"] == 3
        files = {p.relative_to(data_dir).as_posix() for p in data_dir.rglob("*") if p.is_file()}
        assert set(m["outputs"]) == files - {"manifest.json"}
        assert len(load_dataset_dir(data_dir, "train")) == 12

    def test_same_seed_same_hashes(self, workdir, data_dir):
        assert run("gen-data", *DATA_FLAGS, "--seed", 3, "--out", workdir / "data2") == 0
        assert manifest(workdir / "data2")["outputs"] == manifest(data_dir)["outputs"]

    def test_unsupported_class_count(self, tmp_path, capsys):
        assert run("gen-data", "--classes", 99, "--out", tmp_path / "d") == 2
        assert "unsupported" in capsys.readouterr().err
        assert not (tmp_path / "d").exists()

    def test_refuses_non_empty_output(self, tmp_path):
        (tmp_path / "d").mkdir()
        (tmp_path / "d" / "keep.txt").write_text("x")
        assert run("gen-data", *DATA_FLAGS, "--out", tmp_path / "d") == 2
        assert (tmp_path / "d" / "keep.txt").exists()
        assert run("gen-data", *DATA_FLAGS, "--out", tmp_path / "d", "--force") == 0
        assert not (tmp_path / "d" / "keep.txt").exists()
        assert [p.name for p in tmp_path.iterdir()] == ["d"]

    def test_output_root_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("VIDADV_OUT", str(tmp_path))
        assert run("gen-data", *DATA_FLAGS, "--seed", 4) == 0
        assert (tmp_path / "gen-data-seed4" / "manifest.json").exists()


class TestTrain:
    def test_outputs(self, benign_ckpt):
        out = benign_ckpt.parent
        assert (out / "epochs.tsv").read_text().startswith("epoch\ttrain_acc\tval_acc\tgap")
        m = manifest(out)
        assert set(m["outputs"]) == {"model.ckpt", "epochs.tsv"}
        assert m["config"]["mode"] == "benign" and m["inputs"]["data"] == str(out.parent / "data")

    def test_bit_identical_and_thread_independent(self, workdir, data_dir, benign_ckpt):
        for threads in (1, 2):
            out = workdir / f"benign-t{threads}"
            assert run("train", "--data", data_dir, *FAST, "--threads", threads, "--out", out) == 0
            assert (out / "model.ckpt").read_bytes() == benign_ckpt.read_bytes()

    def test_missing_dataset(self, tmp_path):
        assert run("train", "--data", tmp_path / "nowhere", "--out", tmp_path / "o") == 3

    def test_invalid_mode(self, tmp_path, data_dir):
        assert run("train", "--data", data_dir, "--mode", "magic", "--out", tmp_path / "o") == 2

    @pytest.mark.parametrize("mode,extra", [
        ("at", ["--eps", 8, "--alpha", 8]),
        ("aat", ["--eps-set", "0,8", "--xi", 1, "--epochs", 2]),
        ("cat-up", ["--eps-set", "0,8", "--epochs", 2]),
        ("cat-down", ["--eps-set", "0,8", "--epochs", 2]),
        ("aat-types", ["--types", "masked-pgd,saliency-oneshot", "--eps", 16]),
        ("gat", ["--batches-per-epoch", 1, "--refine", 4]),
    ])
    def test_modes(self, tmp_path, data_dir, mode, extra):
        assert run("train", "--data", data_dir, "--mode", mode, *FAST, *extra, "--out", tmp_path / "o") == 0
        models, _ = load_models(tmp_path / "o" / "model.ckpt")
        assert "F" in models
        if mode == "gat":
            assert set(models) == {"F", "G", "D"}

    def test_generator_pipeline(self, tmp_path, data_dir, benign_ckpt):
        assert run("train", "--data", data_dir, "--mode", "ape", "--classifier", benign_ckpt, *FAST,
                   "--refine", 4, "--out", tmp_path / "ape") == 0
        assert (tmp_path / "ape" / "gan_log.tsv").read_text().startswith("epoch\tbatch\td_loss\tg_obj\tmse")
        assert run("train", "--data", data_dir, "--mode", "frozen-gat", "--generator", tmp_path / "ape" / "model.ckpt",
                   *FAST, "--init", benign_ckpt, "--out", tmp_path / "fgat") == 0
        ape, _ = load_models(tmp_path / "ape" / "model.ckpt")
        fgat, _ = load_models(tmp_path / "fgat" / "model.ckpt")
        assert all(np.array_equal(ape["G"].state_dict()[k], v) for k, v in fgat["G"].state_dict().items())
        assert run("eval", "--checkpoint", tmp_path / "fgat" / "model.ckpt", "--data", data_dir,
                   "--attacks", "clean,pgd:8", "--steps", 1, "--out", tmp_path / "ev") == 0

    def test_generator_modes_need_their_inputs(self, tmp_path, data_dir):
        assert run("train", "--data", data_dir, "--mode", "ape", "--out", tmp_path / "a") == 2
        assert run("train", "--data", data_dir, "--mode", "frozen-gat", "--out", tmp_path / "b") == 2

    def test_numeric_failure(self, tmp_path, data_dir, capsys):
        code = run("train", "--data", data_dir, "--epochs", 3, "--lr", 1e30, "--out", tmp_path / "nan")
        assert code == 4
        assert "operation" in capsys.readouterr().err
        assert not (tmp_path / "nan").exists()


class TestConfigFile:
    def test_values_applied_and_flags_win(self, tmp_path, data_dir):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# tiny run\nepochs = 1\ntrain.batch-size = 6\nsweep.n-clips = 3\nlr = 0.01\n")
        assert run("train", "--data", data_dir, "--config", cfg, "--lr", 0.02, "--out", tmp_path / "o") == 0
        conf = manifest(tmp_path / "o")["config"]
        assert conf["epochs"] == 1 and conf["batch_size"] == 6 and conf["lr"] == 0.02

    @pytest.mark.parametrize("text", ["epochz = 1\n", "epochs = many\n", "optimizer = rmsprop\n", "epochs\n"])
    def test_rejected_before_any_work(self, tmp_path, data_dir, text):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(text)
        assert run("train", "--data", data_dir, "--config", cfg, "--out", tmp_path / "o") == 2
        assert not (tmp_path / "o").exists()


class TestSweepEvalAttack:
    def test_sweep_files(self, tmp_path, data_dir, benign_ckpt):
        assert run("sweep", "--checkpoint", benign_ckpt, "--data", data_dir, "--eps", "4,8",
                   "--alpha-grid", "0.25:1:0.25", "--steps-grid", "1,2", "--out", tmp_path / "s") == 0
        names = sorted(p.name for p in (tmp_path / "s").iterdir())
        assert names == ["alpha_hat.tsv", "fit.tsv", "manifest.json", "surface_eps4.tsv", "surface_eps8.tsv"]
        assert len((tmp_path / "s" / "surface_eps4.tsv").read_text().splitlines()) == 1 + 4 * 2
        assert len((tmp_path / "s" / "fit.tsv").read_text().splitlines()) == 2

    def test_sweep_empty_grid(self, tmp_path, data_dir, benign_ckpt):
        assert run("sweep", "--checkpoint", benign_ckpt, "--data", data_dir, "--alpha-grid", ",",
                   "--out", tmp_path / "s") == 2

    def test_eval_table_columns(self, tmp_path, data_dir, benign_ckpt):
        assert run("eval", "--checkpoint", benign_ckpt, "--data", data_dir, "--steps", 1,
                   "--out", tmp_path / "e") == 0
        header = (tmp_path / "e" / "report.md").read_text().splitlines()[0]
        assert header == "| model | clean | pgd:4 | pgd:8 | pgd:12 | pgd:15 |"

    def test_eval_suboptimal_alpha(self, tmp_path, data_dir, benign_ckpt):
        assert run("eval", "--checkpoint", benign_ckpt, "--data", data_dir, "--attacks", "clean,pgd:8",
                   "--alpha-grid", "1,2,4", "--steps", 2, "--suboptimal-alpha", "--out", tmp_path / "e") == 0
        table = read_table_tsv(tmp_path / "e" / "report.tsv")
        assert set(table) == {"model", "model-half-alpha"}
        alphas = (tmp_path / "e" / "alphas.tsv").read_text().splitlines()
        assert alphas[0] == "attack\talpha" and alphas[1].startswith("pgd:8\t")

    def test_eval_unknown_attack(self, tmp_path, data_dir, benign_ckpt, capsys):
        assert run("eval", "--checkpoint", benign_ckpt, "--data", data_dir, "--attacks", "clean,warp:8",
                   "--out", tmp_path / "e") == 2
        err = capsys.readouterr().err
        assert "valid names" in err and "frame-border" in err

    def test_eval_missing_checkpoint(self, tmp_path, data_dir):
        assert run("eval", "--checkpoint", tmp_path / "none.ckpt", "--data", data_dir, "--out", tmp_path / "e") == 3

    def test_flicker_clips_are_spatially_constant(self, tmp_path, data_dir, benign_ckpt):
        assert run("attack", "--checkpoint", benign_ckpt, "--data", data_dir, "--variant", "flicker",
                   "--eps", 16, "--alpha", 5, "--steps", 3, "--out", tmp_path / "a") == 0
        test = load_dataset_dir(data_dir, "test")
        for i in range(len(test)):
            clip = test.clip(i)
            adv = load_clip(tmp_path / "a" / "clips" / f"{clip.id}.avl")
            assert adv.label == clip.label
            d = adv.frames.astype(np.float64) - clip.frames
            np.testing.assert_allclose(d, np.broadcast_to(d[:, :1, :1, :], d.shape), atol=1e-6)
            assert np.abs(d).max() <= 16 / 255 + 1e-6

    def test_success_is_complement_of_robust_accuracy(self, tmp_path, data_dir, benign_ckpt):
        assert run("attack", "--checkpoint", benign_ckpt, "--data", data_dir, "--variant", "pgd", "--eps", 8,
                   "--alpha", 2, "--steps", 2, "--out", tmp_path / "a") == 0
        assert run("eval", "--checkpoint", benign_ckpt, "--data", data_dir, "--attacks", "clean,pgd:8:2",
                   "--steps", 2, "--out", tmp_path / "e") == 0
        row = (tmp_path / "a" / "summary.tsv").read_text().splitlines()[1].split("\t")
        success, robust = float(row[3]), float(row[4])
        assert success == pytest.approx(1 - robust)
        assert robust == pytest.approx(read_table_tsv(tmp_path / "e" / "report.tsv")["model"]["pgd:8"], abs=1e-6)

    def test_masked_patch_ratio(self, tmp_path, data_dir, benign_ckpt):
        assert run("attack", "--checkpoint", benign_ckpt, "--data", data_dir, "--variant", "masked-pgd",
                   "--ratio", 0.15, "--eps", 16, "--alpha", 4, "--steps", 1, "--out", tmp_path / "a") == 0
        assert len(list((tmp_path / "a" / "clips").iterdir())) == 8

    def test_rerun_is_byte_identical(self, tmp_path, data_dir, benign_ckpt):
        for name in ("r1", "r2"):
            assert run("attack", "--checkpoint", benign_ckpt, "--data", data_dir, "--variant", "frame-border",
                       "--eps", 255, "--alpha", 64, "--steps", 1, "--random-start", "--out", tmp_path / name) == 0
        a, b = manifest(tmp_path / "r1"), manifest(tmp_path / "r2")
        assert a["outputs"] == b["outputs"]
        a.pop("wall_clock"), b.pop("wall_clock")
        assert a == b


def test_version_flag(capsys):
    assert run("--version") == 0
    assert "vidadv" in capsys.readouterr().out
