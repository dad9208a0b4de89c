import pytest

from setseg.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    raw = tmp / "raw"
    shards = tmp / "shards"
    assert main(["synth", "--n", "8", "--out", str(raw), "--seed", "4",
                 "--min-size", "40", "--max-size", "72"]) == 0
    assert main(["ingest", "--annotations", str(raw / "annotations.jsonl"),
                 "--shards", "2", "--out", str(shards)]) == 0
    return tmp


TOY_OVERRIDES = [
    "--set", "parser.target_size=64",
    "--set", "parser.crop_sizes=24,32",
    "--set", "model.input_size=64",
    "--set", "model.n_queries=8",
    "--set", "model.hidden_size=32",
    "--set", "model.backbone_channels=32",
    "--set", "model.num_encoder_layers=1",
    "--set", "model.num_decoder_layers=1",
    "--set", "model.num_heads=4",
]


class TestSubcommands:
    def test_train_then_eval(self, dataset):
        run = dataset / "run"
        code = main(["train", "--data", str(dataset / "shards"), "--out", str(run),
                     "--set", "trainer.steps=2", "--set", "trainer.batch_size=2",
                     *TOY_OVERRIDES])
        assert code == 0
        assert (run / "loss.csv").exists()
        code = main(["eval", "--data", str(dataset / "shards"),
                     "--checkpoint", str(run / "final.ckpt"),
                     "--out", str(dataset / "eval"), *TOY_OVERRIDES])
        assert code == 0

    def test_verify_passes_on_pristine_build(self, dataset, capsys):
        assert main(["verify", *TOY_OVERRIDES]) == 0
        out = capsys.readouterr().out
        assert "8/8 checks passed" in out

    def test_verify_fails_on_mutation(self, dataset, capsys):
        assert main(["verify", *TOY_OVERRIDES, "--set", "losses.dice_eps=10.0"]) == 1
        out = capsys.readouterr().out
        assert "[FAIL] loss unit fixtures" in out

    def test_profile(self, dataset, capsys):
        code = main(["profile", "--data", str(dataset / "shards"), "--steps", "2",
                     "--set", "trainer.batch_size=2", *TOY_OVERRIDES])
        assert code == 0
        out = capsys.readouterr().out
        assert "records/sec" in out

    def test_profile_zero_steps(self, dataset, capsys):
        code = main(["profile", "--data", str(dataset / "shards"), "--steps", "0",
                     *TOY_OVERRIDES])
        assert code == 0
        assert "no steps profiled" in capsys.readouterr().out

    def test_model_info(self, capsys):
        assert main(["model", "info", *TOY_OVERRIDES]) == 0
        out = capsys.readouterr().out
        assert out.startswith("parameters: ")

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])        # missing required --data/--out
        assert exc.value.code == 2

    @pytest.mark.filterwarnings("ignore:invalid value")
    @pytest.mark.filterwarnings("ignore:overflow")
    def test_train_abort_exit_code(self, dataset, capsys):
        code = main(["train", "--data", str(dataset / "shards"),
                     "--out", str(dataset / "abort"),
                     "--set", "trainer.steps=30",
                     "--set", "trainer.batch_size=2",
                     "--set", "trainer.learning_rate=1e18",
                     "--set", "trainer.grad_clip_norm=0",
                     *TOY_OVERRIDES])
        assert code == 1
        assert "aborted" in capsys.readouterr().err
