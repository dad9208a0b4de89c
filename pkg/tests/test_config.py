import pytest
from hypothesis import given, settings, strategies as st

from setseg import config as cfg_mod
from setseg.config import RunConfig, get_value, leaf_keys, load_config, set_value


class TestParsing:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.parser.target_size == 640
        assert cfg.model.n_queries == 100
        assert cfg.losses.no_object_weight == 1e-4
        assert cfg.matcher.focal_weight == 20.0
        assert cfg.trainer.learning_rate == 1e-4

    def test_file_values_applied(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# comment line\n"
            "parser.target_size = 64\n"
            "parser.crop_sizes = 32,48\n"
            "trainer.optimizer = sgd\n"
            "seed = 9\n"
        )
        cfg = load_config(path)
        assert cfg.parser.target_size == 64
        assert cfg.parser.crop_sizes == (32, 48)
        assert cfg.trainer.optimizer == "sgd"
        assert cfg.seed == 9

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("parser.bogus = 1\n")
        with pytest.raises(cfg_mod.ConfigFileError):
            load_config(path)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("no equals sign here\n")
        with pytest.raises(cfg_mod.ConfigFileError):
            load_config(path)

    def test_override_beats_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("trainer.steps = 100\n")
        cfg = load_config(path, overrides=["trainer.steps=7"])
        assert cfg.trainer.steps == 7

    def test_float_tuple_coercion(self):
        cfg = RunConfig()
        set_value(cfg, "parser.mean", "0.5, 0.5, 0.5")
        assert cfg.parser.mean == (0.5, 0.5, 0.5)


NUMERIC_KEYS = [
    k for k in leaf_keys(RunConfig())
    if isinstance(get_value(RunConfig(), k), (int, float))
    and not isinstance(get_value(RunConfig(), k), bool)
]


class TestPrecedenceProperty:
    @settings(max_examples=25, deadline=None)
    @given(data=st.data())
    def test_file_lt_command_line(self, data, tmp_path_factory):
        keys = data.draw(st.lists(st.sampled_from(NUMERIC_KEYS), min_size=1,
                                  max_size=6, unique=True))
        split = data.draw(st.integers(min_value=0, max_value=len(keys)))
        file_keys, cli_keys = keys[:split], keys
        tmp = tmp_path_factory.mktemp("cfg")
        lines = []
        file_values = {}
        for i, k in enumerate(file_keys):
            v = _typed_value(k, 100 + i)
            file_values[k] = v
            lines.append(f"{k} = {v}")
        (tmp / "run.cfg").write_text("\n".join(lines) + "\n")
        overrides = []
        cli_values = {}
        for i, k in enumerate(cli_keys):
            v = _typed_value(k, 200 + i)
            cli_values[k] = v
            overrides.append(f"{k}={v}")
        cfg = load_config(tmp / "run.cfg", overrides)
        for k in keys:
            expected = cli_values.get(k, file_values.get(k))
            assert get_value(cfg, k) == expected


def _typed_value(key, n):
    current = get_value(RunConfig(), key)
    return n if isinstance(current, int) else float(n) + 0.5
