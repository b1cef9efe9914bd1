import pytest

from clmarl.config import (
    ConfigError,
    apply_override,
    apply_overrides,
    config_hash,
    default_config,
    load_file,
    parse_text,
    serialize,
)


class TestOverrides:
    def test_typed_override(self):
        cfg = apply_override(default_config(), "flexdiff.window_len", "10")
        assert cfg.flexdiff.window_len == 10
        cfg = apply_override(cfg, "learner.lam", "0.25")
        assert cfg.learner.lam == 0.25
        cfg = apply_override(cfg, "run.scheduler_enabled", "false")
        assert cfg.run.scheduler_enabled is False

    def test_unknown_section_named(self):
        with pytest.raises(ConfigError, match="unknown section 'nope'"):
            apply_override(default_config(), "nope.key", "1")

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="flexdiff.widnow_len"):
            apply_override(default_config(), "flexdiff.widnow_len", "1")

    def test_bad_value_diagnostic(self):
        with pytest.raises(ConfigError, match="run.total_env_steps"):
            apply_override(default_config(), "run.total_env_steps", "banana")

    def test_dotted_form_required(self):
        with pytest.raises(ConfigError):
            apply_override(default_config(), "window_len", "10")


class TestParseAndSerialize:
    def test_round_trip_exact(self):
        cfg = apply_overrides(default_config(), {
            "flexdiff.momentum_tolerance": "0.037",
            "learner.lam": "0.125",
            "env.n_enemies": "4",
        })
        text = serialize(cfg)
        again = parse_text(text)
        assert again == cfg
        assert config_hash(again) == config_hash(cfg)

    def test_comments_and_blanks_ignored(self):
        cfg = parse_text("""
# a comment
[flexdiff]
window_len = 15   # trailing comment
""")
        assert cfg.flexdiff.window_len == 15

    def test_unknown_section_line_numbered(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_text("\n[bogus]\nkey = 1\n")

    def test_key_outside_section(self):
        with pytest.raises(ConfigError, match="outside any"):
            parse_text("window_len = 10\n")

    def test_hash_differs_on_change(self):
        a = default_config()
        b = apply_override(a, "learner.lam", "0.9")
        assert config_hash(a) != config_hash(b)


class TestValidation:
    def test_band_reversed_rejected_with_constraint_named(self):
        cfg = apply_overrides(default_config(), {
            "flexdiff.band_min": "0.9", "flexdiff.band_max": "0.8",
        })
        with pytest.raises(ConfigError, match="band_min"):
            cfg.validate()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_file(str(tmp_path / "absent.cfg"))

    def test_load_file_with_overrides(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("[run]\ntotal_env_steps = 5000\n")
        cfg = load_file(str(path), {"run.eval_interval": "500"})
        assert cfg.run.total_env_steps == 5000
        assert cfg.run.eval_interval == 500

    def test_epsilon_schedule_validated(self):
        cfg = apply_overrides(default_config(), {
            "run.epsilon_end": "0.5", "run.epsilon_start": "0.2",
        })
        with pytest.raises(ConfigError, match="epsilon"):
            cfg.validate()
