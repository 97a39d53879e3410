import json

import pytest

from ditmoe.config import (
    ConfigError,
    ConfigFile,
    ModelConfig,
    config_from_dict,
    count_parameters,
    load_preset,
    parse_expert_spec,
    preset_names,
    resolve_config,
    save_config,
    validate_config,
)


def tiny_config(**overrides):
    base = dict(blocks=4, hidden=32, intermediate=48, heads=2,
                expert_spec="S1E4A2", patch_size=2, in_channels=3,
                num_classes=10, grid_h=4, grid_w=4)
    base.update(overrides)
    return ModelConfig(**base)


class TestExpertSpec:
    @pytest.mark.parametrize("spec,expected", [
        ("S1E16A2", (1, 16, 2)),
        ("S1E48A5", (1, 48, 5)),
        ("S0E16A3", (0, 16, 3)),
    ])
    def test_parse(self, spec, expected):
        assert parse_expert_spec(spec) == expected

    @pytest.mark.parametrize("bad", ["E16A2", "S1E16", "S1E16A17", "S1E16A0", "s1e16a2"])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            parse_expert_spec(bad)


class TestValidation:
    def test_clean_config(self):
        assert validate_config(tiny_config()) == []

    def test_table_style_large_row_is_clean(self):
        cfg = ModelConfig(blocks=24, hidden=1024, intermediate=448, heads=16,
                          expert_spec="S1E48A5", dense_intermediate=2048,
                          in_channels=4, patch_size=2)
        assert validate_config(cfg) == []

    def test_head_divisibility(self):
        assert any("divisible by heads" in p for p in validate_config(tiny_config(heads=3)))

    def test_rope2d_head_dim(self):
        bad = tiny_config(hidden=24, heads=2, pe_mode="rope2d")  # head_dim 12 ok
        assert validate_config(bad) == []
        bad = tiny_config(hidden=12, heads=2, pe_mode="rope2d")  # head_dim 6
        assert any("divisible by 4" in p for p in validate_config(bad))

    def test_bad_expert_spec_reported(self):
        assert any("activates" in p for p in validate_config(tiny_config(expert_spec="S1E16A17")))

    def test_gqa_bounds(self):
        assert any("gqa" in p for p in validate_config(tiny_config(gqa_kv_heads=3)))
        assert validate_config(tiny_config(gqa_kv_heads=1)) == []

    def test_moe_block_layout(self):
        cfg = tiny_config(blocks=5)
        assert cfg.moe_block_indices() == [0, 2, 4]
        assert tiny_config(blocks=5, moe_parity=1).moe_block_indices() == [1, 3]
        assert tiny_config(blocks=3, interleave=False).moe_block_indices() == [0, 1, 2]


class TestCounting:
    def test_dense_degenerate_equality(self):
        cfg = tiny_config(expert_spec="S0E3A3")
        total, activated = count_parameters(cfg)
        assert total == activated

    def test_sparsity_strictly_cheaper(self):
        total, activated = count_parameters(tiny_config())
        assert activated < total

    def test_ape_table_is_the_only_difference(self):
        rope = tiny_config(pe_mode="rope2d")
        ape = tiny_config(pe_mode="ape")
        t_rope, a_rope = count_parameters(rope)
        t_ape, a_ape = count_parameters(ape)
        table = ape.n_tokens * ape.hidden
        assert t_ape - t_rope == table
        assert a_ape - a_rope == table

    def test_invalid_config_raises(self):
        with pytest.raises(ConfigError):
            count_parameters(tiny_config(hidden=30, heads=4))

    def test_interleave_off_adds_moe_layers(self):
        on, _ = count_parameters(tiny_config())
        off, _ = count_parameters(tiny_config(interleave=False))
        assert off > on


class TestConfigFiles:
    def test_round_trip(self, tmp_path):
        cf = ConfigFile(name="unit", model=tiny_config(), train={"steps": 7})
        path = tmp_path / "unit.json"
        save_config(cf, path)
        back = resolve_config(str(path))
        assert back.model == cf.model
        assert back.train == {"steps": 7}
        assert back.name == "unit"

    def test_resolve_without_suffix(self, tmp_path):
        cf = ConfigFile(name="x", model=tiny_config())
        save_config(cf, tmp_path / "x.json")
        assert resolve_config(str(tmp_path / "x")).model == cf.model

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"model": {"blocks": 2, "hidden": 8, "intermediate": 8,
                                        "heads": 2, "bogus": 1}})

    def test_missing_section_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"train": {}})

    def test_unparseable_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            resolve_config(str(path))


class TestPresets:
    def test_all_presets_ship_and_validate(self):
        names = preset_names()
        assert len(names) == 10  # nine table rows plus the tiny trainer
        for name in names:
            cf = load_preset(name)
            assert validate_config(cf.model) == [], name
            assert cf.name == name

    def test_resolve_by_preset_name_with_prefix(self):
        direct = load_preset("dsmoe-s-e16")
        assert resolve_config("presets/dsmoe-s-e16").model == direct.model
        assert resolve_config("dsmoe-s-e16.json").model == direct.model

    def test_unknown_preset_message_lists_options(self):
        with pytest.raises(ConfigError, match="dsmoe-s-e16"):
            load_preset("no-such-model")
