"""Tests for aptdiff.config."""

import json

import pytest

from aptdiff.config import (
    AptConfig,
    ExperimentConfig,
    ablation_dir,
    apply_overrides,
    builtin_config,
    config_hash,
    list_presets,
    load_config,
    preset_dict,
    prior_dir,
    resolve_config,
    run_dir,
    variant_name,
)


class TestPresets:
    def test_builtin_presets(self):
        assert {"default", "smoke"} <= set(list_presets())

    def test_default_matches_recipe(self):
        apt = builtin_config("default").apt
        assert apt.lambda_dist == 30.0
        assert apt.lambda_attn == 3e-4
        assert apt.p_max == 0.8
        assert apt.bins == 10
        assert apt.ema_alpha == 0.1
        assert apt.adapter_rank == 32
        assert apt.batch_size == 1
        assert apt.scale_range == (1.0, 3.0)

    def test_default_preset_equals_dataclass_defaults(self):
        assert builtin_config("default") == ExperimentConfig().validate()

    def test_smoke_is_small(self):
        cfg = builtin_config("smoke")
        assert cfg.net.image_size == 16
        assert cfg.apt.steps == 40
        assert cfg.apt.lambda_dist == 30.0

    def test_unknown_preset(self):
        with pytest.raises(KeyError, match="Unknown config preset"):
            preset_dict("huge")


class TestValidation:
    def test_bins_must_divide(self):
        with pytest.raises(ValueError, match="must divide"):
            AptConfig(bins=7).validate(1000)

    @pytest.mark.parametrize("bins", [1, 4, 5])
    def test_few_bins_accepted(self, bins):
        AptConfig(bins=bins).validate(1000)

    def test_zero_bins(self):
        with pytest.raises(ValueError, match="must divide"):
            AptConfig(bins=0).validate(1000)

    @pytest.mark.parametrize(
        "changes",
        [
            {"lambda_dist": -1.0},
            {"p_max": 1.2},
            {"ema_alpha": 0.0},
            {"temperature_mode": "cold"},
            {"adapter_rank": 0},
            {"identifier": "two words"},
            {"num_references": 11},
            {"scale_range": (0.5, 2.0)},
            {"rotation_range": (-5.0, 10.0)},
            {"stat_reduction": "pixel"},
            {"align_self_attention": True},
            {"delta_noise_conditioning": "none"},
        ],
    )
    def test_rejected(self, changes):
        with pytest.raises(ValueError):
            AptConfig(**changes).validate(1000)

    def test_numeric_temperature(self):
        AptConfig(temperature_mode=250.0).validate(1000)


class TestDicts:
    def test_round_trip(self):
        cfg = builtin_config("smoke")
        assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_section(self):
        with pytest.raises(ValueError, match="Unknown config sections"):
            ExperimentConfig.from_dict({"optimizer": {}})

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="Unknown keys in 'apt'"):
            ExperimentConfig.from_dict({"apt": {"lambda_dist_typo": 1.0}})

    def test_with_apt(self):
        cfg = builtin_config("smoke").with_apt(ata=False)
        assert cfg.apt.variant_name == "rs+aa"


class TestLoading:
    def test_file_layers_over_preset(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"apt": {"steps": 7}}))
        cfg = load_config(path, "smoke")
        assert cfg.apt.steps == 7
        assert cfg.net.image_size == 16

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        with pytest.raises(ValueError, match="Invalid JSON"):
            load_config(path)

    def test_overrides(self):
        cfg = apply_overrides(
            builtin_config("smoke"), ["apt.lambda_dist=0", "apt.ata=false", "apt.identifier=sks"]
        )
        assert cfg.apt.lambda_dist == 0
        assert cfg.apt.ata is False
        assert cfg.apt.identifier == "sks"

    @pytest.mark.parametrize("override", ["apt.steps", "steps=3", "opt.lr=1"])
    def test_bad_overrides(self, override):
        with pytest.raises(ValueError):
            apply_overrides(builtin_config("smoke"), [override])

    def test_resolve_order(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"apt": {"steps": 7, "seed": 3}}))
        cfg = resolve_config("smoke", path, ["apt.steps=9"])
        assert cfg.apt.steps == 9
        assert cfg.apt.seed == 3


class TestRunDirectories:
    def test_hash_stable(self):
        assert config_hash(builtin_config("smoke")) == config_hash(builtin_config("smoke"))

    def test_hash_changes_with_values(self):
        a = builtin_config("smoke")
        assert config_hash(a) != config_hash(a.with_apt(lambda_dist=1.0))

    def test_prior_shared_across_variants(self, tmp_path):
        a = builtin_config("smoke")
        b = a.with_apt(ata=False, rs=False, aa=False)
        assert prior_dir(tmp_path, a) == prior_dir(tmp_path, b)
        assert run_dir(tmp_path, a) != run_dir(tmp_path, b)

    def test_seed_in_names(self, tmp_path):
        cfg = builtin_config("smoke").with_apt(seed=5)
        assert run_dir(tmp_path, cfg).name.endswith("-s5")
        assert ablation_dir(tmp_path, cfg).name.startswith("ablation-")

    def test_ablation_dir_ignores_variant_flags(self, tmp_path):
        a = builtin_config("smoke")
        assert ablation_dir(tmp_path, a) == ablation_dir(tmp_path, a.with_apt(aa=False))


@pytest.mark.parametrize(
    "flags,name",
    [
        ((False, False, False), "base"),
        ((True, False, False), "ata"),
        ((True, True, False), "ata+rs"),
        ((True, True, True), "ata+rs+aa"),
    ],
)
def test_variant_name(flags, name):
    assert variant_name(*flags) == name
