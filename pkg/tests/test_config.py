from dataclasses import replace

import pytest

from utils.config import (
    ExperimentConfig,
    LossKind,
    TafnetConfig,
    TrainConfig,
    Variant,
    experiment_config_from_text,
    experiment_config_to_text,
    get_runtime_settings,
    load_experiment_config,
    model_config_from_text,
    model_config_to_text,
    parse_flat_config,
)
from utils.errors import ConfigError, ValidationError


class TestDefaults:
    def test_defaults_are_valid(self):
        ExperimentConfig().validate()

    def test_train_defaults(self):
        cfg = TrainConfig()
        assert cfg.weight_decay == 1e-4
        assert cfg.betas == (0.9, 0.999)
        assert cfg.loss is LossKind.BAYESIAN

    def test_no_file_gives_defaults(self):
        assert load_experiment_config() == ExperimentConfig()


class TestParsing:
    def test_values_and_comments(self):
        text = "# toy run\nwidth_multiplier = 0.125\ninput_size = 64x96\nvariant = iim_no_attn\npyramid_bins = 1,2,4\n"
        cfg = experiment_config_from_text(text)
        assert cfg.model.width_multiplier == 0.125
        assert cfg.model.input_size == (64, 96)
        assert cfg.synth.image_size == (64, 96)
        assert cfg.model.variant is Variant.IIM_NO_ATTN
        assert cfg.train.variant is Variant.IIM_NO_ATTN
        assert cfg.model.pyramid.bin_sizes == (1, 2, 4)

    def test_square_size_shorthand(self):
        assert experiment_config_from_text("input_size = 32").model.input_size == (32, 32)

    def test_seed_is_shared(self):
        cfg = experiment_config_from_text("seed = 17")
        assert cfg.synth.seed == 17
        assert cfg.train.seed == 17

    def test_betas_and_switches(self):
        cfg = experiment_config_from_text("beta1 = 0.8\nbl_background = off\nloss = mse_on_gaussian_gt")
        assert cfg.train.betas == (0.8, 0.999)
        assert cfg.train.bl_background is False
        assert cfg.train.loss is LossKind.MSE_ON_GAUSSIAN_GT

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError) as info:
            parse_flat_config("learning_rate = 0.1")
        assert info.value.field == "learning_rate"

    def test_missing_value_rejected(self):
        with pytest.raises(ConfigError, match="lr: missing value"):
            parse_flat_config("lr =")

    @pytest.mark.parametrize("text", ["lr: 0.5", "seed = 3\nmax_epochs 5\n", "# run\n\nlr = 0.5\n\nseed: 2\n"])
    def test_malformed_line_rejected(self, text):
        with pytest.raises(ConfigError, match="expected `key = value`") as info:
            parse_flat_config(text)
        assert info.value.field == f"line {len(text.strip().splitlines())}"

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match=r"duplicate key \(line 3, first set on line 1\)") as info:
            parse_flat_config("lr = 0.5\nseed = 2\nlr = 0.1\n")
        assert info.value.field == "lr"

    def test_quotes_and_trailing_comments(self):
        assert parse_flat_config('variant = "full"\nlr = 0.01  # faster\n') == {"variant": "full", "lr": "0.01"}

    def test_parse_error_names_key(self):
        with pytest.raises(ConfigError) as info:
            experiment_config_from_text("max_epochs = many")
        assert info.value.field == "max_epochs"

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError, match="variant"):
            experiment_config_from_text("variant = everything")

    @pytest.mark.parametrize(
        "text, field",
        [
            ("max_epochs = 5\nval_start_epoch = 6", "val_start_epoch"),
            ("input_size = 48", "input_size"),
            ("width_multiplier = 0.03", "width_multiplier"),
            ("count_min = 9\ncount_max = 3", "count_min"),
            ("rgb_contrast_dark = 0.9", "rgb_contrast_bright"),
            ("spatial_kernel = 4", "spatial_kernel"),
            ("pyramid_bins = 3,1", "pyramid_bins"),
            ("beta2 = 1.0", "beta2"),
        ],
    )
    def test_invalid_values_rejected(self, text, field):
        with pytest.raises(ConfigError) as info:
            experiment_config_from_text(text)
        assert info.value.field == field

    def test_zero_epochs_allow_any_validation_start(self):
        assert experiment_config_from_text("max_epochs = 0").train.max_epochs == 0

    def test_config_errors_are_validation_errors(self):
        with pytest.raises(ValidationError):
            experiment_config_from_text("nonsense = 1")


class TestFiles:
    def test_load_with_seed_override(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("seed = 3\nlr = 0.001\n")
        cfg = load_experiment_config(str(path), seed=11)
        assert cfg.train.seed == 11
        assert cfg.synth.seed == 11
        assert cfg.train.lr == 0.001

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="file not found"):
            load_experiment_config(str(tmp_path / "absent.conf"))

    def test_experiment_text_round_trip(self):
        cfg = ExperimentConfig(
            model=TafnetConfig(width_multiplier=0.125, variant=Variant.BASELINE, gate_init=-0.5),
            train=replace(TrainConfig(), lr=3e-4, variant=Variant.BASELINE, bl_background=False),
        )
        assert experiment_config_from_text(experiment_config_to_text(cfg)) == cfg

    def test_model_text_round_trip(self):
        cfg = TafnetConfig(width_multiplier=0.1875, input_size=(32, 64), variant=Variant.IIM_NO_ATTN, gate_init=0.1)
        assert model_config_from_text(model_config_to_text(cfg)) == cfg

    def test_model_text_is_sorted(self):
        keys = [line.split(" = ")[0] for line in model_config_to_text(TafnetConfig()).splitlines()]
        assert keys == sorted(keys)

    def test_model_text_rejects_training_keys(self):
        with pytest.raises(ConfigError, match="not a model configuration key"):
            model_config_from_text("lr = 0.1")


class TestRuntimeSettings:
    def test_defaults(self, monkeypatch, tmp_path):
        monkeypatch.chdir(tmp_path)
        for name in ("TAFNET_LOG_LEVEL", "TAFNET_CHECK_FINITE", "TAFNET_DATA_DIR", "TAFNET_CHECKPOINT"):
            monkeypatch.delenv(name, raising=False)
        settings = get_runtime_settings()
        assert settings.log_level == "INFO"
        assert settings.check_finite is True
        assert settings.data_dir is None

    def test_environment(self, monkeypatch, tmp_path):
        monkeypatch.chdir(tmp_path)
        monkeypatch.setenv("TAFNET_LOG_LEVEL", "debug")
        monkeypatch.setenv("TAFNET_CHECK_FINITE", "off")
        monkeypatch.setenv("TAFNET_DATA_DIR", "/data/toy")
        settings = get_runtime_settings()
        assert settings.log_level == "DEBUG"
        assert settings.check_finite is False
        assert settings.data_dir == "/data/toy"

    def test_bad_switch(self, monkeypatch, tmp_path):
        monkeypatch.chdir(tmp_path)
        monkeypatch.setenv("TAFNET_CHECK_FINITE", "maybe")
        with pytest.raises(ConfigError, match="TAFNET_CHECK_FINITE"):
            get_runtime_settings()
