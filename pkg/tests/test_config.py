import math

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from glyphda.config import (ASC, PRESETS, AblationFlags, ConfigError, ExperimentConfig, LossWeights,
                            PerceptualSpec, ScheduleSpec, apply_overrides, dump_config, load_config,
                            loads_config, preset_ablation, to_dict)


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_empty_file_gives_defaults(tmp_path):
    cfg = load_config(write(tmp_path, ""))
    a = cfg.loss
    assert (a.alpha1, a.alpha2, a.alpha3, a.alpha4) == (1, 0.01, 0.05, 0.5)
    assert cfg.ablation == AblationFlags()
    assert cfg.trainer.batch_size == 16 and cfg.trainer.t_max == 150000


def test_negative_weight_names_the_key(tmp_path):
    with pytest.raises(ConfigError) as e:
        load_config(write(tmp_path, "loss:\n  alpha1: -1\n"))
    assert e.value.key == "loss.alpha1"


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError) as e:
        load_config(write(tmp_path, "loss:\n  alpah1: 1\n"))
    assert e.value.key == "loss.alpah1"


def test_parse_failure(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "loss: [unclosed\n"))


def test_preset_from_file(tmp_path):
    cfg = load_config(write(tmp_path, "ablation:\n  preset: model-B\n"))
    assert cfg.ablation == AblationFlags(True, False, False, False, False)


def test_presets_match_table_rows():
    assert preset_ablation("source-only") == AblationFlags(False, False, False, False, False)
    assert preset_ablation("model-E") == AblationFlags(True, True, True, True, False)
    assert preset_ablation("model-A") == AblationFlags(False, True, True, True, True)
    assert preset_ablation("model-C") == AblationFlags(True, True, False, False, False)
    assert preset_ablation("model-D") == AblationFlags(True, True, True, False, False)
    assert preset_ablation("full") == AblationFlags()
    with pytest.raises(ConfigError):
        preset_ablation("model-Z")


def test_default_layer_weights():
    spec = PerceptualSpec()
    assert [w for _, w in spec.reconstruction_taps] == list(ASC)
    rec = dict(spec.reconstruction_taps)
    assert all(rec[n] == w for n, w in spec.structure_taps)
    assert all(w == 1.0 for _, w in spec.texture_taps)
    assert [n for n, _ in spec.texture_taps] == ["relu1_1", "relu2_1", "relu3_1"]
    assert [n for n, _ in spec.structure_taps] == ["relu4_1", "relu5_1"]


def test_regimes():
    des = PerceptualSpec.from_regimes(rec="des")
    assert [w for _, w in des.reconstruction_taps] == list(reversed(ASC))
    same = PerceptualSpec.from_regimes(rec="same", structure="same")
    assert {w for _, w in same.reconstruction_taps + same.structure_taps} == {1.0}


def test_reconstruction_taps_must_cover_union(tmp_path):
    text = "perceptual:\n  reconstruction_taps: [[relu1_1, 1.0]]\n"
    with pytest.raises(ConfigError) as e:
        load_config(write(tmp_path, text))
    assert e.value.key == "perceptual.reconstruction_taps"


def test_unknown_tap(tmp_path):
    text = "perceptual:\n  texture_taps: {relu9_9: 1.0}\n"
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, text))


def test_batch_size_floor(tmp_path):
    with pytest.raises(ConfigError) as e:
        load_config(write(tmp_path, "trainer:\n  batch_size: 1\n"))
    assert e.value.key == "trainer.batch_size"


def test_missing_dataset_path_named(tmp_path):
    text = "data:\n  source:\n    kind: idx\n    images: /nope/images.idx\n    labels: /nope/labels.idx\n"
    with pytest.raises(ConfigError) as e:
        load_config(write(tmp_path, text))
    assert e.value.key.startswith("data.source")
    cfg = load_config(write(tmp_path, text), check_paths=False)
    assert cfg.data.source.kind == "idx"


def test_overrides():
    tree = apply_overrides({}, ["loss.alpha2=0.5", "trainer.t_max=50", "ablation.preset=model-C"])
    assert tree == {"loss": {"alpha2": 0.5}, "trainer": {"t_max": 50}, "ablation": {"preset": "model-C"}}
    # a preset replaces explicit flags already present in the tree
    tree = apply_overrides(to_dict(ExperimentConfig()), ["ablation.preset=source-only"])
    assert tree["ablation"] == {"preset": "source-only"}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no-equals-sign"])


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("GLYPHDA_OUTPUT_ROOT", str(tmp_path))
    assert ExperimentConfig(output_dir="a/b").output_path() == tmp_path / "a" / "b"
    assert ExperimentConfig(output_dir="/abs").output_path().as_posix() == "/abs"


def test_schedule_spec_validation():
    with pytest.raises(ConfigError):
        ScheduleSpec(0.0, 10)
    with pytest.raises(ConfigError):
        ScheduleSpec(1.0, 0)
    assert set(ExperimentConfig().schedules()) == {"backbone", "discriminators", "generator"}


finite = st.floats(min_value=0, max_value=10, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(
    alphas=st.tuples(finite, finite, finite, finite),
    preset=st.sampled_from(sorted(PRESETS)),
    seed=st.integers(0, 2**31 - 1),
    batch=st.integers(2, 64),
    regime=st.sampled_from(["asc", "same", "des"]),
)
def test_round_trip(alphas, preset, seed, batch, regime):
    cfg = ExperimentConfig(
        seed=seed,
        loss=LossWeights(*alphas),
        ablation=preset_ablation(preset),
        perceptual=PerceptualSpec.from_regimes(rec=regime, structure=regime),
    )
    cfg = loads_config(dump_config(cfg).replace("batch_size: 16", f"batch_size: {batch}"))
    again = loads_config(dump_config(cfg))
    assert again == cfg
    assert again.digest() == cfg.digest()
    assert again.trainer.batch_size == batch


def test_dump_is_plain_yaml():
    tree = yaml.safe_load(dump_config(ExperimentConfig()))
    assert tree["loss"]["alpha3"] == 0.05
    assert math.isclose(tree["perceptual"]["reconstruction_taps"][0][1], 1 / 32)
