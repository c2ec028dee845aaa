from pathlib import Path

from glyphda.experiments import anchor_paths, ensure_perceptual_weights, mean_target, run_key, run_once, run_presets

from conftest import make_config


def test_run_once_caches(tmp_path):
    cfg = make_config("trainer.t_max=4", "trainer.eval_every=4", "trainer.checkpoint_every=4")
    first = run_once(cfg, "source-only", 3, tmp_path)
    again = run_once(cfg, "source-only", 3, tmp_path)
    assert not first.cached and again.cached
    assert again.target_accuracy == first.target_accuracy and again.iterations == 4
    assert (Path(first.run_dir) / "checkpoints" / "final.ckpt").exists()
    other = run_once(cfg, "source-only", 4, tmp_path)
    assert other.run_dir != first.run_dir


def test_run_presets_table(tmp_path):
    cfg = make_config("trainer.t_max=2", "trainer.eval_every=2", "trainer.checkpoint_every=2")
    seen = []
    table = run_presets(cfg, ["source-only", "model-B"], [0, 1], tmp_path, on_result=seen.append)
    assert list(table) == ["source-only", "model-B"] and len(seen) == 4
    assert 0 <= mean_target(table["model-B"]) <= 1


def test_key_tracks_config(tmp_path):
    a = make_config("trainer.t_max=2")
    b = make_config("trainer.t_max=3")
    assert run_key(a) != run_key(b)


def test_perceptual_weights_anchor_and_create(tmp_path):
    cfg = anchor_paths(make_config("model.perceptual_weights=w/vgg.bin"), tmp_path)
    assert cfg.model.perceptual_weights == str((tmp_path / "w" / "vgg.bin").resolve())
    assert anchor_paths(cfg, "/elsewhere") == cfg
    path = ensure_perceptual_weights(cfg, steps=2)
    stamp = path.stat().st_mtime_ns
    assert path.exists() and ensure_perceptual_weights(cfg, steps=2).stat().st_mtime_ns == stamp
    assert ensure_perceptual_weights(make_config()) is None
