import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from glyphda.checkpoint import ContainerError
from glyphda.config import ScheduleSpec
from glyphda.data import batch_stream, load_corpora
from glyphda.losses import NonFiniteLossError
from glyphda.networks import NETWORK_NAMES, WeightsMismatchError
from glyphda.trainer import (PHASES, METRIC_COLUMNS, active_terms, checkpoint_load, checkpoint_save, fit,
                             init_state, iter_phases, lr_at, train_step)

from conftest import make_config


def test_lr_boundaries():
    spec = ScheduleSpec(2.5e-4, 1000)
    assert lr_at(spec, 0) == 2.5e-4
    assert lr_at(spec, 1000) == 0
    assert lr_at(spec, 500) == pytest.approx(2.5e-4 * 0.5 ** 0.9, abs=1e-12)
    with pytest.raises(ValueError):
        lr_at(spec, 1001)
    with pytest.raises(ValueError):
        lr_at(spec, -1)


@settings(max_examples=50, deadline=None)
@given(t_max=st.integers(2, 10**6), frac=st.floats(0, 1, exclude_max=True), exp=st.floats(0.1, 3))
def test_lr_strictly_decreasing(t_max, frac, exp):
    spec = ScheduleSpec(1.0, t_max, exp)
    T = min(int(frac * t_max), t_max - 1)
    assert lr_at(spec, T + 1) < lr_at(spec, T)


def test_optimizer_groups(tiny_cfg):
    state = init_state(tiny_cfg)
    sgd = state.optimizers["structure_encoder"]
    assert isinstance(sgd, torch.optim.SGD)
    g = sgd.param_groups[0]
    assert g["momentum"] == 0.9 and g["weight_decay"] == 5e-4 and g["lr"] == 2.5e-4
    assert isinstance(state.optimizers["classifier"], torch.optim.SGD)
    for name, lr in (("feature_disc", 1e-4), ("image_disc_s", 1e-4), ("generator", 1e-3), ("texture_encoder_t", 1e-3)):
        opt = state.optimizers[name]
        assert isinstance(opt, torch.optim.Adam)
        assert opt.param_groups[0]["betas"] == (0.99, 0.999) and opt.param_groups[0]["lr"] == lr
        assert opt.param_groups[0]["weight_decay"] == 0


def _snapshot(nets):
    return {n: [p.detach().clone() for p in nets.parameters_of(n)] for n in NETWORK_NAMES}


def _changed(before, nets):
    return {n for n in NETWORK_NAMES if any(not torch.equal(a, b) for a, b in zip(before[n], nets.parameters_of(n)))}


def _batches(cfg, seed=0):
    c = load_corpora(cfg.data)
    return next(batch_stream(c.source, c.target, cfg.trainer.batch_size, seed))


EXPECTED = {
    "discriminators": {"feature_disc", "image_disc_s", "image_disc_t"},
    "generator": {"generator"},
    "encoders": {"structure_encoder", "texture_encoder_s", "texture_encoder_t"},
    "classifier": {"classifier"},
}


def test_phase_scoping_full(tiny_cfg):
    state = init_state(tiny_cfg)
    src, tgt = _batches(tiny_cfg)
    before = _snapshot(state.nets)
    seen = []
    for phase in iter_phases(state, src, tgt):
        assert _changed(before, state.nets) == EXPECTED[phase]
        before = _snapshot(state.nets)
        seen.append(phase)
    assert tuple(seen) == PHASES and state.iteration == 1


def test_zero_weights_reduce_to_supervised(tmp_path):
    cfg = make_config("loss.alpha1=0", "loss.alpha2=0", "loss.alpha3=0", "loss.alpha4=0",
                      "ablation.use_cls_st=false", tmp=tmp_path)
    state = init_state(cfg)
    before = _snapshot(state.nets)
    report = train_step(state, *_batches(cfg))
    assert _changed(before, state.nets) == {"structure_encoder", "classifier"}
    assert report.total == report.cls_s


@pytest.mark.parametrize("preset,untouched", [
    ("source-only", {"feature_disc", "image_disc_s", "image_disc_t", "generator", "texture_encoder_s", "texture_encoder_t"}),
    ("model-A", {"feature_disc"}),
    ("model-B", {"image_disc_s", "image_disc_t", "generator", "texture_encoder_s", "texture_encoder_t"}),
    ("model-E", set()),
])
def test_ablation_leaves_networks_at_init(tmp_path, preset, untouched):
    cfg = make_config(f"ablation.preset={preset}", tmp=tmp_path)
    state = init_state(cfg)
    before = _snapshot(state.nets)
    stream = batch_stream(*[getattr(load_corpora(cfg.data), k) for k in ("source", "target")], 4, 0)
    reports = [train_step(state, *next(stream)) for _ in range(2)]
    assert set(NETWORK_NAMES) - _changed(before, state.nets) == untouched
    flags = cfg.ablation
    for r in reports:
        if not flags.use_advF:
            assert r.advF_d == 0 and r.advF_e == 0
        if not flags.use_cls_st:
            assert r.cls_st == 0


def test_rejects_bad_batches(tiny_cfg):
    state = init_state(tiny_cfg)
    src, tgt = _batches(tiny_cfg)
    with pytest.raises(ValueError):
        train_step(state, tgt, src)


def test_non_finite_watchdog(tiny_cfg):
    state = init_state(tiny_cfg)
    src, tgt = _batches(tiny_cfg)
    with torch.no_grad():
        state.nets.classifier.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as e:
        train_step(state, src, tgt)
    assert e.value.term in ("cls_s", "advF_d", "cls_st")


def test_checkpoint_round_trip_bytes(tiny_cfg, tmp_path):
    state = init_state(tiny_cfg)
    train_step(state, *_batches(tiny_cfg))
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    checkpoint_save(state, a)
    checkpoint_save(checkpoint_load(a), b)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_errors(tiny_cfg, tmp_path):
    state = init_state(tiny_cfg)
    path = tmp_path / "a.ckpt"
    checkpoint_save(state, path)
    wider = make_config("model.structure_width=24", tmp=tmp_path)
    with pytest.warns(UserWarning, match="digest"):
        with pytest.raises(WeightsMismatchError, match="structure_encoder|dense"):
            checkpoint_load(path, wider)
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    with pytest.raises(ContainerError):
        checkpoint_load(tmp_path / "bad.ckpt")


def test_fit_smoke(tmp_path):
    cfg = make_config("trainer.t_max=10", "trainer.eval_every=5", tmp=tmp_path / "run")
    result = fit(cfg)
    assert result.state.iteration == 10
    assert (tmp_path / "run" / "checkpoints" / "final.ckpt").exists()
    rows = list(csv.reader(open(result.metrics)))
    assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) - 1 >= 10
    assert all(math.isfinite(float(v)) for r in rows[1:] for v in r)
    evals = list(csv.DictReader(open(result.evals)))
    assert {e["domain"] for e in evals} == {"source", "target"} and {e["iteration"] for e in evals} == {"5", "10"}
    assert result.grids and all(p.exists() for p in result.grids)


def test_resume_matches_uninterrupted(tmp_path):
    full = fit(make_config("trainer.t_max=10", "trainer.checkpoint_every=5", tmp=tmp_path / "a"), grids=False)
    part_cfg = make_config("trainer.t_max=10", "trainer.checkpoint_every=5", tmp=tmp_path / "b")
    fit(part_cfg, grids=False)
    resumed = fit(part_cfg, resume=tmp_path / "b" / "checkpoints" / "iter_0000005.ckpt", grids=False)
    a, b = full.state.nets.parameter_store(), resumed.state.nets.parameter_store()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_active_terms_rule(tmp_path):
    act = active_terms(make_config("loss.alpha2=0", tmp=tmp_path))
    assert not act.advI and act.per and act.rec and act.generator
    act = active_terms(make_config("ablation.preset=model-B", tmp=tmp_path))
    assert act.advF and not act.generator and not act.needs_images
