import pytest
import torch

from glyphda.config import ExperimentConfig, apply_overrides, config_from_tree, to_dict

TINY = [
    "data.side=32",
    "data.synth.classes=3",
    "data.synth.per_class=4",
    "data.synth.test_per_class=4",
    "model.num_classes=3",
    "model.structure_width=16",
    "model.generator_deconv=[8,8]",
    "model.generator_conv=[8,8]",
    "model.disc_width=4",
    "model.feature_disc_hidden=16",
    "model.perceptual_width=0.0625",
    "trainer.batch_size=4",
    "trainer.t_max=20",
    "trainer.eval_every=10",
    "trainer.checkpoint_every=10",
    "trainer.grid_rows=2",
]


def make_config(*overrides: str, tmp=None) -> ExperimentConfig:
    tree = to_dict(ExperimentConfig())
    tree.pop("ablation")
    extra = [f"output_dir={tmp}"] if tmp is not None else []
    return config_from_tree(apply_overrides(tree, TINY + extra + list(overrides)))


@pytest.fixture
def tiny_cfg(tmp_path):
    return make_config(tmp=tmp_path / "run")


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    yield


# --- acceptance report ---------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
