import pytest
import torch

from moe_robust.models import ModelConfig, ReplacementSpec, build_model
from moe_robust.moe import MoELayerConfig

torch.set_num_threads(1)


def tiny_config(n_experts=4, top_k=2, loss="entropy", gate="gap_fc", kind="block", stage="conv4_x",
                block=0, conv=None, shape=(3, 8, 8), classes=4, coeff=0.01):
    if kind == "conv" and conv is None:
        conv = 1
    moe = MoELayerConfig(n_experts, top_k, gate, kind, loss, coeff)
    return ModelConfig("tiny", classes, [ReplacementSpec(stage, block, conv if kind == "conv" else None, moe)], shape)


@pytest.fixture
def tiny_moe():
    return build_model(tiny_config(), seed=0)


@pytest.fixture
def tiny_plain():
    return build_model(ModelConfig("tiny", 4, [], (3, 8, 8)), seed=0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
