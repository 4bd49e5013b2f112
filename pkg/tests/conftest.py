import numpy as np
import pytest

from ldprune.diffusion import SchedulerConfig
from ldprune.graph import UNetSpec, build_unet
from ldprune.tensor import Tensor

TINY = UNetSpec(latent_size=8, base_width=8, channel_mults=(1, 2), layers_per_level=1, attention_levels=(1,),
                cond_dim=8, head_dim=8, norm_groups=4, num_conditions=4)


@pytest.fixture
def tiny_spec():
    return TINY


@pytest.fixture
def tiny_graph():
    return build_unet(TINY, seed=0)


@pytest.fixture
def fast_sched():
    return SchedulerConfig(num_inference_steps=4)


def fixed_input(spec, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((batch,) + spec.latent_shape).astype(np.float32))


# acceptance verdicts, echoed in the terminal summary
VERDICTS: dict[int, str] = {}


def verdict(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    VERDICTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
