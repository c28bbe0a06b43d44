from dataclasses import replace

import numpy as np
import pytest

from dmtseg import dmt, synthgen
from dmtseg.bn import BnParams
from dmtseg.oversegment import SlicParams
from dmtseg.srf import SrfParams


@pytest.fixture(scope="session")
def small_phantom():
    return synthgen.generate(synthgen.PhantomParams(size=48, subjects=4, rng_seed=7))


@pytest.fixture(scope="session")
def tiny_cfg():
    return dmt.DmtConfig(srf=SrfParams(n_trees=2, samples_per_image=300, max_depth=8),
                         bn=BnParams(gmm_components=2, em_iterations=30),
                         slic=SlicParams(target_superpixels=120))


@pytest.fixture(scope="session")
def tiny_schedule():
    return lambda depth: dmt.ScaleSchedule(tuple(
        dmt.ScaleEntry(6, 3, 120) if lvl < 2 else dmt.ScaleEntry(5, 3, 150) for lvl in range(depth + 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
