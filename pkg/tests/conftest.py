import pytest

from forceflow.demo_warp import RandomizationRanges, randomize_scenario
from forceflow.expert import ExpertConfig, scripted_expert_demo


@pytest.fixture(scope='session')
def nominal_scenario():
    return randomize_scenario(0, RandomizationRanges.collapsed(0.3, 0.6))


@pytest.fixture(scope='session')
def seed_demo(nominal_scenario):
    """Scripted flip of the nominal block, shared across modules."""
    return scripted_expert_demo(ExpertConfig(), nominal_scenario)
