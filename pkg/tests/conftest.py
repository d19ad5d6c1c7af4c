import json

import pytest

from orchsim.demo import demo_cluster_dict, demo_pipeline_dict
from orchsim.pipeline import Runner, parse_cluster_fixture, parse_spec


@pytest.fixture(scope="session")
def demo_spec():
    return parse_spec(json.dumps(demo_pipeline_dict()))


@pytest.fixture(scope="session")
def demo_fixture():
    return parse_cluster_fixture(json.dumps(demo_cluster_dict()))


@pytest.fixture(scope="session")
def demo_run(demo_spec, demo_fixture):
    """One fault-free demo run shared by read-only tests."""
    return Runner(demo_spec, demo_fixture, seed=42).run()
