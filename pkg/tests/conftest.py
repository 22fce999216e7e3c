import numpy as np
import pytest
from hypothesis import settings

from langadapt.model import DESK_CONFIG, build_model

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_params():
    return build_model(DESK_CONFIG)


@pytest.fixture(scope="session")
def desk_pretrained(tmp_path_factory):
    """Language A/B suite plus the 2,000-step desk pretraining run on A.

    Built once per session; slow tests that need a real base model share it.
    """
    import time

    from langadapt.synthetic import desk_suite
    from langadapt.training import DESK_PRETRAIN, SamplingTable, pretrain

    suite = desk_suite()
    out = tmp_path_factory.mktemp("desk") / "checkpoints"
    t0 = time.perf_counter()
    result = pretrain(DESK_CONFIG, {"A": suite.ids_a}, SamplingTable({"A": 1.0}), DESK_PRETRAIN, out, suite.vocab_a)
    return suite, result, time.perf_counter() - t0
