import pytest

from protomae import pipeline
from protomae.config import preset


@pytest.fixture(scope="session")
def reference_pretrain(tmp_path_factory):
    """One full test-small pre-training run, shared by the acceptance tests.

    Takes about two minutes; only tests that need the trained weights or
    the recorded loss curve should request it.
    """
    cfg = preset("test-small")
    out = tmp_path_factory.mktemp("reference-pretrain")
    return cfg, pipeline.pretrain(cfg, out)
