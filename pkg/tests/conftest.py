import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from edgesense.models import ArchConfig, default_task

settings.register_profile(
    "repo",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))


def tiny_arch(m_users: int = 3, **kw) -> ArchConfig:
    """Reduced geometry for gradient checks: every parameter group stays under 1e3 entries."""
    from edgesense.data import task_kinds_for

    base = dict(feat_channels=2, hidden=4, edge_hidden=4, dec_hidden=3,
                tasks=[default_task(k) for k in task_kinds_for(m_users)])
    base.update(kw)
    return ArchConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from tests import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.ordered():
            terminalreporter.write_line(line)
