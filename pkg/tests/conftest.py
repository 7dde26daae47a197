import tempfile
from pathlib import Path

import pytest

from wattledger.sim import PipelineProfile, StageProfile


@pytest.fixture
def socket_path():
    """A short-lived unix socket path (pytest tmp dirs exceed AF_UNIX limits)."""
    with tempfile.TemporaryDirectory(prefix="wl-") as d:
        yield str(Path(d) / "ctl.sock")


@pytest.fixture
def tiny_profile():
    """Factory for a fast three-stage profile (~0.7 s wall at the default scale).

    Uniform 200 W and durations that are exact multiples of the 10 ms sampling
    interval keep the ideal integral equal to the target, so tests can assert
    tight energy tolerances.
    """

    def make(time_scale: float = 2.5e-3, tokens: int = 12345,
             pipeline: str = "kd") -> PipelineProfile:
        return PipelineProfile(
            pipeline=pipeline,
            model_scale="tiny",
            stages=(
                StageProfile(kind="prerun", target_kwh=0.002, mean_power_w=200.0),
                StageProfile(kind="student_training", target_kwh=0.01,
                             mean_power_w=200.0, tokens=tokens),
                StageProfile(kind="evaluation", target_kwh=0.004,
                             mean_power_w=200.0, tokens=555),
            ),
            time_scale=time_scale,
        )

    return make
