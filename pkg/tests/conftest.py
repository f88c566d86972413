import numpy as np
import pytest

from ifpt import LinearSegment, TargetDistribution, linear_boundary_cdf, linear_fpt_density


def make_line_target(slope: float, level: float) -> TargetDistribution:
    """Hitting-time law of the linear boundary level + slope*t as a target."""
    seg = LinearSegment(slope, level)

    def density(t):
        t = np.asarray(t, dtype=float)
        out = linear_fpt_density(seg, np.maximum(t, 1e-9))
        return np.where(t < 1e-9, 0.0, out)

    def cdf(t):
        return linear_boundary_cdf(seg, t)

    return TargetDistribution(density=density, cdf=cdf, kind="custom")


@pytest.fixture
def line_target():
    return make_line_target
