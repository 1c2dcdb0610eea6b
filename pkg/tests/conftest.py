import numpy as np
import pytest

from respmotion.grid import GridDomain, ScalarVolume, DisplacementField

# one line per acceptance criterion, replayed after the run so the verdicts
# survive pytest's output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_domain(dims=(8, 8, 8), spacing=(1.5, 1.5, 1.5), origin=(0.0, 0.0, 0.0)):
    return GridDomain(dims, spacing, origin)


def random_volume(rng, domain, scale=10.0, background=0.0):
    data = rng.normal(0.0, scale, domain.dims)
    return ScalarVolume(data, domain.spacing, domain.origin, background)


def midcell_field(rng, domain, lo=0.3, hi=0.45):
    """Random displacement whose samples stay away from interpolation cell
    boundaries, so finite differences of image energies see no kinks."""
    sp = np.asarray(domain.spacing)
    sgn = np.where(rng.random(domain.dims + (3,)) < 0.5, -1.0, 1.0)
    frac = lo + (hi - lo) * rng.random(domain.dims + (3,))
    return DisplacementField(sgn * frac * sp, domain.spacing, domain.origin)


def windowed_bump(domain, center, sigma, amp=1.0):
    """Compactly supported smooth scalar bump (zero outside 3*sigma)."""
    pts = domain.voxel_centers().reshape(-1, 3)
    r = np.sqrt(((pts - np.asarray(center)) ** 2).sum(axis=1))
    w = np.where(r < 3.0 * sigma,
                 0.5 * (1.0 + np.cos(np.pi * np.clip(r / (3.0 * sigma), 0.0, 1.0))),
                 0.0)
    val = amp * np.exp(-0.5 * (r / sigma) ** 2) * w
    return ScalarVolume(val.reshape(domain.dims), domain.spacing, domain.origin, 0.0)


def smooth_interior_field(rng, domain, max_mm=3.0):
    """Smooth compact field: superposition of a few windowed bumps with
    random directions; vanishes near the grid border."""
    pts = domain.voxel_centers().reshape(-1, 3)
    extent = (np.asarray(domain.dims) - 1) * np.asarray(domain.spacing)
    center = np.asarray(domain.origin) + 0.5 * extent
    u = np.zeros((len(pts), 3))
    for _ in range(4):
        c = center + rng.uniform(-0.15, 0.15, 3) * extent
        sigma = 0.12 * float(extent.min())
        r = np.sqrt(((pts - c) ** 2).sum(axis=1))
        w = np.where(r < 3.0 * sigma,
                     0.5 * (1.0 + np.cos(np.pi * np.clip(r / (3.0 * sigma), 0.0, 1.0))),
                     0.0)
        bump = np.exp(-0.5 * (r / sigma) ** 2) * w
        u += bump[:, None] * rng.uniform(-1.0, 1.0, 3)
    peak = np.sqrt((u ** 2).sum(axis=1)).max()
    if peak > 0:
        u *= max_mm / peak
    return DisplacementField(u.reshape(domain.dims + (3,)), domain.spacing, domain.origin)
