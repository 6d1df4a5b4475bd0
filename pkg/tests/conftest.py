import numpy as np
import pytest

from tissueop.grid import GridField, GridSpec, Sample, extract_boundary


def make_field(values, extent=(1.0, 1.0)):
    return GridField(np.asarray(values, dtype=float), extent)


def random_sample(rng, spec: GridSpec, protocol_id=1, frame_index=0, scale=1.0):
    """A consistent Sample with a random field (boundary extracted from it)."""
    vals = scale * rng.standard_normal((spec.nx, spec.ny, 2))
    fld = GridField(vals, spec.extent)
    return Sample(
        boundary=extract_boundary(fld),
        field=fld,
        protocol_id=protocol_id,
        frame_index=frame_index,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
