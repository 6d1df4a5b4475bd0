"""Structured-grid displacement fields: conventions, core types, metrics.

This module is the single source of truth for the grid conventions that
every other module imports:

* ``values[i, j, ch]`` indexes node ``(i, j)``, with ``i`` running along
  the x-axis (``nx`` nodes) and ``j`` along the y-axis (``ny`` nodes).
* Node ``(i, j)`` sits at physical coordinates
  ``(i * ex / (nx - 1), j * ey / (ny - 1))`` in mm, where ``(ex, ey)``
  is the domain extent.
* Boundary nodes are traversed counterclockwise starting from the
  ``(0, 0)`` corner: bottom edge (``j = 0``, ``i`` ascending), right
  edge (``i = nx - 1``, ``j`` ascending from 1), top edge
  (``j = ny - 1``, ``i`` descending from ``nx - 2``), left edge
  (``i = 0``, ``j`` descending from ``ny - 2`` to 1). A grid has exactly
  ``2 * (nx + ny) - 4`` boundary nodes.
* Discrete L2 norms over the domain use trapezoidal quadrature on the
  node grid and sum over all channels jointly.

Relative errors on near-zero reference fields are undefined; they are
flagged with NaN. The floor is ``1e-8 * sqrt(domain area)``, i.e. a mean
displacement magnitude of about 1e-8 mm. Averaging helpers exclude the
flagged samples and report how many were excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Extent = tuple[float, float]

#: Relative-error denominator floor, as a multiple of sqrt(domain area).
RELATIVE_ERROR_FLOOR_FACTOR = 1e-8

#: Tolerance for the Sample invariant that the stored boundary loading
#: agrees with the field restricted to the boundary nodes (mm).
BOUNDARY_MATCH_TOL = 1e-8

PROVENANCES = ("original", "smoothed", "synthetic")


@dataclass(frozen=True)
class GridSpec:
    """Grid resolution and physical extent (mm)."""

    nx: int
    ny: int
    extent: Extent = (5.5, 5.5)

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.nx}x{self.ny}")
        ex, ey = self.extent
        if not (ex > 0 and ey > 0):
            raise ValueError(f"extent must be positive, got {self.extent}")
        object.__setattr__(self, "extent", (float(ex), float(ey)))

    @property
    def n_boundary(self) -> int:
        return 2 * (self.nx + self.ny) - 4

    @property
    def spacing(self) -> tuple[float, float]:
        return (self.extent[0] / (self.nx - 1), self.extent[1] / (self.ny - 1))

    @property
    def area(self) -> float:
        return self.extent[0] * self.extent[1]


def node_coordinates(spec: GridSpec) -> np.ndarray:
    """Physical node coordinates, shape (nx, ny, 2)."""
    x = np.linspace(0.0, spec.extent[0], spec.nx)
    y = np.linspace(0.0, spec.extent[1], spec.ny)
    xg, yg = np.meshgrid(x, y, indexing="ij")
    return np.stack([xg, yg], axis=-1)


def boundary_indices(nx: int, ny: int) -> np.ndarray:
    """(i, j) index pairs of boundary nodes in the fixed CCW order.

    Shape (2*(nx+ny)-4, 2). Starts at (0, 0), walks the bottom edge,
    then right, top, and left edges without repeating corners.
    """
    if nx < 2 or ny < 2:
        raise ValueError("grid must be at least 2x2")
    bottom = [(i, 0) for i in range(nx)]
    right = [(nx - 1, j) for j in range(1, ny)]
    top = [(i, ny - 1) for i in range(nx - 2, -1, -1)]
    left = [(0, j) for j in range(ny - 2, 0, -1)]
    return np.array(bottom + right + top + left, dtype=np.intp)


def interior_mask(nx: int, ny: int) -> np.ndarray:
    """Boolean (nx, ny) mask that is True strictly inside the boundary."""
    mask = np.zeros((nx, ny), dtype=bool)
    mask[1:-1, 1:-1] = True
    return mask


@dataclass(frozen=True)
class GridField:
    """A vector-valued function sampled on a structured node grid.

    ``values`` has shape (nx, ny, channels) and is made read-only at
    construction; all entries must be finite.
    """

    values: np.ndarray
    extent: Extent = (5.5, 5.5)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 3:
            raise ValueError(f"values must be (nx, ny, channels), got shape {v.shape}")
        if v.shape[0] < 2 or v.shape[1] < 2 or v.shape[2] < 1:
            raise ValueError(f"invalid field shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        ex, ey = self.extent
        if not (ex > 0 and ey > 0):
            raise ValueError(f"extent must be positive, got {self.extent}")
        object.__setattr__(self, "extent", (float(ex), float(ey)))

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.nx, self.ny, self.extent)


@dataclass(frozen=True)
class BoundaryLoading:
    """Displacement loading on the boundary node set.

    ``values`` has shape (2*(nx+ny)-4, 2) in the fixed CCW node order,
    units mm.
    """

    values: np.ndarray
    nx: int
    ny: int
    extent: Extent = (5.5, 5.5)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        n_expected = 2 * (self.nx + self.ny) - 4
        if v.shape != (n_expected, 2):
            raise ValueError(
                f"boundary values must have shape ({n_expected}, 2) for a "
                f"{self.nx}x{self.ny} grid, got {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("boundary values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "extent", (float(self.extent[0]), float(self.extent[1])))

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.nx, self.ny, self.extent)


@dataclass(frozen=True)
class Sample:
    """One (boundary loading, displacement field) observation pair."""

    boundary: BoundaryLoading
    field: GridField
    protocol_id: int
    frame_index: int
    provenance: str = "synthetic"
    cycle_index: int = 0

    def __post_init__(self):
        if self.field.channels != 2:
            raise ValueError("sample field must have 2 channels")
        if (self.boundary.nx, self.boundary.ny) != (self.field.nx, self.field.ny):
            raise ValueError("boundary and field grids disagree")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        if not 1 <= self.protocol_id <= 7:
            raise ValueError("protocol_id must be in 1..7")
        idx = boundary_indices(self.field.nx, self.field.ny)
        on_boundary = self.field.values[idx[:, 0], idx[:, 1], :]
        err = np.max(np.abs(on_boundary - self.boundary.values))
        if err > BOUNDARY_MATCH_TOL:
            raise ValueError(
                f"field restricted to the boundary deviates from the stored "
                f"loading by {err:.3e} mm (tol {BOUNDARY_MATCH_TOL:.1e})"
            )


def extract_boundary(field: GridField) -> BoundaryLoading:
    """Restrict a 2-channel field to the boundary nodes (fixed CCW order)."""
    if field.channels != 2:
        raise ValueError(f"expected 2 channels, got {field.channels}")
    idx = boundary_indices(field.nx, field.ny)
    vals = field.values[idx[:, 0], idx[:, 1], :]
    return BoundaryLoading(vals, field.nx, field.ny, field.extent)


def zero_pad_embed(b: BoundaryLoading, nx: int | None = None, ny: int | None = None) -> GridField:
    """Extend boundary loading to the full grid, exactly zero inside.

    Interior nodes are bitwise zero; boundary nodes carry ``b``.
    """
    nx = b.nx if nx is None else nx
    ny = b.ny if ny is None else ny
    if (nx, ny) != (b.nx, b.ny):
        raise ValueError(f"loading is sized for {b.nx}x{b.ny}, requested {nx}x{ny}")
    vals = np.zeros((nx, ny, 2))
    idx = boundary_indices(nx, ny)
    vals[idx[:, 0], idx[:, 1], :] = b.values
    return GridField(vals, b.extent)


def build_input_features(b: BoundaryLoading, nx: int | None = None, ny: int | None = None) -> GridField:
    """Model input features: [x, y, padded loading], 4 channels.

    Channels 0-1 are the node coordinates, channels 2-3 the zero-padded
    boundary loading.
    """
    padded = zero_pad_embed(b, nx, ny)
    coords = node_coordinates(padded.spec)
    return GridField(np.concatenate([coords, padded.values], axis=-1), b.extent)


def trapezoid_weights(spec: GridSpec) -> np.ndarray:
    """Trapezoidal quadrature weights over the node grid, shape (nx, ny)."""
    hx, hy = spec.spacing
    wx = np.full(spec.nx, hx)
    wx[[0, -1]] = hx / 2
    wy = np.full(spec.ny, hy)
    wy[[0, -1]] = hy / 2
    return np.outer(wx, wy)


def l2_norm_sq(values: np.ndarray, spec: GridSpec) -> float:
    """Squared discrete L2 norm over the domain, all channels jointly.

    ``values`` has shape (nx, ny, c) or (nx, ny).
    """
    w = trapezoid_weights(spec)
    v = values if values.ndim == 3 else values[:, :, None]
    return float(np.einsum("ij,ijc->", w, v * v))


def relative_error_floor(spec: GridSpec) -> float:
    """Norm below which relative errors are flagged as undefined."""
    return RELATIVE_ERROR_FLOOR_FACTOR * np.sqrt(spec.area)


def relative_l2_error(pred: GridField, truth: GridField) -> float:
    """Relative L2 error ||pred - truth|| / ||truth||, NaN when undefined.

    Undefined means ||truth|| sits below the denominator floor (e.g. the
    zero-displacement reference frame of a protocol); callers should
    exclude NaN results from averages and count them separately.
    """
    if pred.values.shape != truth.values.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.values.shape} vs truth {truth.values.shape}"
        )
    if pred.extent != truth.extent:
        raise ValueError("pred and truth extents disagree")
    spec = truth.spec
    denom = np.sqrt(l2_norm_sq(truth.values, spec))
    if denom < relative_error_floor(spec):
        return float("nan")
    num = np.sqrt(l2_norm_sq(pred.values - truth.values, spec))
    return float(num / denom)


def mean_relative_error(errors: np.ndarray) -> tuple[float, int]:
    """Mean of defined (non-NaN) per-sample errors and the excluded count."""
    errors = np.asarray(errors, dtype=np.float64)
    defined = errors[~np.isnan(errors)]
    n_excluded = errors.size - defined.size
    mean = float(defined.mean()) if defined.size else float("nan")
    return mean, n_excluded
