"""Data pipeline: tracked-node ingestion, displacement construction, MLS
smoothing, spline resampling to the structured grid, the seeded
synthetic-operator generator, and study splits.

Tracked CSV format (one file per protocol):

    # meta: {"scale_mm_per_px": 1.0, "grid_shape": [12, 12], "protocol_id": 1,
    #        "frame_rate_hz": 5.0, "provenance": "original"}
    frame_id,node_id,x,y
    0,0,0.0,0.0
    ...

``node_id`` is the row-major index into the (mx, my) tracking lattice;
``xry`` coordinates are pixels, multiplied by ``scale_mm_per_px`` on
ingestion (use 1.0 if the export is already in mm). Frame 0 is the
reference configuration.

Dataset directory format (format_version 1):

    manifest.json   grid dims/extent, seed, counts, protocol table echo,
                    per-sample tags, generator metadata
    samples.bin     per sample: boundary (nb x 2) then field (nx*ny*2),
                    little-endian float64, sample-major
    stress_records.csv   optional homogenized stress-stretch records
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.spatial import cKDTree
import scipy.sparse as sparse
import scipy.sparse.linalg as splinalg

from .errors import DataFormatError, MlsSingularityError
from .fung import FungParams, StressStretchRecord, pk_stress, write_records_csv, read_records_csv
from .grid import (
    BoundaryLoading,
    GridField,
    GridSpec,
    Sample,
    boundary_indices,
    extract_boundary,
    l2_norm_sq,
    node_coordinates,
)

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ProtocolSpec:
    """One mechanical-testing protocol (reference metadata)."""

    id: int
    description: str
    stress_ratio: tuple[float, float]  # target P11 : P22
    max_stretch: tuple[float, float]  # (lambda1, lambda2)
    max_stress: tuple[float, float]  # (P11, P22) kPa
    reported_samples: int


#: The seven biaxial / constrained-uniaxial testing protocols.
PROTOCOLS: dict[int, ProtocolSpec] = {
    p.id: p
    for p in (
        ProtocolSpec(1, "biaxial 1:1", (1.0, 1.0), (1.46, 1.68), (184.1, 165.1), 3921),
        ProtocolSpec(2, "biaxial 1:0.66", (1.0, 0.66), (1.48, 1.63), (187.1, 127.8), 3797),
        ProtocolSpec(3, "biaxial 1:0.33", (1.0, 0.33), (1.52, 1.52), (186.9, 74.1), 3539),
        ProtocolSpec(4, "biaxial 0.66:1", (0.66, 1.0), (1.42, 1.72), (145.9, 188.2), 4013),
        ProtocolSpec(5, "biaxial 0.33:1", (0.33, 1.0), (1.32, 1.79), (77.9, 189.8), 4175),
        ProtocolSpec(6, "constrained uniaxial x", (0.05, 1.0), (1.56, 1.0), (197.9, 10.6), 3539),
        ProtocolSpec(7, "constrained uniaxial y", (1.0, 0.1), (1.0, 1.89), (17.2, 176.1), 3539),
    )
}

#: Study splits by protocol id (study 1 is a random 83/17 split).
STUDY_PROTOCOL_SPLITS = {
    2: ((1, 2, 4), (3, 5, 6, 7)),
    3: ((1, 6, 7), (2, 3, 4, 5)),
    4: ((2, 3, 4, 5, 6, 7), (1,)),
}

TRAIN_FRACTION_STUDY1 = 0.83


@dataclass
class TrackedFrames:
    """DIC-style tracked node positions, frame 0 being the reference."""

    positions: np.ndarray  # (n_frames, mx, my, 2) mm
    protocol_id: int
    frame_rate_hz: float = 5.0
    provenance: str = "original"

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        if p.ndim != 4 or p.shape[-1] != 2:
            raise DataFormatError(f"positions must be (frames, mx, my, 2), got {p.shape}")
        if p.shape[1] < 2 or p.shape[2] < 2:
            raise DataFormatError("tracking lattice must be at least 2x2")
        if not np.all(np.isfinite(p)):
            raise DataFormatError("positions must be finite")
        self.positions = p

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def lattice_shape(self) -> tuple[int, int]:
        return self.positions.shape[1], self.positions.shape[2]


def ingest_tracked_csv(path) -> TrackedFrames:
    """Parse and validate a tracked-node CSV (see module docstring)."""
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# meta:"):
            raise DataFormatError("first line must be '# meta: {...}'")
        try:
            meta = json.loads(first[len("# meta:"):])
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid meta JSON: {exc}") from exc
        for key in ("scale_mm_per_px", "grid_shape", "protocol_id"):
            if key not in meta:
                raise DataFormatError(f"meta is missing required key {key!r}")
        header = fh.readline().strip()
        if header.split(",") != ["frame_id", "node_id", "x", "y"]:
            raise DataFormatError(
                f"expected header 'frame_id,node_id,x,y', got {header!r}"
            )
        rows = []
        for lineno, line in enumerate(fh, start=3):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DataFormatError(f"line {lineno}: expected 4 fields, got {len(parts)}")
            rows.append((int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])))

    mx, my = (int(v) for v in meta["grid_shape"])
    n_nodes = mx * my
    scale = float(meta["scale_mm_per_px"])
    frame_ids = sorted({r[0] for r in rows})
    if frame_ids != list(range(len(frame_ids))):
        raise DataFormatError(f"frame ids must be 0..n-1 without gaps, got {frame_ids[:5]}...")

    positions = np.full((len(frame_ids), n_nodes, 2), np.nan)
    for fid, nid, x, y in rows:
        if not 0 <= nid < n_nodes:
            raise DataFormatError(f"node id {nid} outside 0..{n_nodes - 1}")
        positions[fid, nid] = (x * scale, y * scale)
    missing = np.argwhere(np.isnan(positions[:, :, 0]))
    if missing.size:
        fid, nid = missing[0]
        raise DataFormatError(f"frame {fid} is missing node {nid}")

    return TrackedFrames(
        positions=positions.reshape(len(frame_ids), mx, my, 2),
        protocol_id=int(meta["protocol_id"]),
        frame_rate_hz=float(meta.get("frame_rate_hz", 5.0)),
        provenance=meta.get("provenance", "original"),
    )


def write_tracked_csv(frames: TrackedFrames, path) -> None:
    meta = {
        "scale_mm_per_px": 1.0,
        "grid_shape": list(frames.lattice_shape),
        "protocol_id": frames.protocol_id,
        "frame_rate_hz": frames.frame_rate_hz,
        "provenance": frames.provenance,
    }
    mx, my = frames.lattice_shape
    with open(path, "w") as fh:
        fh.write("# meta: " + json.dumps(meta, sort_keys=True) + "\n")
        fh.write("frame_id,node_id,x,y\n")
        flat = frames.positions.reshape(frames.n_frames, mx * my, 2)
        for fid in range(frames.n_frames):
            for nid in range(mx * my):
                x, y = flat[fid, nid]
                fh.write(f"{fid},{nid},{float(x)!r},{float(y)!r}\n")


@dataclass
class ScatteredSample:
    """Displacements on the (approximately structured) tracking lattice."""

    ref_points: np.ndarray  # (mx, my, 2) reference coordinates, mm
    displacement: np.ndarray  # (mx, my, 2) mm
    protocol_id: int
    frame_index: int
    provenance: str = "original"


def frames_to_samples(frames: TrackedFrames) -> list[ScatteredSample]:
    """One displacement sample per frame: position minus frame-0 position."""
    ref = frames.positions[0]
    return [
        ScatteredSample(
            ref_points=ref,
            displacement=frames.positions[f] - ref,
            protocol_id=frames.protocol_id,
            frame_index=f,
            provenance=frames.provenance,
        )
        for f in range(frames.n_frames)
    ]


# ---------------------------------------------------------------------------
# Moving least squares
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlsConfig:
    """MLS smoothing settings: linear basis, cubic B-spline weight.

    ``support_radius`` is in multiples of the nodal spacing (median
    nearest-neighbor distance); it must be large enough that every
    evaluation point sees at least 3 non-collinear neighbors.
    """

    support_radius: float = 2.5

    def __post_init__(self):
        if self.support_radius <= 1.0:
            raise ValueError("support radius must exceed one nodal spacing")


def cubic_bspline_weight(s: np.ndarray) -> np.ndarray:
    """Cubic B-spline kernel on normalized distance s = r / radius."""
    s = np.asarray(s)
    w = np.zeros_like(s, dtype=np.float64)
    inner = s <= 0.5
    w = np.where(inner, 2.0 / 3.0 - 4.0 * s**2 + 4.0 * s**3, w)
    outer = (s > 0.5) & (s <= 1.0)
    w = np.where(outer, 4.0 / 3.0 - 4.0 * s + 4.0 * s**2 - (4.0 / 3.0) * s**3, w)
    return w


def nodal_spacing(points: np.ndarray) -> float:
    """Median nearest-neighbor distance of a point cloud (n, 2)."""
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=2)
    return float(np.median(dist[:, 1]))


def mls_shape_functions(
    points: np.ndarray,
    eval_points: np.ndarray,
    cfg: MlsConfig = MlsConfig(),
    spacing: float | None = None,
) -> np.ndarray:
    """Dense MLS shape-function matrix Psi with Psi[i, k] the weight of
    source point k in the reconstruction at eval point i.

    Linear basis and cubic B-spline weights give partition of unity and
    exact reproduction of linear fields wherever the local moment matrix
    is regular; singular points are collected and reported together.
    """
    points = np.asarray(points, dtype=np.float64)
    eval_points = np.asarray(eval_points, dtype=np.float64)
    spacing = nodal_spacing(points) if spacing is None else spacing
    radius = cfg.support_radius * spacing
    tree = cKDTree(points)
    psi = np.zeros((len(eval_points), len(points)))
    singular = []
    for i, xe in enumerate(eval_points):
        idx = tree.query_ball_point(xe, radius)
        neighbors = points[idx]
        r = np.linalg.norm(neighbors - xe, axis=1)
        w = cubic_bspline_weight(r / radius)
        keep = w > 0
        idx = np.asarray(idx)[keep]
        if len(idx) < 3:
            singular.append(i)
            continue
        local = points[idx] - xe  # shifted basis for conditioning
        p = np.column_stack([np.ones(len(idx)), local[:, 0], local[:, 1]])
        wk = w[keep]
        moment = (p * wk[:, None]).T @ p
        try:
            coef = np.linalg.solve(moment, np.array([1.0, 0.0, 0.0]))
        except np.linalg.LinAlgError:
            singular.append(i)
            continue
        if not np.all(np.isfinite(coef)):
            singular.append(i)
            continue
        psi[i, idx] = wk * (p @ coef)
    if singular:
        raise MlsSingularityError(
            f"singular MLS moment matrix at {len(singular)} evaluation point(s); "
            "increase the support radius",
            node_indices=singular,
        )
    return psi


def mls_smooth(samples: list[ScatteredSample], cfg: MlsConfig = MlsConfig()) -> list[ScatteredSample]:
    """Replace nodal displacements by their MLS reconstruction.

    The shape functions depend only on the shared reference lattice, so
    they are computed once and applied to every frame.
    """
    if not samples:
        return []
    ref = samples[0].ref_points
    pts = ref.reshape(-1, 2)
    psi = mls_shape_functions(pts, pts, cfg)
    out = []
    for s in samples:
        if s.ref_points.shape != ref.shape or not np.array_equal(s.ref_points, ref):
            raise ValueError("all samples must share one reference lattice")
        u = s.displacement.reshape(-1, 2)
        smooth = (psi @ u).reshape(s.displacement.shape)
        out.append(
            ScatteredSample(
                ref_points=s.ref_points,
                displacement=smooth,
                protocol_id=s.protocol_id,
                frame_index=s.frame_index,
                provenance="smoothed",
            )
        )
    return out


# ---------------------------------------------------------------------------
# Spline resampling
# ---------------------------------------------------------------------------


def spline_resample(sample: ScatteredSample, nx: int = 21, ny: int = 21) -> Sample:
    """Resample a tracked-lattice displacement sample onto the node grid.

    Separable cubic-spline interpolation per component on the reference
    lattice (axis knots are the row/column mean coordinates), evaluated
    on an nx x ny grid spanning the lattice; the sample is re-origined
    at (0, 0) and the boundary loading is extracted from the resampled
    field.
    """
    mx, my = sample.ref_points.shape[:2]
    if mx < 4 or my < 4:
        raise ValueError(f"cubic resampling needs at least 4x4 tracked nodes, got {mx}x{my}")
    xk = sample.ref_points[:, :, 0].mean(axis=1)
    yk = sample.ref_points[:, :, 1].mean(axis=0)
    if np.any(np.diff(xk) <= 0) or np.any(np.diff(yk) <= 0):
        raise DataFormatError("tracking lattice is not monotone along its axes")
    extent = (float(xk[-1] - xk[0]), float(yk[-1] - yk[0]))
    xt = np.linspace(xk[0], xk[-1], nx)
    yt = np.linspace(yk[0], yk[-1], ny)
    values = np.empty((nx, ny, 2))
    for ch in range(2):
        spline = RectBivariateSpline(xk, yk, sample.displacement[:, :, ch], kx=3, ky=3, s=0)
        values[:, :, ch] = spline(xt, yt)
    fld = GridField(values, extent)
    return Sample(
        boundary=extract_boundary(fld),
        field=fld,
        protocol_id=sample.protocol_id,
        frame_index=sample.frame_index,
        provenance=sample.provenance,
        cycle_index=0,
    )


# ---------------------------------------------------------------------------
# Synthetic dataset generator
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """An immutable-by-convention collection of samples plus provenance."""

    samples: list[Sample]
    grid: GridSpec
    seed: int
    stress_records: list[StressStretchRecord] = field(default_factory=list)
    planted_fung: FungParams | None = None
    displacement_scale: float | None = None
    heterogeneity: GridField | None = None
    empirical_lipschitz: float | None = None
    noise_std: float = 0.0

    def __len__(self) -> int:
        return len(self.samples)

    def protocol_ids(self) -> np.ndarray:
        return np.array([s.protocol_id for s in self.samples])


#: Planted constitutive parameters behind the synthetic stress records;
#: chosen so peak stresses roughly match the protocol table.
PLANTED_FUNG = FungParams(c=9.0, a1=2.5, a2=1.2, a3=0.3, lx=9.0, ly=9.0, lz=0.5)


class _DiffusionSolver:
    """Factorized 5-point variable-coefficient Laplacian on the grid.

    Solves div(mu grad w) = 0 with Dirichlet data per component; the
    interior operator is LU-factorized once per generator.
    """

    def __init__(self, spec: GridSpec, mu: np.ndarray):
        nx, ny = spec.nx, spec.ny
        hx, hy = spec.spacing
        idx = -np.ones((nx, ny), dtype=np.intp)
        interior = [(i, j) for i in range(1, nx - 1) for j in range(1, ny - 1)]
        for n, (i, j) in enumerate(interior):
            idx[i, j] = n
        n_int = len(interior)
        rows, cols, vals = [], [], []
        b_rows, b_cols, b_vals = [], [], []
        bidx = {(int(i), int(j)): k for k, (i, j) in enumerate(boundary_indices(nx, ny))}

        def face_mu(i1, j1, i2, j2):
            return 0.5 * (mu[i1, j1] + mu[i2, j2])

        for n, (i, j) in enumerate(interior):
            diag = 0.0
            for (di, dj, h2) in ((1, 0, hx * hx), (-1, 0, hx * hx), (0, 1, hy * hy), (0, -1, hy * hy)):
                ii, jj = i + di, j + dj
                coeff = face_mu(i, j, ii, jj) / h2
                diag -= coeff
                if idx[ii, jj] >= 0:
                    rows.append(n)
                    cols.append(idx[ii, jj])
                    vals.append(coeff)
                else:
                    b_rows.append(n)
                    b_cols.append(bidx[(ii, jj)])
                    b_vals.append(coeff)
            rows.append(n)
            cols.append(n)
            vals.append(diag)
        a_int = sparse.coo_matrix((vals, (rows, cols)), shape=(n_int, n_int)).tocsc()
        self._lu = splinalg.splu(a_int)
        self._a_bc = sparse.coo_matrix(
            (b_vals, (b_rows, b_cols)), shape=(n_int, len(bidx))
        ).tocsr()
        self._interior = interior
        self.spec = spec

    def solve(self, boundary_values: np.ndarray) -> np.ndarray:
        """Boundary data (nb, 2) -> harmonic-type field (nx, ny, 2)."""
        spec = self.spec
        out = np.zeros((spec.nx, spec.ny, 2))
        bidx = boundary_indices(spec.nx, spec.ny)
        out[bidx[:, 0], bidx[:, 1], :] = boundary_values
        for ch in range(2):
            w_int = self._lu.solve(-(self._a_bc @ boundary_values[:, ch]))
            for n, (i, j) in enumerate(self._interior):
                out[i, j, ch] = w_int[n]
        return out


def _heterogeneity_field(spec: GridSpec, rng: np.random.Generator, n_bumps: int) -> np.ndarray:
    """Smooth stiffness-like coefficient in [1, 3]: sum of Gaussian bumps."""
    coords = node_coordinates(spec)
    ex, ey = spec.extent
    centers = rng.uniform([0, 0], [ex, ey], size=(n_bumps, 2))
    widths = rng.uniform(0.15, 0.35, size=n_bumps) * min(ex, ey)
    amps = rng.uniform(0.5, 1.0, size=n_bumps)
    s = np.zeros((spec.nx, spec.ny))
    for c, w, a in zip(centers, widths, amps):
        d2 = (coords[..., 0] - c[0]) ** 2 + (coords[..., 1] - c[1]) ** 2
        s += a * np.exp(-d2 / (2 * w * w))
    lo, hi = s.min(), s.max()
    normed = (s - lo) / max(hi - lo, 1e-12)
    return 1.0 + 2.0 * normed


class SyntheticOperator:
    """The fixed seeded ground-truth operator of the synthetic dataset.

    Per component it solves div(mu grad w) = 0 with the loading as
    Dirichlet data (smooth seeded heterogeneity mu in [1, 3]), then
    applies the zero-preserving nonlinearity u = w + alpha * w|w| / s.
    It is deterministic, continuous, and maps zero loading to the zero
    field exactly.
    """

    def __init__(
        self,
        spec: GridSpec,
        seed: int,
        n_bumps: int = 6,
        alpha: float = 0.3,
        scale: float | None = None,
    ):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x48455]))
        self.spec = spec
        self.mu = _heterogeneity_field(spec, rng, n_bumps)
        self.alpha = alpha
        max_stretch = max(max(p.max_stretch) for p in PROTOCOLS.values())
        self.scale = scale if scale is not None else (max_stretch - 1.0) * max(spec.extent) / 2.0
        self._solver = _DiffusionSolver(spec, self.mu)

    def apply(self, boundary_values: np.ndarray) -> np.ndarray:
        w = self._solver.solve(boundary_values)
        u = w + self.alpha * w * np.abs(w) / self.scale
        return u


def _ramp_amplitudes(n_frames: int, cycles: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangle loading/unloading amplitudes in (0, 1] and cycle indices.

    Frames are offset by half a step so no frame sits exactly at zero
    loading (displacement-controlled rigs never return exactly to the
    reference state).
    """
    per = max(n_frames // cycles, 1)
    cycle_idx = np.minimum(np.arange(n_frames) // per, cycles - 1)
    local = np.arange(n_frames) - cycle_idx * per
    last = cycle_idx == cycles - 1
    per_last = n_frames - (cycles - 1) * per
    length = np.where(last, per_last, per)
    tau = (local + 0.5) / length
    amp = 1.0 - np.abs(2.0 * tau - 1.0)
    return amp, cycle_idx


def generate_synthetic(
    n_samples: int,
    protocols: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7),
    seed: int = 0,
    grid: GridSpec = GridSpec(21, 21, (5.5, 5.5)),
    cycles: int = 3,
    noise_std: float = 0.0,
    boundary_wiggle: float = 0.02,
    peak_jitter: float = 0.03,
    n_bumps: int = 6,
    alpha: float = 0.3,
) -> Dataset:
    """Seeded synthetic dataset standing in for the unavailable DIC data.

    Boundary loadings follow biaxial stretch ramps at the protocol
    table's maximum stretches (``cycles`` loading/unloading triangles
    with small seeded per-cycle peak jitter and a smooth low-order
    boundary perturbation); fields come from the fixed
    :class:`SyntheticOperator`. Homogenized stress-stretch records are
    generated from the planted Fung parameters at each frame's nominal
    stretches. ``noise_std`` adds Gaussian measurement noise (units of
    the displacement scale) to the fields.
    """
    for p in protocols:
        if p not in PROTOCOLS:
            raise ValueError(f"unknown protocol id {p}")
    if n_samples < len(protocols) * cycles:
        raise ValueError("need at least cycles frames per protocol")

    op = SyntheticOperator(grid, seed, n_bumps=n_bumps, alpha=alpha)
    root = np.random.SeedSequence([seed, 0xDA7A])
    ramp_rng, noise_rng = (np.random.default_rng(s) for s in root.spawn(2))

    coords = node_coordinates(grid)
    bidx = boundary_indices(grid.nx, grid.ny)
    b_coords = coords[bidx[:, 0], bidx[:, 1], :]
    center = np.array(grid.extent) / 2.0
    nb = b_coords.shape[0]
    arc = np.arange(nb) / nb  # normalized position along the boundary loop

    base = n_samples // len(protocols)
    rem = n_samples % len(protocols)
    samples: list[Sample] = []
    records: list[StressStretchRecord] = []

    for k, pid in enumerate(protocols):
        count = base + (1 if k < rem else 0)
        proto = PROTOCOLS[pid]
        amp, cycle_idx = _ramp_amplitudes(count, cycles)
        peaks = 1.0 + ramp_rng.uniform(-peak_jitter, peak_jitter, size=(cycles, 2))
        # smooth per-protocol boundary perturbation profile, modes 1..2
        wig_coef = ramp_rng.uniform(-1.0, 1.0, size=(2, 2, 2))  # (mode, channel, sin/cos)
        scale_w = boundary_wiggle * op.scale
        for f in range(count):
            lam = 1.0 + amp[f] * peaks[cycle_idx[f]] * (np.array(proto.max_stretch) - 1.0)
            u_b = (lam - 1.0) * (b_coords - center)
            phase = ramp_rng.uniform(0, 2 * np.pi)
            wig = np.zeros_like(u_b)
            for m in range(2):
                ang = 2 * np.pi * (m + 1) * arc + phase
                for ch in range(2):
                    wig[:, ch] += wig_coef[m, ch, 0] * np.sin(ang) + wig_coef[m, ch, 1] * np.cos(ang)
            u_b = u_b + scale_w * amp[f] * wig
            field_vals = op.apply(u_b)
            if noise_std > 0:
                field_vals = field_vals + noise_rng.normal(
                    0.0, noise_std * op.scale, size=field_vals.shape
                )
            fld = GridField(field_vals, grid.extent)
            samples.append(
                Sample(
                    boundary=extract_boundary(fld),
                    field=fld,
                    protocol_id=pid,
                    frame_index=f,
                    provenance="synthetic",
                    cycle_index=int(cycle_idx[f]),
                )
            )
            p11, p22 = pk_stress(lam[0], lam[1], PLANTED_FUNG)
            records.append(
                StressStretchRecord(
                    lambda1=float(lam[0]), lambda2=float(lam[1]),
                    p11=float(p11), p22=float(p22),
                    protocol_id=pid, frame_index=f,
                )
            )

    lip = _empirical_lipschitz(samples, grid, seed)
    return Dataset(
        samples=samples,
        grid=grid,
        seed=int(seed),
        stress_records=records,
        planted_fung=PLANTED_FUNG,
        displacement_scale=op.scale,
        heterogeneity=GridField(op.mu[:, :, None], grid.extent),
        empirical_lipschitz=lip,
        noise_std=float(noise_std),
    )


def _empirical_lipschitz(samples: list[Sample], grid: GridSpec, seed: int, n_pairs: int = 100) -> float:
    """Max ||u_a - u_b|| / ||b_a - b_b|| over sampled pairs."""
    if len(samples) < 2:
        return 0.0
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11B]))
    best = 0.0
    for _ in range(n_pairs):
        a, b = rng.choice(len(samples), size=2, replace=False)
        db = np.linalg.norm(samples[a].boundary.values - samples[b].boundary.values)
        if db < 1e-12:
            continue
        du = np.sqrt(l2_norm_sq(samples[a].field.values - samples[b].field.values, grid))
        best = max(best, du / db)
    return float(best)


# ---------------------------------------------------------------------------
# Dataset persistence
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "grid": {"nx": ds.grid.nx, "ny": ds.grid.ny, "extent": list(ds.grid.extent)},
        "seed": ds.seed,
        "n_samples": len(ds.samples),
        "noise_std": ds.noise_std,
        "displacement_scale": ds.displacement_scale,
        "empirical_lipschitz": ds.empirical_lipschitz,
        "planted_fung": None
        if ds.planted_fung is None
        else {
            "c": ds.planted_fung.c, "a1": ds.planted_fung.a1,
            "a2": ds.planted_fung.a2, "a3": ds.planted_fung.a3,
            "lx": ds.planted_fung.lx, "ly": ds.planted_fung.ly, "lz": ds.planted_fung.lz,
        },
        "protocols": {
            str(p.id): {
                "description": p.description,
                "stress_ratio": list(p.stress_ratio),
                "max_stretch": list(p.max_stretch),
                "max_stress": list(p.max_stress),
                "reported_samples": p.reported_samples,
            }
            for p in PROTOCOLS.values()
        },
        "samples": [
            {
                "protocol_id": s.protocol_id,
                "frame_index": s.frame_index,
                "cycle_index": s.cycle_index,
                "provenance": s.provenance,
            }
            for s in ds.samples
        ],
        "has_heterogeneity": ds.heterogeneity is not None,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    with open(os.path.join(out_dir, "samples.bin"), "wb") as fh:
        for s in ds.samples:
            fh.write(s.boundary.values.astype("<f8").tobytes())
            fh.write(s.field.values.astype("<f8").tobytes())
        if ds.heterogeneity is not None:
            fh.write(ds.heterogeneity.values.astype("<f8").tobytes())
    if ds.stress_records:
        write_records_csv(ds.stress_records, os.path.join(out_dir, "stress_records.csv"))


def load_dataset(in_dir) -> Dataset:
    manifest_path = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataFormatError(f"no manifest.json in {in_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise DataFormatError(
            f"unsupported dataset format version {manifest.get('format_version')}"
        )
    g = manifest["grid"]
    spec = GridSpec(g["nx"], g["ny"], tuple(g["extent"]))
    nb = spec.n_boundary
    n_field = spec.nx * spec.ny * 2
    samples = []
    with open(os.path.join(in_dir, "samples.bin"), "rb") as fh:
        for tag in manifest["samples"]:
            b_raw = np.frombuffer(fh.read(nb * 2 * 8), dtype="<f8").reshape(nb, 2)
            f_raw = np.frombuffer(fh.read(n_field * 8), dtype="<f8").reshape(spec.nx, spec.ny, 2)
            fld = GridField(f_raw.copy(), spec.extent)
            samples.append(
                Sample(
                    boundary=BoundaryLoading(b_raw.copy(), spec.nx, spec.ny, spec.extent),
                    field=fld,
                    protocol_id=tag["protocol_id"],
                    frame_index=tag["frame_index"],
                    provenance=tag["provenance"],
                    cycle_index=tag.get("cycle_index", 0),
                )
            )
        het = None
        if manifest.get("has_heterogeneity"):
            h_raw = np.frombuffer(fh.read(spec.nx * spec.ny * 8), dtype="<f8")
            het = GridField(h_raw.reshape(spec.nx, spec.ny, 1).copy(), spec.extent)
    records_path = os.path.join(in_dir, "stress_records.csv")
    records = read_records_csv(records_path) if os.path.exists(records_path) else []
    pf = manifest.get("planted_fung")
    return Dataset(
        samples=samples,
        grid=spec,
        seed=manifest["seed"],
        stress_records=records,
        planted_fung=None if pf is None else FungParams(**pf),
        displacement_scale=manifest.get("displacement_scale"),
        heterogeneity=het,
        empirical_lipschitz=manifest.get("empirical_lipschitz"),
        noise_std=manifest.get("noise_std", 0.0),
    )


def export_samples_csv(ds: Dataset, path, sample_indices: list[int] | None = None) -> None:
    """Human-readable dump of selected samples for inspection."""
    coords = node_coordinates(ds.grid)
    indices = range(len(ds.samples)) if sample_indices is None else sample_indices
    with open(path, "w") as fh:
        fh.write("sample,protocol_id,frame_index,i,j,x_mm,y_mm,ux_mm,uy_mm\n")
        for si in indices:
            s = ds.samples[si]
            for i in range(ds.grid.nx):
                for j in range(ds.grid.ny):
                    fh.write(
                        f"{si},{s.protocol_id},{s.frame_index},{i},{j},"
                        f"{float(coords[i, j, 0])!r},{float(coords[i, j, 1])!r},"
                        f"{float(s.field.values[i, j, 0])!r},{float(s.field.values[i, j, 1])!r}\n"
                    )


# ---------------------------------------------------------------------------
# Study splits
# ---------------------------------------------------------------------------


def split_study(ds: Dataset, study_id: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Train/test index split for one of the four study scenarios.

    Study 1: seeded random 83/17 split over all protocols (train count
    is the floor). Studies 2-4 split by protocol membership. Always a
    partition of the dataset.
    """
    n = len(ds.samples)
    if study_id == 1:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(n)
        n_train = int(np.floor(TRAIN_FRACTION_STUDY1 * n))
        return np.sort(perm[:n_train]), np.sort(perm[n_train:])
    if study_id in STUDY_PROTOCOL_SPLITS:
        train_p, test_p = STUDY_PROTOCOL_SPLITS[study_id]
        pids = ds.protocol_ids()
        train_idx = np.flatnonzero(np.isin(pids, train_p))
        test_idx = np.flatnonzero(np.isin(pids, test_p))
        return train_idx, test_idx
    raise ValueError(f"unknown study id {study_id} (expected 1-4)")
