"""Fung-type constitutive baseline.

Planar exponential strain energy

    psi = (c/2) * [exp(a1*E11^2 + a2*E22^2 + 2*a3*E11*E22) - 1]   (kPa)

with Green-Lagrange strains E = (lambda^2 - 1)/2, first Piola-Kirchhoff
stresses for shear-free homogeneous biaxial states, bound-constrained
differential-evolution fitting of (c, a1, a2, a3) to stress-stretch
records, and a plane-stress membrane FEM predictor (bilinear quads,
total-Lagrangian Newton-Raphson with analytic tangent and load
stepping).

The energy has no shear term, which would make a discrete membrane's
tangent singular; a small quadratic regularization ``mu_s * E12^2``
with ``mu_s = shear_factor * c`` (default 1e-3) keeps the problem
well-posed and is negligible for the biaxial states of interest.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as splinalg

from .errors import ConfigError, EnergyOverflowError, NewtonDivergenceError
from .grid import BoundaryLoading, GridField, GridSpec, boundary_indices

#: Exponent above which the strain energy is flagged as overflowing.
EXP_GUARD = 700.0

#: Default shear regularization, as a fraction of the stiffness scale c.
SHEAR_FACTOR = 1e-3

DEFAULT_BOUNDS = {
    "c": (0.1, 100.0),
    "a1": (0.01, 20.0),
    "a2": (0.01, 20.0),
    "a3": (-10.0, 10.0),
}


@dataclass(frozen=True)
class FungParams:
    """Constitutive parameters plus specimen geometry (mm).

    Invariants: c > 0, a1 > 0, a2 > 0, and a1*a2 - a3^2 > 0 so the
    exponent quadratic form is positive definite.
    """

    c: float
    a1: float
    a2: float
    a3: float
    lx: float = 9.0
    ly: float = 9.0
    lz: float = 0.5

    def __post_init__(self):
        if not (self.c > 0 and self.a1 > 0 and self.a2 > 0):
            raise ValueError("require c > 0, a1 > 0, a2 > 0")
        if not self.a1 * self.a2 - self.a3**2 > 0:
            raise ValueError("require a1*a2 - a3^2 > 0 (convex exponent)")
        if not (self.lx > 0 and self.ly > 0 and self.lz > 0):
            raise ValueError("geometry lengths must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.c, self.a1, self.a2, self.a3])


@dataclass(frozen=True)
class StressStretchRecord:
    """One homogenized biaxial measurement: stretches and PK1 stresses."""

    lambda1: float
    lambda2: float
    p11: float
    p22: float
    protocol_id: int | None = None
    frame_index: int | None = None

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("stretches must be positive")
        if not np.isfinite([self.lambda1, self.lambda2, self.p11, self.p22]).all():
            raise ValueError("record values must be finite")

    @staticmethod
    def from_forces(fx: float, fy: float, lambda1: float, lambda2: float,
                    lx: float, ly: float, lz: float, **tags) -> "StressStretchRecord":
        """Stresses from load-cell forces and undeformed geometry."""
        return StressStretchRecord(
            lambda1=lambda1, lambda2=lambda2,
            p11=fx / (ly * lz), p22=fy / (lx * lz), **tags,
        )


def write_records_csv(records: list[StressStretchRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda1", "lambda2", "P11_kPa", "P22_kPa", "protocol_id", "frame_index"])
        for r in records:
            writer.writerow([
                repr(r.lambda1), repr(r.lambda2), repr(r.p11), repr(r.p22),
                "" if r.protocol_id is None else r.protocol_id,
                "" if r.frame_index is None else r.frame_index,
            ])


def read_records_csv(path) -> list[StressStretchRecord]:
    from .errors import DataFormatError

    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"lambda1", "lambda2", "P11_kPa", "P22_kPa"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise DataFormatError(
                f"stress records CSV must have columns {sorted(needed)}, "
                f"got {reader.fieldnames}"
            )
        for row in reader:
            records.append(StressStretchRecord(
                lambda1=float(row["lambda1"]), lambda2=float(row["lambda2"]),
                p11=float(row["P11_kPa"]), p22=float(row["P22_kPa"]),
                protocol_id=int(row["protocol_id"]) if row.get("protocol_id") else None,
                frame_index=int(row["frame_index"]) if row.get("frame_index") else None,
            ))
    return records


def strain_energy(e11, e22, params: FungParams):
    """Strain energy density (kPa) at the given Green-Lagrange strains."""
    exponent = params.a1 * np.square(e11) + params.a2 * np.square(e22) \
        + 2.0 * params.a3 * np.asarray(e11) * np.asarray(e22)
    if np.max(exponent) > EXP_GUARD:
        raise EnergyOverflowError(
            f"strain-energy exponent {np.max(exponent):.3g} exceeds the guard {EXP_GUARD:g}"
        )
    return 0.5 * params.c * (np.exp(exponent) - 1.0)


def green_strain(stretch):
    """E = (lambda^2 - 1)/2 for a principal stretch."""
    return 0.5 * (np.square(stretch) - 1.0)


def pk_stress(lambda1, lambda2, params: FungParams):
    """PK1 stresses (P11, P22) of a shear-free homogeneous biaxial state.

    P11 = lambda1 * dpsi/dE11 and P22 = lambda2 * dpsi/dE22 evaluated at
    E = (lambda^2 - 1)/2.
    """
    e11, e22 = green_strain(np.asarray(lambda1, dtype=float)), green_strain(np.asarray(lambda2, dtype=float))
    q1 = params.a1 * e11 + params.a3 * e22
    q2 = params.a2 * e22 + params.a3 * e11
    exponent = e11 * q1 + e22 * q2
    if np.max(exponent) > EXP_GUARD:
        raise EnergyOverflowError(
            f"stress exponent {np.max(exponent):.3g} exceeds the guard {EXP_GUARD:g}"
        )
    common = params.c * np.exp(exponent)
    p11 = np.asarray(lambda1) * common * q1
    p22 = np.asarray(lambda2) * common * q2
    if np.isscalar(lambda1) or np.ndim(lambda1) == 0:
        return float(p11), float(p22)
    return p11, p22


def _objective_mse(x: np.ndarray, l1, l2, p11, p22) -> float:
    """Mean squared stress error of candidate (c, a1, a2, a3); inf on overflow."""
    c, a1, a2, a3 = x
    e11, e22 = green_strain(l1), green_strain(l2)
    with np.errstate(over="ignore", invalid="ignore"):
        q1 = a1 * e11 + a3 * e22
        q2 = a2 * e22 + a3 * e11
        exponent = e11 * q1 + e22 * q2
        if not np.all(np.isfinite(exponent)) or np.max(exponent) > EXP_GUARD:
            return np.inf
        common = c * np.exp(exponent)
        r1 = l1 * common * q1 - p11
        r2 = l2 * common * q2 - p22
        out = float((np.sum(r1 * r1) + np.sum(r2 * r2)) / (2 * l1.size))
    return out if np.isfinite(out) else np.inf


@dataclass(frozen=True)
class DeConfig:
    """DE/rand/1/bin hyperparameters."""

    pop_size: int | None = None  # default max(40, 10 * dim)
    crossover: float = 0.9
    weight: float = 0.8
    generations: int = 300

    def __post_init__(self):
        if not 0 <= self.crossover <= 1:
            raise ConfigError("crossover must be in [0, 1]")
        if self.weight <= 0:
            raise ConfigError("differential weight must be positive")
        if self.generations < 1:
            raise ConfigError("generations must be >= 1")


@dataclass
class DeResult:
    params: FungParams
    objective: float
    best_trace: np.ndarray  # best objective after each generation (monotone)
    seed: int
    bounds: dict[str, tuple[float, float]]
    n_evaluations: int


def fit_fung_de(
    records: list[StressStretchRecord],
    bounds: dict[str, tuple[float, float]] | None = None,
    config: DeConfig = DeConfig(),
    seed: int = 0,
    geometry: tuple[float, float, float] = (9.0, 9.0, 0.5),
) -> DeResult:
    """Fit (c, a1, a2, a3) by DE/rand/1/bin on the stress MSE.

    Elitist selection makes the best-objective trace monotone
    non-increasing; the run is deterministic given the seed.
    """
    if len(records) < 4:
        raise ValueError("need at least 4 records spanning both axes")
    bounds = dict(DEFAULT_BOUNDS if bounds is None else bounds)
    lo = np.array([bounds[k][0] for k in ("c", "a1", "a2", "a3")])
    hi = np.array([bounds[k][1] for k in ("c", "a1", "a2", "a3")])
    if np.any(lo >= hi):
        raise ConfigError(f"invalid bounds (low >= high): {bounds}")

    l1 = np.array([r.lambda1 for r in records])
    l2 = np.array([r.lambda2 for r in records])
    p11 = np.array([r.p11 for r in records])
    p22 = np.array([r.p22 for r in records])

    dim = 4
    npop = config.pop_size or max(40, 10 * dim)
    rng = np.random.default_rng(seed)
    pop = lo + rng.uniform(size=(npop, dim)) * (hi - lo)
    fitness = np.array([_objective_mse(x, l1, l2, p11, p22) for x in pop])
    n_eval = npop
    trace = [float(fitness.min())]

    for _ in range(config.generations):
        for i in range(npop):
            choices = rng.choice(npop - 1, size=3, replace=False)
            choices[choices >= i] += 1
            r0, r1, r2 = pop[choices]
            mutant = r0 + config.weight * (r1 - r2)
            # reflect out-of-bounds components back inside; plain clipping
            # makes populations collect on a bound and stall
            mutant = np.where(mutant < lo, 2 * lo - mutant, mutant)
            mutant = np.where(mutant > hi, 2 * hi - mutant, mutant)
            mutant = np.clip(mutant, lo, hi)
            cross = rng.uniform(size=dim) < config.crossover
            cross[rng.integers(dim)] = True
            trial = np.where(cross, mutant, pop[i])
            f_trial = _objective_mse(trial, l1, l2, p11, p22)
            n_eval += 1
            if f_trial <= fitness[i]:
                pop[i] = trial
                fitness[i] = f_trial
        trace.append(float(fitness.min()))

    best = pop[int(np.argmin(fitness))]
    params = FungParams(c=best[0], a1=best[1], a2=best[2], a3=best[3],
                        lx=geometry[0], ly=geometry[1], lz=geometry[2])
    return DeResult(
        params=params,
        objective=float(fitness.min()),
        best_trace=np.array(trace),
        seed=int(seed),
        bounds=bounds,
        n_evaluations=n_eval,
    )


# ---------------------------------------------------------------------------
# Plane-stress membrane FEM
# ---------------------------------------------------------------------------

_GAUSS = 1.0 / np.sqrt(3.0)
_XI_A = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA_A = np.array([-1.0, -1.0, 1.0, 1.0])


@dataclass
class FemResult:
    """FEM solution plus Newton diagnostics.

    ``converged`` is False only for results recovered from a divergence
    (the field is then the last converged partial-load state).
    """

    field: GridField
    newton_residuals: list[list[float]]  # residual norms per converged load step
    load_steps: int
    converged: bool = True


class _Mesh:
    """Uniform bilinear-quad mesh on the node grid (precomputed factors)."""

    def __init__(self, spec: GridSpec):
        self.spec = spec
        nx, ny = spec.nx, spec.ny
        hx, hy = spec.spacing
        self.n_nodes = nx * ny
        node_id = np.arange(self.n_nodes).reshape(nx, ny)
        i = np.arange(nx - 1)[:, None]
        j = np.arange(ny - 1)[None, :]
        self.conn = np.stack(
            [
                node_id[i, j],
                node_id[i + 1, j],
                node_id[i + 1, j + 1],
                node_id[i, j + 1],
            ],
            axis=-1,
        ).reshape(-1, 4)
        # 2x2 Gauss rule; uniform rectangles share one Jacobian
        pts = [(-_GAUSS, -_GAUSS), (_GAUSS, -_GAUSS), (_GAUSS, _GAUSS), (-_GAUSS, _GAUSS)]
        dndx = np.empty((4, 4, 2))
        for g, (xi, eta) in enumerate(pts):
            dn_dxi = 0.25 * _XI_A * (1 + _ETA_A * eta)
            dn_deta = 0.25 * _ETA_A * (1 + _XI_A * xi)
            dndx[g, :, 0] = dn_dxi * 2.0 / hx
            dndx[g, :, 1] = dn_deta * 2.0 / hy
        self.dndx = dndx
        self.gauss_scale = hx * hy / 4.0  # det(J) * unit Gauss weight

        bidx = boundary_indices(nx, ny)
        bnodes = node_id[bidx[:, 0], bidx[:, 1]]
        self.boundary_nodes = bnodes
        fixed = np.zeros(self.n_nodes, dtype=bool)
        fixed[bnodes] = True
        self.free_dofs = np.repeat(~fixed, 2)
        dofs = self.conn * 2
        el_dofs = np.empty((self.conn.shape[0], 8), dtype=np.intp)
        el_dofs[:, 0::2] = dofs
        el_dofs[:, 1::2] = dofs + 1
        self.el_dofs = el_dofs
        self.k_rows = np.repeat(el_dofs, 8, axis=1).ravel()
        self.k_cols = np.tile(el_dofs, (1, 8)).ravel()


def _stress_tangent(e11, e22, g12, params: FungParams, mu_s: float):
    with np.errstate(over="ignore", invalid="ignore"):
        q1 = params.a1 * e11 + params.a3 * e22
        q2 = params.a2 * e22 + params.a3 * e11
        exponent = e11 * q1 + e22 * q2
    if not np.all(np.isfinite(exponent)) or np.max(exponent) > EXP_GUARD:
        raise EnergyOverflowError(
            f"FEM strain state pushed the exponent to {np.max(exponent):.3g}"
        )
    common = params.c * np.exp(exponent)
    s = np.stack([common * q1, common * q2, mu_s * 0.5 * g12], axis=-1)
    cc = np.zeros(e11.shape + (3, 3))
    cc[..., 0, 0] = common * (2 * q1 * q1 + params.a1)
    cc[..., 0, 1] = cc[..., 1, 0] = common * (2 * q1 * q2 + params.a3)
    cc[..., 1, 1] = common * (2 * q2 * q2 + params.a2)
    cc[..., 2, 2] = mu_s * 0.5
    return s, cc


def _assemble(mesh: _Mesh, u_flat: np.ndarray, params: FungParams, mu_s: float,
              thickness: float, with_tangent: bool = True):
    """Internal force vector and (optionally) tangent stiffness."""
    conn, dndx = mesh.conn, mesh.dndx
    u_el = u_flat.reshape(-1, 2)[conn]  # (ne, 4, 2)
    ne = conn.shape[0]

    f = np.einsum("eai,gaj->egij", u_el, dndx)
    f[..., 0, 0] += 1.0
    f[..., 1, 1] += 1.0
    e = 0.5 * (np.einsum("egki,egkj->egij", f, f))
    e[..., 0, 0] -= 0.5
    e[..., 1, 1] -= 0.5

    s, cc = _stress_tangent(e[..., 0, 0], e[..., 1, 1], 2.0 * e[..., 0, 1], params, mu_s)

    # B (ne, ngp, 3, 8): variation of [E11, E22, 2E12] wrt nodal dofs
    b = np.zeros((ne, 4, 3, 8))
    fg1 = f[..., :, 0]  # F_i1, (ne, ngp, 2)
    fg2 = f[..., :, 1]  # F_i2
    for a in range(4):
        dn1 = dndx[:, a, 0][None, :, None]
        dn2 = dndx[:, a, 1][None, :, None]
        cols = slice(2 * a, 2 * a + 2)
        b[..., 0, cols] = fg1 * dn1
        b[..., 1, cols] = fg2 * dn2
        b[..., 2, cols] = fg1 * dn2 + fg2 * dn1

    scale = thickness * mesh.gauss_scale
    f_el = scale * np.einsum("egsk,egs->ek", b, s)
    f_int = np.zeros(2 * mesh.n_nodes)
    np.add.at(f_int, mesh.el_dofs.ravel(), f_el.ravel())
    if not with_tangent:
        return f_int, None

    k_mat = np.einsum("egsk,egst,egtl->ekl", b, cc, b, optimize=True)

    # geometric stiffness: (grad Na . S . grad Nb) I2
    s_mat = np.empty(s.shape[:-1] + (2, 2))
    s_mat[..., 0, 0] = s[..., 0]
    s_mat[..., 1, 1] = s[..., 1]
    s_mat[..., 0, 1] = s_mat[..., 1, 0] = s[..., 2]
    g_ab = np.einsum("gai,egij,gbj->eab", dndx, s_mat, dndx, optimize=True)
    k_geo = np.zeros((ne, 8, 8))
    k_geo[:, 0::2, 0::2] = g_ab
    k_geo[:, 1::2, 1::2] = g_ab

    k_el = scale * (k_mat + k_geo)
    k = sparse.coo_matrix(
        (k_el.ravel(), (mesh.k_rows, mesh.k_cols)),
        shape=(2 * mesh.n_nodes, 2 * mesh.n_nodes),
    ).tocsr()
    return f_int, k


def fem_solve_fung(
    b: BoundaryLoading,
    params: FungParams,
    thickness: float | None = None,
    shear_factor: float = SHEAR_FACTOR,
    load_steps: int = 10,
    tol: float = 1e-9,
    max_newton: int = 15,
    max_halvings: int = 6,
    initial_guess: np.ndarray | None = None,
) -> FemResult:
    """Static equilibrium of the planar membrane under prescribed
    boundary displacements.

    The boundary data is applied in uniform load increments, each solved
    by Newton-Raphson with the analytic tangent; an increment that fails
    to converge is halved (up to ``max_halvings`` times). Convergence is
    declared when the free-dof residual norm drops below
    ``tol * c * thickness * mean(extent)``.
    """
    spec = b.spec
    mesh = _Mesh(spec)
    thickness = params.lz if thickness is None else thickness
    mu_s = shear_factor * params.c
    ref_force = params.c * thickness * 0.5 * (spec.extent[0] + spec.extent[1])
    tol_force = tol * ref_force

    free = mesh.free_dofs
    bdofs_x = 2 * mesh.boundary_nodes
    target = b.values  # (nb, 2)

    u = np.zeros(2 * mesh.n_nodes)
    if initial_guess is not None:
        u = initial_guess.reshape(-1).astype(np.float64).copy()
    lam_done = 0.0
    dlam = 1.0 / load_steps
    residual_log: list[list[float]] = []
    halvings = 0

    while lam_done < 1.0 - 1e-12:
        lam_try = min(1.0, lam_done + dlam)
        u_try = u.copy()
        u_try[bdofs_x] = lam_try * target[:, 0]
        u_try[bdofs_x + 1] = lam_try * target[:, 1]
        ok, log = _newton(mesh, u_try, params, mu_s, thickness, free, tol_force, max_newton)
        if ok:
            u = u_try
            lam_done = lam_try
            residual_log.append(log)
        else:
            halvings += 1
            dlam /= 2.0
            if halvings > max_halvings:
                last = GridField(u.reshape(spec.nx, spec.ny, 2), spec.extent)
                raise NewtonDivergenceError(
                    f"Newton failed at load factor {lam_try:.4f} after "
                    f"{max_halvings} halvings",
                    last_converged=last,
                    load_factor=lam_done,
                )

    field = GridField(u.reshape(spec.nx, spec.ny, 2), spec.extent)
    return FemResult(field=field, newton_residuals=residual_log, load_steps=len(residual_log))


def _residual_norm(mesh, u, params, mu_s, thickness, free):
    try:
        f_int, _ = _assemble(mesh, u, params, mu_s, thickness, with_tangent=False)
    except EnergyOverflowError:
        return np.inf
    r = float(np.linalg.norm(f_int[free]))
    return r if np.isfinite(r) else np.inf


def _newton(mesh, u, params, mu_s, thickness, free, tol_force, max_newton):
    """Newton with backtracking on the residual norm (in place on u)."""
    log = []
    rnorm = _residual_norm(mesh, u, params, mu_s, thickness, free)
    log.append(rnorm)
    if not np.isfinite(rnorm):
        return False, log
    for _ in range(max_newton):
        if rnorm < tol_force:
            return True, log
        try:
            f_int, k = _assemble(mesh, u, params, mu_s, thickness)
        except EnergyOverflowError:
            return False, log
        k_ff = k[free][:, free]
        du = splinalg.spsolve(k_ff.tocsc(), -f_int[free])
        if not np.all(np.isfinite(du)):
            return False, log
        step = 1.0
        accepted = False
        for _ in range(10):
            u_try = u.copy()
            u_try[free] += step * du
            r_try = _residual_norm(mesh, u_try, params, mu_s, thickness, free)
            if r_try < rnorm:
                u[...] = u_try
                rnorm = r_try
                accepted = True
                break
            step *= 0.5
        log.append(rnorm)
        if not accepted:
            return False, log
    return rnorm < tol_force, log


def fem_predict_sequence(
    boundaries: list[BoundaryLoading],
    params: FungParams,
    **kwargs,
) -> list[FemResult]:
    """Solve a sequence of loadings, warm-starting from the previous frame.

    Consecutive frames of a loading ramp are close, so each solve after
    the first uses the previous solution as the initial guess with a
    single load step, falling back to the stepped cold solve on failure.
    A frame that diverges even from the cold solve yields its last
    converged partial-load state with ``converged=False`` instead of
    aborting the sweep.
    """
    results: list[FemResult] = []
    prev: np.ndarray | None = None
    for b in boundaries:
        res = None
        if prev is not None:
            try:
                res = fem_solve_fung(b, params, load_steps=1, initial_guess=prev, **kwargs)
            except NewtonDivergenceError:
                res = None
        if res is None:
            try:
                res = fem_solve_fung(b, params, **kwargs)
            except NewtonDivergenceError as exc:
                last = exc.last_converged
                if last is None:
                    spec = b.spec
                    last = GridField(np.zeros((spec.nx, spec.ny, 2)), spec.extent)
                res = FemResult(field=last, newton_residuals=[], load_steps=0, converged=False)
        results.append(res)
        prev = res.field.values.copy()
    return results
