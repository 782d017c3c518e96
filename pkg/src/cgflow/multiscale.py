"""Triadic Besov seminorms, multiscale ellipticity constants, and defects.

All scale sums run over triadic levels k <= m.  The lattice truncates at the
unit cell (k = 0); below it every block average of cell-constant data equals
the containing cell's value, so the k < 0 contributions are exact geometric
series and are added in closed form.  Passing `min_level` truncates those
tails at a finite level instead (used to cross-check against brute force).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ParameterError
from .grid import CoefficientField, TriadicCube, subcubes
from .solver import DEFAULT_SETTINGS, operator
from .coarse import coarse_pair

INF = math.inf
DEFAULT_BUDGET_CAP = 2_000_000


def c_exp(u: float) -> float:
    """The normalizer 1 - 3^(-u); equal to 1 when u is infinite."""
    if u == INF:
        return 1.0
    return 1.0 - 3.0 ** (-u)


@dataclass(frozen=True)
class ExponentSet:
    """Scale-discount exponents s, t and aggregation exponent q (inf allowed)."""

    s: float
    t: float
    q: float

    def __post_init__(self):
        if not (0.0 < self.s <= 1.0) or not (0.0 < self.t <= 1.0):
            raise ParameterError("s and t must lie in (0, 1]")
        if self.q != INF and not (1.0 <= self.q):
            raise ParameterError("q must lie in [1, inf]")

    @property
    def admissible(self) -> bool:
        """Whether (s, t) flags coarse-grained-elliptic admissibility."""
        return self.s + self.t < 1.0

    @property
    def c_sq(self) -> float:
        return c_exp(self.s * self.q) if self.q != INF else 1.0

    @property
    def c_tq(self) -> float:
        return c_exp(self.t * self.q) if self.q != INF else 1.0


def _subunit_geometric(u: float, min_level) -> float:
    """sum over k in [min_level, -1] of 3^(u*k) (full tail when min_level is None)."""
    r = 3.0 ** (-u)
    if min_level is None:
        return r / (1.0 - r)
    if min_level >= 0:
        return 0.0
    terms = -int(min_level)
    return r * (1.0 - r ** terms) / (1.0 - r)


def _as_vector_grid(f: np.ndarray, dimension: int) -> np.ndarray:
    """Normalize cell data to shape (n,)*d + (v,); scalars get v = 1."""
    f = np.asarray(f, dtype=float)
    if f.ndim == dimension:
        f = f[..., None]
    if f.ndim != dimension + 1:
        raise ParameterError(
            f"cell data has shape {f.shape}, expected {dimension} or "
            f"{dimension + 1} axes"
        )
    return f


def _coarsen_mean(f: np.ndarray, dimension: int) -> np.ndarray:
    """Average vector cell data over 3^d blocks, halving... reducing side by 3."""
    n = f.shape[0]
    v = f.shape[-1]
    shape = []
    for _ in range(dimension):
        shape.extend([n // 3, 3])
    shape.append(v)
    g = f.reshape(shape)
    axes = tuple(2 * i + 1 for i in range(dimension))
    return g.mean(axis=axes)


def besov_ring(f, dimension: int, s: float, p: float, q: float,
               min_level=None) -> float:
    """Explicit negative seminorm: aggregated block averages over the aligned
    triadic partition at every level k <= m, finer levels discounted by 3^(s*q*k).
    `f` is cell data on the full cube of side 3^m (scalar or vector)."""
    if not (0.0 < s <= 1.0):
        raise ParameterError("s must lie in (0, 1]")
    if p != INF and p < 1.0:
        raise ParameterError("p must lie in [1, inf]")
    if q != INF and q < 1.0:
        raise ParameterError("q must lie in [1, inf]")
    f = _as_vector_grid(f, dimension)
    m = round(math.log(f.shape[0], 3)) if f.shape[0] > 1 else 0
    if f.shape[0] != 3 ** m:
        raise ParameterError(f"cell data side {f.shape[0]} is not a power of 3")

    # A_k = (avg_z |(f)_block|^p)^(1/p) for each level k = 0..m.
    inner = []
    g = f
    for k in range(m + 1):
        norms = np.linalg.norm(g.reshape(-1, g.shape[-1]), axis=1)
        if p == INF:
            inner.append(float(norms.max(initial=0.0)))
        else:
            inner.append(float(np.mean(norms ** p) ** (1.0 / p)))
        if k < m:
            g = _coarsen_mean(g, dimension)

    if q == INF:
        best = 0.0
        for k in range(m + 1):
            best = max(best, 3.0 ** (s * k) * inner[k])
        # Sub-unit levels repeat inner[0] with a smaller 3^(s*k) factor.
        return best
    total = sum(3.0 ** (s * q * k) * inner[k] ** q for k in range(m + 1))
    total += _subunit_geometric(s * q, min_level) * inner[0] ** q
    return float(total ** (1.0 / q))


def besov_positive(g, dimension: int, s: float, p: float, q: float) -> float:
    """Positive Besov seminorm with centered block oscillations; blocks of side
    3^k live on the half-step offset grid 3^(k-1) Z^d.  The k-sum truncates at
    the unit scale: centered averages of cell-constant data carry no
    sub-unit contribution under the lattice cutoff convention."""
    if not (0.0 < s < 1.0):
        raise ParameterError("s must lie in (0, 1)")
    if not (1.0 <= p) or p == INF:
        raise ParameterError("p must lie in [1, inf)")
    if q != INF and not (0.0 < q):
        raise ParameterError("q must be positive or inf")
    g = _as_vector_grid(g, dimension)
    n = g.shape[0]
    m = round(math.log(n, 3)) if n > 1 else 0
    if n != 3 ** m:
        raise ParameterError(f"cell data side {n} is not a power of 3")

    terms = []
    for k in range(m + 1):
        side_r = 3 ** (k + 1)   # cube side in thirds of a unit cell
        step_r = 3 ** k         # offset spacing in thirds
        domain_r = 3 ** (m + 1)
        positions = list(range(0, domain_r - side_r + 1, step_r))
        vals = []
        for z in np.ndindex(*([len(positions)] * dimension)):
            zr = [positions[zi] for zi in z]
            # Per-axis cell weights: length of the cube's overlap with each cell.
            axis_cells = []
            axis_weights = []
            for a in range(dimension):
                lo, hi = zr[a], zr[a] + side_r
                c0, c1 = lo // 3, (hi - 1) // 3
                cells = np.arange(c0, c1 + 1)
                w = np.minimum(hi, 3 * (cells + 1)) - np.maximum(lo, 3 * cells)
                axis_cells.append(cells)
                axis_weights.append(w / 3.0)
            block = g[np.ix_(*axis_cells)]
            wgt = axis_weights[0]
            for a in range(1, dimension):
                wgt = np.multiply.outer(wgt, axis_weights[a])
            vol = wgt.sum()
            mean = np.tensordot(wgt, block, axes=dimension) / vol
            dev = np.linalg.norm(block - mean, axis=-1)
            vals.append(float((wgt * dev ** p).sum() / vol))
        avg = float(np.mean(vals))
        terms.append((k, avg))

    if q == INF:
        return max(3.0 ** (-s * k) * v ** (1.0 / p) for k, v in terms)
    total = sum(3.0 ** (-s * q * k) * v ** (q / p) for k, v in terms)
    return float(total ** (1.0 / q))


@dataclass
class MultiscaleLadder:
    """Per-scale coarse pairs over all subcubes of a cube, with maxima."""

    cube: TriadicCube
    a_all: list[np.ndarray]          # per level k: (count, d, d) Dirichlet matrices
    a_star_inv_all: list[np.ndarray]  # per level k: (count, d, d)
    max_a_norm: np.ndarray           # per level k
    max_a_star_inv_norm: np.ndarray  # per level k

    @property
    def top_level(self) -> int:
        return self.cube.level

    def to_json_dict(self) -> dict:
        return {
            "cube": {"level": self.cube.level, "offset": list(self.cube.offset)},
            "max_a_norm": [float(x) for x in self.max_a_norm],
            "max_a_star_inv_norm": [float(x) for x in self.max_a_star_inv_norm],
        }


def ladder(field: CoefficientField, cube: TriadicCube,
           settings=DEFAULT_SETTINGS,
           budget_cap: int = DEFAULT_BUDGET_CAP) -> MultiscaleLadder:
    """Coarse pairs on every subcube at every level 0..m, cached per cube."""
    key = ("ladder", cube.level, cube.offset, settings)
    hit = field._cache.get(key)
    if hit is not None:
        return hit

    d = field.dimension
    m = cube.level
    total = sum(3 ** (d * (m - k)) for k in range(m + 1))
    if total > budget_cap:
        raise CapacityError(
            f"ladder needs {total} subcube solves, above the cap {budget_cap}"
        )

    a_all, ainv_all = [], []
    for k in range(m + 1):
        if k == 0:
            cells = field.cells_in(cube).reshape(-1, d, d)
            a_all.append(cells)
            ainv_all.append(np.linalg.inv(cells))
        else:
            mats_a, mats_ainv = [], []
            for sub in subcubes(cube, k):
                pair = coarse_pair(field, sub, settings)
                mats_a.append(pair.a.entries)
                mats_ainv.append(pair.a_star_inv)
            a_all.append(np.array(mats_a))
            ainv_all.append(np.array(mats_ainv))

    max_a = np.array([np.linalg.eigvalsh(arr)[:, -1].max() for arr in a_all])
    max_ainv = np.array([np.linalg.eigvalsh(arr)[:, -1].max() for arr in ainv_all])
    lad = MultiscaleLadder(cube, a_all, ainv_all, max_a, max_ainv)
    field._cache[key] = lad
    return lad


def ellipticity_constants(lad: MultiscaleLadder, exps: ExponentSet,
                          min_level=None) -> tuple[float, float]:
    """(Lambda_{s,q}, lambda_{t,q}) from the ladder maxima, with the exact
    sub-unit tail (sub-unit coarse matrices equal the cell matrices)."""
    m = lad.top_level
    X = lad.max_a_norm
    Y = lad.max_a_star_inv_norm
    s, t, q = exps.s, exps.t, exps.q
    if q == INF:
        lam_big = max(3.0 ** (-2 * s * (m - k)) * X[k] for k in range(m + 1))
        lam_small = max(3.0 ** (-2 * t * (m - k)) * Y[k] for k in range(m + 1))
        return float(lam_big), float(1.0 / lam_small)
    # Finite q: tails repeat the unit-scale maxima.
    tail_s = 3.0 ** (-s * q * m) * _subunit_geometric(s * q, min_level)
    tail_t = 3.0 ** (-t * q * m) * _subunit_geometric(t * q, min_level)
    big = sum(3.0 ** (-s * q * (m - k)) * X[k] ** (q / 2) for k in range(m + 1))
    big += tail_s * X[0] ** (q / 2)
    small = sum(3.0 ** (-t * q * (m - k)) * Y[k] ** (q / 2) for k in range(m + 1))
    small += tail_t * Y[0] ** (q / 2)
    Lambda = (exps.c_sq * big) ** (2.0 / q)
    lam = (exps.c_tq * small) ** (-2.0 / q)
    return float(Lambda), float(lam)


def defect_quadratic_forms(a_arr, ainv_arr, abar: np.ndarray) -> np.ndarray:
    """Per-subcube unit-sphere maximum of J(., abar^{-1/2} e, abar^{1/2} e),
    computed as the top eigenvalue of the explicit symmetric matrix
    abar^{-1/2} (a - a_* + (a_* - abar) a_*^{-1} (a_* - abar)) abar^{-1/2} / 2."""
    evals, evecs = np.linalg.eigh(abar)
    if evals[0] <= 0:
        raise ParameterError("reference matrix abar must be positive definite")
    r = evecs @ np.diag(evals ** -0.5) @ evecs.T
    a_star = np.linalg.inv(ainv_arr)
    dev = a_star - abar
    inner = a_arr - a_star + dev @ ainv_arr @ dev
    mats = r @ inner @ r
    mats = 0.5 * (mats + np.swapaxes(mats, -2, -1))
    vals = 0.5 * np.linalg.eigvalsh(mats)[..., -1]
    # The conjugation makes the form dimensionless; values at roundoff scale
    # are solver noise and would otherwise be amplified by the square root.
    vals[np.abs(vals) < 1e-13] = 0.0
    return np.maximum(vals, 0.0)


def multiscale_defect(lad: MultiscaleLadder, abar, s: float, q: float,
                      min_level=None) -> float:
    """The scale-discounted aggregate of the per-subcube J-defect against the
    reference matrix abar; vanishes iff every block pair equals abar."""
    if not (0.0 < s < 0.5):
        raise ParameterError("s must lie in (0, 1/2)")
    if q != INF and q < 1.0:
        raise ParameterError("q must lie in [1, inf]")
    abar = np.asarray(abar, dtype=float)
    m = lad.top_level
    jmax = np.array(
        [
            max(
                float(
                    defect_quadratic_forms(lad.a_all[k], lad.a_star_inv_all[k], abar).max()
                ),
                0.0,
            )
            for k in range(m + 1)
        ]
    )
    if q == INF:
        return float(max(3.0 ** (-s * (m - k)) * jmax[k] ** 0.5 for k in range(m + 1)))
    csq = c_exp(s * q)
    total = sum(3.0 ** (-s * q * (m - k)) * jmax[k] ** (q / 2) for k in range(m + 1))
    total += 3.0 ** (-s * q * m) * _subunit_geometric(s * q, min_level) * jmax[0] ** (q / 2)
    return float((csq * total) ** (1.0 / q))


def cg_poincare_check(field: CoefficientField, cube: TriadicCube, u: np.ndarray,
                      s: float, q: float, flux=True,
                      settings=DEFAULT_SETTINGS, harmonic_tol=1e-6) -> dict:
    """Both lines of the coarse-grained Poincare inequality with the explicit
    constants c_{sq}^{-1/q} lambda^{-1/2} and c_{sq}^{-1/q} Lambda^{1/2}.

    The gradient line holds for every discrete function; the flux line needs
    u discrete a-harmonic."""
    op = operator(field, cube)
    lad = ladder(field, cube, settings)
    exps = ExponentSet(s, s, q)
    Lambda, lam = ellipticity_constants(lad, exps)
    m = cube.level
    cfac = 1.0 if q == INF else exps.c_sq ** (-1.0 / q)
    energy_norm = math.sqrt(max(2.0 * op.energy(u), 0.0))

    grid_shape = (cube.side,) * field.dimension + (field.dimension,)
    grads = op.cell_gradients(u).reshape(grid_shape)
    lhs_grad = 3.0 ** (-s * m) * besov_ring(grads, field.dimension, s, 2.0, q)
    rhs_grad = cfac * lam ** -0.5 * energy_norm

    report = {
        "s": s,
        "q": q,
        "lambda": lam,
        "Lambda": Lambda,
        "lhs_gradient": float(lhs_grad),
        "rhs_gradient": float(rhs_grad),
        "gradient_ok": bool(lhs_grad <= rhs_grad * (1.0 + 1e-7) + 1e-300),
    }
    if flux:
        op.require_harmonic(u, harmonic_tol)
        fluxes = op.cell_fluxes(u).reshape(grid_shape)
        lhs_flux = 3.0 ** (-s * m) * besov_ring(fluxes, field.dimension, s, 2.0, q)
        rhs_flux = cfac * Lambda ** 0.5 * energy_norm
        report.update(
            lhs_flux=float(lhs_flux),
            rhs_flux=float(rhs_flux),
            flux_ok=bool(lhs_flux <= rhs_flux * (1.0 + 1e-7) + 1e-300),
        )
    return report


def weak_norm_diagnostics(field: CoefficientField, cube: TriadicCube,
                          p, q_vec, p0, q0, s: float, t: float,
                          s_prime=None, t_prime=None, base_level: int = 0,
                          settings=DEFAULT_SETTINGS) -> dict:
    """Measurable ingredients of the weak-norm estimates for the maximizer of
    J(cube, p, q): the two left-hand sides and every term of the right-hand
    sides.  The bounds carry an unspecified dimensional constant and are
    reported, never asserted."""
    from .solver import solve_v
    from .coarse import j_from_pair, j_functional

    d = field.dimension
    m = cube.level
    p = np.asarray(p, dtype=float)
    q_vec = np.asarray(q_vec, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    q0 = np.asarray(q0, dtype=float)
    if s_prime is None:
        s_prime = s / 2.0
    if t_prime is None:
        t_prime = t / 2.0
    if not (s / 2.0 <= s_prime <= s) or not (t / 2.0 <= t_prime <= t):
        raise ParameterError("s' must lie in [s/2, s] (and t' in [t/2, t])")
    k = base_level
    if not (0 <= k < m):
        raise ParameterError(f"base_level must lie in [0, {m})")

    op = operator(field, cube)
    lad = ladder(field, cube, settings)
    v = solve_v(field, cube, p, q_vec, settings)
    grid_shape = (cube.side,) * d + (d,)
    grads = op.cell_gradients(v.values).reshape(grid_shape)
    fluxes = op.cell_fluxes(v.values).reshape(grid_shape)

    lhs_grad = 3.0 ** (-s * m) * besov_ring(grads - p0, d, s, 2.0, 1.0)
    lhs_flux = 3.0 ** (-t * m) * besov_ring(fluxes - q0, d, t, 2.0, 1.0)

    j_m = j_functional(field, cube, p, q_vec, settings)
    lam_sp = ellipticity_constants(lad, ExponentSet(s_prime, s_prime, 1.0))[1]
    Lam_tp = ellipticity_constants(lad, ExponentSet(t_prime, t_prime, 1.0))[0]

    dev_grad = []
    dev_flux = []
    j_increments = []
    for j in range(k + 1, m + 1):
        a_j = lad.a_all[j]
        ainv_j = lad.a_star_inv_all[j]
        dg = ainv_j @ q_vec - p - p0
        df = q_vec - a_j @ p - q0
        dev_grad.append(
            3.0 ** (-s * (m - j)) * float(np.sqrt(np.mean(np.sum(dg ** 2, axis=1))))
        )
        dev_flux.append(
            3.0 ** (-t * (m - j)) * float(np.sqrt(np.mean(np.sum(df ** 2, axis=1))))
        )
        j_avg = float(
            np.mean(
                [
                    0.5 * p @ a_j[i] @ p + 0.5 * q_vec @ ainv_j[i] @ q_vec - p @ q_vec
                    for i in range(a_j.shape[0])
                ]
            )
        )
        j_increments.append(max(j_avg - j_m, 0.0))

    jsum_grad = lam_sp ** -0.5 * sum(
        3.0 ** (-(s - s_prime) * (m - j)) * inc ** 0.5
        for j, inc in zip(range(k + 1, m + 1), j_increments)
    )
    jsum_flux = Lam_tp ** 0.5 * sum(
        3.0 ** (-(t - t_prime) * (m - j)) * inc ** 0.5
        for j, inc in zip(range(k + 1, m + 1), j_increments)
    )
    jpos = max(j_m, 0.0)
    boundary_grad = (
        s ** -0.5 * 3.0 ** (-(s - s_prime) * (m - k)) * lam_sp ** -0.5 * jpos ** 0.5,
        s ** -1.0 * 3.0 ** (-s * (m - k)) * float(np.linalg.norm(p0)),
    )
    boundary_flux = (
        t ** -0.5 * 3.0 ** (-(t - t_prime) * (m - k)) * Lam_tp ** 0.5 * jpos ** 0.5,
        t ** -1.0 * 3.0 ** (-t * (m - k)) * float(np.linalg.norm(q0)),
    )
    return {
        "lhs_gradient": float(lhs_grad),
        "lhs_flux": float(lhs_flux),
        "deviation_terms_gradient": dev_grad,
        "deviation_terms_flux": dev_flux,
        "j_increment_sum_gradient": float(jsum_grad),
        "j_increment_sum_flux": float(jsum_flux),
        "boundary_terms_gradient": [float(x) for x in boundary_grad],
        "boundary_terms_flux": [float(x) for x in boundary_flux],
        "j_value": float(j_m),
        "lambda_s_prime": float(lam_sp),
        "Lambda_t_prime": float(Lam_tp),
    }
