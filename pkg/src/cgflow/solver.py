"""Discrete variational block solver.

One multilinear (Q1) element per unit cell, exact quadrature for
cell-constant coefficients.  Affine functions are represented exactly, so
every constant-field identity of the coarse-graining calculus is exact up to
roundoff, and the discrete coarse-grained matrices are genuinely
sub/superadditive within the discrete theory.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import ConvergenceError, ParameterError, PreconditionError
from .grid import CoefficientField, TriadicCube


@dataclass(frozen=True)
class SolverSettings:
    """Linear-solver knobs: PCG above `direct_threshold` unknowns, dense
    Cholesky at or below it.  max iterations = max_iter_factor * unknowns."""

    tolerance: float = 1e-10
    max_iter_factor: int = 10
    direct_threshold: int = 1000


DEFAULT_SETTINGS = SolverSettings()


@dataclass
class BlockSolution:
    """Nodal potential on a cube plus its volume-normalized energy data."""

    values: np.ndarray        # flat nodal vector, C-order over (side+1,)*d nodes
    energy: float             # (1/|cube|) * int 1/2 grad w . a grad w
    mean_gradient: np.ndarray
    mean_flux: np.ndarray
    residual: float


@lru_cache(maxsize=None)
def _reference_grad_integrals(d: int):
    """G[a, b, i, j] = int_{[0,1]^d} d_a phi_i d_b phi_j for the 2^d Q1 basis
    functions; exact via 2-point Gauss per axis.  Also returns the corner
    tuple list and the cell-average gradient table g[i, a] = avg d_a phi_i."""
    corners = list(itertools.product((0, 1), repeat=d))
    nb = len(corners)
    gp = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
    gw = np.array([0.5, 0.5])
    pts = list(itertools.product(range(2), repeat=d))

    grads = np.zeros((len(pts), nb, d))
    weights = np.zeros(len(pts))
    for pi, pidx in enumerate(pts):
        x = np.array([gp[k] for k in pidx])
        weights[pi] = np.prod([gw[k] for k in pidx])
        for i, nu in enumerate(corners):
            for a in range(d):
                val = 2 * nu[a] - 1.0
                for b in range(d):
                    if b != a:
                        val *= nu[b] * x[b] + (1 - nu[b]) * (1 - x[b])
                grads[pi, i, a] = val

    G = np.einsum("p,pia,pjb->abij", weights, grads, grads)
    avg_grad = np.array(
        [[(2 * nu[a] - 1.0) / 2 ** (d - 1) for a in range(d)] for nu in corners]
    )
    return tuple(corners), G, avg_grad


class CubeOperator:
    """Assembled energy form on one cube of a coefficient field.

    Provides the stiffness matrix K with K[w, w] = sum over cells of
    int grad w . a_cell grad w, together with the quadratures needed for
    energies, mean gradients and mean fluxes.
    """

    def __init__(self, field: CoefficientField, cube: TriadicCube):
        if not field.cube.contains(cube):
            raise ParameterError(f"cube {cube} not inside field cube {field.cube}")
        d = field.dimension
        side = cube.side
        self.field = field
        self.cube = cube
        self.dimension = d
        self.side = side
        self.n_nodes = (side + 1) ** d
        self.volume = float(cube.volume)

        corners, G, avg_grad = _reference_grad_integrals(d)
        self._avg_grad = avg_grad

        cells = field.cells_in(cube).reshape(-1, d, d)  # C-order over coords
        self.cell_matrices = cells
        self.n_cells = cells.shape[0]

        # Global node index of each cell corner.
        cell_coords = np.stack(
            np.meshgrid(*[np.arange(side)] * d, indexing="ij"), axis=-1
        ).reshape(-1, d)
        strides = np.array([(side + 1) ** (d - 1 - a) for a in range(d)])
        corner_offsets = np.array(corners)  # (2^d, d)
        # (n_cells, 2^d)
        self.cell_nodes = (cell_coords[:, None, :] + corner_offsets[None, :, :]) @ strides
        self._cell_coords = cell_coords

        ke = np.einsum("cab,abij->cij", cells, G)  # per-cell element matrices
        nb = len(corners)
        rows = np.repeat(self.cell_nodes, nb, axis=1).ravel()
        cols = np.tile(self.cell_nodes, (1, nb)).ravel()
        self.stiffness = scipy.sparse.csr_array(
            (ke.ravel(), (rows, cols)), shape=(self.n_nodes, self.n_nodes)
        )

        node_coords = np.stack(
            np.meshgrid(*[np.arange(side + 1)] * d, indexing="ij"), axis=-1
        ).reshape(-1, d)
        self.node_coords = node_coords
        self.boundary_mask = np.any(
            (node_coords == 0) | (node_coords == side), axis=1
        )
        self.interior_idx = np.flatnonzero(~self.boundary_mask)
        self.boundary_idx = np.flatnonzero(self.boundary_mask)

    # -- quadratures -----------------------------------------------------

    def energy(self, w: np.ndarray) -> float:
        """Volume-normalized energy (1/|cube|) int 1/2 grad w . a grad w."""
        return float(0.5 * w @ (self.stiffness @ w) / self.volume)

    def cell_gradients(self, w: np.ndarray) -> np.ndarray:
        """Per-cell average gradient, shape (n_cells, d); exact for Q1."""
        return w[self.cell_nodes] @ self._avg_grad

    def cell_fluxes(self, w: np.ndarray) -> np.ndarray:
        grads = self.cell_gradients(w)
        return np.einsum("cab,cb->ca", self.cell_matrices, grads)

    def mean_gradient(self, w: np.ndarray) -> np.ndarray:
        return self.cell_gradients(w).sum(axis=0) / self.volume

    def mean_flux(self, w: np.ndarray) -> np.ndarray:
        return self.cell_fluxes(w).sum(axis=0) / self.volume

    def affine(self, p: np.ndarray) -> np.ndarray:
        """Nodal values of l_p(x) = p . x in cube-local coordinates."""
        return self.node_coords @ np.asarray(p, dtype=float)

    def flux_load(self, q: np.ndarray) -> np.ndarray:
        """Load vector b_i = int q . grad phi_i over the cube."""
        q = np.asarray(q, dtype=float)
        per_corner = self._avg_grad @ q  # (2^d,)
        b = np.zeros(self.n_nodes)
        np.add.at(b, self.cell_nodes.ravel(), np.tile(per_corner, self.n_cells))
        return b

    def interior_residual(self, w: np.ndarray) -> float:
        """Relative residual of the harmonicity condition at interior nodes."""
        r = (self.stiffness @ w)[self.interior_idx]
        scale = np.abs(self.stiffness).max() * max(
            np.abs(w - w.mean()).max(), 1e-300
        )
        return float(np.linalg.norm(r) / (scale * max(len(r), 1) ** 0.5 + 1e-300))

    def require_harmonic(self, w: np.ndarray, tol: float = 1e-6) -> None:
        defect = self.interior_residual(w)
        if defect > tol:
            raise PreconditionError(
                f"function is not discrete a-harmonic (relative defect {defect:.3e})"
            )

    # -- linear solves ---------------------------------------------------

    def _solve_spd(self, A, b, settings: SolverSettings):
        """Solve the SPD system A x = b; returns (x, residual_norm)."""
        n = A.shape[0]
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return np.zeros(n), 0.0
        if n <= settings.direct_threshold:
            c, low = scipy.linalg.cho_factor(A.toarray(), check_finite=False)
            x = scipy.linalg.cho_solve((c, low), b, check_finite=False)
        else:
            diag = A.diagonal()
            M = scipy.sparse.linalg.LinearOperator(
                (n, n), matvec=lambda v: v / diag
            )
            x, info = scipy.sparse.linalg.cg(
                A,
                b,
                rtol=settings.tolerance,
                atol=0.0,
                maxiter=settings.max_iter_factor * n,
                M=M,
            )
            if info != 0:
                res = np.linalg.norm(A @ x - b) / bnorm
                raise ConvergenceError(
                    f"PCG failed to converge (info={info}, residual {res:.3e})",
                    residual=res,
                )
        res = float(np.linalg.norm(A @ x - b) / bnorm)
        return x, res

    def solve_dirichlet_data(self, boundary_values: np.ndarray,
                             settings: SolverSettings = DEFAULT_SETTINGS) -> BlockSolution:
        """Energy minimizer among nodal functions with the given boundary values."""
        w = np.zeros(self.n_nodes)
        w[self.boundary_idx] = boundary_values
        ii = self.interior_idx
        if len(ii) > 0:
            K = self.stiffness
            b = -(K @ w)[ii]
            Kii = K[ii, :][:, ii]
            x, res = self._solve_spd(scipy.sparse.csr_array(Kii), b, settings)
            w[ii] = x
        else:
            res = 0.0
        return BlockSolution(
            values=w,
            energy=self.energy(w),
            mean_gradient=self.mean_gradient(w),
            mean_flux=self.mean_flux(w),
            residual=res,
        )

    def solve_dirichlet(self, p, settings: SolverSettings = DEFAULT_SETTINGS) -> BlockSolution:
        """Minimizer of the block energy over l_p + (zero boundary values)."""
        data = self.affine(p)[self.boundary_idx]
        return self.solve_dirichlet_data(data, settings)

    def solve_neumann(self, q, settings: SolverSettings = DEFAULT_SETTINGS) -> BlockSolution:
        """Maximizer of (1/|cube|) int (q . grad w - 1/2 grad w . a grad w),
        gauge-fixed to zero mean.  The attained maximum is energy(w)."""
        b = self.flux_load(q)
        K = self.stiffness
        n = self.n_nodes
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            w = np.zeros(n)
            res = 0.0
        elif n - 1 <= settings.direct_threshold:
            # Pin node 0; b sums to zero so the reduced system is consistent.
            Kred = scipy.sparse.csr_array(K[1:, :][:, 1:])
            x, _ = self._solve_spd(Kred, b[1:], settings)
            w = np.concatenate(([0.0], x))
            w -= w.mean()
            res = float(np.linalg.norm(K @ w - b) / bnorm)
        else:
            diag = K.diagonal()
            M = scipy.sparse.linalg.LinearOperator((n, n), matvec=lambda v: v / diag)
            w, info = scipy.sparse.linalg.cg(
                K, b, rtol=settings.tolerance, atol=0.0,
                maxiter=settings.max_iter_factor * n, M=M,
            )
            res = float(np.linalg.norm(K @ w - b) / bnorm)
            if info != 0:
                raise ConvergenceError(
                    f"PCG failed to converge on Neumann system (info={info}, "
                    f"residual {res:.3e})",
                    residual=res,
                )
            w = w - w.mean()
        return BlockSolution(
            values=w,
            energy=self.energy(w),
            mean_gradient=self.mean_gradient(w),
            mean_flux=self.mean_flux(w),
            residual=res,
        )


def operator(field: CoefficientField, cube: TriadicCube) -> CubeOperator:
    """Memoized CubeOperator for (field, cube)."""
    key = ("operator", cube.level, cube.offset)
    op = field._cache.get(key)
    if op is None:
        op = CubeOperator(field, cube)
        field._cache[key] = op
    return op


def assemble_stiffness(field: CoefficientField, cube: TriadicCube):
    return operator(field, cube).stiffness


def solve_dirichlet(field, cube, p, settings=DEFAULT_SETTINGS) -> BlockSolution:
    return operator(field, cube).solve_dirichlet(p, settings)


def solve_neumann(field, cube, q, settings=DEFAULT_SETTINGS) -> BlockSolution:
    return operator(field, cube).solve_neumann(q, settings)


def solve_v(field, cube, p, q, settings=DEFAULT_SETTINGS) -> BlockSolution:
    """The combined maximizer: Dirichlet part with affine data l_{-p} plus the
    Neumann part with flux q.  Its volume-normalized energy equals J(cube, p, q)
    up to solver tolerance."""
    op = operator(field, cube)
    p = np.asarray(p, dtype=float)
    wd = op.solve_dirichlet(-p, settings)
    wn = op.solve_neumann(q, settings)
    w = wd.values + wn.values
    return BlockSolution(
        values=w,
        energy=op.energy(w),
        mean_gradient=op.mean_gradient(w),
        mean_flux=op.mean_flux(w),
        residual=max(wd.residual, wn.residual),
    )


def harmonic_pool(field, cube, count, seed, settings=DEFAULT_SETTINGS,
                  scale=1.0) -> list[np.ndarray]:
    """Seeded pool of discrete a-harmonic functions from random boundary data."""
    op = operator(field, cube)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    pool = []
    for _ in range(count):
        data = scale * rng.standard_normal(len(op.boundary_idx))
        pool.append(op.solve_dirichlet_data(data, settings).values)
    return pool
