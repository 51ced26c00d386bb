"""Outer optimizers: orbital-rotation optimization and differential evolution.

Orbital rotations dress the subspace wavefunction: for fixed CI amplitudes the
energy is a function of the antisymmetric generator kappa through the rotated
integrals, minimized by L-BFGS with an analytic gradient (reduced density
matrices contracted with the integral derivative, chained through the Frechet
derivative of the matrix exponential).  Differential evolution proposes new
circuit parameters with the best/2/bin strategy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm, expm_frechet

from .chem import ContractViolation, MolecularIntegrals
from .hamiltonian import (
    CIVector,
    SubspaceBasis,
    build_excitation_tables,
    build_hamiltonian_tables,
    closure_halves,
    expectation_value,
)

ORTHOGONALITY_TOL = 1e-8


@dataclass(frozen=True)
class OrbitalRotation:
    """Antisymmetric generator kappa and its orthogonal exponential."""

    kappa: np.ndarray
    phi: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        kappa = np.asarray(self.kappa, dtype=float)
        if np.max(np.abs(kappa + kappa.T), initial=0.0) > 1e-12:
            raise ContractViolation("kappa must be antisymmetric")
        phi = expm(kappa) if self.phi is None else np.asarray(self.phi, dtype=float)
        n = kappa.shape[0]
        if np.max(np.abs(phi.T @ phi - np.eye(n)), initial=0.0) > 1e-10:
            raise ContractViolation("rotation matrix is not orthogonal")
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "phi", phi)

    @staticmethod
    def identity(n_orb: int) -> "OrbitalRotation":
        return OrbitalRotation(np.zeros((n_orb, n_orb)))

    @staticmethod
    def from_vector(theta: np.ndarray, n_orb: int) -> "OrbitalRotation":
        """Strict-upper-triangle parameters to a full antisymmetric kappa."""
        kappa = np.zeros((n_orb, n_orb))
        iu = np.triu_indices(n_orb, k=1)
        kappa[iu] = np.asarray(theta, dtype=float)
        kappa -= kappa.T
        return OrbitalRotation(kappa)

    def to_vector(self) -> np.ndarray:
        iu = np.triu_indices(self.kappa.shape[0], k=1)
        return self.kappa[iu].copy()


def transform_integrals(
    ints: MolecularIntegrals, rot: OrbitalRotation
) -> MolecularIntegrals:
    """Rotate the integrals: h' = Phi^T h Phi and the four-index analogue.

    The result is re-symmetrized over the 8-fold permutations to absorb
    floating-point noise; unitary invariance of the spectrum is preserved.
    """
    n = ints.n_orb
    phi = rot.phi
    if phi.shape != (n, n):
        raise ContractViolation("rotation dimension does not match the integrals")
    if np.max(np.abs(phi.T @ phi - np.eye(n))) > ORTHOGONALITY_TOL:
        raise ContractViolation("rotation matrix is not orthogonal")
    h_rot = phi.T @ ints.h @ phi
    eri_rot = np.einsum(
        "acbd,ap,cr,bq,ds->prqs", ints.eri, phi, phi, phi, phi, optimize=True
    )
    h_rot = (h_rot + h_rot.T) / 2
    eri_rot = (eri_rot + eri_rot.transpose(1, 0, 2, 3)) / 2
    eri_rot = (eri_rot + eri_rot.transpose(0, 1, 3, 2)) / 2
    eri_rot = (eri_rot + eri_rot.transpose(2, 3, 0, 1)) / 2
    return MolecularIntegrals(n, ints.core_energy, h_rot, eri_rot)


# ---------------------------------------------------------------------------
# Reduced density matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReducedDensityMatrices:
    """Spin-summed one-body gamma and two-body e_prqs in chemists' ordering,
    normalized so that E = core + sum(h * gamma) + eri . e / 2."""

    gamma: np.ndarray
    gamma2: np.ndarray


def _excitation_fields(psi_big: np.ndarray, half_list, occ, table, axis: int, n: int):
    """u[(q, s)] = E_qs acting on one sector, stacked as (n*n, dim) rows."""
    da, db = psi_big.shape
    u = np.zeros((n * n, da, db))
    # Diagonal q == s: number operator.
    for q in range(n):
        if axis == 0:
            u[q * n + q] += occ[:, q][:, None] * psi_big
        else:
            u[q * n + q] += occ[:, q][None, :] * psi_big
    for e in range(len(table)):
        code = int(table.to_orb[e]) * n + int(table.from_orb[e])
        s, t, sg = int(table.src[e]), int(table.tgt[e]), float(table.sign[e])
        if axis == 0:
            u[code, t, :] += sg * psi_big[s, :]
        else:
            u[code, :, t] += sg * psi_big[:, s]
    return u.reshape(n * n, -1)


def compute_rdms(psi: CIVector) -> ReducedDensityMatrices:
    """One- and two-body RDMs of a normalized CI vector.

    Intermediate states are taken in the one-move closure of each half list,
    so the RDMs are those of the true full-space state, not a subspace
    projection.
    """
    norm = psi.norm()
    if norm == 0.0:
        raise ContractViolation("RDMs of a zero vector are undefined")
    spec = psi.basis.spec
    n = spec.n_orb
    big_a = closure_halves(psi.basis.alpha_list, n, moves=1)
    big_b = closure_halves(psi.basis.beta_list, n, moves=1)
    psi_big = np.zeros((big_a.size, big_b.size))
    rows = np.searchsorted(big_a, psi.basis.alpha_list)
    cols = np.searchsorted(big_b, psi.basis.beta_list)
    psi_big[np.ix_(rows, cols)] = psi.amplitudes / norm

    occ_a = ((big_a[:, None] >> np.arange(n)[None, :]) & 1).astype(float)
    occ_b = ((big_b[:, None] >> np.arange(n)[None, :]) & 1).astype(float)
    table_a = build_excitation_tables(big_a, n)
    table_b = build_excitation_tables(big_b, n)

    u = _excitation_fields(psi_big, big_a, occ_a, table_a, 0, n)
    u += _excitation_fields(psi_big, big_b, occ_b, table_b, 1, n)

    gamma = (u @ psi_big.ravel()).reshape(n, n)
    # <E_pr E_qs> = <E_rp psi | E_qs psi>
    big_gamma = (u @ u.T).reshape(n, n, n, n).transpose(1, 0, 2, 3)
    delta = np.eye(n)
    gamma2 = big_gamma - np.einsum("qr,ps->prqs", delta, gamma)
    return ReducedDensityMatrices(gamma=gamma, gamma2=gamma2)


def energy_from_rdms(
    rdms: ReducedDensityMatrices, ints: MolecularIntegrals
) -> float:
    return float(
        ints.core_energy
        + np.sum(ints.h * rdms.gamma)
        + 0.5 * np.sum(ints.eri * rdms.gamma2)
    )


def rayleigh_energy(
    psi: CIVector, ints: MolecularIntegrals, rot: OrbitalRotation
) -> float:
    """<psi|H'(kappa)|psi> / <psi|psi> through the rotated integrals."""
    rotated = transform_integrals(ints, rot)
    tables = build_hamiltonian_tables(psi.basis, rotated)
    norm2 = float(np.sum(psi.amplitudes**2))
    if norm2 == 0.0:
        raise ContractViolation("Rayleigh quotient of a zero vector is undefined")
    return expectation_value(psi, tables) / norm2


# ---------------------------------------------------------------------------
# Orbital gradient
# ---------------------------------------------------------------------------


def _denergy_dphi(
    rdms: ReducedDensityMatrices, ints: MolecularIntegrals, phi: np.ndarray
) -> np.ndarray:
    """Derivative of the rotated-integral energy with respect to Phi."""
    gamma, e2 = rdms.gamma, rdms.gamma2
    g = ints.eri
    out = ints.h @ phi @ gamma.T + ints.h.T @ phi @ gamma
    out += 0.5 * np.einsum("xcbd,cr,bq,ds,yrqs->xy", g, phi, phi, phi, e2, optimize=True)
    out += 0.5 * np.einsum("axbd,ap,bq,ds,pyqs->xy", g, phi, phi, phi, e2, optimize=True)
    out += 0.5 * np.einsum("acxd,ap,cr,ds,prys->xy", g, phi, phi, phi, e2, optimize=True)
    out += 0.5 * np.einsum("acbx,ap,cr,bq,prqy->xy", g, phi, phi, phi, e2, optimize=True)
    return out


def kappa_gradient(
    psi: CIVector,
    ints: MolecularIntegrals,
    rot: OrbitalRotation,
    *,
    rdms: ReducedDensityMatrices | None = None,
) -> np.ndarray:
    """Analytic gradient of the Rayleigh energy with respect to kappa.

    Entry (i, j), i < j, is the derivative along the generator direction
    E_ij - E_ji; the returned matrix is antisymmetric.  The chain rule runs
    through the Frechet derivative of expm, whose adjoint is the Frechet
    derivative at the transposed argument.
    """
    if rdms is None:
        rdms = compute_rdms(psi)
    a = _denergy_dphi(rdms, ints, rot.phi)
    g_kappa = expm_frechet(rot.kappa.T, a, compute_expm=False)
    return g_kappa - g_kappa.T


# ---------------------------------------------------------------------------
# L-BFGS with Armijo backtracking
# ---------------------------------------------------------------------------


@dataclass
class LbfgsResult:
    x: np.ndarray
    value: float
    gradient_norm: float
    iterations: int
    converged: bool
    message: str


def lbfgs_minimize(
    fun_grad,
    x0: np.ndarray,
    *,
    max_iter: int = 1000,
    memory: int = 10,
    tol_grad: float = 1e-6,
) -> LbfgsResult:
    """Limited-memory BFGS with two-loop recursion and Armijo backtracking.

    The objective is non-increasing along accepted steps; on line-search
    failure the best iterate found so far is returned with a diagnostic.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun_grad(x)
    best_x, best_f = x.copy(), f
    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    iterations = 0
    message = "converged"

    while True:
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol_grad:
            message = "converged"
            break
        if iterations >= max_iter:
            message = "max_iterations"
            break

        # Two-loop recursion.
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(s_list), reversed(y_list)):
            rho = 1.0 / np.dot(y, s)
            a = rho * np.dot(s, q)
            alphas.append((a, rho))
            q -= a * y
        if y_list:
            y_last, s_last = y_list[-1], s_list[-1]
            q *= np.dot(s_last, y_last) / np.dot(y_last, y_last)
        for (a, rho), s, y in zip(reversed(alphas), s_list, y_list):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        direction = -q
        slope = float(np.dot(g, direction))
        if slope >= 0:
            direction = -g
            slope = -gnorm**2

        step = 1.0
        accepted = False
        while step >= 1e-12:
            x_new = x + step * direction
            f_new, g_new = fun_grad(x_new)
            if f_new <= f + 1e-4 * step * slope:
                accepted = True
                break
            # Backtrack to the minimizer of the quadratic model along the ray
            # (exact for quadratic objectives), clamped to a sane window.
            denom = f_new - f - slope * step
            trial = -0.5 * slope * step * step / denom if denom > 0 else 0.5 * step
            step = min(max(trial, 0.1 * step), 0.9 * step)
        if not accepted:
            message = "line_search_failure"
            break
        # One secant refinement toward the 1-D stationary point; keeps the
        # Armijo guarantee and recovers exact line minimization on quadratics.
        slope_new = float(np.dot(g_new, direction))
        if slope != slope_new and np.isfinite(slope_new):
            alpha_star = step * slope / (slope - slope_new)
            if np.isfinite(alpha_star) and alpha_star > 0 and abs(alpha_star - step) > 1e-14 * step:
                x_ref = x + alpha_star * direction
                f_ref, g_ref = fun_grad(x_ref)
                if f_ref < f_new and f_ref <= f + 1e-4 * alpha_star * slope:
                    step, x_new, f_new, g_new = alpha_star, x_ref, f_ref, g_ref

        s_vec = x_new - x
        y_vec = g_new - g
        if np.dot(s_vec, y_vec) > 1e-12 * np.linalg.norm(s_vec) * max(
            np.linalg.norm(y_vec), 1e-300
        ):
            s_list.append(s_vec)
            y_list.append(y_vec)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
        x, f, g = x_new, f_new, g_new
        if f < best_f:
            best_x, best_f = x.copy(), f
        iterations += 1

    if f < best_f:
        best_x, best_f = x.copy(), f
    return LbfgsResult(
        x=best_x,
        value=best_f,
        gradient_norm=float(np.linalg.norm(g)),
        iterations=iterations,
        converged=message == "converged",
        message=message,
    )


def optimize_orbitals(
    psi: CIVector,
    ints: MolecularIntegrals,
    *,
    kappa0: OrbitalRotation | None = None,
    max_iter: int = 1000,
    tol_grad: float = 1e-6,
) -> tuple[OrbitalRotation, float, LbfgsResult]:
    """Minimize the fixed-psi Rayleigh energy over kappa with L-BFGS.

    The RDMs of psi are computed once; every objective evaluation is then a
    pure integral transformation, so the value agrees with
    :func:`rayleigh_energy` at every kappa.
    """
    n = ints.n_orb
    rdms = compute_rdms(psi)
    start = kappa0 if kappa0 is not None else OrbitalRotation.identity(n)

    def fun_grad(theta: np.ndarray):
        rot = OrbitalRotation.from_vector(theta, n)
        rotated = transform_integrals(ints, rot)
        value = energy_from_rdms(rdms, rotated)
        grad_matrix = kappa_gradient(psi, ints, rot, rdms=rdms)
        iu = np.triu_indices(n, k=1)
        return value, grad_matrix[iu]

    result = lbfgs_minimize(
        fun_grad, start.to_vector(), max_iter=max_iter, tol_grad=tol_grad
    )
    rot = OrbitalRotation.from_vector(result.x, n)
    return rot, result.value, result


# ---------------------------------------------------------------------------
# Differential evolution, best/2/bin
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DEConfig:
    """Hyperparameters of the two-population differential evolution."""

    walkers_per_population: int = 4
    mutation_factor: float = 0.25
    crossover_rate: float = 0.7
    strategy: str = "best/2/bin"
    index_mode: str = "replacement"
    populations: int = 2

    def __post_init__(self) -> None:
        if self.mutation_factor < 0:
            raise ContractViolation("mutation factor must be nonnegative")
        if not 0.0 <= self.crossover_rate <= 1.0:
            raise ContractViolation("crossover rate must lie in [0, 1]")
        if self.index_mode not in ("replacement", "strict"):
            raise ContractViolation(f"unknown index mode {self.index_mode!r}")


def de_step(
    population: list[np.ndarray],
    energies: list[float],
    config: DEConfig,
    seed,
    *,
    bounds: tuple[float, float] | None = None,
) -> list[np.ndarray]:
    """One best/2/bin trial per walker.

    Mutant: x_best + F (x_r1 - x_r2) + F (x_r3 - x_r4); binomial crossover at
    the configured rate with one forced mutant coordinate.  With the default
    index mode the four donors are drawn uniformly with replacement excluding
    the target walker (small populations cannot supply four distinct donors);
    ``strict`` draws distinct donors and needs at least five walkers.
    """
    size = len(population)
    if size == 0:
        raise ContractViolation("empty population")
    if size == 1:
        return [population[0].copy()]
    rng = np.random.default_rng(seed)
    best = population[int(np.argmin(energies))]
    dim = best.size
    trials = []
    for i, target in enumerate(population):
        others = [j for j in range(size) if j != i]
        if config.index_mode == "strict":
            if len(others) < 4:
                raise ContractViolation(
                    "strict index mode needs at least 5 walkers per population"
                )
            donors = rng.choice(others, size=4, replace=False)
        else:
            donors = rng.choice(others, size=4, replace=True)
        r1, r2, r3, r4 = (population[int(j)] for j in donors)
        mutant = best + config.mutation_factor * (r1 - r2) + config.mutation_factor * (r3 - r4)
        if bounds is not None:
            mutant = np.clip(mutant, bounds[0], bounds[1])
        forced = int(rng.integers(dim))
        take = rng.random(dim) < config.crossover_rate
        take[forced] = True
        trials.append(np.where(take, mutant, target))
    return trials
