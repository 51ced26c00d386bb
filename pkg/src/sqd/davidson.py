"""Davidson iteration for the lowest eigenpair of a symmetric operator.

The solver works on flat vectors through a user-supplied ``apply`` callable
and a diagonal preconditioner; a thin wrapper runs it over a CI product
subspace and packages the result as a :class:`CIVector`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .chem import ContractViolation, MolecularIntegrals
from .hamiltonian import (
    CIVector,
    HamiltonianTables,
    SubspaceBasis,
    apply_hamiltonian,
    diagonal_elements,
)

PRECONDITIONER_FLOOR = 1e-8


@dataclass
class DavidsonReport:
    """Outcome of one Davidson solve."""

    energy: float
    eigenvector: object
    residual_norm: float
    iterations: int
    converged: bool
    termination_reason: str
    wall_time_s: float

    def to_json_dict(self) -> dict:
        return {
            "energy": self.energy,
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "termination_reason": self.termination_reason,
            "wall_time_s": self.wall_time_s,
        }


def _orthonormalize_against(v: np.ndarray, basis_vectors: list[np.ndarray]) -> np.ndarray | None:
    """Modified Gram-Schmidt with one re-orthogonalization pass.

    Returns None when the vector is numerically inside the current span.
    """
    original = np.linalg.norm(v)
    if original == 0.0:
        return None
    for _ in range(2):
        for u in basis_vectors:
            v = v - np.dot(u, v) * u
        norm = np.linalg.norm(v)
        if norm > original / np.sqrt(2.0):
            break
        original = max(norm, np.finfo(float).tiny)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return None
    return v / norm


def davidson(
    apply: Callable[[np.ndarray], np.ndarray],
    diag: np.ndarray,
    v0: np.ndarray,
    *,
    tol: float = 1e-3,
    max_iter: int = 10,
    wall_clock_limit: float | None = None,
    guess: np.ndarray | None = None,
) -> DavidsonReport:
    """Lowest eigenpair by Rayleigh-Ritz over an expanding trial space.

    The search space starts from ``v0`` together with the unit vector on the
    smallest diagonal entry (so an exact-but-excited starting vector cannot
    trap the iteration) and, when given, a ``guess`` vector.  Termination:
    residual 2-norm below ``tol``, ``max_iter`` Rayleigh-Ritz passes, or the
    wall-clock budget, whichever happens first.
    """
    started = time.perf_counter()
    diag = np.asarray(diag, dtype=float).ravel()
    n = diag.size
    v0 = np.asarray(v0, dtype=float).ravel()
    if v0.shape != (n,):
        raise ContractViolation(f"v0 has size {v0.size}, expected {n}")
    if np.linalg.norm(v0) == 0.0:
        raise ContractViolation("starting vector is zero")

    max_space = max(2 * max_iter, 25)
    vectors: list[np.ndarray] = [v0 / np.linalg.norm(v0)]
    seed_unit = np.zeros(n)
    seed_unit[int(np.argmin(diag))] = 1.0
    for candidate in ([seed_unit] if n > 1 else []) + (
        [np.asarray(guess, dtype=float).ravel()] if guess is not None else []
    ):
        extra = _orthonormalize_against(candidate.copy(), vectors)
        if extra is not None:
            vectors.append(extra)
    images = [apply(v) for v in vectors]

    theta = float("inf")
    ritz = vectors[0]
    residual = np.zeros(n)
    residual_norm = float("inf")
    iterations = 0
    reason = "max_iterations"

    while True:
        iterations += 1
        v_mat = np.column_stack(vectors)
        w_mat = np.column_stack(images)
        t_mat = v_mat.T @ w_mat
        t_mat = (t_mat + t_mat.T) / 2
        evals, evecs = np.linalg.eigh(t_mat)
        theta = float(evals[0])
        ritz = v_mat @ evecs[:, 0]
        residual = w_mat @ evecs[:, 0] - theta * ritz
        residual_norm = float(np.linalg.norm(residual))

        if residual_norm < tol:
            reason = "residual"
            break
        if iterations >= max_iter:
            reason = "max_iterations"
            break
        if wall_clock_limit is not None and time.perf_counter() - started > wall_clock_limit:
            reason = "wall_clock"
            break

        denom = diag - theta
        small = np.abs(denom) < PRECONDITIONER_FLOOR
        denom[small] = np.where(denom[small] >= 0, PRECONDITIONER_FLOOR, -PRECONDITIONER_FLOOR)
        direction = residual / denom

        if len(vectors) >= max_space:
            vectors = [ritz / np.linalg.norm(ritz)]
            images = [apply(vectors[0])]

        new_vec = _orthonormalize_against(direction, vectors)
        if new_vec is None:
            new_vec = _orthonormalize_against(residual.copy(), vectors)
        if new_vec is None:
            # Deterministic fallback: cycle through unit vectors.
            for k in range(n):
                probe = np.zeros(n)
                probe[(int(np.argmin(diag)) + iterations + k) % n] = 1.0
                new_vec = _orthonormalize_against(probe, vectors)
                if new_vec is not None:
                    break
        if new_vec is None:
            # Trial space spans everything representable; accept the Ritz pair.
            reason = "residual" if residual_norm < tol else "max_iterations"
            break
        vectors.append(new_vec)
        images.append(apply(new_vec))

    return DavidsonReport(
        energy=theta,
        eigenvector=ritz,
        residual_norm=residual_norm,
        iterations=iterations,
        converged=residual_norm < tol,
        termination_reason=reason,
        wall_time_s=time.perf_counter() - started,
    )


def lowest_diagonal_start(basis: SubspaceBasis, ints: MolecularIntegrals) -> CIVector:
    """Unit vector on the basis element with the smallest diagonal element.

    Ties resolve to the first element in row-major (alpha, beta) index order.
    """
    diag = diagonal_elements(basis, ints)
    amps = np.zeros_like(diag)
    flat = int(np.argmin(diag))
    amps[np.unravel_index(flat, diag.shape)] = 1.0
    return CIVector(amps, basis)


def project_guess(guess: CIVector, basis: SubspaceBasis) -> np.ndarray | None:
    """Carry a prior eigenvector onto a new basis via the common subspace.

    Amplitudes on half-configuration pairs present in both bases transfer;
    everything else is dropped.  Returns None when the overlap is empty.
    """
    old = guess.basis
    rows_new = np.searchsorted(basis.alpha_list, old.alpha_list)
    rows_ok = (rows_new < basis.dim_alpha) & (
        basis.alpha_list[np.minimum(rows_new, basis.dim_alpha - 1)] == old.alpha_list
    )
    cols_new = np.searchsorted(basis.beta_list, old.beta_list)
    cols_ok = (cols_new < basis.dim_beta) & (
        basis.beta_list[np.minimum(cols_new, basis.dim_beta - 1)] == old.beta_list
    )
    if not rows_ok.any() or not cols_ok.any():
        return None
    out = np.zeros((basis.dim_alpha, basis.dim_beta))
    out[np.ix_(rows_new[rows_ok], cols_new[cols_ok])] = guess.amplitudes[
        np.ix_(rows_ok, cols_ok)
    ]
    if np.linalg.norm(out) < 1e-14:
        return None
    return out.ravel()


def solve_subspace(
    tables: HamiltonianTables,
    *,
    v0: CIVector | None = None,
    guess: CIVector | None = None,
    tol: float = 1e-3,
    max_iter: int = 10,
    wall_clock_limit: float | None = None,
    apply_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> DavidsonReport:
    """Run Davidson on a CI product subspace.

    ``v0`` defaults to the lowest-diagonal configuration; ``guess`` may live
    on a different basis (warm start), in which case only its components on
    the common subspace are used.  ``apply_fn`` substitutes the serial
    matrix-vector product (e.g. with a distributed one); it must act on flat
    vectors of the subspace dimension.
    """
    basis = tables.basis
    shape = (basis.dim_alpha, basis.dim_beta)

    if apply_fn is None:
        def apply_fn(flat: np.ndarray) -> np.ndarray:
            vec = CIVector(flat.reshape(shape), basis)
            return apply_hamiltonian(vec, tables).amplitudes.ravel()

    start = v0 if v0 is not None else lowest_diagonal_start(basis, tables.ints)
    if not start.basis.same_as(basis):
        raise ContractViolation("v0 lives on a different basis")
    guess_flat = project_guess(guess, basis) if guess is not None else None

    report = davidson(
        apply_fn,
        tables.diag.ravel(),
        start.amplitudes.ravel(),
        tol=tol,
        max_iter=max_iter,
        wall_clock_limit=wall_clock_limit,
        guess=guess_flat,
    )
    vec = CIVector(report.eigenvector.reshape(shape), basis)
    norm = vec.norm()
    if norm > 0:
        vec = CIVector(vec.amplitudes / norm, basis)
    report.eigenvector = vec
    return report
