"""Classical pre-processing between sampling and diagonalization.

Configuration recovery repairs particle-number-breaking bit flips guided by
average orbital occupancies; subsampling draws the working set; the subspace
builder assembles the half-configuration lists (always injecting the
Hartree-Fock half) and the carryover selector retains the top-weighted halves
of the previous wavefunction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chem import (
    Configuration,
    ContractViolation,
    SystemSpec,
    hf_half,
    occupied_orbitals,
    popcount,
)
from .hamiltonian import CIVector, SubspaceBasis
from .sampler import SampleBatch

RECOVERY_FLOOR = 1e-6


@dataclass(frozen=True)
class OccupancyVector:
    """Average orbital occupancies, shape (n_orb, 2), columns (alpha, beta)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != 2:
            raise ContractViolation(f"occupancies must be (n_orb, 2), got {values.shape}")
        if np.any(values < -1e-9) or np.any(values > 1 + 1e-9):
            raise ContractViolation("occupancies outside [0, 1]")
        object.__setattr__(self, "values", np.clip(values, 0.0, 1.0))

    @property
    def n_orb(self) -> int:
        return int(self.values.shape[0])


def hf_indicator_occupancies(spec: SystemSpec) -> OccupancyVector:
    """Fallback occupancies: 1 on the aufbau orbitals, 0 elsewhere."""
    values = np.zeros((spec.n_orb, 2))
    values[: spec.n_alpha, 0] = 1.0
    values[: spec.n_beta, 1] = 1.0
    return OccupancyVector(values)


def read_occupancies(path) -> OccupancyVector:
    """One line per spatial orbital: alpha and beta occupancy."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            a, b = line.split()
            rows.append((float(a), float(b)))
    return OccupancyVector(np.asarray(rows))


def write_occupancies(occ: OccupancyVector, path) -> None:
    with open(path, "w") as fh:
        for a, b in occ.values:
            fh.write(f"{float(a)!r} {float(b)!r}\n")


@dataclass(frozen=True)
class CarryoverSet:
    """Top-weighted half-configurations kept for the next subspace.

    ``alpha`` and ``beta`` are tuples of (bits, weight), sorted by descending
    weight with ties on the smaller bitmask.  In spin-symmetric runs the two
    tuples coincide.
    """

    alpha: tuple
    beta: tuple
    iteration: int = 0

    @staticmethod
    def empty() -> "CarryoverSet":
        return CarryoverSet((), (), 0)

    def alpha_bits(self) -> list[int]:
        return [bits for bits, _ in self.alpha]

    def beta_bits(self) -> list[int]:
        return [bits for bits, _ in self.beta]


def write_carryover(carry: CarryoverSet, path, n_orb: int) -> None:
    from .chem import half_to_string

    with open(path, "w") as fh:
        fh.write(f"# iteration {carry.iteration}\n")
        for bits, weight in carry.alpha:
            fh.write(f"{half_to_string(bits, n_orb)} {weight!r}\n")
        fh.write("# beta\n")
        for bits, weight in carry.beta:
            fh.write(f"{half_to_string(bits, n_orb)} {weight!r}\n")


def read_carryover(path) -> CarryoverSet:
    from .chem import half_from_string

    sections: list[list] = [[]]
    iteration = 0
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# iteration"):
                iteration = int(line.split()[-1])
            elif line.startswith("# beta"):
                sections.append([])
            elif line and not line.startswith("#"):
                bits, weight = line.split()
                sections[-1].append((half_from_string(bits), float(weight)))
    alpha = tuple(sections[0])
    beta = tuple(sections[1]) if len(sections) > 1 and sections[1] else alpha
    return CarryoverSet(alpha, beta, iteration)


# ---------------------------------------------------------------------------
# Configuration recovery
# ---------------------------------------------------------------------------


def _repair_half(bits: int, target: int, occ: np.ndarray, n_orb: int, rng) -> int:
    """Flip bits until the popcount matches, guided by occupancies.

    Excess electrons leave occupied orbitals with probability proportional to
    (1 - n_p) + floor; deficits fill empty orbitals proportionally to
    n_p + floor.
    """
    count = popcount(bits)
    while count > target:
        occupied = occupied_orbitals(bits)
        weights = (1.0 - occ[occupied]) + RECOVERY_FLOOR
        choice = occupied[rng.choice(len(occupied), p=weights / weights.sum())]
        bits ^= 1 << choice
        count -= 1
    while count < target:
        empty = [p for p in range(n_orb) if not bits >> p & 1]
        weights = occ[empty] + RECOVERY_FLOOR
        choice = empty[rng.choice(len(empty), p=weights / weights.sum())]
        bits |= 1 << choice
        count += 1
    return bits


def recover_configurations(
    noisy: SampleBatch, occ: OccupancyVector, spec: SystemSpec, seed
) -> SampleBatch:
    """Probabilistically restore exact per-sector particle numbers.

    Configurations that already satisfy the electron counts pass through
    unchanged; every other copy is repaired independently, one spin sector at
    a time.
    """
    if occ.n_orb != spec.n_orb:
        raise ContractViolation("occupancy dimension does not match the system")
    rng = np.random.default_rng(seed)
    occ_a = occ.values[:, 0]
    occ_b = occ.values[:, 1]
    out: dict = {}

    def add(conf: Configuration, count: int) -> None:
        out[conf] = out.get(conf, 0) + count

    for conf, count in sorted(noisy.counts.items()):
        ok_a = popcount(conf.alpha) == spec.n_alpha
        ok_b = popcount(conf.beta) == spec.n_beta
        if ok_a and ok_b:
            add(conf, count)
            continue
        for _ in range(count):
            alpha = conf.alpha if ok_a else _repair_half(
                conf.alpha, spec.n_alpha, occ_a, spec.n_orb, rng
            )
            beta = conf.beta if ok_b else _repair_half(
                conf.beta, spec.n_beta, occ_b, spec.n_orb, rng
            )
            add(Configuration(alpha, beta), 1)
    return SampleBatch(out, noisy.shots, "recovered", noisy.started_at, noisy.ended_at)


def subsample(batch: SampleBatch, d: int, seed) -> list[Configuration]:
    """Draw ``d`` configurations with replacement, proportional to counts."""
    if d <= 0:
        raise ContractViolation(f"subsample size must be positive, got {d}")
    if not batch.counts:
        raise ContractViolation("cannot subsample an empty batch")
    confs = sorted(batch.counts)
    weights = np.asarray([batch.counts[c] for c in confs], dtype=float)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(confs), size=d, replace=True, p=weights / weights.sum())
    return [confs[i] for i in picks]


def build_subspace(
    selected: list[Configuration],
    carryover: CarryoverSet,
    spec: SystemSpec,
    *,
    spin_symmetric: bool = True,
) -> SubspaceBasis:
    """Half-configuration lists from samples, carryover and the HF half.

    Spin-symmetric mode pools alpha and beta halves into one shared list
    (requires equal electron counts); the asymmetric mode keeps the sectors
    separate.
    """
    for conf in selected:
        if popcount(conf.alpha) != spec.n_alpha or popcount(conf.beta) != spec.n_beta:
            raise ContractViolation(f"selected configuration {conf} has wrong popcounts")
    if spin_symmetric:
        if spec.n_alpha != spec.n_beta:
            raise ContractViolation("spin-symmetric subspace needs n_alpha == n_beta")
        halves = {conf.alpha for conf in selected}
        halves |= {conf.beta for conf in selected}
        halves.update(carryover.alpha_bits())
        halves.update(carryover.beta_bits())
        halves.add(hf_half(spec.n_alpha))
        merged = np.asarray(sorted(halves), dtype=np.int64)
        return SubspaceBasis(merged, merged, spec, spin_symmetric=True)
    alpha = {conf.alpha for conf in selected}
    alpha.update(carryover.alpha_bits())
    alpha.add(hf_half(spec.n_alpha))
    beta = {conf.beta for conf in selected}
    beta.update(carryover.beta_bits())
    beta.add(hf_half(spec.n_beta))
    return SubspaceBasis(
        np.asarray(sorted(alpha), dtype=np.int64),
        np.asarray(sorted(beta), dtype=np.int64),
        spec,
    )


def update_occupancies(psi: CIVector) -> OccupancyVector:
    """Orbital occupancies of a CI vector: n_p = sum_x |psi_x|^2 x_p."""
    norm = psi.norm()
    if norm == 0.0:
        raise ContractViolation("occupancies of a zero vector are undefined")
    spec = psi.basis.spec
    n = spec.n_orb
    w = (psi.amplitudes / norm) ** 2
    occ_a = ((psi.basis.alpha_list[:, None] >> np.arange(n)[None, :]) & 1).astype(float)
    occ_b = ((psi.basis.beta_list[:, None] >> np.arange(n)[None, :]) & 1).astype(float)
    values = np.stack([w.sum(axis=1) @ occ_a, w.sum(axis=0) @ occ_b], axis=1)
    return OccupancyVector(values)


def select_carryover(psi: CIVector, c: float, *, iteration: int = 0) -> CarryoverSet:
    """Keep the ceil(c * D_h) halves with the largest weights r_b.

    Row weights rank the alpha halves, column weights the beta halves; ties
    break toward the smaller bitmask, and at least one half is always kept so
    the warm start never empties.
    """
    if not 0.0 <= c <= 1.0:
        raise ContractViolation(f"carryover ratio {c} outside [0, 1]")
    norm2 = float(np.sum(psi.amplitudes**2))
    if norm2 == 0.0:
        raise ContractViolation("carryover of a zero vector is undefined")

    def top(half_list: np.ndarray, weights: np.ndarray) -> tuple:
        keep = max(1, int(np.ceil(c * half_list.size)))
        order = np.lexsort((half_list, -weights))[:keep]
        return tuple((int(half_list[i]), float(weights[i])) for i in order)

    row_w = (psi.amplitudes**2).sum(axis=1) / norm2
    col_w = (psi.amplitudes**2).sum(axis=0) / norm2
    return CarryoverSet(
        alpha=top(psi.basis.alpha_list, row_w),
        beta=top(psi.basis.beta_list, col_w),
        iteration=iteration,
    )
