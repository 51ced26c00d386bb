"""Projected Hamiltonian action on an alpha x beta product subspace.

The subspace is the tensor product of a sorted list of alpha half-configurations
and a sorted list of beta half-configurations.  Matrix elements follow the
Slater-Condon rules; the matrix-vector product is organized as

    diagonal + pure-alpha singles/doubles + pure-beta singles/doubles
    + mixed alpha-beta (one single excitation in each sector)

so that every contribution factorizes over the product structure and the
intermediate arrays stay dense.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .chem import (
    CapacityError,
    Configuration,
    ContractViolation,
    MolecularIntegrals,
    SystemSpec,
    occupied_orbitals,
    popcount,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Basis and vector containers
# ---------------------------------------------------------------------------


def _as_sorted_halves(values, n_elec: int, n_orb: int, label: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64)
    if arr.ndim != 1:
        raise ContractViolation(f"{label} list must be one-dimensional")
    if arr.size == 0:
        raise ContractViolation(f"{label} list is empty")
    if np.any(arr[1:] <= arr[:-1]):
        raise ContractViolation(f"{label} list must be sorted ascending, unique")
    for bits in arr:
        if int(bits).bit_count() != n_elec:
            raise ContractViolation(
                f"{label} half {int(bits):#x} has popcount "
                f"{int(bits).bit_count()}, expected {n_elec}"
            )
        if int(bits) >> n_orb:
            raise ContractViolation(f"{label} half {int(bits):#x} exceeds {n_orb} bits")
    return arr


@dataclass(frozen=True)
class SubspaceBasis:
    """Product basis: sorted unique alpha and beta half-configuration lists."""

    alpha_list: np.ndarray
    beta_list: np.ndarray
    spec: SystemSpec
    spin_symmetric: bool = False

    def __post_init__(self) -> None:
        alpha = _as_sorted_halves(self.alpha_list, self.spec.n_alpha, self.spec.n_orb, "alpha")
        beta = _as_sorted_halves(self.beta_list, self.spec.n_beta, self.spec.n_orb, "beta")
        if self.spin_symmetric and not np.array_equal(alpha, beta):
            raise ContractViolation("spin-symmetric basis requires alpha_list == beta_list")
        object.__setattr__(self, "alpha_list", alpha)
        object.__setattr__(self, "beta_list", beta)

    @property
    def dim_alpha(self) -> int:
        return int(self.alpha_list.size)

    @property
    def dim_beta(self) -> int:
        return int(self.beta_list.size)

    @property
    def dimension(self) -> int:
        return self.dim_alpha * self.dim_beta

    def same_as(self, other: "SubspaceBasis") -> bool:
        return (
            self.spec == other.spec
            and np.array_equal(self.alpha_list, other.alpha_list)
            and np.array_equal(self.beta_list, other.beta_list)
        )

    def index_of(self, conf: Configuration) -> tuple[int, int]:
        ia = int(np.searchsorted(self.alpha_list, conf.alpha))
        ib = int(np.searchsorted(self.beta_list, conf.beta))
        if (
            ia >= self.dim_alpha
            or ib >= self.dim_beta
            or self.alpha_list[ia] != conf.alpha
            or self.beta_list[ib] != conf.beta
        ):
            raise KeyError(f"configuration {conf} not in basis")
        return ia, ib


@dataclass
class CIVector:
    """Dense amplitude matrix over a product basis (rows alpha, columns beta)."""

    amplitudes: np.ndarray
    basis: SubspaceBasis

    def __post_init__(self) -> None:
        amps = np.asarray(self.amplitudes, dtype=float)
        expected = (self.basis.dim_alpha, self.basis.dim_beta)
        if amps.shape != expected:
            raise ContractViolation(f"amplitudes shape {amps.shape}, expected {expected}")
        if not np.all(np.isfinite(amps)):
            raise ContractViolation("amplitudes contain non-finite entries")
        self.amplitudes = amps

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "CIVector":
        n = self.norm()
        if n == 0.0:
            raise ContractViolation("cannot normalize a zero vector")
        return CIVector(self.amplitudes / n, self.basis)


# ---------------------------------------------------------------------------
# Fermionic sign bookkeeping within one spin sector
# ---------------------------------------------------------------------------


def single_move_parity(bits: int, from_orb: int, to_orb: int) -> int:
    """Sign of moving one electron from_orb -> to_orb within a half-string.

    Equals (-1) raised to the number of occupied orbitals strictly between
    the two endpoints.
    """
    lo, hi = (from_orb, to_orb) if from_orb < to_orb else (to_orb, from_orb)
    between = (bits >> (lo + 1)) & ((1 << (hi - lo - 1)) - 1) if hi - lo > 1 else 0
    return -1 if popcount(between) & 1 else 1


def _double_move_amplitude(bits: int, r_first: int, p_first: int, r_second: int, p_second: int) -> int:
    """Sign of applying moves (r_first -> p_first) then (r_second -> p_second)."""
    s1 = single_move_parity(bits, r_first, p_first)
    mid = (bits ^ (1 << r_first)) | (1 << p_first)
    s2 = single_move_parity(mid, r_second, p_second)
    return s1 * s2


# ---------------------------------------------------------------------------
# Slater-Condon matrix elements
# ---------------------------------------------------------------------------


def _single_element_static(
    bits_src: int, p: int, r: int, ints: MolecularIntegrals
) -> float:
    """Same-sector part of a single-excitation element, excluding the sign.

    h_pr plus Coulomb-minus-exchange with the electrons of this sector
    (excluding the one that moves).
    """
    value = ints.h[p, r]
    for q in occupied_orbitals(bits_src):
        if q != r:
            value += ints.eri[p, r, q, q] - ints.eri[p, q, q, r]
    return value


def _cross_coulomb(p: int, r: int, other_bits: int, ints: MolecularIntegrals) -> float:
    return float(sum(ints.eri[p, r, j, j] for j in occupied_orbitals(other_bits)))


def slater_condon_element(
    x: Configuration, y: Configuration, ints: MolecularIntegrals
) -> float:
    """Hamiltonian matrix element <x|H|y> between two determinants.

    Zero when the determinants differ by more than two spin-orbital
    excitations; the diagonal includes the core energy.
    """
    if popcount(x.alpha) != popcount(y.alpha) or popcount(x.beta) != popcount(y.beta):
        raise ContractViolation("configurations have mismatched particle numbers")
    diff_a = popcount(x.alpha ^ y.alpha) // 2
    diff_b = popcount(x.beta ^ y.beta) // 2
    degree = diff_a + diff_b
    if degree > 2:
        return 0.0

    if degree == 0:
        return _diagonal_element(x, ints)

    if degree == 1:
        if diff_a == 1:
            src, tgt, other = y.alpha, x.alpha, y.beta
        else:
            src, tgt, other = y.beta, x.beta, y.alpha
        r = (src & ~tgt).bit_length() - 1
        p = (tgt & ~src).bit_length() - 1
        sign = single_move_parity(src, r, p)
        return sign * (
            _single_element_static(src, p, r, ints) + _cross_coulomb(p, r, other, ints)
        )

    if diff_a == 1 and diff_b == 1:
        ra = (y.alpha & ~x.alpha).bit_length() - 1
        pa = (x.alpha & ~y.alpha).bit_length() - 1
        rb = (y.beta & ~x.beta).bit_length() - 1
        pb = (x.beta & ~y.beta).bit_length() - 1
        sign = single_move_parity(y.alpha, ra, pa) * single_move_parity(y.beta, rb, pb)
        return sign * ints.eri[pa, ra, pb, rb]

    # Same-sector double excitation.
    if diff_a == 2:
        src, tgt = y.alpha, x.alpha
    else:
        src, tgt = y.beta, x.beta
    removed = occupied_orbitals(src & ~tgt)
    added = occupied_orbitals(tgt & ~src)
    r1, r2 = removed
    p1, p2 = added
    gamma_direct = _double_move_amplitude(src, r2, p2, r1, p1)
    gamma_exchange = _double_move_amplitude(src, r1, p2, r2, p1)
    return gamma_direct * ints.eri[p1, r1, p2, r2] + gamma_exchange * ints.eri[p1, r2, p2, r1]


def _diagonal_element(x: Configuration, ints: MolecularIntegrals) -> float:
    occ_a = occupied_orbitals(x.alpha)
    occ_b = occupied_orbitals(x.beta)
    value = ints.core_energy
    for occ in (occ_a, occ_b):
        for p in occ:
            value += ints.h[p, p]
        for p in occ:
            for q in occ:
                value += 0.5 * (ints.eri[p, p, q, q] - ints.eri[p, q, q, p])
    for p in occ_a:
        for q in occ_b:
            value += ints.eri[p, p, q, q]
    return float(value)


# ---------------------------------------------------------------------------
# Excitation tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExcitationTable:
    """Single excitations internal to one half-configuration list.

    Parallel arrays sorted by (src, tgt); ``sign`` is the fermionic parity of
    moving one electron ``from_orb -> to_orb`` within the half-string.
    """

    src: np.ndarray
    tgt: np.ndarray
    to_orb: np.ndarray
    from_orb: np.ndarray
    sign: np.ndarray

    def __len__(self) -> int:
        return int(self.src.size)


def build_excitation_tables(half_list: np.ndarray, n_orb: int) -> ExcitationTable:
    """Enumerate all in-list single excitations, ordered by (src, tgt)."""
    half_list = np.asarray(half_list, dtype=np.int64)
    src, tgt, to_orb, from_orb, sign = [], [], [], [], []
    for i, bits in enumerate(half_list):
        bits = int(bits)
        occupied = occupied_orbitals(bits)
        empty = [p for p in range(n_orb) if not bits >> p & 1]
        for r in occupied:
            for p in empty:
                target = (bits ^ (1 << r)) | (1 << p)
                j = int(np.searchsorted(half_list, target))
                if j < half_list.size and half_list[j] == target:
                    src.append(i)
                    tgt.append(j)
                    to_orb.append(p)
                    from_orb.append(r)
                    sign.append(single_move_parity(bits, r, p))
    order = np.lexsort((tgt, src)) if src else np.array([], dtype=np.intp)
    table = ExcitationTable(
        src=np.asarray(src, dtype=np.int32)[order],
        tgt=np.asarray(tgt, dtype=np.int32)[order],
        to_orb=np.asarray(to_orb, dtype=np.int32)[order],
        from_orb=np.asarray(from_orb, dtype=np.int32)[order],
        sign=np.asarray(sign, dtype=np.int8)[order],
    )
    return table


def _build_doubles(half_list: np.ndarray, n_orb: int, ints: MolecularIntegrals):
    """In-list same-sector double excitations with their full matrix elements."""
    half_list = np.asarray(half_list, dtype=np.int64)
    src, tgt, val = [], [], []
    for i, bits in enumerate(half_list):
        bits = int(bits)
        occupied = occupied_orbitals(bits)
        empty = [p for p in range(n_orb) if not bits >> p & 1]
        for a in range(len(occupied)):
            for b in range(a + 1, len(occupied)):
                r1, r2 = occupied[a], occupied[b]
                for c in range(len(empty)):
                    for d in range(c + 1, len(empty)):
                        p1, p2 = empty[c], empty[d]
                        target = (bits ^ (1 << r1) ^ (1 << r2)) | (1 << p1) | (1 << p2)
                        j = int(np.searchsorted(half_list, target))
                        if j >= half_list.size or half_list[j] != target:
                            continue
                        g_dir = _double_move_amplitude(bits, r2, p2, r1, p1)
                        g_exc = _double_move_amplitude(bits, r1, p2, r2, p1)
                        element = (
                            g_dir * ints.eri[p1, r1, p2, r2]
                            + g_exc * ints.eri[p1, r2, p2, r1]
                        )
                        src.append(i)
                        tgt.append(j)
                        val.append(element)
    return (
        np.asarray(src, dtype=np.int32),
        np.asarray(tgt, dtype=np.int32),
        np.asarray(val, dtype=float),
    )


def _occupancy_matrix(half_list: np.ndarray, n_orb: int) -> np.ndarray:
    """0/1 matrix, row per half-configuration, column per orbital."""
    return ((half_list[:, None] >> np.arange(n_orb)[None, :]) & 1).astype(float)


@dataclass(frozen=True)
class HamiltonianTables:
    """Everything precomputed for fast repeated application of H on a basis."""

    basis: SubspaceBasis
    ints: MolecularIntegrals
    alpha_singles: ExcitationTable
    beta_singles: ExcitationTable
    alpha_doubles: tuple
    beta_doubles: tuple
    diag: np.ndarray
    occ_alpha: np.ndarray
    occ_beta: np.ndarray
    # Static single coefficients (sign folded in) and cross-Coulomb tensors.
    alpha_single_static: np.ndarray = field(repr=False, default=None)
    beta_single_static: np.ndarray = field(repr=False, default=None)
    cross_coulomb_beta: np.ndarray = field(repr=False, default=None)
    cross_coulomb_alpha: np.ndarray = field(repr=False, default=None)
    # Mixed-term machinery: compact (p, r) pair indexing and an ERI submatrix.
    alpha_pair_codes: np.ndarray = field(repr=False, default=None)
    beta_pair_codes: np.ndarray = field(repr=False, default=None)
    alpha_single_pair: np.ndarray = field(repr=False, default=None)
    beta_single_pair: np.ndarray = field(repr=False, default=None)
    eri_pair_block: np.ndarray = field(repr=False, default=None)
    # Work size per source alpha half (singles + doubles fan-out).
    alpha_task_sizes: np.ndarray = field(repr=False, default=None)


def diagonal_elements(basis: SubspaceBasis, ints: MolecularIntegrals) -> np.ndarray:
    """Diagonal of the projected Hamiltonian as a (D_alpha, D_beta) matrix."""
    n = ints.n_orb
    occ_a = _occupancy_matrix(basis.alpha_list, n)
    occ_b = _occupancy_matrix(basis.beta_list, n)
    coul = np.einsum("ppqq->pq", ints.eri)
    exch = np.einsum("pqqp->pq", ints.eri)
    h_diag = np.diag(ints.h)

    def sector(occ: np.ndarray) -> np.ndarray:
        one = occ @ h_diag
        two = 0.5 * (np.einsum("ap,pq,aq->a", occ, coul, occ) - np.einsum("ap,pq,aq->a", occ, exch, occ))
        return one + two

    d_alpha = sector(occ_a)
    d_beta = sector(occ_b)
    cross = occ_a @ coul @ occ_b.T
    return ints.core_energy + d_alpha[:, None] + d_beta[None, :] + cross


def build_hamiltonian_tables(
    basis: SubspaceBasis, ints: MolecularIntegrals
) -> HamiltonianTables:
    """Precompute excitation tables and coupling tensors for a basis."""
    if ints.n_orb != basis.spec.n_orb:
        raise ContractViolation("integrals and basis disagree on n_orb")
    n = ints.n_orb
    alpha_singles = build_excitation_tables(basis.alpha_list, n)
    if basis.spin_symmetric:
        beta_singles = alpha_singles
        alpha_doubles = beta_doubles = _build_doubles(basis.alpha_list, n, ints)
    else:
        beta_singles = build_excitation_tables(basis.beta_list, n)
        alpha_doubles = _build_doubles(basis.alpha_list, n, ints)
        beta_doubles = _build_doubles(basis.beta_list, n, ints)

    occ_alpha = _occupancy_matrix(basis.alpha_list, n)
    occ_beta = _occupancy_matrix(basis.beta_list, n)

    def static_coeffs(table: ExcitationTable, half_list: np.ndarray) -> np.ndarray:
        out = np.empty(len(table))
        for e in range(len(table)):
            bits = int(half_list[table.src[e]])
            out[e] = table.sign[e] * _single_element_static(
                bits, int(table.to_orb[e]), int(table.from_orb[e]), ints
            )
        return out

    alpha_static = static_coeffs(alpha_singles, basis.alpha_list)
    beta_static = (
        alpha_static if basis.spin_symmetric
        else static_coeffs(beta_singles, basis.beta_list)
    )

    # cross_coulomb_beta[p, r, b] = sum_j (pr|jj) occ_beta[b, j], used by
    # alpha singles; the alpha tensor mirrors it for beta singles.
    jcoul = np.einsum("prjj->prj", ints.eri)
    cross_beta = np.tensordot(jcoul, occ_beta, axes=([2], [1]))
    cross_alpha = (
        cross_beta if basis.spin_symmetric
        else np.tensordot(jcoul, occ_alpha, axes=([2], [1]))
    )

    def pair_codes(table: ExcitationTable) -> tuple[np.ndarray, np.ndarray]:
        codes = table.to_orb.astype(np.int64) * n + table.from_orb.astype(np.int64)
        unique, inverse = np.unique(codes, return_inverse=True)
        return unique, inverse.astype(np.int32)

    a_codes, a_pair = pair_codes(alpha_singles)
    b_codes, b_pair = (a_codes, a_pair) if basis.spin_symmetric else pair_codes(beta_singles)
    eri_flat = ints.eri.reshape(n * n, n * n)
    eri_block = eri_flat[np.ix_(a_codes, b_codes)]

    sizes = np.bincount(alpha_singles.src, minlength=basis.dim_alpha)
    sizes = sizes + np.bincount(alpha_doubles[0], minlength=basis.dim_alpha)

    return HamiltonianTables(
        basis=basis,
        ints=ints,
        alpha_singles=alpha_singles,
        beta_singles=beta_singles,
        alpha_doubles=alpha_doubles,
        beta_doubles=beta_doubles,
        diag=diagonal_elements(basis, ints),
        occ_alpha=occ_alpha,
        occ_beta=occ_beta,
        alpha_single_static=alpha_static,
        beta_single_static=beta_static,
        cross_coulomb_beta=cross_beta,
        cross_coulomb_alpha=cross_alpha,
        alpha_pair_codes=a_codes,
        beta_pair_codes=b_codes,
        alpha_single_pair=a_pair,
        beta_single_pair=b_pair,
        eri_pair_block=eri_block,
        alpha_task_sizes=sizes.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# Matrix-vector product
# ---------------------------------------------------------------------------

_MIXED_CHUNK_ENTRIES = 4_000_000  # floats of mixed-term intermediate per chunk


def apply_hamiltonian_block(
    tables: HamiltonianTables,
    amps: np.ndarray,
    out: np.ndarray,
    *,
    src_rows: tuple[int, int],
    src_cols: tuple[int, int],
    tgt_rows: tuple[int, int],
    tgt_cols: tuple[int, int],
    alpha_source_mask: np.ndarray | None = None,
) -> None:
    """Accumulate the contribution of one source block into one target block.

    ``amps`` is the slice of the input vector covering alpha rows
    ``src_rows`` and beta columns ``src_cols`` (global index ranges);
    ``out`` covers ``tgt_rows`` x ``tgt_cols`` and is accumulated in place.
    ``alpha_source_mask``, when given, selects which global alpha halves this
    worker is responsible for (task splitting); rows outside it are skipped
    for the row-local terms and alpha excitations outside it are skipped.
    """
    a0s, a1s = src_rows
    b0s, b1s = src_cols
    a0t, a1t = tgt_rows
    b0t, b1t = tgt_cols

    def owned(indices: np.ndarray) -> np.ndarray:
        if alpha_source_mask is None:
            return np.ones(indices.shape, dtype=bool)
        return alpha_source_mask[indices]

    # Diagonal and pure-beta terms read rows unchanged: they contribute only
    # where the source and target alpha ranges overlap (and likewise the
    # diagonal for beta columns).
    row_lo, row_hi = max(a0s, a0t), min(a1s, a1t)
    if row_lo < row_hi:
        rows = np.arange(row_lo, row_hi)
        rows = rows[owned(rows)]
        if rows.size:
            col_lo, col_hi = max(b0s, b0t), min(b1s, b1t)
            if col_lo < col_hi:
                out[rows - a0t, col_lo - b0t : col_hi - b0t] += (
                    tables.diag[rows][:, col_lo:col_hi]
                    * amps[rows - a0s, col_lo - b0s : col_hi - b0s]
                )
            bt = tables.beta_singles
            keep = (bt.src >= b0s) & (bt.src < b1s) & (bt.tgt >= b0t) & (bt.tgt < b1t)
            cross = tables.cross_coulomb_alpha
            for e in np.nonzero(keep)[0]:
                sb, tb = int(bt.src[e]), int(bt.tgt[e])
                coeff = tables.beta_single_static[e] + bt.sign[e] * cross[
                    int(bt.to_orb[e]), int(bt.from_orb[e]), rows
                ]
                out[rows - a0t, tb - b0t] += coeff * amps[rows - a0s, sb - b0s]
            d_src, d_tgt, d_val = tables.beta_doubles
            keep = (d_src >= b0s) & (d_src < b1s) & (d_tgt >= b0t) & (d_tgt < b1t)
            for e in np.nonzero(keep)[0]:
                out[rows - a0t, int(d_tgt[e]) - b0t] += d_val[e] * amps[
                    rows - a0s, int(d_src[e]) - b0s
                ]

    # Pure-alpha terms keep the beta column: they require the source and
    # target beta ranges to overlap.
    col_lo, col_hi = max(b0s, b0t), min(b1s, b1t)
    if col_lo < col_hi:
        cols_src = slice(col_lo - b0s, col_hi - b0s)
        cols_tgt = slice(col_lo - b0t, col_hi - b0t)
        occ_cols = np.arange(col_lo, col_hi)
        at = tables.alpha_singles
        keep = (
            (at.src >= a0s) & (at.src < a1s) & (at.tgt >= a0t) & (at.tgt < a1t)
            & owned(at.src)
        )
        cross = tables.cross_coulomb_beta
        for e in np.nonzero(keep)[0]:
            sa, ta = int(at.src[e]), int(at.tgt[e])
            coeff = tables.alpha_single_static[e] + at.sign[e] * cross[
                int(at.to_orb[e]), int(at.from_orb[e]), occ_cols
            ]
            out[ta - a0t, cols_tgt] += coeff * amps[sa - a0s, cols_src]
        d_src, d_tgt, d_val = tables.alpha_doubles
        keep = (
            (d_src >= a0s) & (d_src < a1s) & (d_tgt >= a0t) & (d_tgt < a1t)
            & owned(d_src)
        )
        for e in np.nonzero(keep)[0]:
            out[int(d_tgt[e]) - a0t, cols_tgt] += d_val[e] * amps[
                int(d_src[e]) - a0s, cols_src
            ]

    # Mixed term: one single in each sector.
    _apply_mixed(
        tables, amps, out,
        src_rows=src_rows, src_cols=src_cols,
        tgt_rows=tgt_rows, tgt_cols=tgt_cols,
        alpha_source_mask=alpha_source_mask,
    )


def _apply_mixed(
    tables: HamiltonianTables,
    amps: np.ndarray,
    out: np.ndarray,
    *,
    src_rows, src_cols, tgt_rows, tgt_cols,
    alpha_source_mask,
) -> None:
    a0s, a1s = src_rows
    b0s, b1s = src_cols
    a0t, a1t = tgt_rows
    b0t, b1t = tgt_cols

    at, bt = tables.alpha_singles, tables.beta_singles
    keep_a = (at.src >= a0s) & (at.src < a1s) & (at.tgt >= a0t) & (at.tgt < a1t)
    if alpha_source_mask is not None:
        keep_a &= alpha_source_mask[at.src]
    keep_b = (bt.src >= b0s) & (bt.src < b1s) & (bt.tgt >= b0t) & (bt.tgt < b1t)
    idx_a = np.nonzero(keep_a)[0]
    idx_b = np.nonzero(keep_b)[0]
    if idx_a.size == 0 or idx_b.size == 0:
        return

    n_pairs_b = tables.beta_pair_codes.size
    n_cols_tgt = b1t - b0t
    # Only alpha sources that actually excite matter for the gather stage.
    a_sources = np.unique(at.src[idx_a])
    chunk = max(1, _MIXED_CHUNK_ENTRIES // max(1, n_pairs_b * n_cols_tgt))
    b_src = bt.src[idx_b] - b0s
    b_tgt = bt.tgt[idx_b] - b0t
    b_pair = tables.beta_single_pair[idx_b]
    b_sign = bt.sign[idx_b].astype(float)

    for start in range(0, a_sources.size, chunk):
        src_chunk = a_sources[start : start + chunk]
        local = {int(a): i for i, a in enumerate(src_chunk)}
        # gathered[(q,s) pair, local alpha row, target beta column]
        gathered = np.zeros((n_pairs_b, src_chunk.size, n_cols_tgt))
        rows = amps[src_chunk - a0s]
        for e in range(b_pair.size):
            gathered[b_pair[e], :, b_tgt[e]] += b_sign[e] * rows[:, b_src[e]]
        mixed = np.tensordot(
            tables.eri_pair_block, gathered.reshape(n_pairs_b, -1), axes=([1], [0])
        ).reshape(tables.alpha_pair_codes.size, src_chunk.size, n_cols_tgt)
        sel = idx_a[np.isin(at.src[idx_a], src_chunk)]
        for e in sel:
            sa = local[int(at.src[e])]
            out[int(at.tgt[e]) - a0t] += (
                float(at.sign[e]) * mixed[tables.alpha_single_pair[e], sa]
            )


def apply_hamiltonian(psi: CIVector, tables: HamiltonianTables) -> CIVector:
    """Projected Hamiltonian action, exact w.r.t. the Slater-Condon matrix."""
    if not psi.basis.same_as(tables.basis):
        raise ContractViolation("CI vector and tables refer to different bases")
    da, db = psi.basis.dim_alpha, psi.basis.dim_beta
    out = np.zeros((da, db))
    apply_hamiltonian_block(
        tables, psi.amplitudes, out,
        src_rows=(0, da), src_cols=(0, db),
        tgt_rows=(0, da), tgt_cols=(0, db),
    )
    return CIVector(out, psi.basis)


def expectation_value(psi: CIVector, tables: HamiltonianTables) -> float:
    sigma = apply_hamiltonian(psi, tables)
    return float(np.sum(psi.amplitudes * sigma.amplitudes))


# ---------------------------------------------------------------------------
# Energy variance via unprojected application
# ---------------------------------------------------------------------------


def closure_halves(half_list: np.ndarray, n_orb: int, moves: int = 2) -> np.ndarray:
    """All half-configurations reachable by at most ``moves`` single moves."""
    current = {int(b) for b in half_list}
    frontier = set(current)
    for _ in range(moves):
        new = set()
        for bits in frontier:
            occupied = occupied_orbitals(bits)
            empty = [p for p in range(n_orb) if not bits >> p & 1]
            for r in occupied:
                for p in empty:
                    new.add((bits ^ (1 << r)) | (1 << p))
        frontier = new - current
        current |= new
    return np.asarray(sorted(current), dtype=np.int64)


def energy_variance(
    psi: CIVector, ints: MolecularIntegrals, *, cap: int = 4_000_000
) -> float:
    """<H^2> - <H>^2 with H applied in the full determinant space.

    The support of H|psi> is enclosed in the product of the two-move closures
    of the alpha and beta lists, so the application there is exact (not a
    subspace projection).  Raises :class:`CapacityError` when that enclosing
    product exceeds ``cap`` basis states.
    """
    norm = psi.norm()
    if norm == 0.0:
        raise ContractViolation("variance of a zero vector is undefined")
    if abs(norm - 1.0) > 1e-12:
        log.info("energy_variance: normalizing input (norm was %.12g)", norm)
    spec = psi.basis.spec
    big_alpha = closure_halves(psi.basis.alpha_list, spec.n_orb, moves=2)
    big_beta = closure_halves(psi.basis.beta_list, spec.n_orb, moves=2)
    if big_alpha.size * big_beta.size > cap:
        raise CapacityError(
            f"connected space {big_alpha.size} x {big_beta.size} exceeds cap {cap}"
        )
    big_basis = SubspaceBasis(big_alpha, big_beta, spec)
    embedded = np.zeros((big_alpha.size, big_beta.size))
    rows = np.searchsorted(big_alpha, psi.basis.alpha_list)
    cols = np.searchsorted(big_beta, psi.basis.beta_list)
    embedded[np.ix_(rows, cols)] = psi.amplitudes / norm
    tables = build_hamiltonian_tables(big_basis, ints)
    h_psi = apply_hamiltonian(CIVector(embedded, big_basis), tables)
    energy = float(np.sum(embedded * h_psi.amplitudes))
    return float(np.sum(h_psi.amplitudes**2) - energy**2)
