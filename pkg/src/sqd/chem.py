"""Electronic-structure data model: integrals, determinant bitstrings, FCIDUMP I/O.

Conventions used throughout the package:

* A half-configuration is an integer bitmask of width ``n_orb``; bit ``p``
  is the occupancy of spatial orbital ``p`` for one spin sector.
* A full configuration is an (alpha, beta) pair of half-configurations.
  For fermionic signs, a determinant is the product of creation operators
  in ascending orbital order, all alpha operators before all beta operators.
* Two-electron integrals are stored in chemists' notation: ``eri[p, r, q, s]``
  is (pr|qs), with the full 8-fold permutational symmetry materialized.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

SYMMETRY_TOL = 1e-12


class ContractViolation(ValueError):
    """An argument violates a documented precondition."""


class FcidumpError(ValueError):
    """An FCIDUMP file could not be parsed."""


class CapacityError(RuntimeError):
    """A computation would exceed the configured desk-scale capacity."""


class Configuration(NamedTuple):
    """Occupation bitstring of a Slater determinant, split by spin sector."""

    alpha: int
    beta: int


@dataclass(frozen=True)
class SystemSpec:
    """Active-space definition: orbital count and per-spin electron counts."""

    n_orb: int
    n_alpha: int
    n_beta: int

    def __post_init__(self) -> None:
        if self.n_orb < 0:
            raise ContractViolation(f"n_orb must be nonnegative, got {self.n_orb}")
        for name, n_e in (("n_alpha", self.n_alpha), ("n_beta", self.n_beta)):
            if not 0 <= n_e <= self.n_orb:
                raise ContractViolation(
                    f"{name}={n_e} outside [0, n_orb={self.n_orb}]"
                )


@dataclass(frozen=True)
class MolecularIntegrals:
    """One- and two-body integrals of an active-space Hamiltonian.

    Attributes
    ----------
    n_orb : int
        Number of spatial orbitals.
    core_energy : float
        Constant shift (nuclear repulsion plus any frozen-core energy), Hartree.
    h : ndarray, shape (n_orb, n_orb)
        Symmetric one-body integrals h_pr.
    eri : ndarray, shape (n_orb,) * 4
        Two-body integrals (pr|qs) in chemists' notation, 8-fold symmetric.
    """

    n_orb: int
    core_energy: float
    h: np.ndarray
    eri: np.ndarray

    def __post_init__(self) -> None:
        h = np.asarray(self.h, dtype=float)
        eri = np.asarray(self.eri, dtype=float)
        n = self.n_orb
        if h.shape != (n, n):
            raise ContractViolation(f"h has shape {h.shape}, expected {(n, n)}")
        if eri.shape != (n, n, n, n):
            raise ContractViolation(f"eri has shape {eri.shape}, expected {(n,) * 4}")
        if np.max(np.abs(h - h.T), initial=0.0) > SYMMETRY_TOL:
            raise ContractViolation("one-body integrals are not symmetric")
        for perm in ((1, 0, 2, 3), (0, 1, 3, 2), (2, 3, 0, 1)):
            if np.max(np.abs(eri - eri.transpose(perm)), initial=0.0) > SYMMETRY_TOL:
                raise ContractViolation(
                    f"two-body integrals violate permutation symmetry {perm}"
                )
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "eri", eri)


def popcount(bits: int) -> int:
    return bits.bit_count()


def occupied_orbitals(bits: int) -> list[int]:
    """Indices of set bits, ascending."""
    orbs = []
    p = 0
    while bits:
        if bits & 1:
            orbs.append(p)
        bits >>= 1
        p += 1
    return orbs


def half_to_string(bits: int, n_orb: int) -> str:
    """Render a half-configuration with orbital 0 leftmost."""
    return "".join("1" if bits >> p & 1 else "0" for p in range(n_orb))


def half_from_string(text: str) -> int:
    """Inverse of :func:`half_to_string`."""
    bits = 0
    for p, c in enumerate(text):
        if c == "1":
            bits |= 1 << p
        elif c != "0":
            raise ValueError(f"invalid bit character {c!r}")
    return bits


def configuration_to_string(conf: Configuration, n_orb: int) -> str:
    """Full bitstring, alpha half then beta half, orbital 0 leftmost in each."""
    return half_to_string(conf.alpha, n_orb) + half_to_string(conf.beta, n_orb)


def configuration_from_string(text: str) -> Configuration:
    if len(text) % 2 != 0:
        raise ValueError(f"configuration string has odd length {len(text)}")
    n = len(text) // 2
    return Configuration(half_from_string(text[:n]), half_from_string(text[n:]))


def hf_half(n_elec: int) -> int:
    """Aufbau half-configuration: the lowest ``n_elec`` orbitals occupied."""
    return (1 << n_elec) - 1


def hf_configuration(spec: SystemSpec) -> Configuration:
    """Hartree-Fock determinant for the given active space."""
    return Configuration(hf_half(spec.n_alpha), hf_half(spec.n_beta))


def hilbert_dimension(spec: SystemSpec) -> int:
    """Exact determinant count binom(n_orb, n_alpha) * binom(n_orb, n_beta).

    Returned as an exact Python integer; values such as 600805296**2 print
    without rounding.
    """
    return math.comb(spec.n_orb, spec.n_alpha) * math.comb(spec.n_orb, spec.n_beta)


def rank_half(bits: int, n_orb: int, n_elec: int) -> int:
    """Position of ``bits`` in the ascending-bitmask order of its stratum.

    The combinatorial-number-system rank: masks with ``n_elec`` set bits out
    of ``n_orb`` sorted by integer value map bijectively onto
    ``[0, binom(n_orb, n_elec))``.
    """
    if bits < 0 or bits >> n_orb:
        raise ContractViolation(f"bitmask {bits:#x} exceeds {n_orb} orbitals")
    if popcount(bits) != n_elec:
        raise ContractViolation(
            f"popcount {popcount(bits)} does not match electron count {n_elec}"
        )
    rank = 0
    for i, p in enumerate(occupied_orbitals(bits), start=1):
        rank += math.comb(p, i)
    return rank


def unrank_half(index: int, n_orb: int, n_elec: int) -> int:
    """Inverse of :func:`rank_half`."""
    total = math.comb(n_orb, n_elec)
    if not 0 <= index < total:
        raise ContractViolation(f"rank {index} outside [0, {total})")
    bits = 0
    remaining = index
    for i in range(n_elec, 0, -1):
        # Largest p with binom(p, i) <= remaining.
        p = i - 1
        while math.comb(p + 1, i) <= remaining:
            p += 1
        remaining -= math.comb(p, i)
        bits |= 1 << p
    return bits


def all_half_configurations(n_orb: int, n_elec: int) -> np.ndarray:
    """All bitmasks with ``n_elec`` of ``n_orb`` bits set, ascending, as int64."""
    out = np.empty(math.comb(n_orb, n_elec), dtype=np.int64)
    for i in range(out.size):
        out[i] = unrank_half(i, n_orb, n_elec)
    return out


_HEADER_KV = re.compile(r"([A-Za-z0-9_]+)\s*=\s*([-+0-9, ]+)")


def _canonical_eri_slots(p: int, r: int, q: int, s: int):
    """All index tuples related to (pr|qs) by the 8-fold symmetry."""
    return {
        (p, r, q, s), (r, p, q, s), (p, r, s, q), (r, p, s, q),
        (q, s, p, r), (s, q, p, r), (q, s, r, p), (s, q, r, p),
    }


def parse_fcidump(path) -> tuple[MolecularIntegrals, SystemSpec]:
    """Read a standard FCIDUMP file.

    The header must define NORB, NELEC and MS2.  Body lines are
    ``value i j k l`` with 1-based indices; ``i j 0 0`` rows are one-body
    integrals, the ``0 0 0 0`` row is the core energy, and all other rows
    are chemists'-notation (ij|kl) two-body integrals.  Symmetric completion
    is applied; duplicate entries that disagree by more than 1e-10 are
    rejected with the offending line number.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()

    header_text = []
    body_start = None
    for lineno, line in enumerate(lines):
        stripped = line.strip()
        header_text.append(stripped)
        if stripped.endswith(("&END", "$END", "/")):
            body_start = lineno + 1
            break
    if body_start is None:
        raise FcidumpError(f"{path}: header never terminated with &END or /")

    fields = dict()
    for key, value in _HEADER_KV.findall(" ".join(header_text)):
        fields[key.upper()] = value.split(",")[0].strip()
    try:
        n_orb = int(fields["NORB"])
        n_elec = int(fields["NELEC"])
        ms2 = int(fields.get("MS2", "0"))
    except KeyError as exc:
        raise FcidumpError(f"{path}: header is missing {exc.args[0]}") from None
    except ValueError as exc:
        raise FcidumpError(f"{path}: malformed header field: {exc}") from None
    if (n_elec + ms2) % 2 != 0:
        raise FcidumpError(f"{path}: NELEC={n_elec} and MS2={ms2} have odd sum")
    spec = SystemSpec(n_orb, (n_elec + ms2) // 2, (n_elec - ms2) // 2)

    h = np.zeros((n_orb, n_orb))
    eri = np.zeros((n_orb,) * 4)
    h_seen = np.zeros((n_orb, n_orb), dtype=bool)
    eri_seen = np.zeros((n_orb,) * 4, dtype=bool)
    core = 0.0

    for lineno in range(body_start, len(lines)):
        stripped = lines[lineno].strip()
        if not stripped:
            continue
        parts = stripped.split()
        if len(parts) != 5:
            raise FcidumpError(
                f"{path}:{lineno + 1}: expected 'value i j k l', got {stripped!r}"
            )
        try:
            value = float(parts[0].replace("D", "E").replace("d", "e"))
            i, j, k, l = (int(x) for x in parts[1:])
        except ValueError:
            raise FcidumpError(f"{path}:{lineno + 1}: malformed entry {stripped!r}")
        if not all(0 <= x <= n_orb for x in (i, j, k, l)):
            raise FcidumpError(
                f"{path}:{lineno + 1}: orbital index outside [1, {n_orb}]"
            )
        if i == j == k == l == 0:
            core = value
        elif k == 0 and l == 0:
            if i == 0 or j == 0:
                raise FcidumpError(f"{path}:{lineno + 1}: bad one-body indices")
            p, r = i - 1, j - 1
            for a, b in ((p, r), (r, p)):
                if h_seen[a, b] and abs(h[a, b] - value) > 1e-10:
                    raise FcidumpError(
                        f"{path}:{lineno + 1}: h[{a + 1},{b + 1}] rewritten with "
                        f"inconsistent value {value!r} (had {h[a, b]!r})"
                    )
                h[a, b] = value
                h_seen[a, b] = True
        elif 0 in (i, j, k, l):
            raise FcidumpError(f"{path}:{lineno + 1}: mixed zero/nonzero indices")
        else:
            slots = _canonical_eri_slots(i - 1, j - 1, k - 1, l - 1)
            for slot in slots:
                if eri_seen[slot] and abs(eri[slot] - value) > 1e-10:
                    raise FcidumpError(
                        f"{path}:{lineno + 1}: ({i} {j}|{k} {l}) rewritten with "
                        f"inconsistent value {value!r} (had {eri[slot]!r})"
                    )
            for slot in slots:
                eri[slot] = value
                eri_seen[slot] = True

    return MolecularIntegrals(n_orb, core, h, eri), spec


def write_fcidump(path, ints: MolecularIntegrals, spec: SystemSpec) -> None:
    """Write integrals in FCIDUMP form, one line per unique 8-fold slot."""
    n = ints.n_orb
    with open(path, "w") as fh:
        fh.write(
            f"&FCI NORB={n},NELEC={spec.n_alpha + spec.n_beta},"
            f"MS2={spec.n_alpha - spec.n_beta},\n"
        )
        fh.write("&END\n")
        for p in range(n):
            for r in range(p + 1):
                for q in range(p + 1):
                    s_max = r if q == p else q
                    for s in range(s_max + 1):
                        value = float(ints.eri[p, r, q, s])
                        if value != 0.0:
                            fh.write(
                                f"{value!r} {p + 1} {r + 1} {q + 1} {s + 1}\n"
                            )
        for p in range(n):
            for r in range(p + 1):
                if ints.h[p, r] != 0.0:
                    fh.write(f"{float(ints.h[p, r])!r} {p + 1} {r + 1} 0 0\n")
        fh.write(f"{float(ints.core_energy)!r} 0 0 0 0\n")
