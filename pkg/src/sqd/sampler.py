"""Simulated quantum sampler: LUCJ-style ansatz states over the determinant
basis, multinomial shot sampling, and a bit-flip noise channel.

The ansatz alternates orbital rotations exp(K) (K real antisymmetric, applied
per spin sector through a Givens decomposition acting directly on determinant
amplitudes with fermionic signs) and diagonal density-density phase layers
exp(i * sum_{p<=q} J_pq n_p n_q).  Particle number per sector is conserved
exactly; the noise channel is what breaks it.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .chem import (
    CapacityError,
    Configuration,
    ContractViolation,
    SystemSpec,
    all_half_configurations,
    configuration_from_string,
    configuration_to_string,
    hilbert_dimension,
    popcount,
)
from .hamiltonian import single_move_parity

DEFAULT_STATE_CAP = 4_000_000
ANTISYMMETRY_TOL = 1e-12


class SamplerCancelled(RuntimeError):
    """An in-flight sampler job was cancelled."""


@dataclass(frozen=True)
class LucjParameters:
    """Per-layer orbital-rotation generators K and pair couplings J."""

    kernels: tuple
    couplings: tuple

    def __post_init__(self) -> None:
        kernels = tuple(np.asarray(k, dtype=float) for k in self.kernels)
        couplings = tuple(np.asarray(j, dtype=float) for j in self.couplings)
        if len(kernels) != len(couplings):
            raise ContractViolation("kernels and couplings must pair per layer")
        for k in kernels:
            if np.max(np.abs(k + k.T), initial=0.0) > ANTISYMMETRY_TOL:
                raise ContractViolation("orbital-rotation generator is not antisymmetric")
        for j in couplings:
            if np.max(np.abs(j - j.T), initial=0.0) > ANTISYMMETRY_TOL:
                raise ContractViolation("pair coupling is not symmetric")
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "couplings", couplings)

    @property
    def layers(self) -> int:
        return len(self.kernels)

    @property
    def n_orb(self) -> int:
        return 0 if not self.kernels else self.kernels[0].shape[0]


def _triangle_sizes(n_orb: int) -> tuple[int, int]:
    return n_orb * (n_orb - 1) // 2, n_orb * (n_orb + 1) // 2


def params_to_vector(params: LucjParameters) -> np.ndarray:
    """Flatten to the DE parameter vector: per layer, strict upper triangle of
    K then the upper triangle (with diagonal) of J."""
    n = params.n_orb
    iu_k = np.triu_indices(n, k=1)
    iu_j = np.triu_indices(n, k=0)
    parts = []
    for k, j in zip(params.kernels, params.couplings):
        parts.append(k[iu_k])
        parts.append(j[iu_j])
    return np.concatenate(parts) if parts else np.zeros(0)


def vector_to_params(vector: np.ndarray, n_orb: int, layers: int) -> LucjParameters:
    nk, nj = _triangle_sizes(n_orb)
    vector = np.asarray(vector, dtype=float)
    if vector.size != layers * (nk + nj):
        raise ContractViolation(
            f"parameter vector has {vector.size} entries, expected {layers * (nk + nj)}"
        )
    iu_k = np.triu_indices(n_orb, k=1)
    iu_j = np.triu_indices(n_orb, k=0)
    kernels, couplings = [], []
    pos = 0
    for _ in range(layers):
        k = np.zeros((n_orb, n_orb))
        k[iu_k] = vector[pos : pos + nk]
        k -= k.T
        pos += nk
        j = np.zeros((n_orb, n_orb))
        j[iu_j] = vector[pos : pos + nj]
        j = j + np.triu(j, k=1).T
        pos += nj
        kernels.append(k)
        couplings.append(j)
    return LucjParameters(tuple(kernels), tuple(couplings))


def write_parameters(params: LucjParameters, path) -> None:
    n = params.n_orb
    iu_k = np.triu_indices(n, k=1)
    iu_j = np.triu_indices(n, k=0)
    payload = {
        "layers": params.layers,
        "n_orb": n,
        "K": [k[iu_k].tolist() for k in params.kernels],
        "J": [j[iu_j].tolist() for j in params.couplings],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def read_parameters(path) -> LucjParameters:
    with open(path) as fh:
        payload = json.load(fh)
    try:
        layers = int(payload["layers"])
        k_rows = payload["K"]
        j_rows = payload["J"]
    except (KeyError, TypeError) as exc:
        raise ContractViolation(f"{path}: malformed parameter file: {exc}") from None
    if len(k_rows) != layers or len(j_rows) != layers:
        raise ContractViolation(f"{path}: K/J lists do not match layer count")
    if "n_orb" in payload:
        n = int(payload["n_orb"])
    else:
        # n (n + 1) / 2 = len(J_0)
        n = int((math.isqrt(8 * len(j_rows[0]) + 1) - 1) // 2)
    flat = []
    nk, nj = _triangle_sizes(n)
    for k_tri, j_tri in zip(k_rows, j_rows):
        if len(k_tri) != nk or len(j_tri) != nj:
            raise ContractViolation(f"{path}: triangle lengths inconsistent with n_orb={n}")
        flat.extend(k_tri)
        flat.extend(j_tri)
    return vector_to_params(np.asarray(flat), n, layers)


def init_parameters(
    mode: str,
    *,
    path=None,
    n_orb: int | None = None,
    layers: int = 1,
    magnitude: float = 0.05,
    seed=None,
) -> LucjParameters:
    """Build starting parameters: from file, random, or file plus uniform
    perturbations of +-magnitude on every stored entry."""
    if mode == "file":
        if path is None:
            raise ContractViolation("file mode requires a parameter path")
        return read_parameters(path)
    if mode == "perturbed-file":
        if path is None:
            raise ContractViolation("perturbed-file mode requires a parameter path")
        base = read_parameters(path)
        rng = np.random.default_rng(seed)
        vec = params_to_vector(base)
        vec = vec + rng.uniform(-magnitude, magnitude, size=vec.size)
        return vector_to_params(vec, base.n_orb, base.layers)
    if mode == "random":
        if n_orb is None:
            raise ContractViolation("random mode requires n_orb")
        rng = np.random.default_rng(seed)
        nk, nj = _triangle_sizes(n_orb)
        vec = rng.uniform(-magnitude, magnitude, size=layers * (nk + nj))
        return vector_to_params(vec, n_orb, layers)
    raise ContractViolation(f"unknown parameter mode {mode!r}")


# ---------------------------------------------------------------------------
# Statevector construction
# ---------------------------------------------------------------------------


@dataclass
class DeterminantState:
    """Complex amplitudes over the full (alpha stratum) x (beta stratum) basis."""

    amplitudes: np.ndarray
    alpha_list: np.ndarray
    beta_list: np.ndarray
    spec: SystemSpec

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))


def givens_decompose(phi: np.ndarray) -> tuple[list[tuple[int, int, float]], np.ndarray]:
    """Factor an orthogonal matrix as G_1 ... G_m D with D = diag(+-1).

    Each G is a plane rotation; D collects residual signs (an even number of
    -1 entries when det(phi) = +1, as for any matrix exponential of an
    antisymmetric generator).
    """
    n = phi.shape[0]
    work = phi.copy()
    rotations: list[tuple[int, int, float]] = []
    for col in range(n):
        for row in range(n - 1, col, -1):
            a, b = work[row - 1, col], work[row, col]
            if abs(b) < 1e-15:
                continue
            r = math.hypot(a, b)
            theta = math.atan2(b, a)
            c, s = math.cos(theta), math.sin(theta)
            rot = np.array([[c, s], [-s, c]])
            work[[row - 1, row], :] = rot @ work[[row - 1, row], :]
            rotations.append((row - 1, row, theta))
    signs = np.sign(np.diag(work))
    signs[signs == 0] = 1.0
    # work should now be diag(signs); rotations were applied left-to-right,
    # so phi = R_1^T R_2^T ... R_m^T D reading the stored list in order.
    return rotations, signs


def _rotation_pairs(half_list: np.ndarray, i: int, j: int):
    """Index pairs mixed by a plane rotation on orbitals (i, j), with parities."""
    occ_i = (half_list >> i) & 1
    occ_j = (half_list >> j) & 1
    mask = (occ_i == 1) & (occ_j == 0)
    src = np.nonzero(mask)[0]
    partner_bits = (half_list[src] ^ (1 << i)) | (1 << j)
    partner = np.searchsorted(half_list, partner_bits)
    parity = np.array(
        [single_move_parity(int(half_list[s]), i, j) for s in src], dtype=float
    )
    return src, partner, parity


def _apply_givens_sector(
    amps: np.ndarray, half_list: np.ndarray, i: int, j: int, theta: float, axis: int
) -> None:
    """Rotate determinant amplitudes in place for one spin sector.

    The plane rotation with matrix [[c, -s], [s, c]] on orbital coordinates
    (i, j) maps the unitary exp(theta (a+_j a_i - a+_i a_j)) onto each
    two-level subspace {i occupied, j empty} <-> {i empty, j occupied} with
    the fermionic parity of the move folded into the mixing angle.
    """
    src, partner, parity = _rotation_pairs(half_list, i, j)
    if src.size == 0:
        return
    c, s = math.cos(theta), math.sin(theta)
    if axis == 0:
        u, v = amps[src, :].copy(), amps[partner, :].copy()
        amps[src, :] = c * u - (parity * s)[:, None] * v
        amps[partner, :] = (parity * s)[:, None] * u + c * v
    else:
        u, v = amps[:, src].copy(), amps[:, partner].copy()
        amps[:, src] = c * u - (parity * s)[None, :] * v
        amps[:, partner] = (parity * s)[None, :] * u + c * v


def _apply_diag_signs(
    amps: np.ndarray, half_list: np.ndarray, signs: np.ndarray, axis: int
) -> None:
    negatives = np.nonzero(signs < 0)[0]
    if negatives.size == 0:
        return
    parity = np.zeros(half_list.size, dtype=np.int64)
    for p in negatives:
        parity += (half_list >> int(p)) & 1
    factor = np.where(parity % 2 == 1, -1.0, 1.0)
    if axis == 0:
        amps *= factor[:, None]
    else:
        amps *= factor[None, :]


def _apply_orbital_rotation(state: DeterminantState, kernel: np.ndarray) -> None:
    phi = expm(kernel)
    rotations, signs = givens_decompose(phi)
    for axis, half_list in ((0, state.alpha_list), (1, state.beta_list)):
        # U(phi) = U(G_1) ... U(G_m) U(D): apply D first, then G_m .. G_1.
        _apply_diag_signs(state.amplitudes, half_list, signs, axis)
        for i, j, theta in reversed(rotations):
            _apply_givens_sector(state.amplitudes, half_list, i, j, theta, axis)


def _apply_pair_phase(state: DeterminantState, coupling: np.ndarray) -> None:
    n = state.spec.n_orb
    occ_a = ((state.alpha_list[:, None] >> np.arange(n)[None, :]) & 1).astype(float)
    occ_b = ((state.beta_list[:, None] >> np.arange(n)[None, :]) & 1).astype(float)
    j_diag = np.diag(coupling)
    # sum_{p<=q} J_pq n_p n_q with n = n_alpha + n_beta; for 0/1 sector
    # occupancies n_p^2 = n_p^alpha + n_p^beta + 2 n_p^alpha n_p^beta.
    quad_a = np.einsum("ap,pq,aq->a", occ_a, coupling, occ_a)
    quad_b = np.einsum("bp,pq,bq->b", occ_b, coupling, occ_b)
    cross = occ_a @ coupling @ occ_b.T
    lin_a = occ_a @ j_diag
    lin_b = occ_b @ j_diag
    cross_diag = (occ_a * j_diag) @ occ_b.T
    angle = (
        0.5 * (quad_a[:, None] + quad_b[None, :] + 2.0 * cross)
        + 0.5 * (lin_a[:, None] + lin_b[None, :])
        + cross_diag
    )
    state.amplitudes *= np.exp(1j * angle)


def lucj_state(
    params: LucjParameters,
    spec: SystemSpec,
    reference: Configuration,
    *,
    cap: int = DEFAULT_STATE_CAP,
) -> DeterminantState:
    """Ansatz statevector over the full determinant space.

    Layer k applies the orbital rotation exp(K_k) (both spin sectors) followed
    by the diagonal pair phase of J_k, starting from the reference determinant.
    """
    dim = hilbert_dimension(spec)
    if dim > cap:
        raise CapacityError(f"determinant space {dim} exceeds cap {cap}")
    if popcount(reference.alpha) != spec.n_alpha or popcount(reference.beta) != spec.n_beta:
        raise ContractViolation("reference popcounts do not match the system")
    if params.layers and params.n_orb != spec.n_orb:
        raise ContractViolation("parameter dimension does not match n_orb")

    alpha_list = all_half_configurations(spec.n_orb, spec.n_alpha)
    beta_list = all_half_configurations(spec.n_orb, spec.n_beta)
    amps = np.zeros((alpha_list.size, beta_list.size), dtype=complex)
    ia = int(np.searchsorted(alpha_list, reference.alpha))
    ib = int(np.searchsorted(beta_list, reference.beta))
    amps[ia, ib] = 1.0
    state = DeterminantState(amps, alpha_list, beta_list, spec)
    for kernel, coupling in zip(params.kernels, params.couplings):
        _apply_orbital_rotation(state, kernel)
        _apply_pair_phase(state, coupling)
    return state


# ---------------------------------------------------------------------------
# Sampling and noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    """Independent per-spin-orbital bit flips at rate ``bitflip_rate``."""

    bitflip_rate: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.bitflip_rate <= 1.0:
            raise ContractViolation(f"bit-flip rate {self.bitflip_rate} outside [0, 1]")


@dataclass
class SampleBatch:
    """Multiset of sampled configurations with its provenance and timing."""

    counts: dict
    shots: int
    provenance: str
    started_at: float = 0.0
    ended_at: float = 0.0

    def __post_init__(self) -> None:
        if sum(self.counts.values()) != self.shots:
            raise ContractViolation("counts do not sum to the shot count")


def sample_counts(state: DeterminantState, shots: int, seed) -> SampleBatch:
    """Multinomial draw from the Born distribution of the state."""
    started = time.perf_counter()
    norm2 = float(np.sum(np.abs(state.amplitudes) ** 2))
    if norm2 == 0.0:
        raise ContractViolation("cannot sample from a zero state")
    probs = (np.abs(state.amplitudes) ** 2 / norm2).ravel()
    rng = np.random.default_rng(seed)
    draws = rng.multinomial(shots, probs)
    counts: dict = {}
    db = state.beta_list.size
    for flat in np.nonzero(draws)[0]:
        ia, ib = divmod(int(flat), db)
        conf = Configuration(int(state.alpha_list[ia]), int(state.beta_list[ib]))
        counts[conf] = int(draws[flat])
    return SampleBatch(counts, shots, "ideal", started, time.perf_counter())


def apply_noise(batch: SampleBatch, noise: NoiseModel, seed, n_orb: int) -> SampleBatch:
    """Flip every bit of every sampled copy independently at the noise rate."""
    started = time.perf_counter()
    eps = noise.bitflip_rate
    if eps == 0.0:
        return SampleBatch(dict(batch.counts), batch.shots, "noisy",
                           started, time.perf_counter())
    rng = np.random.default_rng(seed)
    weights = np.arange(n_orb, dtype=np.int64)
    out: dict = {}
    for conf, count in sorted(batch.counts.items()):
        flips = (rng.random((count, 2 * n_orb)) < eps).astype(np.int64)
        mask_a = (flips[:, :n_orb] << weights).sum(axis=1)
        mask_b = (flips[:, n_orb:] << weights).sum(axis=1)
        for ma, mb in zip(mask_a, mask_b):
            new = Configuration(conf.alpha ^ int(ma), conf.beta ^ int(mb))
            out[new] = out.get(new, 0) + 1
    return SampleBatch(out, batch.shots, "noisy", started, time.perf_counter())


def write_sample_batch(batch: SampleBatch, path, n_orb: int) -> None:
    """One line per unique bitstring: ``<bits> <count>``, alpha half first."""
    with open(path, "w") as fh:
        for conf in sorted(batch.counts):
            fh.write(f"{configuration_to_string(conf, n_orb)} {batch.counts[conf]}\n")


def read_sample_batch(path, provenance: str = "noisy") -> SampleBatch:
    counts: dict = {}
    shots = 0
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            bits, count = line.split()
            counts[configuration_from_string(bits)] = int(count)
            shots += int(count)
    return SampleBatch(counts, shots, provenance)


def execute_sampler_job(
    params: LucjParameters,
    spec: SystemSpec,
    reference: Configuration,
    shots: int,
    noise: NoiseModel,
    seed,
    *,
    repetition_rate_s: float = 0.0,
    cancel_event: threading.Event | None = None,
    cap: int = DEFAULT_STATE_CAP,
) -> SampleBatch:
    """One quantum-processor call: prepare, sample, corrupt.

    ``repetition_rate_s`` models the fixed per-shot execution time of the
    hardware; the job sleeps out the remainder of ``shots * rate`` so that
    the reported interval reflects it.  Cancellation is cooperative and
    checked during that wait.
    """
    started = time.perf_counter()
    state = lucj_state(params, spec, reference, cap=cap)
    ideal = sample_counts(state, shots, seed)
    noisy = apply_noise(ideal, noise, None if seed is None else seed + 1, spec.n_orb)
    deadline = started + shots * repetition_rate_s
    while time.perf_counter() < deadline:
        if cancel_event is not None and cancel_event.is_set():
            raise SamplerCancelled("sampler job cancelled")
        time.sleep(min(0.005, max(0.0, deadline - time.perf_counter())))
    if cancel_event is not None and cancel_event.is_set():
        raise SamplerCancelled("sampler job cancelled")
    noisy.started_at = started
    noisy.ended_at = time.perf_counter()
    return noisy
