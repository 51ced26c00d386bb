"""Desk-scale analogue of a distributed Hamiltonian application.

Worker "ranks" are threads that communicate exclusively through point-to-point
channels: no shared mutable state.  The rank grid follows a four-factor
decomposition (b_alpha, b_beta, t, m):

* basis ranks (b_alpha x b_beta) own contiguous slices of the alpha and beta
  half-configuration lists and circulate input blocks along a ring;
* t replicas split the per-column work (tasks keyed by source alpha half,
  sized by excitation fan-out) and combine partial sums in a fixed-order
  binary tree, so results are bitwise reproducible;
* m ranks slice the target rows and are concatenated at gather time.
"""

from __future__ import annotations

import heapq
import os
import queue
import statistics
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .chem import ContractViolation, MolecularIntegrals, SystemSpec
from .hamiltonian import (
    CIVector,
    HamiltonianTables,
    SubspaceBasis,
    apply_hamiltonian_block,
    build_hamiltonian_tables,
)


class DeadlockError(RuntimeError):
    """A worker rank waited past the watchdog timeout."""


# ---------------------------------------------------------------------------
# Partition planning and task balancing
# ---------------------------------------------------------------------------


def _even_slices(total: int, parts: int, offset: int = 0) -> tuple[tuple[int, int], ...]:
    """Contiguous slices covering [offset, offset+total), sizes differing by <= 1."""
    base, extra = divmod(total, parts)
    out = []
    start = offset
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        out.append((start, start + size))
        start += size
    return tuple(out)


@dataclass(frozen=True)
class PartitionPlan:
    """Rank-grid decomposition of one subspace application."""

    b_alpha: int
    b_beta: int
    t: int
    m: int
    dim_alpha: int
    dim_beta: int
    alpha_slices: tuple = field(repr=False, default=())
    beta_slices: tuple = field(repr=False, default=())
    row_slices: tuple = field(repr=False, default=())

    @property
    def basis_count(self) -> int:
        return self.b_alpha * self.b_beta

    @property
    def rank_count(self) -> int:
        return self.b_alpha * self.b_beta * self.t * self.m


def plan_partition(
    dim_alpha: int, dim_beta: int, b_alpha: int, b_beta: int, t: int, m: int
) -> PartitionPlan:
    """Deterministic balanced decomposition of the index ranges."""
    for name, value in (("b_alpha", b_alpha), ("b_beta", b_beta), ("t", t), ("m", m)):
        if value < 1:
            raise ContractViolation(f"{name} must be >= 1, got {value}")
    if b_alpha > dim_alpha or b_beta > dim_beta:
        raise ContractViolation(
            f"infeasible factorization: ({b_alpha}, {b_beta}) blocks for "
            f"({dim_alpha}, {dim_beta}) halves"
        )
    alpha_slices = _even_slices(dim_alpha, b_alpha)
    beta_slices = _even_slices(dim_beta, b_beta)
    row_slices = tuple(
        _even_slices(hi - lo, m, offset=lo) for lo, hi in alpha_slices
    )
    return PartitionPlan(
        b_alpha, b_beta, t, m, dim_alpha, dim_beta,
        alpha_slices, beta_slices, row_slices,
    )


@dataclass(frozen=True)
class TaskAssignment:
    """Mapping of tasks onto replicas, with the resulting loads."""

    replica_of: np.ndarray
    loads: np.ndarray
    sizes: np.ndarray


def balance_tasks(task_sizes, t: int) -> TaskAssignment:
    """Longest-processing-time greedy assignment onto ``t`` replicas."""
    sizes = np.asarray(task_sizes, dtype=np.int64)
    if t < 1:
        raise ContractViolation(f"t must be >= 1, got {t}")
    replica_of = np.zeros(sizes.size, dtype=np.int32)
    loads = np.zeros(t, dtype=np.int64)
    if sizes.size == 0:
        return TaskAssignment(replica_of, loads, sizes)
    order = np.lexsort((np.arange(sizes.size), -sizes))
    heap = [(0, r) for r in range(t)]
    heapq.heapify(heap)
    for task in order:
        load, replica = heapq.heappop(heap)
        replica_of[task] = replica
        load += int(sizes[task])
        heapq.heappush(heap, (load, replica))
        loads[replica] = load
    return TaskAssignment(replica_of, loads, sizes)


def round_robin_tasks(task_sizes, t: int) -> TaskAssignment:
    """Cyclic assignment in input order, the unbalanced baseline."""
    sizes = np.asarray(task_sizes, dtype=np.int64)
    if t < 1:
        raise ContractViolation(f"t must be >= 1, got {t}")
    replica_of = (np.arange(sizes.size) % t).astype(np.int32)
    loads = np.zeros(t, dtype=np.int64)
    np.add.at(loads, replica_of, sizes)
    return TaskAssignment(replica_of, loads, sizes)


# ---------------------------------------------------------------------------
# Channels and the worker group
# ---------------------------------------------------------------------------


class _Comm:
    """Point-to-point channels between ranks, with per-phase send counters."""

    def __init__(self, rank_count: int, timeout: float):
        self.timeout = timeout
        self.queues = {
            (src, dst): queue.Queue()
            for src in range(rank_count)
            for dst in range(rank_count)
            if src != dst
        }
        self.sent: list[dict] = [dict() for _ in range(rank_count)]
        self.result_queue: queue.Queue = queue.Queue()

    def send(self, src: int, dst: int, phase: str, payload) -> None:
        counters = self.sent[src]
        counters[phase] = counters.get(phase, 0) + 1
        self.queues[src, dst].put(payload)

    def recv(self, src: int, dst: int, phase: str):
        try:
            return self.queues[src, dst].get(timeout=self.timeout)
        except queue.Empty:
            raise DeadlockError(
                f"rank {dst} timed out after {self.timeout}s waiting for rank "
                f"{src} in phase {phase!r}"
            ) from None


def _flat_rank(plan: PartitionPlan, pos: int, it: int, im: int) -> int:
    return (pos * plan.t + it) * plan.m + im


def _worker(
    rank_pos: int,
    it: int,
    im: int,
    plan: PartitionPlan,
    tables: HamiltonianTables,
    comm: _Comm,
    blocks: list[np.ndarray],
    task_mask: np.ndarray,
    errors: list,
) -> None:
    try:
        ia, jb = divmod(rank_pos, plan.b_beta)
        rows = plan.row_slices[ia][im]
        cols = plan.beta_slices[jb]
        rank = _flat_rank(plan, rank_pos, it, im)
        out = np.zeros((rows[1] - rows[0], cols[1] - cols[0]))
        held = blocks[rank_pos]
        b = plan.basis_count
        for step in range(b):
            src_pos = (rank_pos - step) % b
            ka, lb = divmod(src_pos, plan.b_beta)
            apply_hamiltonian_block(
                tables, held, out,
                src_rows=plan.alpha_slices[ka],
                src_cols=plan.beta_slices[lb],
                tgt_rows=rows,
                tgt_cols=cols,
                alpha_source_mask=task_mask,
            )
            if step < b - 1:
                nxt = _flat_rank(plan, (rank_pos + 1) % b, it, im)
                prv = _flat_rank(plan, (rank_pos - 1) % b, it, im)
                comm.send(rank, nxt, "ring", held)
                held = comm.recv(prv, rank, "ring")

        # Fixed-order binary-tree reduction across the t replicas.
        stride = 1
        while stride < plan.t:
            if it % (2 * stride) == 0:
                partner = it + stride
                if partner < plan.t:
                    src = _flat_rank(plan, rank_pos, partner, im)
                    out = out + comm.recv(src, rank, "reduce")
            elif it % (2 * stride) == stride:
                dst = _flat_rank(plan, rank_pos, it - stride, im)
                comm.send(rank, dst, "reduce", out)
                return
            stride *= 2

        if it == 0:
            comm.sent[rank]["gather"] = comm.sent[rank].get("gather", 0) + 1
            comm.result_queue.put((ia, jb, im, rows, cols, out))
    except BaseException as exc:  # propagated to the caller
        errors.append((rank_pos, it, im, exc))
        comm.result_queue.put(None)


class WorkerGroup:
    """Reusable thread-rank group bound to one plan and one set of tables."""

    def __init__(
        self,
        plan: PartitionPlan,
        tables: HamiltonianTables,
        *,
        balance: bool = True,
        timeout: float = 60.0,
    ):
        basis = tables.basis
        if (plan.dim_alpha, plan.dim_beta) != (basis.dim_alpha, basis.dim_beta):
            raise ContractViolation("plan does not match the basis dimensions")
        limit = int(os.environ.get("SQD_THREADS", "0") or 0)
        if limit and plan.rank_count > limit:
            raise ContractViolation(
                f"plan needs {plan.rank_count} ranks but SQD_THREADS={limit}"
            )
        self.plan = plan
        self.tables = tables
        self.timeout = timeout
        assigner = balance_tasks if balance else round_robin_tasks
        self.assignment = assigner(tables.alpha_task_sizes, plan.t)
        self.last_counters: list[dict] = []

    def apply(self, psi: CIVector) -> CIVector:
        plan, tables = self.plan, self.tables
        if not psi.basis.same_as(tables.basis):
            raise ContractViolation("CI vector and worker group bases differ")
        comm = _Comm(plan.rank_count, self.timeout)
        blocks = [
            psi.amplitudes[a0:a1, b0:b1].copy()
            for a0, a1 in plan.alpha_slices
            for b0, b1 in plan.beta_slices
        ]
        masks = [self.assignment.replica_of == it for it in range(plan.t)]
        errors: list = []
        threads = []
        for pos in range(plan.basis_count):
            for it in range(plan.t):
                for im in range(plan.m):
                    th = threading.Thread(
                        target=_worker,
                        args=(pos, it, im, plan, tables, comm, blocks, masks[it], errors),
                        daemon=True,
                    )
                    threads.append(th)
                    th.start()

        out = np.zeros((plan.dim_alpha, plan.dim_beta))
        expected = plan.basis_count * plan.m
        received = 0
        # The driver waits longer than the rank watchdog so that a stalled
        # rank's own diagnostic (naming rank and phase) surfaces first.
        driver_timeout = self.timeout * 4 + 1.0
        while received < expected:
            try:
                item = comm.result_queue.get(timeout=driver_timeout)
            except queue.Empty:
                raise DeadlockError(
                    f"driver timed out after {driver_timeout}s awaiting gather "
                    f"({received}/{expected} pieces)"
                ) from None
            if item is None:
                pos, it, im, exc = errors[0]
                raise exc
            _, _, _, rows, cols, block = item
            out[rows[0]:rows[1], cols[0]:cols[1]] = block
            received += 1
        for th in threads:
            th.join()
        self.last_counters = comm.sent
        return CIVector(out, psi.basis)

    def ring_shift_counts(self) -> list[int]:
        return [c.get("ring", 0) for c in self.last_counters]


def distributed_apply(
    psi: CIVector,
    plan: PartitionPlan,
    tables: HamiltonianTables,
    *,
    balance: bool = True,
    timeout: float = 60.0,
    group: WorkerGroup | None = None,
) -> CIVector:
    """Apply the projected Hamiltonian through a message-passing rank group.

    The gathered result equals the serial :func:`apply_hamiltonian` for every
    admissible plan; scheduling (``balance``) changes only the load profile.
    """
    if group is None:
        group = WorkerGroup(plan, tables, balance=balance, timeout=timeout)
    return group.apply(psi)


# ---------------------------------------------------------------------------
# Scaling benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingRecord:
    rank_count: int
    b_alpha: int
    b_beta: int
    t: int
    m: int
    wall_ms_median: float
    speedup: float
    efficiency: float


def factorizations(rank_count: int):
    """All ordered (b_alpha, b_beta, t, m) with the given product, ascending."""
    out = []
    for b_alpha in range(1, rank_count + 1):
        if rank_count % b_alpha:
            continue
        rest1 = rank_count // b_alpha
        for b_beta in range(1, rest1 + 1):
            if rest1 % b_beta:
                continue
            rest2 = rest1 // b_beta
            for t in range(1, rest2 + 1):
                if rest2 % t:
                    continue
                out.append((b_alpha, b_beta, t, rest2 // t))
    return sorted(out)


def synthetic_problem(
    n_orb: int, d_half: int, seed: int
) -> tuple[HamiltonianTables, CIVector]:
    """Random subspace problem for benchmarking, reproducible under seed."""
    from .chem import all_half_configurations

    rng = np.random.default_rng(seed)
    n_elec = n_orb // 2
    full = all_half_configurations(n_orb, n_elec)
    if d_half > full.size:
        raise ContractViolation(f"d_half {d_half} exceeds stratum size {full.size}")
    halves = np.sort(rng.choice(full, size=d_half, replace=False))
    spec = SystemSpec(n_orb, n_elec, n_elec)
    basis = SubspaceBasis(halves, halves, spec, spin_symmetric=True)

    h = rng.normal(size=(n_orb, n_orb))
    h = (h + h.T) / 2
    eri = rng.normal(size=(n_orb,) * 4)
    eri = eri + eri.transpose(1, 0, 2, 3)
    eri = eri + eri.transpose(0, 1, 3, 2)
    eri = eri + eri.transpose(2, 3, 0, 1)
    ints = MolecularIntegrals(n_orb, 0.0, h, eri / 8.0)

    tables = build_hamiltonian_tables(basis, ints)
    amps = rng.normal(size=(d_half, d_half))
    amps /= np.linalg.norm(amps)
    return tables, CIVector(amps, basis)


def scaling_benchmark(
    tables: HamiltonianTables,
    psi: CIVector,
    rank_counts: list[int],
    *,
    plans_per_count: int = 1,
    repetitions: int = 3,
    balance: bool = True,
    timeout: float = 120.0,
) -> list[ScalingRecord]:
    """Median wall times, speedups and efficiencies across rank counts.

    Per-plan failures are recorded as records with NaN timings rather than
    aborting the sweep.
    """
    records: list[ScalingRecord] = []
    baseline_time = None
    baseline_ranks = None
    da, db = tables.basis.dim_alpha, tables.basis.dim_beta
    for rank_count in rank_counts:
        plans = [
            f for f in factorizations(rank_count)
            if f[0] <= da and f[1] <= db
        ][:plans_per_count]
        for b_alpha, b_beta, t, m in plans:
            plan = plan_partition(da, db, b_alpha, b_beta, t, m)
            try:
                group = WorkerGroup(plan, tables, balance=balance, timeout=timeout)
                times = []
                for _ in range(repetitions):
                    start = time.perf_counter()
                    group.apply(psi)
                    times.append((time.perf_counter() - start) * 1e3)
                wall = statistics.median(times)
            except Exception:
                records.append(
                    ScalingRecord(rank_count, b_alpha, b_beta, t, m,
                                  float("nan"), float("nan"), float("nan"))
                )
                continue
            if baseline_time is None:
                baseline_time, baseline_ranks = wall, rank_count
            speedup = baseline_time / wall
            efficiency = baseline_time * baseline_ranks / (wall * rank_count)
            records.append(
                ScalingRecord(rank_count, b_alpha, b_beta, t, m, wall, speedup, efficiency)
            )
    return records


SCALING_SCHEMA = "sqd.scaling/1.0"


def write_scaling_csv(records: list[ScalingRecord], path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# schema: {SCALING_SCHEMA}\n")
        fh.write("rank_count,b_alpha,b_beta,t,m,wall_ms_median,speedup,efficiency\n")
        for r in records:
            fh.write(
                f"{r.rank_count},{r.b_alpha},{r.b_beta},{r.t},{r.m},"
                f"{r.wall_ms_median:.6f},{r.speedup:.6f},{r.efficiency:.6f}\n"
            )
