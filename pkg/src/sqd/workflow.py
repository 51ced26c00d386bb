"""Closed-loop orchestration of the sampler and the classical pipeline.

Two walker populations run differential evolution over the circuit
parameters.  Sampler calls execute asynchronously so that one population's
quantum work overlaps the other's classical work; within each iteration the
classical pipelines of the two populations run back to back on the main
thread:

    launch sampler(0, p0); launch sampler(0, p1)
    for itr:
        for p in (p0, p1):
            wait sampler(itr, p)
            classical pipeline for p  (recovery x R, subspace, Davidson,
                                       orbital optimization, carryover,
                                       occupancies, DE selection + trials)
            launch sampler(itr + 1, p)

Every iteration is checkpointed; runs resume deterministically because all
randomness is derived from (seed, purpose, iteration, population, walker).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from hashlib import sha1
from pathlib import Path

import numpy as np

from .chem import (
    ContractViolation,
    SystemSpec,
    hf_configuration,
    parse_fcidump,
)
from .davidson import solve_subspace
from .hamiltonian import CIVector, SubspaceBasis, build_hamiltonian_tables, energy_variance
from .optimizer import (
    DEConfig,
    OrbitalRotation,
    de_step,
    optimize_orbitals,
    transform_integrals,
)
from .parallel import WorkerGroup, plan_partition
from .recovery import (
    CarryoverSet,
    OccupancyVector,
    build_subspace,
    hf_indicator_occupancies,
    read_occupancies,
    recover_configurations,
    select_carryover,
    subsample,
    update_occupancies,
)
from .reporting import (
    DETraceRow,
    TimingRecord,
    VariancePoint,
    write_de_trace,
    write_timeline,
    write_variance_csv,
)
from .sampler import (
    LucjParameters,
    NoiseModel,
    SampleBatch,
    execute_sampler_job,
    init_parameters,
    params_to_vector,
    vector_to_params,
    write_sample_batch,
)

log = logging.getLogger(__name__)

# Purpose codes for deterministic per-event seeds.
_SEED_SAMPLER = 1
_SEED_RECOVERY = 2
_SEED_SUBSAMPLE = 3
_SEED_DE = 4
_SEED_INIT = 5


class SamplerFailure(RuntimeError):
    """The sampler failed after the configured number of retries."""


@dataclass
class RunConfig:
    """Validated settings of one closed-loop run."""

    fcidump: str
    seed: int = 0
    output_dir: str | None = None
    max_iterations: int = 10
    walkers_per_population: int = 4
    shots: int = 4000
    noise_rate: float = 0.01
    repetition_rate_s: float = 0.0
    sampler_cap: int = 4_000_000
    sampler_retries: int = 2
    param_mode: str = "random"
    param_path: str | None = None
    param_layers: int = 1
    param_magnitude: float = 0.05
    subsample_size: int = 100
    recovery_repetitions: int = 1
    carryover_ratio: float = 0.75
    spin_symmetric: bool = True
    initial_occupancies: str | None = None
    de: DEConfig = field(default_factory=DEConfig)
    davidson_tol: float = 1e-3
    davidson_max_iter: int = 10
    davidson_wall_clock_s: float | None = None
    orbital_opt_enabled: bool = True
    orbital_opt_max_iter: int = 1000
    orbital_opt_tol_grad: float = 1e-6
    orbital_opt_persist: bool = True
    partition: tuple[int, int, int, int] | None = None
    cooperative_start: int | None = None
    compute_variance: bool = False
    warm_start_dir: str | None = None

    def __post_init__(self) -> None:
        if self.de.walkers_per_population != self.walkers_per_population:
            self.de = dataclasses.replace(
                self.de, walkers_per_population=self.walkers_per_population
            )

    def validate(self) -> None:
        if not Path(self.fcidump).is_file():
            raise ContractViolation(f"fcidump not found: {self.fcidump}")
        if self.param_mode in ("file", "perturbed-file"):
            if not self.param_path or not Path(self.param_path).is_file():
                raise ContractViolation(f"parameter file not found: {self.param_path}")
        if self.initial_occupancies and not Path(self.initial_occupancies).is_file():
            raise ContractViolation(
                f"occupancy file not found: {self.initial_occupancies}"
            )
        if self.warm_start_dir and not Path(self.warm_start_dir).is_dir():
            raise ContractViolation(f"warm-start directory not found: {self.warm_start_dir}")
        if self.max_iterations < 0:
            raise ContractViolation("max_iterations must be nonnegative")
        if self.walkers_per_population < 1:
            raise ContractViolation("need at least one walker per population")
        if not 0.0 <= self.carryover_ratio <= 1.0:
            raise ContractViolation("carryover ratio outside [0, 1]")
        if self.recovery_repetitions < 1:
            raise ContractViolation("recovery repetitions must be >= 1")

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        de_data = data.get("de", {})
        de = DEConfig(
            walkers_per_population=data.get("walkers_per_population", 4),
            mutation_factor=de_data.get("mutation_factor", 0.25),
            crossover_rate=de_data.get("crossover_rate", 0.7),
            index_mode=de_data.get("index_mode", "replacement"),
        )
        dav = data.get("davidson", {})
        orb = data.get("orbital_opt", {})
        par = data.get("partition")
        partition = (
            (par["b_alpha"], par["b_beta"], par["t"], par["m"]) if par else None
        )
        pinit = data.get("param_init", {})
        return RunConfig(
            fcidump=data["fcidump"],
            seed=data.get("seed", 0),
            output_dir=data.get("output_dir"),
            max_iterations=data.get("max_iterations", 10),
            walkers_per_population=data.get("walkers_per_population", 4),
            shots=data.get("shots", 4000),
            noise_rate=data.get("noise_rate", 0.01),
            repetition_rate_s=data.get("repetition_rate_s", 0.0),
            sampler_cap=data.get("sampler_cap", 4_000_000),
            sampler_retries=data.get("sampler_retries", 2),
            param_mode=pinit.get("mode", "random"),
            param_path=pinit.get("path"),
            param_layers=pinit.get("layers", 1),
            param_magnitude=pinit.get("magnitude", 0.05),
            subsample_size=data.get("subsample_size", 100),
            recovery_repetitions=data.get("recovery_repetitions", 1),
            carryover_ratio=data.get("carryover_ratio", 0.75),
            spin_symmetric=data.get("spin_symmetric", True),
            initial_occupancies=data.get("initial_occupancies"),
            de=de,
            davidson_tol=dav.get("tol", 1e-3),
            davidson_max_iter=dav.get("max_iter", 10),
            davidson_wall_clock_s=dav.get("wall_clock_limit"),
            orbital_opt_enabled=orb.get("enabled", True),
            orbital_opt_max_iter=orb.get("max_iter", 1000),
            orbital_opt_tol_grad=orb.get("tol_grad", 1e-6),
            orbital_opt_persist=orb.get("persist", True),
            partition=partition,
            cooperative_start=data.get("cooperative_start"),
            compute_variance=data.get("compute_variance", False),
            warm_start_dir=data.get("warm_start_dir"),
        )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["de"] = {
            "mutation_factor": self.de.mutation_factor,
            "crossover_rate": self.de.crossover_rate,
            "index_mode": self.de.index_mode,
        }
        out["param_init"] = {
            "mode": self.param_mode,
            "path": self.param_path,
            "layers": self.param_layers,
            "magnitude": self.param_magnitude,
        }
        out["davidson"] = {
            "tol": self.davidson_tol,
            "max_iter": self.davidson_max_iter,
            "wall_clock_limit": self.davidson_wall_clock_s,
        }
        out["orbital_opt"] = {
            "enabled": self.orbital_opt_enabled,
            "max_iter": self.orbital_opt_max_iter,
            "tol_grad": self.orbital_opt_tol_grad,
            "persist": self.orbital_opt_persist,
        }
        if self.partition:
            b_alpha, b_beta, t, m = self.partition
            out["partition"] = {"b_alpha": b_alpha, "b_beta": b_beta, "t": t, "m": m}
        for key in (
            "param_mode", "param_path", "param_layers", "param_magnitude",
            "davidson_tol", "davidson_max_iter", "davidson_wall_clock_s",
            "orbital_opt_enabled", "orbital_opt_max_iter", "orbital_opt_tol_grad",
            "orbital_opt_persist",
        ):
            out.pop(key, None)
        return out

    @staticmethod
    def from_json(path) -> "RunConfig":
        with open(path) as fh:
            config = RunConfig.from_dict(json.load(fh))
        config.validate()
        return config


@dataclass
class WalkerState:
    """One DE walker: its parameters and the state its pipeline carries."""

    params: np.ndarray
    current_energy: float = math.inf
    best_energy: float = math.inf
    kappa_theta: np.ndarray | None = None
    carryover: CarryoverSet = field(default_factory=CarryoverSet.empty)
    occupancies: OccupancyVector | None = None
    history: list = field(default_factory=list)
    eigenvector: CIVector | None = None

    def record_energy(self, energy: float) -> None:
        self.history.append(energy)
        self.best_energy = min(self.best_energy, energy)


@dataclass
class PopulationState:
    walkers: list
    pending_params: list | None = None
    foreign_carryover: CarryoverSet | None = None


def derive_seed(base: int, purpose: int, itr: int, pop: int, walker: int, extra: int = 0) -> int:
    seq = np.random.SeedSequence((base, purpose, itr, pop, walker, extra))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Run context and the classical pipeline
# ---------------------------------------------------------------------------


class _Recorder:
    """Thread-safe collection of timing records on the run's clock."""

    def __init__(self):
        self.t0 = time.perf_counter()
        self.records: list[TimingRecord] = []
        self._lock = threading.Lock()

    def add(self, phase: str, pop: int, walker: int, itr: int,
            start: float, end: float) -> None:
        rec = TimingRecord(
            phase=phase, population=pop, walker=walker, iteration=itr,
            start_s=start - self.t0, end_s=end - self.t0,
            start_wall=datetime.now(timezone.utc).isoformat(),
            end_wall=datetime.now(timezone.utc).isoformat(),
        )
        with self._lock:
            self.records.append(rec)


class ClosedLoopRun:
    """State and I/O of one run directory."""

    def __init__(self, config: RunConfig, run_dir: Path):
        config.validate()
        self.config = config
        self.run_dir = run_dir
        self.ints, self.spec = parse_fcidump(config.fcidump)
        if config.spin_symmetric and self.spec.n_alpha != self.spec.n_beta:
            raise ContractViolation("spin-symmetric run needs n_alpha == n_beta")
        self.reference = hf_configuration(self.spec)
        self.noise = NoiseModel(config.noise_rate)
        self.recorder = _Recorder()
        self.de_rows: list[DETraceRow] = []
        self.variance_points: list[VariancePoint] = []
        self.populations: list[PopulationState] = []
        self.completed_iteration = -1
        (run_dir / "batches").mkdir(parents=True, exist_ok=True)
        (run_dir / "davidson").mkdir(exist_ok=True)
        (run_dir / "checkpoints").mkdir(exist_ok=True)

    # -- initialization ----------------------------------------------------

    def initial_occupancies(self) -> OccupancyVector:
        if self.config.initial_occupancies:
            return read_occupancies(self.config.initial_occupancies)
        return hf_indicator_occupancies(self.spec)

    def _initial_params(self, pop: int, walker: int) -> np.ndarray:
        cfg = self.config
        seed = derive_seed(cfg.seed, _SEED_INIT, 0, pop, walker)
        if cfg.param_mode == "file":
            # Population 0 keeps one exact copy and perturbs the rest;
            # population 1 starts every walker from the file.
            if pop == 0 and walker > 0:
                params = init_parameters(
                    "perturbed-file", path=cfg.param_path,
                    magnitude=cfg.param_magnitude, seed=seed,
                )
            else:
                params = init_parameters("file", path=cfg.param_path)
        elif cfg.param_mode == "perturbed-file":
            params = init_parameters(
                "perturbed-file", path=cfg.param_path,
                magnitude=cfg.param_magnitude, seed=seed,
            )
        else:
            params = init_parameters(
                "random", n_orb=self.spec.n_orb, layers=cfg.param_layers,
                magnitude=cfg.param_magnitude, seed=seed,
            )
        return params_to_vector(params)

    def initialize_walkers(self) -> None:
        occ = self.initial_occupancies()
        kappa_dim = self.spec.n_orb * (self.spec.n_orb - 1) // 2
        self.populations = []
        for pop in range(2):
            walkers = [
                WalkerState(
                    params=self._initial_params(pop, w),
                    kappa_theta=np.zeros(kappa_dim),
                    occupancies=occ,
                )
                for w in range(self.config.walkers_per_population)
            ]
            self.populations.append(
                PopulationState(walkers=walkers,
                                pending_params=[w.params for w in walkers])
            )
        if self.config.warm_start_dir:
            self._seed_from_prior(Path(self.config.warm_start_dir))

    def _seed_from_prior(self, prior_dir: Path) -> None:
        state = load_latest_checkpoint(prior_dir)
        prior_spec = state["spec"]
        if prior_spec != self.spec:
            raise ContractViolation(
                f"warm start system {prior_spec} does not match {self.spec}"
            )
        for pop, population in enumerate(self.populations):
            prior_walkers = state["populations"][pop].walkers
            for w, walker in enumerate(population.walkers):
                prior = prior_walkers[min(w, len(prior_walkers) - 1)]
                walker.params = prior.params.copy()
                walker.kappa_theta = (
                    None if prior.kappa_theta is None else prior.kappa_theta.copy()
                )
                walker.carryover = prior.carryover
                walker.occupancies = prior.occupancies
                walker.eigenvector = prior.eigenvector
            population.pending_params = [w.params for w in population.walkers]

    # -- quantum side --------------------------------------------------------

    def run_quantum(self, itr: int, pop: int, params_list: list,
                    cancel_event: threading.Event) -> list[SampleBatch]:
        cfg = self.config
        batches = []
        for w, vec in enumerate(params_list):
            params = vector_to_params(vec, self.spec.n_orb, cfg.param_layers)
            seed = derive_seed(cfg.seed, _SEED_SAMPLER, itr, pop, w)
            attempt = 0
            while True:
                try:
                    batch = execute_sampler_job(
                        params, self.spec, self.reference, cfg.shots, self.noise,
                        seed, repetition_rate_s=cfg.repetition_rate_s,
                        cancel_event=cancel_event, cap=cfg.sampler_cap,
                    )
                    break
                except Exception as exc:
                    if attempt >= cfg.sampler_retries or cancel_event.is_set():
                        raise SamplerFailure(
                            f"sampler failed for itr={itr} pop={pop} walker={w}: {exc}"
                        ) from exc
                    delay = 0.25 * 2**attempt
                    log.warning("sampler retry %d after %.2fs: %s", attempt + 1, delay, exc)
                    time.sleep(delay)
                    attempt += 1
            self.recorder.add("quantum-execution", pop, w, itr,
                              batch.started_at, batch.ended_at)
            batches.append(batch)
        return batches

    # -- classical side ------------------------------------------------------

    def _davidson_apply(self, tables):
        if self.config.partition is None:
            return None
        b_alpha, b_beta, t, m = self.config.partition
        basis = tables.basis
        plan = plan_partition(basis.dim_alpha, basis.dim_beta, b_alpha, b_beta, t, m)
        group = WorkerGroup(plan, tables)
        shape = (basis.dim_alpha, basis.dim_beta)

        def apply_fn(flat: np.ndarray) -> np.ndarray:
            vec = CIVector(flat.reshape(shape), basis)
            return group.apply(vec).amplitudes.ravel()

        return apply_fn

    def evaluate_walker(self, itr: int, pop: int, w: int, walker: WalkerState,
                        batch: SampleBatch, foreign: CarryoverSet | None) -> float:
        cfg = self.config
        occ = walker.occupancies or self.initial_occupancies()
        carry = walker.carryover
        eigvec = walker.eigenvector
        energy = math.inf
        rot = None
        if cfg.orbital_opt_enabled:
            theta = walker.kappa_theta
            rot = (
                OrbitalRotation.from_vector(theta, self.spec.n_orb)
                if theta is not None and cfg.orbital_opt_persist
                else OrbitalRotation.identity(self.spec.n_orb)
            )

        write_sample_batch(
            batch, self.run_dir / "batches" / f"itr{itr:03d}_p{pop}_w{w}.txt",
            self.spec.n_orb,
        )

        for rep in range(cfg.recovery_repetitions):
            pre_start = time.perf_counter()
            recovered = recover_configurations(
                batch, occ, self.spec,
                derive_seed(cfg.seed, _SEED_RECOVERY, itr, pop, w, rep),
            )
            selected = subsample(
                recovered, cfg.subsample_size,
                derive_seed(cfg.seed, _SEED_SUBSAMPLE, itr, pop, w, rep),
            )
            merged_carry = carry
            if foreign is not None:
                merged_carry = CarryoverSet(
                    alpha=tuple(carry.alpha) + tuple(foreign.alpha),
                    beta=tuple(carry.beta) + tuple(foreign.beta),
                    iteration=carry.iteration,
                )
            basis = build_subspace(
                selected, merged_carry, self.spec,
                spin_symmetric=cfg.spin_symmetric,
            )
            self.recorder.add("pre-processing", pop, w, itr, pre_start, time.perf_counter())

            diag_start = time.perf_counter()
            ints_eff = self.ints if rot is None else transform_integrals(self.ints, rot)
            tables = build_hamiltonian_tables(basis, ints_eff)
            report = solve_subspace(
                tables,
                guess=eigvec,
                tol=cfg.davidson_tol,
                max_iter=cfg.davidson_max_iter,
                wall_clock_limit=cfg.davidson_wall_clock_s,
                apply_fn=self._davidson_apply(tables),
            )
            psi = report.eigenvector
            energy = report.energy

            if cfg.orbital_opt_enabled:
                rot, energy, _ = optimize_orbitals(
                    psi, self.ints, kappa0=rot,
                    max_iter=cfg.orbital_opt_max_iter,
                    tol_grad=cfg.orbital_opt_tol_grad,
                )
            self.recorder.add("diagonalization", pop, w, itr, diag_start, time.perf_counter())

            carry = select_carryover(psi, cfg.carryover_ratio, iteration=itr)
            occ = update_occupancies(psi)
            eigvec = psi

            report_path = (
                self.run_dir / "davidson" / f"itr{itr:03d}_p{pop}_w{w}_r{rep}.json"
            )
            payload = report.to_json_dict()
            payload["subspace_dim"] = basis.dimension
            payload["d_half"] = basis.dim_alpha
            payload["energy_after_orbital_opt"] = energy
            with open(report_path, "w") as fh:
                json.dump(payload, fh, indent=1)

            if cfg.compute_variance:
                var_ints = (
                    self.ints if rot is None else transform_integrals(self.ints, rot)
                )
                variance = max(energy_variance(psi, var_ints, cap=cfg.sampler_cap), 0.0)
                self.variance_points.append(
                    VariancePoint(
                        energy=energy, variance=variance,
                        label=f"itr{itr}_p{pop}_w{w}_r{rep}_dim{basis.dimension}",
                    )
                )

        walker.carryover = carry
        walker.occupancies = occ
        walker.eigenvector = eigvec
        if cfg.orbital_opt_enabled and cfg.orbital_opt_persist and rot is not None:
            walker.kappa_theta = rot.to_vector()
        return energy

    def run_classical(self, itr: int, pop: int, batches: list) -> None:
        cfg = self.config
        population = self.populations[pop]
        foreign = population.foreign_carryover
        energies = []
        evaluated = population.pending_params or [w.params for w in population.walkers]
        for w, walker in enumerate(population.walkers):
            energy = self.evaluate_walker(itr, pop, w, walker, batches[w], foreign)
            energies.append(energy)

        for w, walker in enumerate(population.walkers):
            trial_params = evaluated[w]
            accepted = itr == 0 or energies[w] < walker.current_energy
            if accepted:
                walker.params = trial_params
                walker.current_energy = energies[w]
            walker.record_energy(energies[w])
            self.de_rows.append(
                DETraceRow(
                    iteration=itr, population=pop, walker=w, energy=energies[w],
                    accepted=accepted,
                    param_hash=sha1(np.asarray(trial_params).tobytes()).hexdigest()[:12],
                )
            )

        trials = de_step(
            [w.params for w in population.walkers],
            [w.current_energy for w in population.walkers],
            cfg.de,
            derive_seed(cfg.seed, _SEED_DE, itr, pop, 0),
        )
        population.pending_params = trials

    def cooperative_exchange(self, itr: int) -> None:
        best = []
        for population in self.populations:
            idx = int(np.argmin([w.current_energy for w in population.walkers]))
            best.append(population.walkers[idx].carryover)
        self.populations[0].foreign_carryover = best[1]
        self.populations[1].foreign_carryover = best[0]

    # -- artifacts -----------------------------------------------------------

    def flush_traces(self) -> None:
        write_de_trace(self.de_rows, self.run_dir / "de_trace.csv")
        write_timeline(
            self.recorder.records,
            self.run_dir / "timeline.csv",
            self.run_dir / "timeline.json",
        )
        write_variance_csv(self.variance_points, self.run_dir / "variance.csv")

    def write_result(self) -> None:
        per_pop = []
        for population in self.populations:
            energies = [w.best_energy for w in population.walkers]
            per_pop.append(
                {
                    "best_energy": min(energies),
                    "walker_best_energies": energies,
                }
            )
        payload = {
            "completed_iterations": self.completed_iteration + 1,
            "populations": per_pop,
            "best_energy": min(p["best_energy"] for p in per_pop),
        }
        with open(self.run_dir / "result.json", "w") as fh:
            json.dump(payload, fh, indent=1)

    def checkpoint(self, tag: str) -> None:
        arrays = {}
        meta = {
            "tag": tag,
            "completed_iteration": self.completed_iteration,
            "spec": [self.spec.n_orb, self.spec.n_alpha, self.spec.n_beta],
            "populations": [],
        }
        for p, population in enumerate(self.populations):
            pop_meta = {"walkers": [], "has_foreign": population.foreign_carryover is not None}
            if population.foreign_carryover is not None:
                pop_meta["foreign"] = _carryover_to_json(population.foreign_carryover)
            for w, walker in enumerate(population.walkers):
                key = f"p{p}_w{w}"
                arrays[f"{key}_params"] = walker.params
                if walker.kappa_theta is not None:
                    arrays[f"{key}_kappa"] = walker.kappa_theta
                if walker.occupancies is not None:
                    arrays[f"{key}_occ"] = walker.occupancies.values
                if walker.eigenvector is not None:
                    arrays[f"{key}_eig_amps"] = walker.eigenvector.amplitudes
                    arrays[f"{key}_eig_alpha"] = walker.eigenvector.basis.alpha_list
                    arrays[f"{key}_eig_beta"] = walker.eigenvector.basis.beta_list
                    arrays[f"{key}_eig_sym"] = np.asarray(
                        [walker.eigenvector.basis.spin_symmetric], dtype=bool
                    )
                pop_meta["walkers"].append(
                    {
                        "current_energy": walker.current_energy,
                        "best_energy": walker.best_energy,
                        "history": walker.history,
                        "carryover": _carryover_to_json(walker.carryover),
                        "has_kappa": walker.kappa_theta is not None,
                        "has_occ": walker.occupancies is not None,
                        "has_eig": walker.eigenvector is not None,
                    }
                )
            if population.pending_params is not None:
                for w, vec in enumerate(population.pending_params):
                    arrays[f"p{p}_pending_{w}"] = vec
                pop_meta["pending"] = len(population.pending_params)
            meta["populations"].append(pop_meta)
        base = self.run_dir / "checkpoints" / f"state_{tag}"
        np.savez(str(base) + ".npz", **arrays)
        with open(str(base) + ".json", "w") as fh:
            json.dump(meta, fh, indent=1)


def _carryover_to_json(carry: CarryoverSet) -> dict:
    return {
        "alpha": [[int(bits), float(weight)] for bits, weight in carry.alpha],
        "beta": [[int(bits), float(weight)] for bits, weight in carry.beta],
        "iteration": carry.iteration,
    }


def _carryover_from_json(data: dict) -> CarryoverSet:
    return CarryoverSet(
        alpha=tuple((int(b), float(x)) for b, x in data["alpha"]),
        beta=tuple((int(b), float(x)) for b, x in data["beta"]),
        iteration=int(data.get("iteration", 0)),
    )


def load_checkpoint(run_dir: Path, tag: str) -> dict:
    base = Path(run_dir) / "checkpoints" / f"state_{tag}"
    with open(str(base) + ".json") as fh:
        meta = json.load(fh)
    arrays = np.load(str(base) + ".npz")
    n_orb, n_alpha, n_beta = meta["spec"]
    spec = SystemSpec(n_orb, n_alpha, n_beta)
    populations = []
    for p, pop_meta in enumerate(meta["populations"]):
        walkers = []
        for w, w_meta in enumerate(pop_meta["walkers"]):
            key = f"p{p}_w{w}"
            eig = None
            if w_meta["has_eig"]:
                basis = SubspaceBasis(
                    arrays[f"{key}_eig_alpha"], arrays[f"{key}_eig_beta"], spec,
                    spin_symmetric=bool(arrays[f"{key}_eig_sym"][0]),
                )
                eig = CIVector(arrays[f"{key}_eig_amps"], basis)
            walkers.append(
                WalkerState(
                    params=arrays[f"{key}_params"].copy(),
                    current_energy=w_meta["current_energy"],
                    best_energy=w_meta["best_energy"],
                    kappa_theta=(
                        arrays[f"{key}_kappa"].copy() if w_meta["has_kappa"] else None
                    ),
                    carryover=_carryover_from_json(w_meta["carryover"]),
                    occupancies=(
                        OccupancyVector(arrays[f"{key}_occ"]) if w_meta["has_occ"] else None
                    ),
                    history=list(w_meta["history"]),
                    eigenvector=eig,
                )
            )
        pending = None
        if "pending" in pop_meta:
            pending = [arrays[f"p{p}_pending_{w}"].copy() for w in range(pop_meta["pending"])]
        foreign = _carryover_from_json(pop_meta["foreign"]) if pop_meta.get("has_foreign") else None
        populations.append(
            PopulationState(walkers=walkers, pending_params=pending, foreign_carryover=foreign)
        )
    return {
        "spec": spec,
        "completed_iteration": meta["completed_iteration"],
        "populations": populations,
    }


def latest_checkpoint_tag(run_dir: Path) -> str:
    candidates = sorted((Path(run_dir) / "checkpoints").glob("state_*.json"))
    if not candidates:
        raise ContractViolation(f"no checkpoints in {run_dir}")
    tags = [c.stem.removeprefix("state_") for c in candidates]
    iter_tags = sorted(
        (t for t in tags if t.startswith("iter")), key=lambda t: int(t[4:])
    )
    return iter_tags[-1] if iter_tags else "init"


def load_latest_checkpoint(run_dir: Path) -> dict:
    return load_checkpoint(run_dir, latest_checkpoint_tag(run_dir))


def warm_start(config: RunConfig, prior_run_dir) -> RunConfig:
    """Return a config whose walkers seed from the prior run's final state."""
    prior = Path(prior_run_dir)
    if not prior.is_dir():
        raise ContractViolation(f"prior run directory not found: {prior}")
    state = load_latest_checkpoint(prior)
    ints, spec = parse_fcidump(config.fcidump)
    if state["spec"] != spec:
        raise ContractViolation(
            f"warm start system {state['spec']} does not match {spec}"
        )
    return dataclasses.replace(config, warm_start_dir=str(prior))


# ---------------------------------------------------------------------------
# The closed loop
# ---------------------------------------------------------------------------


def _reload_traces(run: ClosedLoopRun) -> None:
    """Carry the trace files of an interrupted run into a resumed one."""
    from .reporting import read_de_trace, read_timeline, read_variance_csv

    de_path = run.run_dir / "de_trace.csv"
    if de_path.is_file():
        run.de_rows = read_de_trace(de_path)
    timeline_path = run.run_dir / "timeline.csv"
    if timeline_path.is_file():
        run.recorder.records = read_timeline(timeline_path)
        if run.recorder.records:
            # Keep the resumed clock ahead of every recorded instant.
            run.recorder.t0 = time.perf_counter() - max(
                r.end_s for r in run.recorder.records
            )
    variance_path = run.run_dir / "variance.csv"
    if variance_path.is_file():
        run.variance_points = read_variance_csv(variance_path)


def run_closed_loop(
    config: RunConfig, *, resume_dir=None, run_dir=None
) -> Path:
    """Execute the two-population closed loop and return the run directory."""
    if resume_dir is not None:
        run_dir = Path(resume_dir)
        with open(run_dir / "config.json") as fh:
            config = RunConfig.from_dict(json.load(fh))
        config.validate()
    else:
        base = config.output_dir or run_dir
        if base is None:
            base = f"sqd-run-{datetime.now().strftime('%Y%m%d-%H%M%S')}"
        run_dir = Path(base)
        if run_dir.exists() and any(run_dir.iterdir()):
            raise ContractViolation(f"output directory {run_dir} is not empty")

    run = ClosedLoopRun(config, Path(run_dir))
    start_iteration = 0
    if resume_dir is not None:
        state = load_latest_checkpoint(run.run_dir)
        run.populations = state["populations"]
        run.completed_iteration = state["completed_iteration"]
        start_iteration = run.completed_iteration + 1
        _reload_traces(run)
    else:
        with open(run.run_dir / "config.json", "w") as fh:
            json.dump(config.to_dict(), fh, indent=1)
        run.initialize_walkers()
        run.checkpoint("init")

    executor = ThreadPoolExecutor(max_workers=2, thread_name_prefix="sampler")
    cancel_events = [threading.Event(), threading.Event()]
    futures: dict[int, object] = {}

    def launch(itr: int, pop: int) -> None:
        params = run.populations[pop].pending_params
        throw_start = time.perf_counter()
        futures[pop] = executor.submit(
            run.run_quantum, itr, pop, params, cancel_events[pop]
        )
        run.recorder.add("throw", pop, -1, itr, throw_start, time.perf_counter())

    try:
        if start_iteration < config.max_iterations:
            launch(start_iteration, 0)
            launch(start_iteration, 1)
        for itr in range(start_iteration, config.max_iterations):
            for pop in (0, 1):
                retrieve_start = time.perf_counter()
                batches = futures[pop].result()
                run.recorder.add("retrieve", pop, -1, itr,
                                 retrieve_start, time.perf_counter())
                run.run_classical(itr, pop, batches)
                if itr + 1 < config.max_iterations:
                    launch(itr + 1, pop)
            if (
                config.cooperative_start is not None
                and itr >= config.cooperative_start
            ):
                run.cooperative_exchange(itr)
            run.completed_iteration = itr
            run.checkpoint(f"iter{itr:03d}")
            run.flush_traces()
    except BaseException:
        for event in cancel_events:
            event.set()
        executor.shutdown(wait=True, cancel_futures=True)
        run.flush_traces()
        run.checkpoint("abort")
        raise
    executor.shutdown(wait=True)
    run.flush_traces()
    run.write_result()
    return run.run_dir
