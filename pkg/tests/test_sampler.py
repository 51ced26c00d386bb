import math
import threading

import numpy as np
import pytest
from scipy.linalg import expm

from sqd.chem import CapacityError, Configuration, ContractViolation, SystemSpec, hf_configuration, popcount
from sqd.sampler import (
    DeterminantState,
    LucjParameters,
    NoiseModel,
    SampleBatch,
    SamplerCancelled,
    apply_noise,
    execute_sampler_job,
    givens_decompose,
    init_parameters,
    lucj_state,
    params_to_vector,
    read_parameters,
    read_sample_batch,
    sample_counts,
    vector_to_params,
    write_parameters,
    write_sample_batch,
)


def random_params(n_orb, layers, seed, magnitude=0.3):
    return init_parameters("random", n_orb=n_orb, layers=layers, seed=seed,
                           magnitude=magnitude)


class TestLucjState:
    def test_empty_circuit_is_reference_indicator(self):
        spec = SystemSpec(4, 2, 2)
        ref = hf_configuration(spec)
        state = lucj_state(LucjParameters((), ()), spec, ref)
        idx = np.unravel_index(np.argmax(np.abs(state.amplitudes)), state.amplitudes.shape)
        assert abs(state.amplitudes[idx] - 1.0) < 1e-14
        assert abs(state.norm() - 1.0) < 1e-14

    def test_pure_jastrow_is_reference_phase(self):
        spec = SystemSpec(3, 2, 1)
        ref = hf_configuration(spec)
        rng = np.random.default_rng(0)
        j = rng.normal(size=(3, 3))
        j = (j + j.T) / 2
        params = LucjParameters((np.zeros((3, 3)),), (j,))
        state = lucj_state(params, spec, ref)
        probs = np.abs(state.amplitudes) ** 2
        assert abs(probs.sum() - 1.0) < 1e-12
        assert probs.max() > 1.0 - 1e-12  # point mass on the reference
        batch = sample_counts(state, 50, seed=1)
        assert batch.counts == {ref: 50}

    def test_single_givens_two_level_closed_form(self):
        theta = 0.81
        kernel = np.array([[0.0, -theta], [theta, 0.0]])
        spec = SystemSpec(2, 1, 0)
        params = LucjParameters((kernel,), (np.zeros((2, 2)),))
        state = lucj_state(params, spec, Configuration(0b01, 0))
        amps = state.amplitudes.ravel().real
        assert abs(abs(amps[0]) - math.cos(theta)) < 1e-12
        assert abs(abs(amps[1]) - math.sin(theta)) < 1e-12

    def test_particle_number_conserved(self):
        spec = SystemSpec(5, 3, 2)
        params = random_params(5, 2, seed=3)
        state = lucj_state(params, spec, hf_configuration(spec))
        for i, a in enumerate(state.alpha_list):
            assert popcount(int(a)) == 3
        for j, b in enumerate(state.beta_list):
            assert popcount(int(b)) == 2
        assert abs(state.norm() - 1.0) < 1e-10

    def test_norm_preserved_across_layers(self):
        spec = SystemSpec(4, 2, 2)
        for seed in range(5):
            params = random_params(4, 3, seed=seed, magnitude=0.7)
            state = lucj_state(params, spec, hf_configuration(spec))
            assert abs(state.norm() - 1.0) < 1e-10

    def test_thouless_density_transform(self):
        spec = SystemSpec(5, 2, 3)
        rng = np.random.default_rng(11)
        kernel = rng.normal(size=(5, 5))
        kernel = (kernel - kernel.T) / 2
        params = LucjParameters((kernel,), (np.zeros((5, 5)),))
        state = lucj_state(params, spec, hf_configuration(spec))
        phi = expm(kernel)
        weights = np.abs(state.amplitudes) ** 2
        for axis, n_e, half_list in ((0, 2, state.alpha_list), (1, 3, state.beta_list)):
            occ = ((half_list[:, None] >> np.arange(5)[None, :]) & 1).astype(float)
            sector = weights.sum(axis=1 - axis)
            density_diag = sector @ occ
            gamma_ref = np.diag([1.0] * n_e + [0.0] * (5 - n_e))
            expected = np.diag(phi @ gamma_ref @ phi.T)
            assert np.max(np.abs(density_diag - expected)) < 1e-10

    def test_capacity_cap(self):
        spec = SystemSpec(6, 3, 3)
        with pytest.raises(CapacityError):
            lucj_state(LucjParameters((), ()), spec, hf_configuration(spec), cap=100)

    def test_bad_reference_rejected(self):
        spec = SystemSpec(4, 2, 2)
        with pytest.raises(ContractViolation):
            lucj_state(LucjParameters((), ()), spec, Configuration(0b0111, 0b0011))

    def test_non_antisymmetric_kernel_rejected(self):
        with pytest.raises(ContractViolation):
            LucjParameters((np.ones((3, 3)),), (np.zeros((3, 3)),))


class TestGivensDecomposition:
    @pytest.mark.parametrize("n", [2, 3, 6, 9])
    def test_reconstruction(self, n):
        rng = np.random.default_rng(n)
        kernel = rng.normal(size=(n, n))
        kernel = kernel - kernel.T
        phi = expm(kernel)
        rotations, signs = givens_decompose(phi)
        rebuilt = np.diag(signs)
        for i, j, theta in reversed(rotations):
            g = np.eye(n)
            c, s = math.cos(theta), math.sin(theta)
            g[i, i] = c
            g[i, j] = -s
            g[j, i] = s
            g[j, j] = c
            rebuilt = g @ rebuilt
        assert np.max(np.abs(rebuilt - phi)) < 1e-12
        assert int(np.sum(signs < 0)) % 2 == 0


class TestSampling:
    def test_uniform_state_frequencies(self):
        spec = SystemSpec(4, 1, 1)
        alpha = np.array([0b0001, 0b0010], dtype=np.int64)
        amps = np.full((2, 2), 0.5, dtype=complex)
        state = DeterminantState(amps, alpha, alpha, spec)
        shots = 100_000
        batch = sample_counts(state, shots, seed=5)
        sigma = math.sqrt(shots * 0.25 * 0.75)
        for count in batch.counts.values():
            assert abs(count - shots / 4) < 5 * sigma

    def test_seed_determinism(self):
        spec = SystemSpec(4, 2, 2)
        params = random_params(4, 1, seed=9)
        state = lucj_state(params, spec, hf_configuration(spec))
        a = sample_counts(state, 2000, seed=42)
        b = sample_counts(state, 2000, seed=42)
        assert a.counts == b.counts

    def test_empirical_distribution_converges(self):
        spec = SystemSpec(4, 2, 2)
        params = random_params(4, 1, seed=13, magnitude=0.6)
        state = lucj_state(params, spec, hf_configuration(spec))
        shots = 1_000_000
        batch = sample_counts(state, shots, seed=3)
        probs = np.abs(state.amplitudes) ** 2
        empirical = np.zeros_like(probs)
        for conf, count in batch.counts.items():
            ia = int(np.searchsorted(state.alpha_list, conf.alpha))
            ib = int(np.searchsorted(state.beta_list, conf.beta))
            empirical[ia, ib] = count / shots
        tv = 0.5 * np.sum(np.abs(empirical - probs))
        assert tv < 0.01

    def test_counts_sum_checked(self):
        with pytest.raises(ContractViolation):
            SampleBatch({Configuration(1, 1): 3}, 5, "ideal")


class TestNoise:
    def test_zero_noise_identity(self):
        spec = SystemSpec(4, 2, 2)
        batch = SampleBatch({hf_configuration(spec): 100}, 100, "ideal")
        noisy = apply_noise(batch, NoiseModel(0.0), seed=1, n_orb=4)
        assert noisy.counts == batch.counts
        assert noisy.provenance == "noisy"

    def test_full_noise_inverts_everything(self):
        spec = SystemSpec(4, 2, 2)
        ref = hf_configuration(spec)
        batch = SampleBatch({ref: 10}, 10, "ideal")
        noisy = apply_noise(batch, NoiseModel(1.0), seed=1, n_orb=4)
        flipped = Configuration(ref.alpha ^ 0b1111, ref.beta ^ 0b1111)
        assert noisy.counts == {flipped: 10}

    def test_wrong_popcount_fraction_matches_analytic(self):
        # 36 orbitals per sector, 27 + 27 electrons, eps = 0.01: the chance a
        # sector keeps its popcount is sum_k C(n_occ,k) C(n_emp,k) e^2k (1-e)^(n-2k)...
        n_orb, n_occ = 36, 27
        eps = 0.01
        shots = 100_000
        spec = SystemSpec(n_orb, n_occ, n_occ)
        ref = hf_configuration(spec)

        def sector_preserved_probability():
            total = 0.0
            for k in range(0, min(n_occ, n_orb - n_occ) + 1):
                ways = math.comb(n_occ, k) * math.comb(n_orb - n_occ, k)
                total += ways * eps ** (2 * k) * (1 - eps) ** (n_orb - 2 * k)
            return total

        p_keep = sector_preserved_probability() ** 2
        p_wrong = 1.0 - p_keep
        batch = SampleBatch({ref: shots}, shots, "ideal")
        noisy = apply_noise(batch, NoiseModel(eps), seed=8, n_orb=n_orb)
        wrong = sum(
            count
            for conf, count in noisy.counts.items()
            if popcount(conf.alpha) != n_occ or popcount(conf.beta) != n_occ
        )
        sigma = math.sqrt(shots * p_wrong * (1 - p_wrong))
        assert abs(wrong - shots * p_wrong) < 5 * sigma

    def test_rate_validation(self):
        with pytest.raises(ContractViolation):
            NoiseModel(-0.1)
        with pytest.raises(ContractViolation):
            NoiseModel(1.5)


class TestParameterIO:
    def test_perturbed_with_zero_magnitude_is_identity(self, tmp_path):
        base = random_params(4, 2, seed=1)
        path = tmp_path / "params.json"
        write_parameters(base, path)
        again = init_parameters("perturbed-file", path=path, magnitude=0.0, seed=5)
        for a, b in zip(base.kernels, again.kernels):
            assert np.allclose(a, b, atol=1e-15)
        for a, b in zip(base.couplings, again.couplings):
            assert np.allclose(a, b, atol=1e-15)

    def test_random_mode_bounds(self):
        params = init_parameters("random", n_orb=5, layers=2, magnitude=0.05, seed=2)
        vec = params_to_vector(params)
        assert np.max(np.abs(vec)) <= 0.05

    def test_perturbation_preserves_antisymmetry(self, tmp_path):
        base = random_params(5, 1, seed=3)
        path = tmp_path / "params.json"
        write_parameters(base, path)
        perturbed = init_parameters("perturbed-file", path=path, magnitude=0.05, seed=7)
        for k in perturbed.kernels:
            assert np.max(np.abs(k + k.T)) < 1e-14
        for j in perturbed.couplings:
            assert np.max(np.abs(j - j.T)) < 1e-14

    def test_file_roundtrip(self, tmp_path):
        base = random_params(6, 3, seed=4)
        path = tmp_path / "params.json"
        write_parameters(base, path)
        again = read_parameters(path)
        assert again.layers == 3 and again.n_orb == 6
        assert np.allclose(params_to_vector(base), params_to_vector(again))

    def test_vector_roundtrip(self):
        base = random_params(5, 2, seed=6)
        vec = params_to_vector(base)
        again = vector_to_params(vec, 5, 2)
        assert np.allclose(params_to_vector(again), vec)

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"layers": 2, "K": [[0.0]], "J": [[0.0]]}')
        with pytest.raises(ContractViolation):
            read_parameters(path)


class TestBatchIO:
    def test_export_import_roundtrip(self, tmp_path):
        spec = SystemSpec(4, 2, 2)
        counts = {
            Configuration(0b0011, 0b0011): 7,
            Configuration(0b0101, 0b1010): 3,
        }
        batch = SampleBatch(counts, 10, "noisy")
        path = tmp_path / "batch.txt"
        write_sample_batch(batch, path, 4)
        lines = path.read_text().splitlines()
        assert lines[0].split()[0] == "11001100"
        again = read_sample_batch(path)
        assert again.counts == counts
        assert again.shots == 10


class TestSamplerJob:
    def test_job_produces_noisy_batch_with_interval(self):
        spec = SystemSpec(4, 2, 2)
        params = random_params(4, 1, seed=1)
        batch = execute_sampler_job(
            params, spec, hf_configuration(spec), 200, NoiseModel(0.05), 3,
            repetition_rate_s=1e-5,
        )
        assert batch.shots == 200
        assert batch.provenance == "noisy"
        assert batch.ended_at - batch.started_at >= 200 * 1e-5

    def test_cancellation(self):
        spec = SystemSpec(4, 2, 2)
        params = random_params(4, 1, seed=1)
        event = threading.Event()
        event.set()
        with pytest.raises(SamplerCancelled):
            execute_sampler_job(
                params, spec, hf_configuration(spec), 100, NoiseModel(0.0), 1,
                repetition_rate_s=1e-3, cancel_event=event,
            )
