import math

import numpy as np
import pytest

from conftest import TINY_GEOM, TINY_GRID, micro_preset, random_sample
from csilab.channel import (ArrayGeometry, GridSpec, PathParams, add_awgn,
                            build_corpus, sample_scenario, steering_vector,
                            synth_channel)
from csilab.numeric import SeededRng


class TestSteeringVector:
    def test_single_element(self):
        vec = steering_vector(ArrayGeometry(1, 1), 0.3, 1.1)
        np.testing.assert_allclose(vec, [1.0 + 0.0j])

    def test_broadside_all_ones(self):
        # azimuth 0, elevation pi/2 zeroes both phase terms
        vec = steering_vector(ArrayGeometry(3, 2), 0.0, np.pi / 2.0)
        np.testing.assert_allclose(vec, np.ones(6), atol=1e-12)

    def test_half_wavelength_endfire(self):
        # per-element increment pi: 2*pi*0.5*sin(pi/2)*sin(pi/2)
        vec = steering_vector(ArrayGeometry(2, 1, 0.5), np.pi / 2.0,
                              np.pi / 2.0)
        np.testing.assert_allclose(vec, [1.0, -1.0], atol=1e-12)

    def test_unit_modulus(self):
        vec = steering_vector(ArrayGeometry(4, 2), 0.7, 0.4)
        np.testing.assert_allclose(np.abs(vec), 1.0, atol=1e-12)


class TestSynthChannel:
    def test_static_path_is_constant_one(self):
        paths = [PathParams(1.0 + 0.0j, 0.0, 0.0, 0.0, np.pi / 2.0)]
        sample = synth_channel(TINY_GRID, ArrayGeometry(1, 1), paths)
        np.testing.assert_allclose(sample.values, 1.0 + 0.0j, atol=1e-12)

    def test_delay_only_linear_phase_in_frequency(self):
        tau = 1e-7
        paths = [PathParams(1.0 + 0.0j, 0.0, tau, 0.0, np.pi / 2.0)]
        sample = synth_channel(TINY_GRID, ArrayGeometry(1, 1), paths)
        np.testing.assert_allclose(np.abs(sample.values), 1.0, atol=1e-12)
        step = sample.values[:, 1:] / sample.values[:, :-1]
        expected = np.exp(-2j * np.pi * tau * TINY_GRID.df_hz)
        np.testing.assert_allclose(step, expected, atol=1e-12)

    def test_opposite_paths_cancel(self):
        shared = dict(doppler_hz=0.0, delay_s=0.0, azimuth_rad=0.0,
                      elevation_rad=np.pi / 2.0)
        paths = [PathParams(gain=1.0 + 0.0j, **shared),
                 PathParams(gain=-1.0 + 0.0j, **shared)]
        sample = synth_channel(TINY_GRID, ArrayGeometry(1, 1), paths)
        assert abs(sample.values[0, 0, 0]) < 1e-12

    def test_empty_path_list(self):
        with pytest.raises(ValueError):
            synth_channel(TINY_GRID, TINY_GEOM, [])

    def test_doppler_time_constant_when_zero(self):
        paths = [PathParams(0.5 + 0.5j, 0.0, 3e-8, 0.4, np.pi / 2.0)]
        sample = synth_channel(TINY_GRID, TINY_GEOM, paths)
        ref = sample.values[0]
        for t in range(1, TINY_GRID.t_samples):
            np.testing.assert_allclose(sample.values[t], ref, rtol=1e-12)


class TestSampleScenario:
    def test_path_count_range_pinned(self):
        preset = micro_preset(path_count=(1, 1))
        for seed in range(20):
            assert len(sample_scenario(preset, SeededRng(seed))) == 1

    def test_same_seed_identical(self):
        preset = micro_preset()
        a = sample_scenario(preset, SeededRng(11))
        b = sample_scenario(preset, SeededRng(11))
        assert a == b

    def test_zero_speed_zero_doppler(self):
        preset = micro_preset(speed_kmh=(0.0, 0.0))
        rng = SeededRng(0)
        for i in range(1000):
            for path in sample_scenario(preset, rng.child(i)):
                assert path.doppler_hz == 0.0

    def test_first_delay_zero_and_power_normalized(self):
        preset = micro_preset(path_count=(3, 3))
        paths = sample_scenario(preset, SeededRng(4))
        assert paths[0].delay_s == 0.0
        total = sum(abs(p.gain) ** 2 for p in paths)
        assert total == pytest.approx(1.0, rel=1e-9)


class TestAddAwgn:
    def test_infinite_snr_is_identity(self):
        sample = random_sample()
        noisy = add_awgn(sample, math.inf, SeededRng(0))
        np.testing.assert_array_equal(noisy.values, sample.values)

    def test_zero_db_noise_power(self):
        grid = GridSpec(50, 50, 1e-3, 90e3, 2.5e9)
        geom = ArrayGeometry(8, 1)
        sample = random_sample(grid, geom, seed=1)
        sample.values /= np.sqrt(np.mean(np.abs(sample.values) ** 2))
        noisy = add_awgn(sample, 0.0, SeededRng(2))
        noise_power = np.mean(np.abs(noisy.values - sample.values) ** 2)
        assert abs(noise_power - 1.0) < 0.05

    def test_twenty_db_empirical_snr(self):
        grid = GridSpec(50, 50, 1e-3, 90e3, 2.5e9)
        geom = ArrayGeometry(8, 1)
        sample = random_sample(grid, geom, seed=3)
        noisy = add_awgn(sample, 20.0, SeededRng(5))
        signal = np.mean(np.abs(sample.values) ** 2)
        noise = np.mean(np.abs(noisy.values - sample.values) ** 2)
        snr_db = 10.0 * np.log10(signal / noise)
        assert abs(snr_db - 20.0) < 0.2

    def test_negative_infinity_rejected(self):
        with pytest.raises(ValueError):
            add_awgn(random_sample(), -math.inf, SeededRng(0))


class TestBuildCorpus:
    def test_two_presets_make_two_datasets_per_kind(self, tmp_path):
        presets = [micro_preset("alpha"), micro_preset("beta")]
        written = build_corpus(presets, (10, 0, 0), tmp_path, seed=0,
                               kinds=("coarse",))
        names = sorted(p.name for p in written)
        assert names == ["alpha_coarse_test.csids", "alpha_coarse_train.csids",
                         "alpha_coarse_val.csids", "beta_coarse_test.csids",
                         "beta_coarse_train.csids", "beta_coarse_val.csids"]
        from csilab.storage import read_dataset
        assert read_dataset(tmp_path / "alpha_coarse_train.csids").count == 10
        assert read_dataset(tmp_path / "beta_coarse_train.csids").count == 10

    def test_split_partitions_the_draw(self, tmp_path):
        build_corpus([micro_preset()], (6, 2, 2), tmp_path, seed=1,
                     kinds=("coarse",))
        from csilab.storage import read_dataset
        parts = [read_dataset(tmp_path / f"micro_coarse_{s}.csids").values
                 for s in ("train", "val", "test")]
        assert [p.shape[0] for p in parts] == [6, 2, 2]
        merged = np.concatenate(parts)
        # regenerating with train-only counts reproduces the same leading draw
        build_corpus([micro_preset()], (10, 0, 0), tmp_path / "again", seed=1,
                     kinds=("coarse",))
        full = read_dataset(tmp_path / "again" / "micro_coarse_train.csids")
        np.testing.assert_array_equal(merged, full.values)

    def test_same_seed_byte_identical(self, tmp_path):
        build_corpus([micro_preset()], (4, 1, 1), tmp_path / "a", seed=7)
        build_corpus([micro_preset()], (4, 1, 1), tmp_path / "b", seed=7)
        for name in ("micro_coarse_train.csids", "micro_fine_val.csids"):
            assert (tmp_path / "a" / name).read_bytes() == \
                   (tmp_path / "b" / name).read_bytes()

    def test_zero_total_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            build_corpus([micro_preset()], (0, 0, 0), tmp_path, seed=0)
