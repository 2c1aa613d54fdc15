"""Geometric multipath simulator for space-time-frequency CSI tensors.

A channel sample is a complex tensor H[t, k, n] over time samples, subcarriers
and antenna elements, synthesized as a sum of planar paths

    H[t, k, :] = sum_p  gain_p * a(az_p, el_p) * exp(j*2*pi*(nu_p*t - tau_p*f_k))

with t_i = i*dt (1-based), f_k = f1 + (k-1)*df, and a(.) the UPA steering
vector. Presets bundle path statistics and desk-scale sampling grids for a few
named scenarios; ``build_corpus`` materializes seeded train/val/test datasets.
"""

import math
from dataclasses import dataclass

import numpy as np

from .numeric import SeededRng

SPEED_OF_LIGHT = 299792458.0


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array, row-major element order, index m*n_vertical + n."""

    n_horizontal: int
    n_vertical: int = 1
    spacing_wavelengths: float = 0.5

    @property
    def n_elements(self):
        return self.n_horizontal * self.n_vertical


@dataclass(frozen=True)
class GridSpec:
    """Sampling lattice of a CSI tensor."""

    t_samples: int
    subcarriers: int
    dt_s: float
    df_hz: float
    f1_hz: float

    @property
    def shape2d(self):
        return (self.t_samples, self.subcarriers)


@dataclass(frozen=True)
class PathParams:
    gain: complex
    doppler_hz: float
    delay_s: float
    azimuth_rad: float
    elevation_rad: float


@dataclass
class CsiSample:
    """One channel realization on a grid; values has shape (T, K, N)."""

    values: np.ndarray
    grid: GridSpec
    geometry: ArrayGeometry

    def copy(self):
        return CsiSample(self.values.copy(), self.grid, self.geometry)


@dataclass(frozen=True)
class NoiseSpec:
    """Additive-noise setting for an evaluation row; +inf means noiseless."""

    snr_db: float
    seed: int


@dataclass(frozen=True)
class ScenarioPreset:
    name: str
    path_count: tuple
    carrier_hz: float
    speed_kmh: tuple
    delay_spread_s: tuple
    los_probability: float
    gain_decay_db: float
    los_k_factor_db: float
    coarse_grid: GridSpec
    fine_grid: GridSpec
    geometry: ArrayGeometry

    def grid_for(self, kind):
        if kind == "coarse":
            return self.coarse_grid
        if kind == "fine":
            return self.fine_grid
        raise ValueError(f"unknown grid kind {kind!r}")


def steering_vector(geometry, azimuth_rad, elevation_rad):
    """Array response with unit-modulus entries, phase reference at (0, 0).

    Element (m, n) carries phase 2*pi*spacing*(m*sin(az)*sin(el) + n*cos(el)).
    """
    m = np.arange(geometry.n_horizontal)
    n = np.arange(geometry.n_vertical)
    phase = 2.0 * np.pi * geometry.spacing_wavelengths * (
        m[:, None] * (math.sin(azimuth_rad) * math.sin(elevation_rad))
        + n[None, :] * math.cos(elevation_rad))
    return np.exp(1j * phase).reshape(-1)


def synth_channel(grid, geometry, paths):
    """Superpose planar paths on the sampling grid; exact float64 phases."""
    if not paths:
        raise ValueError("need at least one path")
    t = (np.arange(grid.t_samples) + 1.0) * grid.dt_s
    f = grid.f1_hz + np.arange(grid.subcarriers) * grid.df_hz
    values = np.zeros((grid.t_samples, grid.subcarriers, geometry.n_elements),
                      dtype=np.complex128)
    for p in paths:
        a = steering_vector(geometry, p.azimuth_rad, p.elevation_rad)
        phase = 2.0 * np.pi * (p.doppler_hz * t[:, None] - p.delay_s * f[None, :])
        values += p.gain * np.exp(1j * phase)[:, :, None] * a[None, None, :]
    return CsiSample(values, grid, geometry)


def sample_scenario(preset, rng):
    """Draw one multipath realization from a preset.

    Total path power is normalized to 1; path 0 is the earliest arrival and
    carries the K-factor boost when the LoS coin comes up.
    """
    lo, hi = preset.path_count
    n_paths = int(rng.integers(lo, hi + 1))
    speed_mps = float(rng.uniform(*preset.speed_kmh)) / 3.6
    spread = float(rng.uniform(*preset.delay_spread_s))
    los = bool(rng.uniform() < preset.los_probability)
    wavelength = SPEED_OF_LIGHT / preset.carrier_hz

    power_db = -preset.gain_decay_db * np.arange(n_paths, dtype=np.float64)
    if los:
        power_db[0] += preset.los_k_factor_db
    power = 10.0 ** (power_db / 10.0)
    power /= power.sum()

    phases = rng.uniform(0.0, 2.0 * np.pi, n_paths)
    travel = rng.uniform(0.0, 2.0 * np.pi, n_paths)
    azimuth = rng.uniform(-np.pi / 2.0, np.pi / 2.0, n_paths)
    delays = np.concatenate(([0.0], rng.uniform(0.0, max(spread, 0.0), max(n_paths - 1, 0))))

    paths = []
    for p in range(n_paths):
        gain = complex(np.sqrt(power[p]) * np.exp(1j * phases[p]))
        doppler = speed_mps / wavelength * math.cos(travel[p])
        paths.append(PathParams(gain=gain, doppler_hz=doppler,
                                delay_s=float(delays[p]),
                                azimuth_rad=float(azimuth[p]),
                                elevation_rad=np.pi / 2.0))
    return paths


def add_awgn(sample, snr_db, rng):
    """Circularly symmetric complex noise at the given SNR; +inf is a no-op.

    Per-element noise variance is mean(|H|^2) / 10^(snr_db/10), split evenly
    between the real and imaginary parts.
    """
    if snr_db == math.inf:
        return sample.copy()
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    values = sample.values
    power = float(np.mean(np.abs(values) ** 2))
    var = power / (10.0 ** (snr_db / 10.0))
    draw = rng.normal(0.0, math.sqrt(var / 2.0), (2,) + values.shape)
    noisy = values + draw[0] + 1j * draw[1]
    return CsiSample(noisy, sample.grid, sample.geometry)


def _preset(name, path_count, carrier_hz, speed_kmh, delay_spread_s,
            los_probability, gain_decay_db, coarse_dt, fine_dt):
    geometry = ArrayGeometry(n_horizontal=4, n_vertical=1)
    coarse = GridSpec(t_samples=32, subcarriers=64, dt_s=coarse_dt,
                      df_hz=90e3, f1_hz=carrier_hz)
    fine = GridSpec(t_samples=28, subcarriers=72, dt_s=fine_dt,
                    df_hz=30e3, f1_hz=carrier_hz)
    return ScenarioPreset(name=name, path_count=path_count, carrier_hz=carrier_hz,
                          speed_kmh=speed_kmh, delay_spread_s=delay_spread_s,
                          los_probability=los_probability,
                          gain_decay_db=gain_decay_db, los_k_factor_db=10.0,
                          coarse_grid=coarse, fine_grid=fine, geometry=geometry)


PRESETS = {
    "indoor-los": _preset("indoor-los", (1, 3), 2.5e9, (0.5, 3.0),
                          (20e-9, 200e-9), 1.0, 3.0, 1e-3, 5e-5),
    "uma-nlos": _preset("uma-nlos", (6, 12), 2.5e9, (30.0, 100.0),
                        (200e-9, 1000e-9), 0.0, 2.0, 1e-3, 5e-5),
    "highspeed": _preset("highspeed", (2, 6), 3.5e9, (200.0, 300.0),
                         (50e-9, 500e-9), 0.5, 2.5, 5e-4, 2.5e-5),
}

SPLIT_NAMES = ("train", "val", "test")


def build_corpus(presets, counts, out_dir, seed, kinds=("coarse", "fine")):
    """Generate and write seeded datasets for each preset, kind and split.

    ``counts`` is (train, val, test). All samples of one (preset, kind) are
    drawn from a single child stream and then partitioned into consecutive
    disjoint splits, so the three files cover the draw exactly once. Returns
    the list of written paths. Same arguments -> byte-identical files.
    """
    from . import storage
    from pathlib import Path

    counts = tuple(int(c) for c in counts)
    if len(counts) != len(SPLIT_NAMES) or any(c < 0 for c in counts):
        raise ValueError(f"counts must be three non-negative ints, got {counts}")
    if sum(counts) == 0:
        raise ValueError("sample count must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = SeededRng(seed)
    written = []
    for pi, preset in enumerate(presets):
        for ki, kind in enumerate(kinds):
            grid = preset.grid_for(kind)
            stream = root.child(pi * 8 + ki)
            total = sum(counts)
            values = np.empty((total, grid.t_samples, grid.subcarriers,
                               preset.geometry.n_elements), dtype=np.complex64)
            for s in range(total):
                paths = sample_scenario(preset, stream.child(s))
                values[s] = synth_channel(grid, preset.geometry, paths).values
            start = 0
            for split, count in zip(SPLIT_NAMES, counts):
                part = values[start:start + count]
                start += count
                path = out_dir / f"{preset.name}_{kind}_{split}.csids"
                storage.write_dataset(path, part, grid, preset.geometry,
                                      split=split, seed=stream.seed)
                written.append(path)
    return written
