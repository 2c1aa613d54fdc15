"""Shared fixtures: a shrunken scenario preset, an on-disk micro corpus and a
small model sized so that every unit test runs in seconds on one CPU core."""

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from csilab.channel import (ArrayGeometry, CsiSample, GridSpec, ScenarioPreset,
                            build_corpus)
from csilab.model import ModelConfig, build_model
from csilab.storage import read_dataset
from csilab.training import Corpus

TINY_GRID = GridSpec(t_samples=8, subcarriers=12, dt_s=1e-3, df_hz=90e3,
                     f1_hz=2.5e9)
TINY_GEOM = ArrayGeometry(2, 1)

# verdict lines appended by the acceptance tests, echoed after the run so
# they stay visible under captured output
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def micro_preset(name="micro", los_probability=1.0, path_count=(1, 2),
                 speed_kmh=(5.0, 15.0)):
    geometry = ArrayGeometry(2, 1)
    coarse = GridSpec(16, 24, 1e-3, 90e3, 2.5e9)
    fine = GridSpec(12, 24, 5e-5, 30e3, 2.5e9)
    return ScenarioPreset(name=name, path_count=path_count, carrier_hz=2.5e9,
                          speed_kmh=speed_kmh, delay_spread_s=(20e-9, 200e-9),
                          los_probability=los_probability, gain_decay_db=3.0,
                          los_k_factor_db=10.0, coarse_grid=coarse,
                          fine_grid=fine, geometry=geometry)


def random_sample(grid=TINY_GRID, geom=TINY_GEOM, seed=0):
    rng = np.random.default_rng(seed)
    shape = (grid.t_samples, grid.subcarriers, geom.n_elements)
    values = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return CsiSample(values, grid, geom)


TINY_MODEL = ModelConfig(hidden_dim=24, decoder_dim=0, enc_depth=1,
                         dec_depth=1, heads=2, experts_total=4,
                         experts_active=2, expert_dim=16, patch_t=4,
                         patch_f=4, patch_s=4, conf_hidden=8)


@pytest.fixture
def tiny_grid():
    return TINY_GRID


@pytest.fixture
def tiny_geom():
    return TINY_GEOM


@pytest.fixture
def tiny_model():
    return build_model(TINY_MODEL, seed=0)


@pytest.fixture(scope="session")
def micro_corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    build_corpus([micro_preset()], counts=(8, 2, 4), out_dir=out, seed=3)
    return out


@pytest.fixture(scope="session")
def micro_corpus(micro_corpus_dir):
    coarse = [read_dataset(micro_corpus_dir / "micro_coarse_train.csids")]
    fine = [read_dataset(micro_corpus_dir / "micro_fine_train.csids")]
    return Corpus(coarse=coarse, fine=fine)


@pytest.fixture(scope="session")
def micro_test_corpus(micro_corpus_dir):
    coarse = [read_dataset(micro_corpus_dir / "micro_coarse_test.csids")]
    fine = [read_dataset(micro_corpus_dir / "micro_fine_test.csids")]
    return Corpus(coarse=coarse, fine=fine)
