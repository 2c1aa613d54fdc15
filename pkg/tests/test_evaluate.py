import math

import numpy as np
import pytest
import torch

from conftest import TINY_GEOM, TINY_GRID, TINY_MODEL, random_sample
from csilab.channel import ArrayGeometry, GridSpec, PathParams, synth_channel
from csilab.evaluate import (EvalReport, EvalRow, PATTERN_LABELS, RATIO_LABELS,
                             ScenarioClassifier, FinetuneConfig, aggregate_db,
                             baseline_interpolate_ce,
                             baseline_linear_extrapolate, classification_tokens,
                             confidence_cdf_rows, confidence_mae, f1_binary,
                             finetune_scenario_classifier,
                             matched_filter_precoder, nmse, routing_csv_rows,
                             run_baselines, run_zero_shot, spectral_efficiency)
from csilab.model import (RoutingStats, build_model, parameter_checksum,
                          suffix_region, unpatchify_tokens)
from csilab.pipeline import PilotPattern
from csilab.storage import Dataset


def make_dataset(values, name="ds", grid=TINY_GRID, geom=TINY_GEOM,
                 split="test", seed=0):
    return Dataset(name=name, values=np.asarray(values, dtype=np.complex64),
                   grid=grid, geometry=geom, split=split, seed=seed)


def random_dataset(count=3, seed=0, name="rand"):
    rng = np.random.default_rng(seed)
    shape = (count, TINY_GRID.t_samples, TINY_GRID.subcarriers,
             TINY_GEOM.n_elements)
    values = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return make_dataset(values, name=name)


def linear_time_values(t_samples=8, subcarriers=12, antennas=2, seed=1):
    """values[t] = a + b * t with complex coefficients varying over (k, n)."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((subcarriers, antennas)) + \
        1j * rng.standard_normal((subcarriers, antennas))
    b = rng.standard_normal((subcarriers, antennas)) + \
        1j * rng.standard_normal((subcarriers, antennas))
    t = np.arange(t_samples).reshape(-1, 1, 1)
    return a[None] + b[None] * t


class IdentityModel:
    """Oracle stand-in whose output tokens equal its input tokens.

    A tiny constant offset keeps the final-time snapshot nonzero where the
    input was zero-filled, so the matched-filter precoder stays defined.
    """

    def __init__(self, config=TINY_MODEL, offset=1e-6):
        self.config = config
        self.offset = offset

    def eval(self):
        return self

    def forward_planes(self, tokens, dims, shape, plan, task_id,
                       with_confidence=False):
        planes = unpatchify_tokens(tokens, dims, shape, self.config.patch)
        planes = planes + self.offset
        conf = torch.zeros(tokens.shape[0]) if with_confidence else None
        return planes, conf, []


class TestNmse:
    def test_exact_match_hits_floor(self):
        x = np.ones((4, 3), dtype=complex)
        assert nmse(x, x) == pytest.approx(-120.0)

    def test_zero_prediction_is_zero_db(self):
        truth = np.full((5, 2), 1.0 + 1.0j)
        assert nmse(np.zeros_like(truth), truth) == pytest.approx(0.0)

    def test_double_prediction_is_zero_db(self):
        truth = np.full((5, 2), 2.0 - 1.0j)
        assert nmse(2.0 * truth, truth) == pytest.approx(0.0)

    def test_region_restricts_the_comparison(self):
        truth = np.ones((4,), dtype=complex)
        pred = truth.copy()
        pred[0] = 100.0
        region = np.array([False, True, True, True])
        assert nmse(pred, truth, region) == pytest.approx(-120.0)
        assert nmse(pred, truth) > 0.0

    def test_zero_power_reference_raises(self):
        with pytest.raises(ValueError):
            nmse(np.ones(3), np.zeros(3))

    def test_custom_floor(self):
        x = np.ones(3, dtype=complex)
        assert nmse(x, x, floor_db=-60.0) == pytest.approx(-60.0)


class TestMatchedFilterPrecoder:
    def test_unit_norm_columns(self):
        rng = np.random.default_rng(0)
        h = rng.standard_normal((4, 6)) + 1j * rng.standard_normal((4, 6))
        p = matched_filter_precoder(h)
        np.testing.assert_allclose(np.linalg.norm(p, axis=0), 1.0, rtol=1e-12)

    def test_aligned_with_channel(self):
        h = np.array([[3.0], [4.0]], dtype=complex)
        p = matched_filter_precoder(h)
        np.testing.assert_allclose(p[:, 0], [0.6, 0.8], rtol=1e-12)

    def test_zero_column_raises(self):
        h = np.zeros((2, 1), dtype=complex)
        with pytest.raises(ValueError):
            matched_filter_precoder(h)


class TestSpectralEfficiency:
    def test_unit_gain_unit_noise_is_one_bit(self):
        h = np.array([[1.0]], dtype=complex)
        p = np.array([[1.0]], dtype=complex)
        assert spectral_efficiency(h, p, 1.0) == pytest.approx(1.0)

    def test_gain_three_gives_two_bits(self):
        h = np.array([[math.sqrt(3.0)]], dtype=complex)
        p = np.array([[1.0]], dtype=complex)
        assert spectral_efficiency(h, p, 1.0) == pytest.approx(2.0)

    def test_sums_over_subcarriers(self):
        h = np.array([[1.0, math.sqrt(3.0)]], dtype=complex)
        p = np.ones((1, 2), dtype=complex)
        assert spectral_efficiency(h, p, 1.0) == pytest.approx(3.0)

    def test_orthogonal_precoder_gives_zero(self):
        h = np.array([[1.0], [0.0]], dtype=complex)
        p = np.array([[0.0], [1.0]], dtype=complex)
        assert spectral_efficiency(h, p, 1.0) == pytest.approx(0.0)

    def test_matched_filter_maximizes_gain(self):
        rng = np.random.default_rng(3)
        h = rng.standard_normal((4, 1)) + 1j * rng.standard_normal((4, 1))
        best = spectral_efficiency(h, matched_filter_precoder(h), 0.5)
        other = np.zeros((4, 1), dtype=complex)
        other[0] = 1.0
        assert best >= spectral_efficiency(h, other, 0.5)

    def test_nonpositive_noise_raises(self):
        h = np.ones((1, 1), dtype=complex)
        with pytest.raises(ValueError):
            spectral_efficiency(h, h, 0.0)
        with pytest.raises(ValueError):
            spectral_efficiency(h, h, -1.0)


class TestAggregateDb:
    def test_mean_db_is_arithmetic_mean(self):
        assert aggregate_db([-10.0, -20.0]) == pytest.approx(-15.0)

    def test_db_of_mean_averages_linear_power(self):
        got = aggregate_db([-10.0, -20.0], mode="db_of_mean")
        expected = 10.0 * math.log10((0.1 + 0.01) / 2.0)
        assert got == pytest.approx(expected)

    def test_unknown_mode_raises(self):
        with pytest.raises(ValueError):
            aggregate_db([0.0], mode="median")


class TestBaselineLinearExtrapolate:
    def test_exact_on_linear_in_time(self, tiny_grid, tiny_geom):
        from csilab.channel import CsiSample
        values = linear_time_values()
        sample = CsiSample(values, tiny_grid, tiny_geom)
        out = baseline_linear_extrapolate(sample, "cp-t", 0.25)
        np.testing.assert_allclose(out.values, values, rtol=1e-10, atol=1e-12)

    def test_exact_on_constant(self, tiny_grid, tiny_geom):
        from csilab.channel import CsiSample
        values = np.full((8, 12, 2), 2.0 - 0.5j)
        sample = CsiSample(values, tiny_grid, tiny_geom)
        out = baseline_linear_extrapolate(sample, "cp-t", 0.5)
        np.testing.assert_allclose(out.values, values, rtol=1e-12)

    def test_frequency_axis(self, tiny_grid, tiny_geom):
        from csilab.channel import CsiSample
        rng = np.random.default_rng(2)
        a = rng.standard_normal((8, 1, 2)) + 1j * rng.standard_normal((8, 1, 2))
        b = rng.standard_normal((8, 1, 2)) + 1j * rng.standard_normal((8, 1, 2))
        k = np.arange(12).reshape(1, -1, 1)
        values = a + b * k
        sample = CsiSample(values, tiny_grid, tiny_geom)
        out = baseline_linear_extrapolate(sample, "cp-f", 0.25)
        np.testing.assert_allclose(out.values, values, rtol=1e-10, atol=1e-12)

    def test_observed_entries_untouched(self, tiny_grid, tiny_geom):
        sample = random_sample(seed=4)
        out = baseline_linear_extrapolate(sample, "cp-t", 0.25)
        n_target = math.ceil(0.25 * 8)
        np.testing.assert_array_equal(out.values[:-n_target],
                                      sample.values[:-n_target])

    def test_fails_on_fast_oscillation(self, tiny_geom):
        # Doppler rotating 0.3 cycles per time step: the horizon of two
        # predicted steps spans 0.6 cycles, so a first-order extrapolation
        # of the last two samples lands far from the true phasor.
        grid = GridSpec(8, 12, 1e-3, 90e3, 2.5e9)
        path = PathParams(gain=1.0, doppler_hz=300.0, delay_s=50e-9,
                          azimuth_rad=0.3, elevation_rad=1.2)
        sample = synth_channel(grid, tiny_geom, [path])
        out = baseline_linear_extrapolate(sample, "cp-t", 0.25)
        region = suffix_region(sample.values.shape, 0, 0.25)
        assert nmse(out.values, sample.values, region) > -10.0

    def test_too_few_observed_raises(self, tiny_grid, tiny_geom):
        sample = random_sample(seed=5)
        with pytest.raises(ValueError):
            baseline_linear_extrapolate(sample, "cp-t", 0.95)


class TestBaselineInterpolateCe:
    def test_keep_all_is_identity(self):
        sample = random_sample(seed=6)
        out = baseline_interpolate_ce(sample, PilotPattern(1.0, 1.0, 1.0))
        np.testing.assert_array_equal(out.values, sample.values)

    def test_exact_on_bilinear_field(self, tiny_grid, tiny_geom):
        from csilab.channel import CsiSample
        t = np.arange(8).reshape(-1, 1, 1)
        k = np.arange(12).reshape(1, -1, 1)
        values = ((1.0 + 0.5j) + (0.2 - 0.1j) * t + (0.3 + 0.2j) * k
                  + (0.05 + 0.01j) * t * k) * np.ones((1, 1, 2))
        sample = CsiSample(values, tiny_grid, tiny_geom)
        out = baseline_interpolate_ce(sample, PilotPattern(0.5, 0.5, 1.0))
        np.testing.assert_allclose(out.values, values, rtol=1e-10, atol=1e-12)

    def test_noise_is_not_removed(self):
        sample = random_sample(seed=7)
        out = baseline_interpolate_ce(sample, PilotPattern(1.0, 1.0, 1.0))
        np.testing.assert_array_equal(out.values, sample.values)
        assert out.values is not sample.values


class TestRunZeroShot:
    def test_identity_model_oracle_rows(self, monkeypatch):
        monkeypatch.setitem(PATTERN_LABELS, "low", PilotPattern(1.0, 1.0, 1.0))
        coarse = [random_dataset(seed=10, name="c")]
        fine = [random_dataset(seed=11, name="f")]
        report, stats = run_zero_shot(IdentityModel(offset=1e-7), coarse, fine,
                                      ratios=("low",), snrs=(float("inf"),))
        # cp-t / cp-f see zero-filled targets, so the error power equals the
        # reference power up to the stub offset; ce keeps every pilot, so it
        # reproduces the noiseless input to rounding and hits the floor.
        assert report.row("cp-t").nmse_db == pytest.approx(0.0, abs=1e-4)
        assert report.row("cp-f").nmse_db == pytest.approx(0.0, abs=1e-4)
        assert report.row("ce").nmse_db == pytest.approx(-120.0)
        assert report.row("cp-t").conf_pred_db == pytest.approx(0.0)
        assert stats == []

    def test_row_grid_is_full_cartesian_product(self, monkeypatch):
        # Desk-scale pilot fractions keep < 2 subcarriers on the tiny grid,
        # so substitute patterns that stay interpolable at K = 12.
        monkeypatch.setitem(PATTERN_LABELS, "low", PilotPattern(0.5, 0.5, 1.0))
        monkeypatch.setitem(PATTERN_LABELS, "high",
                            PilotPattern(0.25, 0.25, 1.0))
        coarse = [random_dataset(seed=12, name="c1"),
                  random_dataset(seed=13, name="c2")]
        fine = [random_dataset(seed=14, name="f1")]
        report, _ = run_zero_shot(IdentityModel(), coarse, fine,
                                  ratios=("low", "high"), snrs=(10.0, 20.0))
        assert len(report.rows) == (2 * 2 + 1) * 2 * 2
        tasks = {(r.task, r.dataset, r.ratio, r.snr_db) for r in report.rows}
        assert len(tasks) == len(report.rows)
        assert ("cp-f", "c2", "high", 20.0) in tasks
        assert ("ce", "f1", "low", 10.0) in tasks

    def test_deterministic_given_noise_seed(self):
        coarse = [random_dataset(seed=15, name="c")]
        model = build_model(TINY_MODEL, seed=1)
        kw = dict(ratios=("low",), snrs=(10.0,), noise_seed=99)
        r1, _ = run_zero_shot(model, coarse, [], **kw)
        r2, _ = run_zero_shot(model, coarse, [], **kw)
        assert [r.csv() for r in r1.rows] == [r.csv() for r in r2.rows]

    def test_model_and_baseline_share_noise_streams(self, monkeypatch):
        # With an identity network and a keep-everything pilot pattern both
        # pipelines reduce to "score the noisy input", so equal NMSE rows
        # prove they drew identical noise for each sample.
        monkeypatch.setitem(PATTERN_LABELS, "low", PilotPattern(1.0, 1.0, 1.0))
        fine = [random_dataset(seed=16, name="f")]
        kw = dict(ratios=("low",), snrs=(15.0,), noise_seed=77)
        model_report, _ = run_zero_shot(IdentityModel(), [], fine, **kw)
        base_report = run_baselines([], fine, **kw)
        assert model_report.row("ce").nmse_db == pytest.approx(
            base_report.row("ce").nmse_db, abs=1e-3)

    def test_real_model_rows_finite_and_confident(self, tiny_model,
                                                  monkeypatch):
        monkeypatch.setitem(PATTERN_LABELS, "low", PilotPattern(0.5, 0.5, 1.0))
        coarse = [random_dataset(seed=17, name="c")]
        fine = [random_dataset(seed=18, name="f")]
        report, stats = run_zero_shot(tiny_model, coarse, fine,
                                      ratios=("low",), snrs=(20.0,),
                                      collect_routing=True)
        for row in report.rows:
            assert np.isfinite(row.nmse_db)
            assert np.isfinite(row.se_bps_hz) and row.se_bps_hz > 0.0
            assert row.conf_pred_db is not None
            assert row.conf_true_db is not None
        layers = TINY_MODEL.enc_depth + TINY_MODEL.dec_depth
        assert len(stats) == layers * 3  # three tasks routed per layer
        for st in stats:
            assert st.token_fraction.sum() == pytest.approx(1.0)

    def test_report_row_selector(self):
        row = EvalRow(task="cp-t", dataset="c", ratio="low", snr_db=10.0,
                      nmse_db=-5.0, se_bps_hz=1.0)
        report = EvalReport(rows=[row], conf_pairs={})
        assert report.row("cp-t", ratio="low", snr_db=10.0) is row
        with pytest.raises(KeyError):
            report.row("ce")

    def test_db_of_mean_aggregation(self, monkeypatch):
        coarse = [random_dataset(count=4, seed=19, name="c")]
        mean_report, _ = run_zero_shot(IdentityModel(), coarse, [],
                                       ratios=("low",), snrs=(10.0,))
        pow_report, _ = run_zero_shot(IdentityModel(), coarse, [],
                                      ratios=("low",), snrs=(10.0,),
                                      aggregate="db_of_mean")
        # db-of-mean of unequal values exceeds mean-of-db (Jensen).
        assert pow_report.row("cp-t").nmse_db >= mean_report.row("cp-t").nmse_db


class TestRunBaselines:
    def test_linear_dataset_hits_floor_when_noiseless(self):
        values = np.stack([linear_time_values(seed=s) for s in range(3)])
        coarse = [make_dataset(values, name="lin")]
        report = run_baselines(coarse, [], ratios=("low",),
                               snrs=(float("inf"),))
        assert report.row("cp-t").nmse_db == pytest.approx(-120.0)

    def test_deterministic(self, monkeypatch):
        monkeypatch.setitem(PATTERN_LABELS, "low", PilotPattern(0.5, 0.5, 1.0))
        monkeypatch.setitem(PATTERN_LABELS, "high",
                            PilotPattern(0.25, 0.25, 1.0))
        fine = [random_dataset(seed=20, name="f")]
        kw = dict(ratios=("low", "high"), snrs=(10.0,), noise_seed=5)
        r1 = run_baselines([], fine, **kw)
        r2 = run_baselines([], fine, **kw)
        assert [r.csv() for r in r1.rows] == [r.csv() for r in r2.rows]

    def test_ratio_labels_resolve(self):
        assert RATIO_LABELS == {"low": 0.25, "high": 0.50}
        assert PATTERN_LABELS["low"].time_fraction == 0.25
        assert PATTERN_LABELS["high"].freq_fraction == pytest.approx(1 / 24)


class TestConfidenceMetrics:
    def test_perfect_predictions_have_zero_mae(self):
        report = EvalReport(rows=[], conf_pairs={
            "cp-t": [(-10.0, -10.0), (-12.0, -12.0)]})
        out = confidence_mae(report)
        assert out == {"cp-t": 0.0, "overall": 0.0}

    def test_constant_offset_equals_offset(self):
        report = EvalReport(rows=[], conf_pairs={
            "cp-t": [(-7.0, -10.0), (-9.0, -12.0)],
            "ce": [(-17.0, -20.0)]})
        out = confidence_mae(report)
        assert out["cp-t"] == pytest.approx(3.0)
        assert out["ce"] == pytest.approx(3.0)
        assert out["overall"] == pytest.approx(3.0)

    def test_empty_report(self):
        assert confidence_mae(EvalReport(rows=[], conf_pairs={})) == {}

    def test_cdf_rows_sorted_with_unit_tail(self):
        report = EvalReport(rows=[], conf_pairs={
            "cp-t": [(-8.0, -10.0), (-10.0, -10.5), (-10.0, -14.0)]})
        rows = confidence_cdf_rows(report)
        errors = [r[1] for r in rows]
        assert errors == sorted(errors)
        assert errors == pytest.approx([0.5, 2.0, 4.0])
        assert [r[2] for r in rows] == pytest.approx([1 / 3, 2 / 3, 1.0])


class TestRoutingCsvRows:
    def test_one_row_per_layer_task_expert(self):
        stats = [RoutingStats(layer="enc.0", task_id=2,
                              token_fraction=np.array([0.75, 0.25]),
                              mean_gate=np.array([0.6, 0.4]))]
        rows = routing_csv_rows(stats)
        assert rows == [["enc.0", 2, 0, 0.75, 0.6], ["enc.0", 2, 1, 0.25, 0.4]]


class TestF1Binary:
    def test_perfect(self):
        assert f1_binary([0, 1, 1], [0, 1, 1]) == pytest.approx(1.0)

    def test_all_wrong(self):
        assert f1_binary([0, 1], [1, 0]) == pytest.approx(0.0)

    def test_known_mixed_case(self):
        # tp=1, fp=1, fn=1 -> 2*1 / (2+1+1) = 0.5
        assert f1_binary([1, 0, 1], [1, 1, 0]) == pytest.approx(0.5)

    def test_positive_label_choice(self):
        y_true = [0, 0, 1]
        y_pred = [0, 1, 1]
        assert f1_binary(y_true, y_pred, positive=0) == pytest.approx(2 / 3)

    def test_degenerate_is_zero(self):
        assert f1_binary([0, 0], [0, 0]) == 0.0


def smooth_rough_sets(count, seed):
    """Two clearly separable classes: near-constant vs white channels."""
    rng = np.random.default_rng(seed)
    shape = (count, TINY_GRID.t_samples, TINY_GRID.subcarriers,
             TINY_GEOM.n_elements)
    wiggle = 0.05 * (rng.standard_normal(shape)
                     + 1j * rng.standard_normal(shape))
    smooth = np.ones(shape, dtype=complex) + wiggle
    rough = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return [(make_dataset(rough, name=f"rough{seed}"), 0),
            (make_dataset(smooth, name=f"smooth{seed}"), 1)]


class TestClassificationTokens:
    def test_shapes_and_labels(self):
        sets = smooth_rough_sets(3, seed=0)
        tokens, labels, dims = classification_tokens(sets, TINY_MODEL.patch)
        assert tokens.shape[0] == 6
        assert tokens.dtype == torch.float32
        assert labels.tolist() == [0, 0, 0, 1, 1, 1]
        assert tokens.shape[1] == int(np.prod(dims))

    def test_mismatched_grids_raise(self):
        rng = np.random.default_rng(1)
        small = make_dataset(rng.standard_normal((2, 8, 12, 2)) + 0j)
        big_values = rng.standard_normal((2, 12, 12, 2)) + 0j
        big = Dataset(name="big", values=big_values.astype(np.complex64),
                      grid=GridSpec(12, 12, 1e-3, 90e3, 2.5e9),
                      geometry=TINY_GEOM, split="test", seed=0)
        with pytest.raises(ValueError):
            classification_tokens([(small, 0), (big, 1)], TINY_MODEL.patch)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            classification_tokens([], TINY_MODEL.patch)


class TestScenarioClassifier:
    def test_appends_one_fresh_gate_per_encoder_layer(self, tiny_model):
        before = len(tiny_model.encoder[0].smoe.gates)
        clf = ScenarioClassifier(tiny_model, seed=0)
        for block in tiny_model.encoder:
            assert len(block.smoe.gates) == before + 1
        assert clf.gate_index == before

    def test_trainable_names(self, tiny_model):
        clf = ScenarioClassifier(tiny_model, seed=0)
        gi = clf.gate_index
        assert clf.is_trainable_name("head.weight")
        assert clf.is_trainable_name(f"backbone.encoder.0.smoe.gates.{gi}.bias")
        assert not clf.is_trainable_name("backbone.encoder.0.smoe.gates.0.bias")
        assert not clf.is_trainable_name(
            "backbone.encoder.0.smoe.experts.0.fc1.weight")

    def test_forward_shape(self, tiny_model):
        clf = ScenarioClassifier(tiny_model, seed=0)
        sets = smooth_rough_sets(2, seed=2)
        tokens, _, dims = classification_tokens(sets, tiny_model.config.patch)
        with torch.no_grad():
            logits = clf(tokens, dims)
        assert logits.shape == (4, 2)


class TestFinetune:
    def test_separable_classes_reach_high_f1(self, tiny_model):
        cfg = FinetuneConfig(epochs=30, batch_size=8, base_lr=5e-3,
                             min_lr=5e-4, seed=0)
        train = smooth_rough_sets(8, seed=3)
        test = smooth_rough_sets(4, seed=4)
        clf, metrics, trace = finetune_scenario_classifier(
            tiny_model, train, test, cfg)
        assert metrics["f1"] >= 0.75
        assert metrics["n_train"] == 16
        assert metrics["n_test"] == 8
        assert len(trace) == metrics["steps"]

    def test_backbone_weights_bit_identical(self, tiny_model):
        frozen = {n: p.detach().clone()
                  for n, p in tiny_model.named_parameters()}
        cfg = FinetuneConfig(epochs=2, batch_size=8, seed=1)
        train = smooth_rough_sets(4, seed=5)
        test = smooth_rough_sets(2, seed=6)
        finetune_scenario_classifier(tiny_model, train, test, cfg)
        # The classifier appends one fresh (trainable) gate per layer; every
        # parameter that existed before must still be bit-identical.
        after = dict(tiny_model.named_parameters())
        for name, saved in frozen.items():
            assert torch.equal(after[name].detach(), saved), name

    def test_single_class_labels_raise(self, tiny_model):
        sets = smooth_rough_sets(4, seed=7)
        ones_only = [(ds, 1) for ds, _ in sets]
        cfg = FinetuneConfig(epochs=1, batch_size=4)
        with pytest.raises(ValueError):
            finetune_scenario_classifier(tiny_model, ones_only, sets, cfg)

    def test_deterministic_given_seed(self):
        def run():
            model = build_model(TINY_MODEL, seed=2)
            cfg = FinetuneConfig(epochs=3, batch_size=8, seed=9)
            train = smooth_rough_sets(4, seed=8)
            test = smooth_rough_sets(2, seed=9)
            _, metrics, trace = finetune_scenario_classifier(
                model, train, test, cfg)
            return metrics, trace
        m1, t1 = run()
        m2, t2 = run()
        assert m1 == m2
        assert t1 == t2

    def test_from_run_config(self):
        from csilab.storage import parse_config
        cfg = parse_config("finetune.lr = 1e-3\nfinetune.epochs = 5\n")
        fc = FinetuneConfig.from_run(cfg)
        assert fc.base_lr == pytest.approx(1e-3)
        assert fc.epochs == 5
