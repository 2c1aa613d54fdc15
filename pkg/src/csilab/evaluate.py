"""Zero-shot evaluation, classical baselines, and scenario classification.

Three reconstruction tasks share one harness: temporal prediction (cp-t) and
frequency prediction (cp-f) extrapolate the trailing ceil(ratio * axis)
samples, channel estimation (ce) densifies a pilot lattice. Model and
baseline runners draw noise from the same seeded streams, so for identical
datasets and settings they score exactly the same noisy inputs. Metrics are
NMSE in dB over the task's target region and a matched-filter spectral
efficiency at the final time snapshot.
"""

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import pipeline
from .channel import CsiSample, add_awgn
from .errors import CsilabError
from .model import (RoutingStats, parameter_checksum, reconstruct,
                    suffix_region)
from .numeric import SeededRng
from .pipeline import PilotPattern
from .training import AdamW, _check_gradients, lr_schedule

RATIO_LABELS = {"low": 0.25, "high": 0.50}
PATTERN_LABELS = {
    "low": PilotPattern(0.25, 1.0 / 12.0, 1.0),
    "high": PilotPattern(0.125, 1.0 / 24.0, 1.0),
}
TASK_AXIS = {"cp-t": 0, "cp-f": 1}


def nmse(pred, truth, region=None, floor_db=-120.0):
    """10*log10(|pred - truth|^2 / |truth|^2) over a region, floored."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if region is not None:
        pred = pred[region]
        truth = truth[region]
    den = float(np.sum(np.abs(truth) ** 2))
    if den <= 0.0:
        raise ValueError("NMSE reference region has zero power")
    err = float(np.sum(np.abs(pred - truth) ** 2))
    ratio = max(err / den, 10.0 ** (floor_db / 10.0))
    return 10.0 * math.log10(ratio)


def matched_filter_precoder(h):
    """Unit-norm matched-filter precoder per subcarrier column of h (N, K)."""
    h = np.asarray(h)
    norms = np.linalg.norm(h, axis=0, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero channel column")
    return h / norms


def spectral_efficiency(h_true, precoder, sigma2):
    """sum_k log2(1 + |h_k^H p_k|^2 / sigma2) in bit/s/Hz."""
    if sigma2 <= 0.0:
        raise ValueError(f"noise power must be positive, got {sigma2}")
    h_true = np.asarray(h_true)
    gains = np.abs(np.sum(np.conj(h_true) * np.asarray(precoder), axis=0)) ** 2
    return float(np.sum(np.log2(1.0 + gains / sigma2)))


def aggregate_db(values_db, mode="mean_db"):
    values_db = np.asarray(values_db, dtype=np.float64)
    if mode == "mean_db":
        return float(values_db.mean())
    if mode == "db_of_mean":
        return float(10.0 * np.log10(np.mean(10.0 ** (values_db / 10.0))))
    raise ValueError(f"unknown aggregation {mode!r}")


@dataclass
class EvalRow:
    task: str
    dataset: str
    ratio: str
    snr_db: float
    nmse_db: float
    se_bps_hz: float
    conf_pred_db: float = None
    conf_true_db: float = None

    def csv(self):
        blank = ""
        return [self.task, self.dataset, self.ratio, float(self.snr_db),
                float(self.nmse_db), float(self.se_bps_hz),
                blank if self.conf_pred_db is None else float(self.conf_pred_db),
                blank if self.conf_true_db is None else float(self.conf_true_db)]


@dataclass
class EvalReport:
    rows: list
    conf_pairs: dict  # task -> list of (predicted dB, true dB)

    def row(self, task, ratio=None, snr_db=None, dataset=None):
        for r in self.rows:
            if r.task != task:
                continue
            if ratio is not None and r.ratio != ratio:
                continue
            if snr_db is not None and r.snr_db != snr_db:
                continue
            if dataset is not None and r.dataset != dataset:
                continue
            return r
        raise KeyError(f"no row for {task} ratio={ratio} snr={snr_db}")


def _resolve_setting(task, entry):
    """Map a ratio label to its task-specific setting; None when undefined."""
    if task == "ce":
        return PATTERN_LABELS.get(entry)
    if entry in RATIO_LABELS:
        return RATIO_LABELS[entry]
    return float(entry)


def _settings(coarse, fine, ratios, snrs):
    index = 0
    for task, group in (("cp-t", coarse), ("cp-f", coarse), ("ce", fine)):
        for ds in group:
            for entry in ratios:
                value = _resolve_setting(task, entry)
                if value is None:
                    continue
                for snr in snrs:
                    yield index, task, ds, str(entry), value, snr
                    index += 1


def _target_region(task, shape, value):
    if task == "ce":
        return np.ones(shape, dtype=bool)
    return suffix_region(shape, TASK_AXIS[task], value)


def _snapshot(values):
    return np.asarray(values)[-1].T  # (N, K) at the final time sample


def _se_pair(clean_values, recon_values, se_snr_db):
    h_true = _snapshot(clean_values)
    sigma2 = float(np.mean(np.abs(h_true) ** 2)) * 10.0 ** (-se_snr_db / 10.0)
    precoder = matched_filter_precoder(_snapshot(recon_values))
    return spectral_efficiency(h_true, precoder, sigma2)


def run_zero_shot(model, coarse, fine, ratios=("low", "high"),
                  snrs=(10.0, 20.0), noise_seed=1234, aggregate="mean_db",
                  floor_db=-120.0, se_snr_db=10.0, with_confidence=True,
                  collect_routing=False, log=None):
    """Score the model on every (task, dataset, ratio, SNR) combination.

    Coarse datasets feed cp-t and cp-f, fine datasets feed ce. Returns an
    EvalReport plus averaged per-layer routing stats (empty unless requested).
    """
    root = SeededRng(noise_seed)
    rows = []
    conf_pairs = defaultdict(list)
    routing = {}
    for index, task, ds, label, value, snr in _settings(coarse, fine, ratios, snrs):
        setting_rng = root.child(index)
        db_list, se_list, pred_list, true_list = [], [], [], []
        for i in range(ds.count):
            clean = ds.sample(i)
            noisy = add_awgn(clean, snr, setting_rng.child(i))
            if task == "ce":
                recon, conf, stats = reconstruct(model, noisy, task,
                                                 pattern=value,
                                                 with_confidence=with_confidence)
            else:
                recon, conf, stats = reconstruct(model, noisy, task,
                                                 ratio=value,
                                                 with_confidence=with_confidence)
            region = _target_region(task, clean.values.shape, value)
            db = nmse(recon.values, clean.values, region, floor_db)
            db_list.append(db)
            se_list.append(_se_pair(clean.values, recon.values, se_snr_db))
            if conf is not None:
                pred_list.append(conf)
                true_list.append(db)
                conf_pairs[task].append((conf, db))
            if collect_routing:
                for st in stats:
                    key = (st.layer, st.task_id)
                    frac, gate, n = routing.get(key, (0.0, 0.0, 0))
                    routing[key] = (frac + st.token_fraction,
                                    gate + st.mean_gate, n + 1)
        row = EvalRow(task=task, dataset=ds.name, ratio=label, snr_db=snr,
                      nmse_db=aggregate_db(db_list, aggregate),
                      se_bps_hz=float(np.mean(se_list)),
                      conf_pred_db=float(np.mean(pred_list)) if pred_list else None,
                      conf_true_db=float(np.mean(true_list)) if true_list else None)
        rows.append(row)
        if log is not None:
            log(f"{task} {ds.name} ratio={label} snr={snr:g}: "
                f"nmse {row.nmse_db:.2f} dB, se {row.se_bps_hz:.2f}")
    routing_stats = [RoutingStats(layer=layer, task_id=task_id,
                                  token_fraction=frac / n, mean_gate=gate / n)
                     for (layer, task_id), (frac, gate, n) in sorted(routing.items())]
    return EvalReport(rows=rows, conf_pairs=dict(conf_pairs)), routing_stats


def baseline_linear_extrapolate(sample, task, ratio):
    """First-order linear extrapolation along the task axis.

    The last two observed entries define a componentwise complex slope that
    is advanced into the target region; exact for channels linear along the
    axis, and deliberately fallible on oscillatory ones.
    """
    axis = TASK_AXIS[task]
    n = sample.values.shape[axis]
    n_target = math.ceil(ratio * n)
    observed = n - n_target
    if observed < 2:
        raise ValueError(f"need >= 2 observed entries, have {observed}")
    values = np.moveaxis(sample.values.copy(), axis, 0)
    slope = values[observed - 1] - values[observed - 2]
    steps = np.arange(1, n_target + 1).reshape(-1, *([1] * slope.ndim))
    values[observed:] = values[observed - 1] + steps * slope
    return CsiSample(np.moveaxis(values, 0, axis), sample.grid, sample.geometry)


def baseline_interpolate_ce(sample, pattern):
    """Pilot downsample + separable linear interpolation, output as-is."""
    filled = pipeline.pilot_downsample_interpolate(sample.values, pattern)
    return CsiSample(filled, sample.grid, sample.geometry)


def run_baselines(coarse, fine, ratios=("low", "high"), snrs=(10.0, 20.0),
                  noise_seed=1234, aggregate="mean_db", floor_db=-120.0,
                  se_snr_db=10.0, log=None):
    """Classical reference methods on the same noisy inputs as run_zero_shot."""
    root = SeededRng(noise_seed)
    rows = []
    for index, task, ds, label, value, snr in _settings(coarse, fine, ratios, snrs):
        setting_rng = root.child(index)
        db_list, se_list = [], []
        for i in range(ds.count):
            clean = ds.sample(i)
            noisy = add_awgn(clean, snr, setting_rng.child(i))
            if task == "ce":
                recon = baseline_interpolate_ce(noisy, value)
            else:
                recon = baseline_linear_extrapolate(noisy, task, value)
            region = _target_region(task, clean.values.shape, value)
            db_list.append(nmse(recon.values, clean.values, region, floor_db))
            se_list.append(_se_pair(clean.values, recon.values, se_snr_db))
        row = EvalRow(task=task, dataset=ds.name, ratio=label, snr_db=snr,
                      nmse_db=aggregate_db(db_list, aggregate),
                      se_bps_hz=float(np.mean(se_list)))
        rows.append(row)
        if log is not None:
            log(f"baseline {task} {ds.name} ratio={label} snr={snr:g}: "
                f"nmse {row.nmse_db:.2f} dB")
    return EvalReport(rows=rows, conf_pairs={})


def confidence_mae(report):
    """Mean absolute confidence error (dB) per task and overall."""
    out = {}
    everything = []
    for task, pairs in sorted(report.conf_pairs.items()):
        errors = [abs(p - t) for p, t in pairs]
        if errors:
            out[task] = float(np.mean(errors))
            everything.extend(errors)
    if everything:
        out["overall"] = float(np.mean(everything))
    return out


def confidence_cdf_rows(report):
    rows = []
    for task, pairs in sorted(report.conf_pairs.items()):
        errors = sorted(abs(p - t) for p, t in pairs)
        for i, err in enumerate(errors):
            rows.append([task, float(err), (i + 1) / len(errors)])
    return rows


def routing_csv_rows(stats):
    rows = []
    for st in stats:
        for expert in range(len(st.token_fraction)):
            rows.append([st.layer, st.task_id, expert,
                         float(st.token_fraction[expert]),
                         float(st.mean_gate[expert])])
    return rows


def f1_binary(y_true, y_pred, positive=1):
    tp = sum(1 for t, p in zip(y_true, y_pred) if t == positive and p == positive)
    fp = sum(1 for t, p in zip(y_true, y_pred) if t != positive and p == positive)
    fn = sum(1 for t, p in zip(y_true, y_pred) if t == positive and p != positive)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


class ScenarioClassifier(torch.nn.Module):
    """Scenario classifier on a frozen backbone.

    Adds one fresh gating map to every encoder SMoE layer (experts untouched)
    and a linear head over mean-pooled encoder output; only those parts train.
    """

    def __init__(self, backbone, n_classes=2, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.backbone = backbone
        dim = backbone.config.hidden_dim
        index = None
        for block in backbone.encoder:
            block.smoe.gates.append(
                torch.nn.Linear(dim, backbone.config.experts_total))
            new = len(block.smoe.gates) - 1
            if index is None:
                index = new
            elif index != new:
                raise CsilabError("encoder gate counts diverged")
        self.gate_index = index
        self.n_classes = n_classes
        self.head = torch.nn.Linear(dim, n_classes)

    @property
    def config(self):
        return self.backbone.config

    def is_trainable_name(self, name):
        return (name.startswith("head.")
                or f".smoe.gates.{self.gate_index}." in name)

    def trainable_parameters(self):
        return [p for name, p in self.named_parameters()
                if self.is_trainable_name(name)]

    def forward(self, tokens, dims):
        emb = self.backbone.patch_embed(tokens)
        visible = np.arange(int(np.prod(dims)))
        x, _ = self.backbone.encoder_forward(emb, dims, visible, task_id=1,
                                             gate_override=self.gate_index)
        return self.head(x.mean(dim=1))


@dataclass
class FinetuneConfig:
    epochs: int = 30
    max_steps: int = 0
    batch_size: int = 32
    base_lr: float = 2e-4
    min_lr: float = 2e-5
    warmup_epochs: int = 2
    weight_decay: float = 1e-4
    seed: int = 0

    @classmethod
    def from_run(cls, cfg):
        g = cfg.get
        return cls(epochs=g("finetune.epochs"), max_steps=g("finetune.max_steps"),
                   batch_size=g("finetune.batch_size"),
                   base_lr=g("finetune.lr"), min_lr=g("finetune.min_lr"),
                   warmup_epochs=g("finetune.warmup_epochs"),
                   weight_decay=g("finetune.weight_decay"),
                   seed=g("finetune.seed"))


def classification_tokens(labeled_datasets, patch):
    """Patchify clean normalized samples; all datasets must share one grid."""
    tokens, labels = [], []
    dims = None
    for ds, label in labeled_datasets:
        for i in range(ds.count):
            sample = ds.sample(i)
            normalized, _ = pipeline.normalize(sample)
            grid = pipeline.patchify(
                pipeline.complex_to_planes(normalized.values), patch)
            if dims is None:
                dims = grid.dims
            elif dims != grid.dims:
                raise ValueError("classification datasets must share a grid")
            tokens.append(grid.tokens)
            labels.append(label)
    if not tokens:
        raise ValueError("no classification samples")
    return (torch.from_numpy(np.stack(tokens)).to(torch.float32),
            torch.tensor(labels, dtype=torch.long), dims)


def finetune_scenario_classifier(model, train_sets, test_sets, cfg, log=None):
    """Train the classifier head/gates; returns (classifier, metrics, trace).

    ``train_sets``/``test_sets`` are lists of (dataset, label) with label 1
    for line-of-sight. Backbone weights are checksum-verified unchanged.
    """
    classifier = ScenarioClassifier(model, seed=cfg.seed)
    frozen = lambda name: not classifier.is_trainable_name(name)
    before = parameter_checksum(classifier, include=frozen)
    for name, p in classifier.named_parameters():
        p.requires_grad_(classifier.is_trainable_name(name))

    tokens, labels, dims = classification_tokens(train_sets, model.config.patch)
    if len(set(labels.tolist())) < 2:
        raise ValueError("training labels contain a single class")
    n = tokens.shape[0]
    per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * per_epoch
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)
    total_steps = max(total_steps, 1)
    warmup = cfg.warmup_epochs * per_epoch

    optimizer = AdamW(classifier.trainable_parameters(), lr=cfg.base_lr,
                      weight_decay=cfg.weight_decay)
    rng = SeededRng(cfg.seed)
    trace = []
    classifier.train()
    for step in range(total_steps):
        epoch, offset = divmod(step, per_epoch)
        if offset == 0:
            order = rng.child(epoch).permutation(n)
        batch = torch.as_tensor(order[offset * cfg.batch_size:
                                      (offset + 1) * cfg.batch_size].copy())
        logits = classifier(tokens[batch], dims)
        loss = F.cross_entropy(logits, labels[batch])
        lr = lr_schedule(step + 1, cfg.base_lr, cfg.min_lr, warmup, total_steps)
        optimizer.zero_grad()
        loss.backward()
        _check_gradients(classifier, step)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.step()
        loss_value = float(loss.detach())
        trace.append((step, 0, loss_value, 0.0, lr))
        if log is not None and offset == per_epoch - 1:
            log(f"finetune epoch {epoch + 1}: loss {loss_value:.4f}")
    classifier.eval()

    test_tokens, test_labels, test_dims = classification_tokens(
        test_sets, model.config.patch)
    with torch.no_grad():
        pred = classifier(test_tokens, test_dims).argmax(dim=-1)
    truth = test_labels.tolist()
    guess = pred.tolist()
    metrics = {
        "f1": f1_binary(truth, guess, positive=1),
        "accuracy": float(np.mean([t == g for t, g in zip(truth, guess)])),
        "n_train": int(n),
        "n_test": len(truth),
        "steps": total_steps,
    }
    for p in classifier.parameters():
        p.requires_grad_(True)
    if parameter_checksum(classifier, include=frozen) != before:
        raise CsilabError("frozen backbone changed during fine-tuning")
    return classifier, metrics, trace
