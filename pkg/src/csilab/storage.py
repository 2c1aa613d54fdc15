"""File formats: datasets, checkpoints, run configs, CSV reports.

Dataset files (magic ``CSIDS001``) are a fixed little-endian header followed
by the sample payload as interleaved complex64, C-order (count, T, K, N),
integrity-checked by CRC32. Checkpoints (magic ``MDAE0001``) carry one JSON
metadata blob (model config, phase, step, seed, parameter manifest sorted by
name, payload CRC32) followed by the concatenated float32 parameter payload.
Run configs are line-oriented ``section.key = value`` text with a closed key
schema; unknown keys are rejected with their line number.

All writers go through a temp file and ``os.replace`` so readers never see a
partial artifact.
"""

import csv
import io
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import ArrayGeometry, CsiSample, GridSpec
from .errors import ConfigError, CorruptionError, FormatError

DATASET_MAGIC = b"CSIDS001"
CHECKPOINT_MAGIC = b"MDAE0001"
_HEADER_FMT = "<8s4I3d2Id8sQI"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)


def _atomic_write(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


@dataclass
class Dataset:
    """A loaded dataset file; values has shape (count, T, K, N), complex64."""

    name: str
    values: np.ndarray
    grid: GridSpec
    geometry: ArrayGeometry
    split: str
    seed: int

    @property
    def count(self):
        return self.values.shape[0]

    def sample(self, i):
        return CsiSample(self.values[i].astype(np.complex128),
                         self.grid, self.geometry)


def write_dataset(path, values, grid, geometry, split, seed):
    """Serialize samples to a dataset file; same inputs -> same bytes."""
    values = np.ascontiguousarray(values, dtype=np.complex64)
    if values.ndim != 4:
        raise ValueError(f"expected values (count, T, K, N), got {values.shape}")
    count, t, k, n = values.shape
    if (t, k) != (grid.t_samples, grid.subcarriers) or n != geometry.n_elements:
        raise ValueError("values shape disagrees with grid/geometry")
    payload = values.astype("<c8").tobytes()
    split_tag = split.encode("ascii")
    if len(split_tag) > 8:
        raise ValueError(f"split tag too long: {split!r}")
    header = struct.pack(_HEADER_FMT, DATASET_MAGIC, count, t, k, n,
                         grid.dt_s, grid.df_hz, grid.f1_hz,
                         geometry.n_horizontal, geometry.n_vertical,
                         geometry.spacing_wavelengths,
                         split_tag.ljust(8, b"\0"), seed & 0xFFFFFFFFFFFFFFFF,
                         zlib.crc32(payload))
    _atomic_write(path, header + payload)


def read_dataset(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER_SIZE:
        raise FormatError(f"{path}: truncated header")
    (magic, count, t, k, n, dt_s, df_hz, f1_hz, n_h, n_v, spacing,
     split_tag, seed, crc) = struct.unpack_from(_HEADER_FMT, raw)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    payload = raw[_HEADER_SIZE:]
    expected = count * t * k * n * 8
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    if zlib.crc32(payload) != crc:
        raise CorruptionError(f"{path}: payload CRC mismatch")
    values = np.frombuffer(payload, dtype="<c8").reshape(count, t, k, n)
    return Dataset(name=path.stem, values=values,
                   grid=GridSpec(t, k, dt_s, df_hz, f1_hz),
                   geometry=ArrayGeometry(n_h, n_v, spacing),
                   split=split_tag.rstrip(b"\0").decode("ascii"), seed=seed)


@dataclass
class CheckpointData:
    meta: dict
    params: dict


def save_checkpoint(path, model, config_dict, phase, step, seed,
                    kind="mdae", extra=None):
    """Write model parameters (float32 LE) plus a JSON metadata blob."""
    state = model.state_dict()
    names = sorted(state.keys())
    manifest = []
    chunks = []
    offset = 0
    for name in names:
        arr = state[name].detach().cpu().numpy().astype("<f4")
        chunk = arr.tobytes()
        manifest.append([name, list(arr.shape), offset])
        chunks.append(chunk)
        offset += len(chunk)
    payload = b"".join(chunks)
    meta = {
        "kind": kind,
        "config": config_dict,
        "phase": int(phase),
        "step": int(step),
        "seed": int(seed),
        "manifest": manifest,
        "crc32": zlib.crc32(payload),
    }
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = CHECKPOINT_MAGIC + struct.pack("<I", len(blob))
    _atomic_write(path, head + blob + payload)


def load_checkpoint(path):
    """Read raw checkpoint contents; model rebuild lives in the model module."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 12 or raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (meta_len,) = struct.unpack_from("<I", raw, 8)
    if len(raw) < 12 + meta_len:
        raise FormatError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[12:12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad metadata: {exc}") from exc
    payload = raw[12 + meta_len:]
    if zlib.crc32(payload) != meta.get("crc32"):
        raise CorruptionError(f"{path}: payload CRC mismatch")
    params = {}
    for name, shape, offset in meta["manifest"]:
        size = int(np.prod(shape)) * 4 if shape else 4
        chunk = payload[offset:offset + size]
        if len(chunk) != size:
            raise CorruptionError(f"{path}: parameter {name} truncated")
        params[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape)
    return CheckpointData(meta=meta, params=params)


# --- run configuration -----------------------------------------------------

def _parse_float(text):
    text = text.strip()
    if "/" in text:
        num, _, den = text.partition("/")
        value = float(num) / float(den)
    else:
        value = float(text)
    if math.isnan(value):
        raise ValueError("nan is not a valid config value")
    return value


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_list(text, item):
    text = text.strip()
    if not text:
        return []
    return [item(part.strip()) for part in text.split(",")]


_PARSERS = {
    "int": lambda s: int(s.strip(), 10),
    "float": _parse_float,
    "bool": _parse_bool,
    "str": lambda s: s.strip(),
    "floatlist": lambda s: _parse_list(s, _parse_float),
    "strlist": lambda s: _parse_list(s, str),
    "intlist": lambda s: _parse_list(s, lambda x: int(x, 10)),
    "pathlist": lambda s: _parse_list(s, str),
}


def _format_value(kind, value):
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("floatlist", "strlist", "intlist", "pathlist"):
        return ",".join(_format_value(kind[:-4], v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


# key -> (type, default); pathlist defaults are empty (must be set to be used)
CONFIG_SCHEMA = {
    "model.hidden_dim": ("int", 64),
    "model.decoder_dim": ("int", 0),
    "model.enc_depth": ("int", 4),
    "model.dec_depth": ("int", 2),
    "model.heads": ("int", 4),
    "model.experts_total": ("int", 8),
    "model.experts_active": ("int", 2),
    "model.expert_dim": ("int", 128),
    "model.patch_t": ("int", 4),
    "model.patch_f": ("int", 4),
    "model.patch_s": ("int", 4),
    "model.conf_hidden": ("int", 64),
    "model.gating": ("str", "task"),

    "data.coarse_train": ("pathlist", []),
    "data.coarse_val": ("pathlist", []),
    "data.coarse_test": ("pathlist", []),
    "data.fine_train": ("pathlist", []),
    "data.fine_val": ("pathlist", []),
    "data.fine_test": ("pathlist", []),
    "data.finetune_los": ("pathlist", []),
    "data.finetune_nlos": ("pathlist", []),
    "data.finetune_los_test": ("pathlist", []),
    "data.finetune_nlos_test": ("pathlist", []),

    "training.epochs": ("int", 60),
    "training.max_steps": ("int", 0),
    "training.batch_size": ("int", 32),
    "training.lr": ("float", 5e-4),
    "training.min_lr": ("float", 3e-4),
    "training.warmup_epochs": ("int", 5),
    "training.weight_decay": ("float", 0.05),
    "training.load_balance_weight": ("float", 0.03),
    "training.grad_clip": ("float", 1.0),
    "training.seed": ("int", 0),
    "training.random_mask_ratio": ("float", 0.85),
    "training.mask_ratio_min": ("float", 0.10),
    "training.mask_ratio_max": ("float", 0.25),
    "training.pilot_time_min": ("float", 0.125),
    "training.pilot_time_max": ("float", 0.25),
    "training.pilot_freq_min": ("float", 1.0 / 24.0),
    "training.pilot_freq_max": ("float", 1.0 / 6.0),
    "training.snr_min": ("float", 10.0),
    "training.snr_max": ("float", 25.0),
    "training.fixed_ratio": ("bool", False),
    "training.fixed_mask_ratio": ("float", 0.25),
    "training.fixed_pilot_time": ("float", 0.25),
    "training.fixed_pilot_freq": ("float", 1.0 / 12.0),
    "training.no_random_mask": ("bool", False),
    "training.checkpoint_every": ("int", 1),

    "phase2.epochs": ("int", 20),
    "phase2.max_steps": ("int", 0),
    "phase2.batch_size": ("int", 32),
    "phase2.lr": ("float", 3e-3),
    "phase2.min_lr": ("float", 3e-4),
    "phase2.warmup_epochs": ("int", 2),
    "phase2.weight_decay": ("float", 0.001),
    "phase2.tasks": ("intlist", [1, 2, 3, 4]),

    "evaluation.snrs": ("floatlist", [10.0, 20.0]),
    "evaluation.ratios": ("strlist", ["low", "high"]),
    "evaluation.nmse_aggregate": ("str", "mean_db"),
    "evaluation.nmse_floor_db": ("float", -120.0),
    "evaluation.noise_seed": ("int", 1234),
    "evaluation.se_snr_db": ("float", 10.0),

    "finetune.epochs": ("int", 30),
    "finetune.max_steps": ("int", 0),
    "finetune.batch_size": ("int", 32),
    "finetune.lr": ("float", 2e-4),
    "finetune.min_lr": ("float", 2e-5),
    "finetune.warmup_epochs": ("int", 2),
    "finetune.weight_decay": ("float", 1e-4),
    "finetune.seed": ("int", 0),
}


class RunConfig:
    """Typed key/value store over CONFIG_SCHEMA with strict parsing."""

    def __init__(self):
        self._values = {k: (list(d) if isinstance(d, list) else d)
                        for k, (_, d) in CONFIG_SCHEMA.items()}

    def get(self, key):
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def set_text(self, key, text, line=None):
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}", line=line)
        kind, _ = CONFIG_SCHEMA[key]
        try:
            self._values[key] = _PARSERS[kind](text)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}", line=line) from exc

    def resolved_lines(self):
        lines = []
        for key in sorted(CONFIG_SCHEMA):
            kind, _ = CONFIG_SCHEMA[key]
            lines.append(f"{key} = {_format_value(kind, self._values[key])}")
        return lines

    def validate(self):
        def check(cond, message):
            if not cond:
                raise ConfigError(message)

        g = self.get
        check(g("model.hidden_dim") >= 1, "model.hidden_dim must be >= 1")
        check(g("model.hidden_dim") % g("model.heads") == 0,
              "model.hidden_dim must be divisible by model.heads")
        check(g("model.enc_depth") >= 1 and g("model.dec_depth") >= 1,
              "model depths must be >= 1")
        check(1 <= g("model.experts_active") <= g("model.experts_total"),
              "model.experts_active must be in [1, experts_total]")
        check(min(g("model.patch_t"), g("model.patch_f"), g("model.patch_s")) >= 1,
              "patch sides must be >= 1")
        check(g("model.gating") in ("task", "unified"),
              "model.gating must be task or unified")
        check(0.0 <= g("training.mask_ratio_min") <= g("training.mask_ratio_max") < 1.0,
              "mask ratio range must satisfy 0 <= min <= max < 1")
        check(0.0 < g("training.random_mask_ratio") < 1.0,
              "training.random_mask_ratio must be in (0, 1)")
        check(0.0 < g("training.pilot_time_min") <= g("training.pilot_time_max") <= 1.0,
              "pilot time fraction range invalid")
        check(0.0 < g("training.pilot_freq_min") <= g("training.pilot_freq_max") <= 1.0,
              "pilot freq fraction range invalid")
        check(g("training.snr_min") <= g("training.snr_max"),
              "training.snr_min must be <= snr_max")
        check(g("evaluation.nmse_aggregate") in ("mean_db", "db_of_mean"),
              "evaluation.nmse_aggregate must be mean_db or db_of_mean")
        for entry in self.get("evaluation.ratios"):
            if entry not in ("low", "high"):
                try:
                    value = _parse_float(entry)
                except ValueError as exc:
                    raise ConfigError(f"bad ratio entry {entry!r}") from exc
                check(0.0 < value < 1.0, f"ratio {entry} out of (0, 1)")
        for task in self.get("phase2.tasks"):
            check(task in (1, 2, 3, 4), f"phase2.tasks entry {task} not in 1..4")
        return self


def parse_config(text):
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw!r}", line=lineno)
        key, _, value = line.partition("=")
        cfg.set_text(key.strip(), value, line=lineno)
    return cfg


def load_config(path=None, overrides=()):
    """Parse an optional config file, apply key=value overrides, validate."""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_config(text)
    else:
        cfg = RunConfig()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfg.set_text(key.strip(), value)
    return cfg.validate()


def write_resolved_config(path, cfg, header=()):
    lines = [f"# {line}" for line in header]
    lines.extend(cfg.resolved_lines())
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


# --- CSV reports -----------------------------------------------------------

def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    _atomic_write(path, buf.getvalue().encode("utf-8"))


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    return value


def write_loss_trace(path, rows):
    _write_csv(path, ["step", "task", "loss_recon", "loss_balance", "lr"], rows)


def write_eval_report(path, rows):
    _write_csv(path, ["task", "dataset", "ratio", "snr_db", "nmse_db",
                      "se_bps_hz", "conf_pred_db", "conf_true_db"], rows)


def write_routing_stats(path, rows):
    _write_csv(path, ["layer", "task", "expert", "token_fraction", "mean_gate"],
               rows)


def write_confidence_cdf(path, rows):
    _write_csv(path, ["task", "abs_error_db", "cumulative_fraction"], rows)


def write_metrics(path, pairs):
    _write_csv(path, ["metric", "value"], pairs)
