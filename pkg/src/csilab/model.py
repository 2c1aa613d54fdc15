"""Masked denoising autoencoder with task-gated sparse mixture-of-experts FFNs.

Encoder sees only visible tokens; the decoder re-inserts a shared mask token
at masked slots, and both streams receive a parameter-free space-time-frequency
positional encoding. Every transformer block replaces its FFN with a bank of
expert FFNs routed per token by a small linear gate; the gate is selected by
the active task id (or shared, in the unified ablation). Per-task confidence
tokens ride as an isolated prefix in the decoder: they can read every token
but no token can read them, so reconstructions are unchanged by their presence.
"""

import hashlib
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn

from . import pipeline, storage
from .errors import ConfigError, FormatError
from .pipeline import PatchSpec

TASK_NAMES = {"cp-t": 2, "cp-f": 3, "ce": 4}


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    decoder_dim: int = 0  # 0 means same as hidden_dim
    enc_depth: int = 4
    dec_depth: int = 2
    heads: int = 4
    experts_total: int = 8
    experts_active: int = 2
    expert_dim: int = 128
    patch_t: int = 4
    patch_f: int = 4
    patch_s: int = 4
    conf_hidden: int = 64
    gating: str = "task"
    task_count: int = 4

    @property
    def patch(self):
        return PatchSpec(self.patch_t, self.patch_f, self.patch_s)

    @property
    def dec_dim(self):
        return self.decoder_dim if self.decoder_dim else self.hidden_dim

    @property
    def token_dim(self):
        return 2 * self.patch_t * self.patch_f * self.patch_s

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise FormatError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_run(cls, cfg):
        return cls(hidden_dim=cfg.get("model.hidden_dim"),
                   decoder_dim=cfg.get("model.decoder_dim"),
                   enc_depth=cfg.get("model.enc_depth"),
                   dec_depth=cfg.get("model.dec_depth"),
                   heads=cfg.get("model.heads"),
                   experts_total=cfg.get("model.experts_total"),
                   experts_active=cfg.get("model.experts_active"),
                   expert_dim=cfg.get("model.expert_dim"),
                   patch_t=cfg.get("model.patch_t"),
                   patch_f=cfg.get("model.patch_f"),
                   patch_s=cfg.get("model.patch_s"),
                   conf_hidden=cfg.get("model.conf_hidden"),
                   gating=cfg.get("model.gating"))


def stf_positional_encoding(coords, dim):
    """Sinusoidal encoding of (time, freq, space) patch coordinates.

    ``dim`` must be divisible by 6: one third per axis, each axis interleaving
    sin/cos at geometrically spaced wavelengths (base 10000). Deterministic,
    parameter-free, and injective on desk-scale grids; coordinate (0, 0, 0)
    maps to alternating (0, 1) exactly.
    """
    if dim % 6 != 0:
        raise ConfigError(f"encoding dim must be divisible by 6, got {dim}")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    band = dim // 3
    half = band // 2
    exponent = np.arange(half, dtype=np.float64) / max(half, 1)
    omega = 1.0 / (10000.0 ** exponent)
    table = np.empty((coords.shape[0], dim), dtype=np.float64)
    for axis in range(3):
        angle = coords[:, axis:axis + 1] * omega[None, :]
        start = axis * band
        table[:, start:start + band:2] = np.sin(angle)
        table[:, start + 1:start + band:2] = np.cos(angle)
    return table


def _padded_pos_table(dims, dim):
    """Model-width PE table; zero-pads past the largest multiple of 6."""
    pe_dim = 6 * (dim // 6)
    coords = pipeline.token_coords(dims)
    table = np.zeros((coords.shape[0], dim), dtype=np.float64)
    if pe_dim:
        table[:, :pe_dim] = stf_positional_encoding(coords, pe_dim)
    return torch.from_numpy(table)


class FeedForward(nn.Module):
    """One expert: two affine maps around a GELU."""

    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SmoeLayer(nn.Module):
    """Bank of expert FFNs with task-selected top-k gating.

    Gate weights are the top-k softmax probabilities kept verbatim (no
    renormalization); ties go to the lower expert index. Returns the routed
    output plus (token_fraction, mean_gate): the detached fraction of tokens
    whose top-1 expert is i, and the batch-mean softmax probability per
    expert (over all experts, not only the active ones).
    """

    def __init__(self, dim, expert_dim, n_experts, n_active, n_gates):
        super().__init__()
        if not 1 <= n_active <= n_experts:
            raise ConfigError(f"active experts {n_active} out of [1, {n_experts}]")
        self.n_active = n_active
        self.unified = n_gates == 1
        self.experts = nn.ModuleList(
            FeedForward(dim, expert_dim) for _ in range(n_experts))
        self.gates = nn.ModuleList(
            nn.Linear(dim, n_experts) for _ in range(n_gates))

    def gate_index(self, task_id):
        return 0 if self.unified else task_id - 1

    def forward(self, x, task_id, gate_override=None):
        if gate_override is not None:
            index = gate_override
        else:
            if not self.unified and not 1 <= task_id <= len(self.gates):
                raise ValueError(f"task id {task_id} out of [1, {len(self.gates)}]")
            index = self.gate_index(task_id)
        if not 0 <= index < len(self.gates):
            raise ValueError(f"gate index {index} out of [0, {len(self.gates)})")
        probs = torch.softmax(self.gates[index](x), dim=-1)
        n_experts = len(self.experts)
        flat_p = probs.reshape(-1, n_experts)
        flat_x = x.reshape(-1, x.shape[-1])
        order = torch.argsort(flat_p, dim=-1, descending=True, stable=True)
        keep = order[:, :self.n_active]
        weights = torch.zeros_like(flat_p).scatter(-1, keep, flat_p.gather(-1, keep))
        out = torch.zeros_like(flat_x)
        for i, expert in enumerate(self.experts):
            rows = torch.nonzero(weights[:, i] > 0, as_tuple=False).squeeze(1)
            if rows.numel():
                routed = weights[rows, i:i + 1] * expert(flat_x[rows])
                out = out.index_add(0, rows, routed)
        top1 = flat_p.argmax(dim=-1)
        token_fraction = (torch.bincount(top1, minlength=n_experts)
                          .to(x.dtype) / flat_p.shape[0]).detach()
        mean_gate = flat_p.mean(dim=0)
        return out.reshape(x.shape), (token_fraction, mean_gate)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, bias=None):
        b, l, d = x.shape
        qkv = self.qkv(x).reshape(b, l, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if bias is not None:
            attn = attn + bias
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, l, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block with an SMoE in place of the FFN."""

    def __init__(self, dim, heads, expert_dim, n_experts, n_active, n_gates):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.smoe = SmoeLayer(dim, expert_dim, n_experts, n_active, n_gates)

    def forward(self, x, task_id, bias=None, gate_override=None):
        x = x + self.attn(self.norm1(x), bias)
        routed, stats = self.smoe(self.norm2(x), task_id, gate_override)
        return x + routed, stats


def _prefix_bias(length, dtype):
    """Additive attention bias hiding position 0 from every other position."""
    bias = torch.zeros(length + 1, length + 1, dtype=dtype)
    bias[1:, 0] = float("-inf")
    return bias


class MdaeModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        if config.gating not in ("task", "unified"):
            raise ConfigError(f"unknown gating mode {config.gating!r}")
        self.config = config
        n_gates = 1 if config.gating == "unified" else config.task_count
        dim, dec = config.hidden_dim, config.dec_dim
        self.patch_embed = nn.Linear(config.token_dim, dim)
        self.encoder = nn.ModuleList(
            Block(dim, config.heads, config.expert_dim, config.experts_total,
                  config.experts_active, n_gates) for _ in range(config.enc_depth))
        self.encoder_norm = nn.LayerNorm(dim)
        self.decoder_embed = nn.Linear(dim, dec)
        self.mask_token = nn.Parameter(torch.zeros(dec))
        self.decoder = nn.ModuleList(
            Block(dec, config.heads, config.expert_dim, config.experts_total,
                  config.experts_active, n_gates) for _ in range(config.dec_depth))
        self.decoder_norm = nn.LayerNorm(dec)
        self.output_proj = nn.Linear(dec, config.token_dim)
        self.conf_tokens = nn.Parameter(torch.zeros(config.task_count, dec))
        self.conf_heads = nn.ModuleList(
            nn.Sequential(nn.Linear(dec, config.conf_hidden), nn.GELU(),
                          nn.Linear(config.conf_hidden, 1))
            for _ in range(config.task_count))
        nn.init.normal_(self.mask_token, std=0.02)
        nn.init.normal_(self.conf_tokens, std=0.02)
        for head in self.conf_heads:
            # Start predictions mid-range of typical reconstruction NMSE so
            # calibration only has to cover a few dB, not tens of dB.
            nn.init.constant_(head[-1].bias, -10.0)
        self._pos_cache = {}

    def _check_task(self, task_id):
        if not 1 <= task_id <= self.config.task_count:
            raise ValueError(f"task id {task_id} out of 1..{self.config.task_count}")

    def pos_table(self, dims, dim):
        key = (tuple(dims), dim)
        if key not in self._pos_cache:
            self._pos_cache[key] = _padded_pos_table(dims, dim)
        return self._pos_cache[key]

    def encoder_forward(self, embedded, dims, visible, task_id,
                        gate_override=None):
        """Run visible, already patch-embedded tokens through the encoder.

        Adds positional rows for the visible coordinates first; with zero
        encoder depth the output is exactly embedded + positions.
        """
        if gate_override is None:
            self._check_task(task_id)
        if len(visible) != embedded.shape[1]:
            raise ValueError(f"{embedded.shape[1]} embedded tokens but "
                             f"{len(visible)} visible coordinates")
        table = self.pos_table(dims, self.config.hidden_dim).to(embedded.dtype)
        vis = torch.as_tensor(np.asarray(visible), dtype=torch.long)
        x = embedded + table[vis]
        stats = []
        for i, block in enumerate(self.encoder):
            x, aux = block(x, task_id, gate_override=gate_override)
            stats.append((f"enc.{i}", aux))
        if self.encoder:
            x = self.encoder_norm(x)
        return x, stats

    def decoder_forward(self, encoded, dims, plan, task_id,
                        with_confidence=False, return_hidden=False):
        """Reassemble the full token sequence and decode to output tokens.

        Mask tokens fill the masked slots before decoder positions are added.
        With ``with_confidence`` the task's confidence token is prepended
        behind a one-way attention bias and its head output (predicted NMSE
        in dB) is returned alongside. ``return_hidden`` additionally collects
        the original-token activations after every block and the final norm.
        """
        self._check_task(task_id)
        if len(plan.visible) != encoded.shape[1]:
            raise ValueError(f"{encoded.shape[1]} encoded tokens but "
                             f"{len(plan.visible)} visible coordinates")
        b = encoded.shape[0]
        total = int(np.prod(dims))
        dec_dim = self.config.dec_dim
        x = self.decoder_embed(encoded)
        full = self.mask_token.to(encoded.dtype).expand(b, total, dec_dim).clone()
        vis = torch.as_tensor(np.asarray(plan.visible), dtype=torch.long)
        full[:, vis] = x
        full = full + self.pos_table(dims, dec_dim).to(encoded.dtype)
        bias = None
        if with_confidence:
            prefix = self.conf_tokens[task_id - 1].to(encoded.dtype)
            prefix = prefix.expand(b, 1, dec_dim)
            full = torch.cat([prefix, full], dim=1)
            bias = _prefix_bias(total, encoded.dtype)

        def body():
            return full[:, 1:] if with_confidence else full

        stats = []
        hidden = []
        for i, block in enumerate(self.decoder):
            full, aux = block(full, task_id, bias=bias)
            stats.append((f"dec.{i}", aux))
            if return_hidden:
                hidden.append(body())
        if self.decoder:
            full = self.decoder_norm(full)
        if return_hidden:
            hidden.append(body())
        out = self.output_proj(body())
        conf = None
        if with_confidence:
            conf = self.conf_heads[task_id - 1](full[:, 0]).squeeze(-1)
        return out, conf, stats, hidden

    def forward_planes(self, tokens, dims, shape, plan, task_id,
                       with_confidence=False):
        """Full forward pass: raw tokens (B, L, token_dim) -> planes.

        Returns (planes (B, 2, T, K, N), confidence dB or None, stats) where
        stats is a list of (layer_label, (token_fraction, mean_gate)).
        """
        vis = torch.as_tensor(np.asarray(plan.visible), dtype=torch.long)
        embedded = self.patch_embed(tokens[:, vis])
        encoded, enc_stats = self.encoder_forward(embedded, dims, plan.visible,
                                                  task_id)
        out_tokens, conf, dec_stats, _ = self.decoder_forward(
            encoded, dims, plan, task_id, with_confidence=with_confidence)
        planes = unpatchify_tokens(out_tokens, dims, shape, self.config.patch)
        return planes, conf, enc_stats + dec_stats

    def backbone_parameters(self):
        return [p for name, p in self.named_parameters()
                if not _is_confidence_param(name)]

    def confidence_parameters(self):
        return [p for name, p in self.named_parameters()
                if _is_confidence_param(name)]


def _is_confidence_param(name):
    return name.startswith("conf_tokens") or name.startswith("conf_heads")


def unpatchify_tokens(tokens, dims, shape, patch):
    """Torch mirror of pipeline.unpatchify for batched output tokens."""
    b = tokens.shape[0]
    n_t, n_f, n_s = dims
    blocks = tokens.reshape(b, n_t, n_f, n_s, 2, patch.t, patch.f, patch.s)
    planes = blocks.permute(0, 4, 1, 5, 2, 6, 3, 7).reshape(
        b, 2, n_t * patch.t, n_f * patch.f, n_s * patch.s)
    return planes[:, :, :shape[0], :shape[1], :shape[2]]


def build_model(config, seed=0):
    """Deterministic construction: same config and seed -> same parameters."""
    torch.manual_seed(seed)
    return MdaeModel(config)


def parameter_checksum(model, include=None):
    """SHA-256 over float32 bytes of (a filtered set of) named parameters."""
    digest = hashlib.sha256()
    for name, param in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        if include is not None and not include(name):
            continue
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().cpu().numpy().astype("<f4").tobytes())
    return digest.hexdigest()


def save_model(path, model, phase, step, seed, kind="mdae", extra=None):
    storage.save_checkpoint(path, model, model.config.to_dict(), phase, step,
                            seed, kind=kind, extra=extra)


def load_model(path):
    """Rebuild an MdaeModel from a checkpoint; strict manifest verification."""
    data = storage.load_checkpoint(path)
    if data.meta.get("kind") != "mdae":
        raise FormatError(f"{path}: checkpoint kind {data.meta.get('kind')!r}, "
                          f"expected 'mdae'")
    config = ModelConfig.from_dict(data.meta["config"])
    model = build_model(config, seed=data.meta.get("seed", 0))
    _load_params(model, data, path)
    return model, data.meta


def _load_params(model, data, path):
    state = model.state_dict()
    missing = sorted(set(state) - set(data.params))
    extra = sorted(set(data.params) - set(state))
    if missing or extra:
        raise FormatError(f"{path}: parameter set mismatch "
                          f"(missing {missing[:3]}, extra {extra[:3]})")
    loaded = {}
    for name, arr in data.params.items():
        if tuple(state[name].shape) != tuple(arr.shape):
            raise FormatError(f"{path}: parameter {name} has shape "
                              f"{list(arr.shape)}, expected {list(state[name].shape)}")
        loaded[name] = torch.from_numpy(np.array(arr))
    model.load_state_dict(loaded)
    return model


@dataclass
class RoutingStats:
    """Aggregated routing behaviour of one SMoE layer under one task."""

    layer: str
    task_id: int
    token_fraction: np.ndarray
    mean_gate: np.ndarray


def reconstruct(model, sample, task, ratio=None, pattern=None,
                with_confidence=True):
    """Zero-shot reconstruction of one (possibly noisy) channel sample.

    task: "cp-t" / "cp-f" extrapolate the trailing ceil(ratio * axis) samples
    (zero-filled on input, covered by masked trailing patch slabs); "ce"
    densifies a pilot lattice first and denoises with nothing masked. The
    returned sample keeps the observed input verbatim and takes network output
    on the target region; CE output is network output everywhere. Also returns
    the predicted NMSE (dB) and per-layer routing stats.
    """
    if task not in TASK_NAMES:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASK_NAMES)}")
    patch = model.config.patch
    shape = sample.values.shape
    normalized, scale = pipeline.normalize(sample)

    if task == "ce":
        if pattern is None:
            raise ValueError("ce needs a pilot pattern")
        coarse = pipeline.pilot_downsample_interpolate(normalized.values, pattern)
        planes = pipeline.complex_to_planes(coarse)
        grid = pipeline.patchify(planes, patch)
        plan = pipeline.make_mask_plan("none", 0.0, grid.dims)
        region = np.ones(shape, dtype=bool)
    else:
        if ratio is None:
            raise ValueError(f"{task} needs a ratio")
        axis = 0 if task == "cp-t" else 1
        region = suffix_region(shape, axis, ratio)
        planes = pipeline.complex_to_planes(normalized.values)
        planes = pipeline.zero_fill(planes, region)
        grid = pipeline.patchify(planes, patch)
        mode = "time" if task == "cp-t" else "frequency"
        plan = pipeline.make_mask_plan(mode, ratio, grid.dims)

    tokens = torch.from_numpy(grid.tokens[None]).to(torch.float32)
    model.eval()
    with torch.no_grad():
        planes_out, conf, raw_stats = model.forward_planes(
            tokens, grid.dims, shape, plan, TASK_NAMES[task],
            with_confidence=with_confidence)
    recon = pipeline.planes_to_complex(planes_out[0].double().numpy()) / scale
    out = np.where(region, recon, sample.values)
    stats = [RoutingStats(layer=label, task_id=TASK_NAMES[task],
                          token_fraction=frac.numpy().astype(np.float64),
                          mean_gate=gate.numpy().astype(np.float64))
             for label, (frac, gate) in raw_stats]
    conf_db = float(conf[0]) if conf is not None else None
    return (pipeline.CsiSample(out, sample.grid, sample.geometry), conf_db, stats)


def suffix_region(shape, axis, ratio):
    """Bool mask of the trailing ceil(ratio * n) positions along one axis."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    n = shape[axis]
    n_target = math.ceil(ratio * n)
    region = np.zeros(shape, dtype=bool)
    index = [slice(None)] * len(shape)
    index[axis] = slice(n - n_target, None)
    region[tuple(index)] = True
    return region
