"""Two-phase self-supervised training.

Phase 1 draws one of four tasks per step (random / time / frequency masking
on coarse datasets, pilot interpolation denoising on fine ones), adds noise
at a drawn SNR, and minimizes mean squared reconstruction error over the
task's target region plus a weighted load-balance penalty. Phase 2 freezes
the backbone bit-for-bit and regresses the per-task confidence heads onto
the true reconstruction NMSE in dB.

All randomness flows through per-step child streams of one root seed, so a
run is reproducible and a checkpoint (seed, step) pins the remaining stream.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import pipeline
from .channel import add_awgn
from .errors import ConfigError, DivergenceError
from .model import parameter_checksum, save_model
from .numeric import SeededRng
from .pipeline import PilotPattern
from .storage import write_loss_trace


class AdamW(torch.optim.Optimizer):
    """Adam with decoupled weight decay.

    Decay multiplies the parameter by (1 - lr * weight_decay) before the
    bias-corrected moment update, so a zero-gradient parameter shrinks
    geometrically and the asymptotic step under a constant gradient is
    lr * sign(g).
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        if lr < 0.0:
            raise ValueError(f"invalid learning rate {lr}")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ValueError(f"invalid betas {betas}")
        if eps <= 0.0:
            raise ValueError(f"invalid eps {eps}")
        if weight_decay < 0.0:
            raise ValueError(f"invalid weight decay {weight_decay}")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None if closure is None else closure()
        for group in self.param_groups:
            lr = group["lr"]
            beta1, beta2 = group["betas"]
            eps = group["eps"]
            decay = group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["m"], state["v"]
                grad = p.grad
                if decay:
                    p.mul_(1.0 - lr * decay)
                m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
                v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
                m_hat = m / (1.0 - beta1 ** t)
                v_hat = v / (1.0 - beta2 ** t)
                p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
        return loss


def lr_schedule(step, base_lr, min_lr, warmup_steps, total_steps):
    """Linear warmup to base_lr, then cosine decay to min_lr at total_steps."""
    if total_steps < 1 or warmup_steps < 0:
        raise ValueError("bad schedule horizon")
    if min_lr > base_lr:
        raise ValueError(f"min_lr {min_lr} exceeds base_lr {base_lr}")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps:
        return min_lr
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return min_lr + 0.5 * (1.0 + math.cos(math.pi * progress)) * (base_lr - min_lr)


def reconstruction_loss(recon, truth, region):
    """Mean squared error over real/imag entries of the target region."""
    mask = torch.as_tensor(np.asarray(region), dtype=torch.bool)
    if not mask.any():
        raise ValueError("empty loss region")
    diff = recon[:, :, mask] - truth[:, :, mask]
    return diff.pow(2).mean()


def load_balance_loss(token_fraction, mean_gate):
    """M * sum_i D_i * P_i for one layer; exactly 1 under uniform routing."""
    if len(token_fraction) != len(mean_gate):
        raise ValueError("token_fraction and mean_gate lengths differ")
    m = len(token_fraction)
    if isinstance(mean_gate, torch.Tensor):
        frac = torch.as_tensor(token_fraction, dtype=mean_gate.dtype)
        return m * (frac * mean_gate).sum()
    return float(m * np.sum(np.asarray(token_fraction) * np.asarray(mean_gate)))


def mean_balance_loss(stats):
    """Average the per-layer penalty over all collected SMoE layers."""
    if not stats:
        raise ValueError("no routing stats collected")
    total = None
    for _, (frac, gate) in stats:
        term = load_balance_loss(frac, gate)
        total = term if total is None else total + term
    return total / len(stats)


@dataclass(frozen=True)
class TaskDraw:
    """One training step's sampled task and corruption settings."""

    task_id: int
    kind: str
    dataset_index: int
    mode: str
    ratio: float
    pattern: object
    snr_db: float


@dataclass
class Corpus:
    """Loaded datasets grouped by grid kind; coarse feeds tasks 1-3, fine task 4."""

    coarse: list = field(default_factory=list)
    fine: list = field(default_factory=list)

    def dataset(self, draw):
        group = self.coarse if draw.kind == "coarse" else self.fine
        return group[draw.dataset_index]

    @property
    def total_samples(self):
        return sum(ds.count for ds in self.coarse + self.fine)


@dataclass
class Phase1Config:
    epochs: int = 60
    max_steps: int = 0
    batch_size: int = 32
    base_lr: float = 5e-4
    min_lr: float = 3e-4
    warmup_epochs: int = 5
    weight_decay: float = 0.05
    load_balance_weight: float = 0.03
    grad_clip: float = 1.0
    seed: int = 0
    random_mask_ratio: float = 0.85
    mask_ratio: tuple = (0.10, 0.25)
    pilot_time: tuple = (0.125, 0.25)
    pilot_freq: tuple = (1.0 / 24.0, 1.0 / 6.0)
    snr: tuple = (10.0, 25.0)
    fixed_ratio: bool = False
    fixed_mask_ratio: float = 0.25
    fixed_pilot_time: float = 0.25
    fixed_pilot_freq: float = 1.0 / 12.0
    no_random_mask: bool = False
    checkpoint_every: int = 1

    @classmethod
    def from_run(cls, cfg):
        g = cfg.get
        return cls(epochs=g("training.epochs"), max_steps=g("training.max_steps"),
                   batch_size=g("training.batch_size"), base_lr=g("training.lr"),
                   min_lr=g("training.min_lr"),
                   warmup_epochs=g("training.warmup_epochs"),
                   weight_decay=g("training.weight_decay"),
                   load_balance_weight=g("training.load_balance_weight"),
                   grad_clip=g("training.grad_clip"), seed=g("training.seed"),
                   random_mask_ratio=g("training.random_mask_ratio"),
                   mask_ratio=(g("training.mask_ratio_min"),
                               g("training.mask_ratio_max")),
                   pilot_time=(g("training.pilot_time_min"),
                               g("training.pilot_time_max")),
                   pilot_freq=(g("training.pilot_freq_min"),
                               g("training.pilot_freq_max")),
                   snr=(g("training.snr_min"), g("training.snr_max")),
                   fixed_ratio=g("training.fixed_ratio"),
                   fixed_mask_ratio=g("training.fixed_mask_ratio"),
                   fixed_pilot_time=g("training.fixed_pilot_time"),
                   fixed_pilot_freq=g("training.fixed_pilot_freq"),
                   no_random_mask=g("training.no_random_mask"),
                   checkpoint_every=g("training.checkpoint_every"))


@dataclass
class Phase2Config:
    epochs: int = 20
    max_steps: int = 0
    batch_size: int = 32
    base_lr: float = 3e-3
    min_lr: float = 3e-4
    warmup_epochs: int = 2
    weight_decay: float = 0.001
    tasks: tuple = (1, 2, 3, 4)

    @classmethod
    def from_run(cls, cfg):
        g = cfg.get
        return cls(epochs=g("phase2.epochs"), max_steps=g("phase2.max_steps"),
                   batch_size=g("phase2.batch_size"), base_lr=g("phase2.lr"),
                   min_lr=g("phase2.min_lr"),
                   warmup_epochs=g("phase2.warmup_epochs"),
                   weight_decay=g("phase2.weight_decay"),
                   tasks=tuple(g("phase2.tasks")))


def draw_task(rng, cfg, corpus, allowed=(1, 2, 3, 4)):
    """Sample (task, dataset, corruption, SNR) for one step.

    Tasks needing an absent dataset kind are excluded, as is task 1 under the
    no-random-mask ablation. Axis-mask ratios come from the configured range
    (or the pinned value under fixed-ratio); SNR is uniform over its range.
    """
    tasks = [t for t in allowed if not (t == 1 and cfg.no_random_mask)]
    if not tasks:
        raise ValueError("no drawable tasks for this config")
    if any(t in (1, 2, 3) for t in tasks) and not corpus.coarse:
        raise ConfigError("corpus has no coarse-grid dataset")
    if 4 in tasks and not corpus.fine:
        raise ConfigError("corpus has no fine-grid dataset")
    task_id = tasks[int(rng.integers(len(tasks)))]
    kind = "fine" if task_id == 4 else "coarse"
    group = corpus.fine if task_id == 4 else corpus.coarse
    dataset_index = int(rng.integers(len(group)))
    snr_db = float(rng.uniform(*cfg.snr))
    pattern = None
    if task_id == 1:
        mode, ratio = "random", cfg.random_mask_ratio
    elif task_id in (2, 3):
        mode = "time" if task_id == 2 else "frequency"
        if cfg.fixed_ratio:
            ratio = cfg.fixed_mask_ratio
        else:
            ratio = float(rng.uniform(*cfg.mask_ratio))
    else:
        mode, ratio = "none", 0.0
        if cfg.fixed_ratio:
            pattern = PilotPattern(cfg.fixed_pilot_time, cfg.fixed_pilot_freq, 1.0)
        else:
            pattern = PilotPattern(float(rng.uniform(*cfg.pilot_time)),
                                   float(rng.uniform(*cfg.pilot_freq)), 1.0)
    return TaskDraw(task_id=task_id, kind=kind, dataset_index=dataset_index,
                    mode=mode, ratio=ratio, pattern=pattern, snr_db=snr_db)


@dataclass
class TrainBatch:
    tokens: torch.Tensor
    truth: torch.Tensor
    dims: tuple
    shape: tuple
    plan: object
    region: np.ndarray
    task_id: int


def build_batch(draw, dataset, indices, noise_rng, mask_rng, patch):
    """Assemble one training batch with a shared mask plan.

    Inputs are noisy samples normalized to unit power; targets are the clean
    samples under the same per-sample scale. Drawn axis ratios are clamped to
    >= 1/n_slabs so the masked slab set is never empty, and pilot fractions
    are clamped so every interpolated axis keeps at least two pilots.
    """
    shape = (dataset.grid.t_samples, dataset.grid.subcarriers,
             dataset.geometry.n_elements)
    dims = pipeline.token_counts(shape, patch)
    ratio = draw.ratio
    if draw.mode in ("time", "frequency"):
        n_axis = dims[0] if draw.mode == "time" else dims[1]
        ratio = max(ratio, 1.0 / n_axis)
    pattern = draw.pattern
    if pattern is not None:
        floors = [min(2.0, n) / n for n in shape]
        pattern = pipeline.PilotPattern(
            max(pattern.time_fraction, floors[0]),
            max(pattern.freq_fraction, floors[1]),
            max(pattern.antenna_fraction, floors[2]))
    plan = pipeline.make_mask_plan(draw.mode, ratio, dims, mask_rng)
    region = pipeline.plan_loss_region(plan, dims, shape, patch)
    tokens = []
    truth = []
    for j, idx in enumerate(indices):
        sample = dataset.sample(int(idx))
        noisy = add_awgn(sample, draw.snr_db, noise_rng.child(j))
        normalized, scale = pipeline.normalize(noisy)
        values = normalized.values
        if draw.task_id == 4:
            values = pipeline.pilot_downsample_interpolate(values, pattern)
        grid = pipeline.patchify(pipeline.complex_to_planes(values), patch)
        tokens.append(grid.tokens)
        truth.append(pipeline.complex_to_planes(sample.values * scale))
    tokens = torch.from_numpy(np.stack(tokens)).to(torch.float32)
    truth = torch.from_numpy(np.stack(truth)).to(torch.float32)
    return TrainBatch(tokens=tokens, truth=truth, dims=dims, shape=shape,
                      plan=plan, region=region, task_id=draw.task_id)


def _check_gradients(model, step):
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise DivergenceError(f"non-finite gradient in {name} at step {step}")


def _steps(cfg, corpus):
    per_epoch = max(1, math.ceil(corpus.total_samples / cfg.batch_size))
    total = cfg.epochs * per_epoch
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    return per_epoch, max(total, 1)


def run_phase1(model, corpus, cfg, out_dir=None, log=None):
    """Masked-denoising pretraining; returns (model, trace rows).

    Trains everything except the confidence parameters. Writes phase1.mdae
    and phase1_loss.csv under out_dir at checkpoint epochs when given. A
    non-finite loss or gradient aborts with DivergenceError after flushing
    the trace.
    """
    per_epoch, total_steps = _steps(cfg, corpus)
    warmup = cfg.warmup_epochs * per_epoch
    patch = model.config.patch
    optimizer = AdamW(model.backbone_parameters(), lr=cfg.base_lr,
                      weight_decay=cfg.weight_decay)
    root = SeededRng(cfg.seed)
    trace = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    def flush(step):
        if out_dir is not None:
            write_loss_trace(out_dir / "phase1_loss.csv", trace)
            save_model(out_dir / "phase1.mdae", model, phase=1, step=step,
                       seed=cfg.seed)

    model.train()
    for step in range(total_steps):
        lr = lr_schedule(step + 1, cfg.base_lr, cfg.min_lr, warmup, total_steps)
        stream = root.child(step)
        draw = draw_task(stream.child(0), cfg, corpus)
        dataset = corpus.dataset(draw)
        indices = stream.child(1).integers(dataset.count, size=cfg.batch_size)
        batch = build_batch(draw, dataset, indices, stream.child(2),
                            stream.child(3), patch)
        planes, _, stats = model.forward_planes(
            batch.tokens, batch.dims, batch.shape, batch.plan, batch.task_id)
        loss_rec = reconstruction_loss(planes, batch.truth, batch.region)
        loss_bal = mean_balance_loss(stats)
        if cfg.load_balance_weight:
            loss = loss_rec + cfg.load_balance_weight * loss_bal
        else:
            loss = loss_rec
        if not torch.isfinite(loss):
            flush(step)
            raise DivergenceError(f"non-finite loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        _check_gradients(model, step)
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.backbone_parameters(),
                                           cfg.grad_clip)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.step()
        trace.append((step, batch.task_id, float(loss_rec.detach()),
                      float(loss_bal.detach()), lr))
        epoch_end = (step + 1) % per_epoch == 0
        if epoch_end and ((step + 1) // per_epoch) % cfg.checkpoint_every == 0:
            flush(step + 1)
        if log is not None and epoch_end:
            recent = trace[-per_epoch:]
            log(f"epoch {(step + 1) // per_epoch}: "
                f"loss {np.mean([r[2] for r in recent]):.5f} lr {lr:.2e}")
    flush(total_steps)
    model.eval()
    return model, trace


def sample_nmse_db(planes, truth, region, floor_db=-120.0):
    """Per-sample NMSE (dB) between plane tensors over a region, clamped."""
    mask = torch.as_tensor(np.asarray(region), dtype=torch.bool)
    err = (planes[:, :, mask] - truth[:, :, mask]).pow(2).sum(dim=(1, 2))
    den = truth[:, :, mask].pow(2).sum(dim=(1, 2))
    ratio = torch.clamp(err / den, min=10.0 ** (floor_db / 10.0))
    return 10.0 * torch.log10(ratio)


def run_phase2(model, corpus, cfg, p2cfg, out_dir=None, log=None):
    """Confidence calibration on a frozen backbone; returns (model, trace).

    Only the per-task confidence tokens and heads receive gradients; the
    backbone checksum is verified unchanged at the end. Targets are the true
    per-sample NMSE (dB) of the frozen reconstruction on each drawn task.
    """
    per_epoch = max(1, math.ceil(corpus.total_samples / p2cfg.batch_size))
    total_steps = p2cfg.epochs * per_epoch
    if p2cfg.max_steps:
        total_steps = min(total_steps, p2cfg.max_steps)
    total_steps = max(total_steps, 1)
    warmup = p2cfg.warmup_epochs * per_epoch
    patch = model.config.patch

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    backbone_sum = parameter_checksum(model, include=_backbone_name)
    for name, p in model.named_parameters():
        p.requires_grad_(not _backbone_name(name))
    optimizer = AdamW(model.confidence_parameters(), lr=p2cfg.base_lr,
                      weight_decay=p2cfg.weight_decay)
    root = SeededRng(cfg.seed).child(0x7A5E2)
    trace = []

    def flush(step):
        if out_dir is not None:
            write_loss_trace(out_dir / "phase2_loss.csv", trace)
            save_model(out_dir / "phase2.mdae", model, phase=2, step=step,
                       seed=cfg.seed)

    model.train()
    for step in range(total_steps):
        lr = lr_schedule(step + 1, p2cfg.base_lr, p2cfg.min_lr, warmup,
                         total_steps)
        stream = root.child(step)
        draw = draw_task(stream.child(0), cfg, corpus, allowed=p2cfg.tasks)
        dataset = corpus.dataset(draw)
        indices = stream.child(1).integers(dataset.count, size=p2cfg.batch_size)
        batch = build_batch(draw, dataset, indices, stream.child(2),
                            stream.child(3), patch)
        planes, conf, _ = model.forward_planes(
            batch.tokens, batch.dims, batch.shape, batch.plan, batch.task_id,
            with_confidence=True)
        target = sample_nmse_db(planes.detach(), batch.truth, batch.region)
        loss = (conf - target).pow(2).mean()
        if not torch.isfinite(loss):
            flush(step)
            raise DivergenceError(f"non-finite confidence loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        _check_gradients(model, step)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.step()
        trace.append((step, batch.task_id, float(loss.detach()), 0.0, lr))
        if log is not None and (step + 1) % per_epoch == 0:
            log(f"phase2 epoch {(step + 1) // per_epoch}: "
                f"loss {float(loss.detach()):.3f}")
    for p in model.parameters():
        p.requires_grad_(True)
    if parameter_checksum(model, include=_backbone_name) != backbone_sum:
        raise DivergenceError("backbone parameters changed during phase 2")
    flush(total_steps)
    model.eval()
    return model, trace


def _backbone_name(name):
    return not (name.startswith("conf_tokens") or name.startswith("conf_heads"))
