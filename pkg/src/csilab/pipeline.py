"""Tensor plumbing between channel samples and model tokens.

Complex CSI tensors (T, K, N) are split into real/imag planes (2, T, K, N),
power-normalized, and cut into non-overlapping 3-d patches; each patch is one
token. Token order is C-order over patch coordinates (time, frequency, space),
and each token flattens its block in (plane, t, f, s) C-order. Axes that do
not divide evenly are zero-padded on the high side; padded positions never
contribute to losses or metrics (see ``in_bounds_mask``).
"""

import math
from dataclasses import dataclass

import numpy as np

from .channel import CsiSample


@dataclass(frozen=True)
class PatchSpec:
    t: int
    f: int
    s: int

    def __post_init__(self):
        if min(self.t, self.f, self.s) < 1:
            raise ValueError(f"patch sides must be >= 1, got {self}")

    @property
    def token_dim(self):
        return 2 * self.t * self.f * self.s


@dataclass
class TokenGrid:
    """Patchified planes: tokens (L, token_dim), coords (L, 3) patch indices."""

    tokens: np.ndarray
    coords: np.ndarray
    source_shape: tuple
    patch: PatchSpec

    @property
    def dims(self):
        return token_counts(self.source_shape, self.patch)


@dataclass
class MaskPlan:
    """Index split of [0, L) into visible and masked tokens for one task."""

    mode: str
    ratio: float
    task_id: int
    visible: np.ndarray
    masked: np.ndarray


@dataclass(frozen=True)
class PilotPattern:
    """Per-axis keep fractions of the pilot lattice (1.0 keeps the axis whole)."""

    time_fraction: float
    freq_fraction: float
    antenna_fraction: float = 1.0

    def __post_init__(self):
        for name, frac in (("time", self.time_fraction),
                           ("freq", self.freq_fraction),
                           ("antenna", self.antenna_fraction)):
            if not 0.0 < frac <= 1.0:
                raise ValueError(f"{name} fraction must be in (0, 1], got {frac}")


MODE_TASK_ID = {"random": 1, "time": 2, "frequency": 3, "none": 4}


def complex_to_planes(values):
    """(T, K, N) complex -> (2, T, K, N) float64, plane 0 real, plane 1 imag."""
    values = np.asarray(values)
    return np.stack([values.real, values.imag]).astype(np.float64)


def planes_to_complex(planes):
    planes = np.asarray(planes)
    if planes.shape[0] != 2:
        raise ValueError(f"expected leading plane axis of size 2, got {planes.shape}")
    return planes[0] + 1j * planes[1]


def normalize(sample):
    """Scale a sample to unit mean element power; returns (scaled, scale).

    scale multiplies the values, so mean power 4 gives scale 1/2. The inverse
    is ``denormalize``. Zero-power input has no finite scale -> ValueError.
    """
    power = float(np.mean(np.abs(sample.values) ** 2))
    if power <= 0.0:
        raise ValueError("cannot normalize a zero-power sample")
    scale = 1.0 / math.sqrt(power)
    return CsiSample(sample.values * scale, sample.grid, sample.geometry), scale


def denormalize(sample, scale):
    return CsiSample(sample.values / scale, sample.grid, sample.geometry)


def token_counts(shape, patch):
    t, k, n = shape
    return (math.ceil(t / patch.t), math.ceil(k / patch.f), math.ceil(n / patch.s))


def token_coords(dims):
    """Canonical (L, 3) patch coordinates, C-order over (time, freq, space)."""
    n_t, n_f, n_s = dims
    grid = np.indices((n_t, n_f, n_s)).reshape(3, -1).T
    return np.ascontiguousarray(grid, dtype=np.int64)


def patchify(planes, patch):
    """Cut (2, T, K, N) planes into tokens; zero-pads ragged edges."""
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim != 4 or planes.shape[0] != 2:
        raise ValueError(f"expected planes of shape (2, T, K, N), got {planes.shape}")
    shape = planes.shape[1:]
    n_t, n_f, n_s = token_counts(shape, patch)
    pad = [(0, 0),
           (0, n_t * patch.t - shape[0]),
           (0, n_f * patch.f - shape[1]),
           (0, n_s * patch.s - shape[2])]
    padded = np.pad(planes, pad)
    blocks = padded.reshape(2, n_t, patch.t, n_f, patch.f, n_s, patch.s)
    blocks = blocks.transpose(1, 3, 5, 0, 2, 4, 6)
    tokens = np.ascontiguousarray(blocks).reshape(n_t * n_f * n_s, patch.token_dim)
    return TokenGrid(tokens=tokens, coords=token_coords((n_t, n_f, n_s)),
                     source_shape=tuple(shape), patch=patch)


def unpatchify(grid, tokens=None):
    """Inverse of ``patchify``; padding is cropped away."""
    patch = grid.patch
    n_t, n_f, n_s = grid.dims
    data = grid.tokens if tokens is None else tokens
    blocks = np.asarray(data).reshape(n_t, n_f, n_s, 2, patch.t, patch.f, patch.s)
    planes = blocks.transpose(3, 0, 4, 1, 5, 2, 6).reshape(
        2, n_t * patch.t, n_f * patch.f, n_s * patch.s)
    t, k, n = grid.source_shape
    return np.ascontiguousarray(planes[:, :t, :k, :n])


def in_bounds_mask(shape, patch):
    """Bool (T', K', N') over the padded extent, True inside the source."""
    n_t, n_f, n_s = token_counts(shape, patch)
    full = np.zeros((n_t * patch.t, n_f * patch.f, n_s * patch.s), dtype=bool)
    full[:shape[0], :shape[1], :shape[2]] = True
    return full


def make_mask_plan(mode, ratio, dims, rng=None):
    """Split canonical token indices into visible/masked for one task.

    random: floor(ratio * L) tokens drawn uniformly without replacement.
    time / frequency: patch slabs with axis index >= ceil((1 - ratio) * n_axis)
      are masked, i.e. the trailing ~ratio share of the axis.
    none: nothing masked (interpolation-denoising input is already complete).
    """
    n_t, n_f, n_s = dims
    total = n_t * n_f * n_s
    if total < 1:
        raise ValueError("empty token grid")
    if mode not in MODE_TASK_ID:
        raise ValueError(f"unknown mask mode {mode!r}")
    if mode != "none" and not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")

    all_idx = np.arange(total, dtype=np.int64)
    if mode == "none":
        masked = np.empty(0, dtype=np.int64)
        ratio = 0.0
    elif mode == "random":
        if rng is None:
            raise ValueError("random mode needs an rng")
        count = int(math.floor(ratio * total))
        masked = np.sort(rng.permutation(total)[:count]).astype(np.int64)
    else:
        axis, n_axis = (0, n_t) if mode == "time" else (1, n_f)
        if n_axis < 2:
            raise ValueError(f"{mode} masking needs >= 2 slabs, got {n_axis}")
        threshold = math.ceil((1.0 - ratio) * n_axis)
        coords = token_coords(dims)
        masked = all_idx[coords[:, axis] >= threshold]
    visible = np.setdiff1d(all_idx, masked, assume_unique=True)
    if visible.size == 0:
        raise ValueError("mask plan left no visible tokens")
    return MaskPlan(mode=mode, ratio=float(ratio), task_id=MODE_TASK_ID[mode],
                    visible=visible, masked=masked)


def tokens_region(coords, shape, patch):
    """Bool (T, K, N) marking source positions covered by the given tokens."""
    region = np.zeros(shape, dtype=bool)
    for i_t, i_f, i_s in np.asarray(coords).reshape(-1, 3):
        region[i_t * patch.t:(i_t + 1) * patch.t,
               i_f * patch.f:(i_f + 1) * patch.f,
               i_s * patch.s:(i_s + 1) * patch.s] = True
    return region


def plan_loss_region(plan, dims, shape, patch):
    """Positions scored by the reconstruction loss for this plan.

    Masked-token coverage for masking tasks, the whole tensor for mode
    "none"; always clipped to in-bounds positions.
    """
    if plan.mode == "none":
        return np.ones(shape, dtype=bool)
    coords = token_coords(dims)[plan.masked]
    return tokens_region(coords, shape, patch)


def zero_fill(planes, region):
    """Copy of planes with the region positions set to zero in both planes."""
    out = np.array(planes, copy=True)
    out[:, region] = 0.0
    return out


def pilot_keep_count(n, fraction):
    """Half-up rounding of fraction * n, clamped to [1, n]."""
    return min(max(int(math.floor(fraction * n + 0.5)), 1), n)


def keep_indices(n, m):
    """m evenly spaced indices over [0, n), always including both endpoints."""
    if not 1 <= m <= n:
        raise ValueError(f"cannot keep {m} of {n} indices")
    if m == 1:
        return np.zeros(1, dtype=np.int64)
    idx = np.round(np.linspace(0.0, n - 1.0, m)).astype(np.int64)
    if np.any(np.diff(idx) < 1):
        raise ValueError("keep grid collapsed; fraction too small")
    return idx


def _interp_axis(values, kept, n, axis):
    """Linear interpolation from samples at ``kept`` to the full axis."""
    m = len(kept)
    if m == n:
        return values
    if m < 2:
        raise ValueError(f"axis of length {n} needs >= 2 kept samples to interpolate")
    idx = np.arange(n)
    left = np.clip(np.searchsorted(kept, idx, side="right") - 1, 0, m - 2)
    right = left + 1
    weight = (idx - kept[left]) / (kept[right] - kept[left])
    shape = [1] * values.ndim
    shape[axis] = n
    weight = weight.reshape(shape)
    lo = np.take(values, left, axis=axis)
    hi = np.take(values, right, axis=axis)
    return lo * (1.0 - weight) + hi * weight


def pilot_downsample_interpolate(values, pattern):
    """Keep a uniform pilot lattice and linearly fill the rest, axis by axis.

    Interpolation order is time, then frequency, then antenna. Values on the
    kept lattice pass through unchanged, so the operation is idempotent, and
    any input that is linear along each interpolated axis (including bilinear
    cross terms) is reproduced exactly.
    """
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError(f"expected (T, K, N) values, got shape {values.shape}")
    t, k, n = values.shape
    kt = keep_indices(t, pilot_keep_count(t, pattern.time_fraction))
    kf = keep_indices(k, pilot_keep_count(k, pattern.freq_fraction))
    ks = keep_indices(n, pilot_keep_count(n, pattern.antenna_fraction))
    sub = values[np.ix_(kt, kf, ks)]
    out = _interp_axis(sub, kt, t, axis=0)
    out = _interp_axis(out, kf, k, axis=1)
    out = _interp_axis(out, ks, n, axis=2)
    return out
