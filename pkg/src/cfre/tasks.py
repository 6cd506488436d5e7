"""Synthetic regression benchmarks with controlled residual families.

Each task draws inputs, pushes them through a fixed smooth mean field,
and adds joint-structured residual noise whose per-axis scale depends on
the input.  The residual family is selectable: anisotropic Gaussian or
Laplace, a Gaussian scale mixture with heavy tails, a skewed family and
a bimodal family, all calibrated to a common per-axis standard
deviation so only the shape differs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import InputError

KINDS = ("aniso_gaussian", "aniso_laplace", "heavy_tail_mixture", "skewed",
         "bimodal")

# vertical axis carries double the variance of the horizontal one
_VERTICAL_VAR_RATIO = 2.0

TAIL_PROB = 0.1
TAIL_STD = 3.0

_BIMODAL_MODE_FRAC = 0.8

# scale-field bump layer: wide enough to wrinkle the field, gain keeps the
# logits spread across the squashing region instead of saturating
_SCALE_HIDDEN = 16
_SCALE_GAIN = 1.8


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    input_dim: int = 8
    n_joints: int = 3
    n_axes: int = 2
    noise_lo: float = 0.08
    noise_hi: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError("unknown task kind %r; expected one of %s"
                             % (self.kind, ", ".join(KINDS)))
        if self.input_dim < 1 or self.n_joints < 1 or self.n_axes < 1:
            raise InputError("input_dim, n_joints and n_axes must be >= 1")
        if not 0.0 <= self.noise_lo <= self.noise_hi:
            raise InputError("need 0 <= noise_lo <= noise_hi")


@dataclass
class Dataset:
    """Inputs, noisy targets, and the generating mean/scale ground truth.

    `scale` holds the per-axis standard deviation of the base covariance
    (the heavy-tail mixture inflates it by its mixture factor on top).
    """

    inputs: np.ndarray
    targets: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    kind: str = ""

    def __len__(self):
        return self.inputs.shape[0]


def axis_multipliers(n_axes):
    """Per-axis std multipliers; axis 1 is the high-variance vertical."""
    m = np.ones(n_axes)
    if n_axes >= 2:
        m[1] = np.sqrt(_VERTICAL_VAR_RATIO)
    return m


def mixture_excess_kurtosis(tail_prob=TAIL_PROB, tail_std=TAIL_STD):
    """Closed-form excess kurtosis of the Gaussian scale mixture.

    For X = sigma * Z with sigma^2 = 1 w.p. 1-w and tail_std^2 w.p. w:
    kurt = 3 * E[sigma^4] / E[sigma^2]^2.  Defaults give 16/3.
    """
    w = tail_prob
    m2 = (1.0 - w) + w * tail_std ** 2
    m4 = (1.0 - w) + w * tail_std ** 4
    return 3.0 * m4 / m2 ** 2 - 3.0


class _TaskFields:
    """The frozen mean and scale fields implied by a task seed."""

    def __init__(self, task):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(task.seed).spawn(1)[0]))
        out = task.n_joints * task.n_axes
        self.mix = rng.normal(size=(task.input_dim, out))
        self.bias = rng.normal(size=out) * 0.3
        self.scale_w1 = rng.normal(size=(task.input_dim, _SCALE_HIDDEN))
        self.scale_w2 = rng.normal(size=(_SCALE_HIDDEN, task.n_joints))
        self.task = task

    def mean(self, inputs):
        t = self.task
        z = inputs @ self.mix * 0.5 + self.bias
        return (0.8 * np.tanh(z)).reshape(-1, t.n_joints, t.n_axes)

    def joint_scale(self, inputs):
        """Per-joint base scale s(u) in [noise_lo, noise_hi], shape (N, K).

        One hidden tanh layer rather than a plain linear logit: a linear
        field is too easy to fit, and a scale map the head can nail in a
        few epochs leaves nothing for calibration to rank.
        """
        t = self.task
        g = np.tanh(inputs @ self.scale_w1 / np.sqrt(t.input_dim))
        g = g @ self.scale_w2 * (_SCALE_GAIN / np.sqrt(_SCALE_HIDDEN))
        return t.noise_lo + (t.noise_hi - t.noise_lo) * expit(g)


def task_fields(task):
    return _TaskFields(task)


def _residuals(task, rng, n, axis_std):
    """Residual draws of shape (n, K, D) with per-axis std `axis_std`."""
    k, d = task.n_joints, task.n_axes
    shape = (n, k, d)
    if task.kind == "aniso_gaussian":
        return rng.normal(size=shape) * axis_std
    if task.kind == "aniso_laplace":
        # Laplace(b) has variance 2 b^2, so b = std / sqrt(2)
        return rng.laplace(scale=1.0 / np.sqrt(2.0), size=shape) * axis_std
    if task.kind == "heavy_tail_mixture":
        z = rng.normal(size=shape) * axis_std
        # one tail event per (sample, joint): both axes blow up together
        tail = rng.random(size=(n, k)) < TAIL_PROB
        factor = np.where(tail, TAIL_STD, 1.0)[:, :, None]
        return z * factor
    if task.kind == "skewed":
        # centered unit-variance exponential, skewness 2
        return (rng.exponential(1.0, size=shape) - 1.0) * axis_std
    if task.kind == "bimodal":
        # two modes at +-0.8 std plus residual spread, total variance std^2
        sign = rng.integers(0, 2, size=(n, k)) * 2.0 - 1.0
        z = rng.normal(size=shape)
        frac = _BIMODAL_MODE_FRAC
        spread = np.sqrt(1.0 - frac * frac)
        return (frac * sign[:, :, None] + spread * z) * axis_std
    raise InputError("unknown task kind %r" % task.kind)


def generate(task, n):
    """Draw a dataset of n (input, target) pairs; same seed, same bytes."""
    if not isinstance(task, SyntheticTask):
        raise InputError("generate expects a SyntheticTask")
    n = int(n)
    if n < 1:
        raise InputError("n must be >= 1")
    root = np.random.SeedSequence(task.seed)
    _, inputs_seq, noise_seq = root.spawn(3)
    fields = _TaskFields(task)
    rng_in = np.random.Generator(np.random.PCG64(inputs_seq))
    rng_noise = np.random.Generator(np.random.PCG64(noise_seq))

    inputs = rng_in.normal(size=(n, task.input_dim))
    mean = fields.mean(inputs)
    joint_scale = fields.joint_scale(inputs)
    axis_std = joint_scale[:, :, None] * axis_multipliers(task.n_axes)
    res = _residuals(task, rng_noise, n, axis_std)
    return Dataset(inputs=inputs, targets=mean + res, mean=mean,
                   scale=axis_std, kind=task.kind)
