"""Heteroscedastic regression with a flow-refined residual density.

A tanh MLP predicts a mean and a normalized scale per joint axis; the
scale doubles as an inverted confidence score.  Training couples the
parametric regression loss with a flow-matching loss on standardized
residuals, weighted by lambda(sigma) = c * (1 - sigma).  An explicit
maximum-likelihood trainer that backpropagates through the full ODE
unroll is kept as the expensive reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from . import flow as flow_mod
from .errors import InputError, NumericError
from .optim import Adam

SQRT2 = math.sqrt(2.0)
LOG_2PI = math.log(2.0 * math.pi)

_BASE_KINDS = ("gaussian", "laplace")


@dataclass(frozen=True)
class BaseDistribution:
    """Parametric residual family; sigma is its standard deviation."""

    kind: str = "laplace"

    def __post_init__(self):
        if self.kind not in _BASE_KINDS:
            raise InputError("base kind must be one of %s" % (_BASE_KINDS,))

    def nll(self, mu, sigma, target):
        if self.kind == "laplace":
            return laplace_nll(mu, sigma, target)
        return gaussian_nll(mu, sigma, target)

    def log_density_values(self, residual, sigma):
        """Per-row log density summed over columns (numpy path)."""
        residual = np.asarray(residual, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        if self.kind == "laplace":
            entry = -(np.log(SQRT2 * sigma) + SQRT2 * np.abs(residual) / sigma)
        else:
            entry = -(np.log(sigma) + residual * residual / (2.0 * sigma * sigma)
                      + 0.5 * LOG_2PI)
        return entry.sum(axis=1)


class RegressionModel:
    """tanh MLP emitting per-axis means and squashed scales.

    The head produces 2*K*D values: the first K*D are means, the second
    K*D pass through sigma = floor + (1 - floor) * sigmoid(raw), so
    scales live in (floor, 1).
    """

    def __init__(self, input_dim, n_joints, n_axes, hidden=(64, 64), rng=None,
                 sigma_floor=1e-4):
        if input_dim < 1 or n_joints < 1 or n_axes < 1:
            raise InputError("input_dim, n_joints and n_axes must be >= 1")
        if not 0.0 < sigma_floor < 1.0:
            raise InputError("sigma_floor must be in (0, 1)")
        self.input_dim = int(input_dim)
        self.n_joints = int(n_joints)
        self.n_axes = int(n_axes)
        self.sigma_floor = float(sigma_floor)
        self.widths = [self.input_dim, *[int(h) for h in hidden],
                       2 * self.n_joints * self.n_axes]
        if rng is None:
            rng = np.random.default_rng(0)
        self._weights = []
        self._biases = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
            self._weights.append(ad.parameter(w))
            self._biases.append(ad.parameter(np.zeros(fan_out)))

    def parameters(self):
        out = []
        for w, b in zip(self._weights, self._biases):
            out.append(w)
            out.append(b)
        return out

    def parameter_values(self):
        return [p.value for p in self.parameters()]

    def set_parameter_values(self, values):
        self.set_parameter_nodes([ad.parameter(np.asarray(v, dtype=np.float64))
                                  for v in values])

    def set_parameter_nodes(self, nodes):
        params = self.parameters()
        if len(nodes) != len(params):
            raise InputError("expected %d parameter nodes, got %d"
                             % (len(params), len(nodes)))
        for old, new in zip(params, nodes):
            if new.value.shape != old.value.shape:
                raise InputError("parameter shape mismatch: %s vs %s"
                                 % (new.value.shape, old.value.shape))
        self._weights = list(nodes[0::2])
        self._biases = list(nodes[1::2])

    def _check_inputs(self, inputs):
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[1] != self.input_dim:
            raise InputError("inputs must have shape (B, %d)" % self.input_dim)
        if not np.isfinite(inputs).all():
            raise InputError("inputs must be finite")
        return inputs

    def forward_nodes(self, inputs):
        """Graph-mode (mu, sigma) nodes of shape (B, K*D) each."""
        inputs = self._check_inputs(inputs)
        n = inputs.shape[0]
        x = ad.constant(inputs)
        last = len(self._weights) - 1
        for i, (w, b) in enumerate(zip(self._weights, self._biases)):
            x = ad.add(ad.matmul(x, w), ad.expand_rows(b, n))
            if i != last:
                x = ad.tanh(x)
        m = self.n_joints * self.n_axes
        mu = ad.take_cols(x, 0, m)
        raw = ad.take_cols(x, m, 2 * m)
        sigma = ad.add(ad.mul(ad.sigmoid(raw), 1.0 - self.sigma_floor), self.sigma_floor)
        return mu, sigma

    def predict_values(self, inputs):
        """Numpy (mu, sigma) of shape (B, K*D), same arithmetic as the graph."""
        inputs = self._check_inputs(inputs)
        x = inputs
        last = len(self._weights) - 1
        for i, (w, b) in enumerate(zip(self._weights, self._biases)):
            x = x @ w.value + b.value
            if i != last:
                x = np.tanh(x)
        m = self.n_joints * self.n_axes
        sigma = expit(x[:, m:2 * m]) * (1.0 - self.sigma_floor) + self.sigma_floor
        return x[:, :m], sigma


def predict(model, inputs):
    """Means, scales and confidences for one input or a batch.

    Accepts a RegressionModel or a trained bundle carrying one.  Returns
    (mu, sigma, joint_confidence, instance_confidence) shaped (..., K, D),
    (..., K, D), (..., K) and scalar/(B,).  Joint confidence is 1 minus
    the per-joint mean scale; instance confidence averages it.
    """
    model = getattr(model, "regression", model)
    arr = np.asarray(inputs, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    mu, sigma = model.predict_values(arr)
    k, d = model.n_joints, model.n_axes
    mu = mu.reshape(-1, k, d)
    sigma = sigma.reshape(-1, k, d)
    s_joint = 1.0 - sigma.mean(axis=2)
    conf = s_joint.mean(axis=1)
    if single:
        return mu[0], sigma[0], s_joint[0], float(conf[0])
    return mu, sigma, s_joint, conf


# ---------------------------------------------------------------------------
# losses


def _loss_operands(mu, sigma, target, name):
    mu = ad.as_node(mu)
    sigma = ad.as_node(sigma)
    target = ad.as_node(target)
    if not (mu.value.shape == sigma.value.shape == target.value.shape):
        raise InputError("%s: mu, sigma and target shapes must match" % name)
    if mu.value.ndim != 2:
        raise InputError("%s expects 2-D (B, M) operands" % name)
    if np.any(sigma.value <= 0.0):
        raise InputError("%s: sigma must be strictly positive" % name)
    return mu, sigma, target


def _batch_mean_of_row_sums(entries):
    # The one reduction shared by every per-axis loss: sum the axes of a
    # sample, average over the batch.
    n, m = entries.value.shape
    rows = ad.matmul(entries, ad.constant(np.ones((m, 1))))
    return ad.mul(ad.reduce_sum(rows), 1.0 / n)


def laplace_nll(mu, sigma, target):
    """Mean over the batch of sum_axes log(sqrt(2) sigma) + sqrt(2)|x - mu|/sigma."""
    mu, sigma, target = _loss_operands(mu, sigma, target, "laplace_nll")
    resid = ad.absolute(ad.sub(target, mu))
    entries = ad.add(ad.log(ad.mul(sigma, SQRT2)),
                     ad.div(ad.mul(resid, 2.0), ad.mul(sigma, SQRT2)))
    return _batch_mean_of_row_sums(entries)


def gaussian_nll(mu, sigma, target):
    """Mean over the batch of sum_axes log sigma + (x - mu)^2 / (2 sigma^2) + log(2 pi)/2."""
    mu, sigma, target = _loss_operands(mu, sigma, target, "gaussian_nll")
    resid = ad.sub(target, mu)
    entries = ad.add(ad.add(ad.log(sigma),
                            ad.div(ad.square(resid), ad.mul(ad.square(sigma), 2.0))),
                     0.5 * LOG_2PI)
    return _batch_mean_of_row_sums(entries)


def standardize(x, mu, sigma):
    """Map targets to residual coordinates, (x - mu) / sigma."""
    if any(isinstance(v, ad.DiffNode) for v in (x, mu, sigma)):
        sigma = ad.as_node(sigma)
        if np.any(sigma.value <= 0.0):
            raise InputError("standardize: sigma must be strictly positive")
        return ad.div(ad.sub(ad.as_node(x), ad.as_node(mu)), sigma)
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise InputError("standardize: sigma must be strictly positive")
    return (x - mu) / sigma


def destandardize(x_bar, mu, sigma):
    """Inverse of standardize, x_bar * sigma + mu."""
    if any(isinstance(v, ad.DiffNode) for v in (x_bar, mu, sigma)):
        return ad.add(ad.mul(ad.as_node(x_bar), ad.as_node(sigma)), ad.as_node(mu))
    return np.asarray(x_bar, dtype=np.float64) * np.asarray(sigma, dtype=np.float64) \
        + np.asarray(mu, dtype=np.float64)


def cfre_loss(reg_loss, flow_loss, sigma_hat, c, detach_lambda=True):
    """Total loss  reg + lambda * flow  with lambda = c (1 - mean sigma).

    With detach_lambda (the default) lambda enters as a plain number, so
    no gradient reaches sigma through the weighting.  Passing a sigma
    node with detach_lambda=False keeps that path live.
    """
    if c < 0.0:
        raise InputError("cfre_loss: c must be nonnegative")
    reg_loss = ad.as_node(reg_loss)
    flow_loss = ad.as_node(flow_loss)
    if detach_lambda or not isinstance(sigma_hat, ad.DiffNode):
        values = sigma_hat.value if isinstance(sigma_hat, ad.DiffNode) else \
            np.asarray(sigma_hat, dtype=np.float64)
        lam = c * (1.0 - float(values.mean()))
        return ad.add(reg_loss, ad.mul(flow_loss, lam))
    lam_node = ad.mul(ad.sub(1.0, ad.reduce_mean(sigma_hat)), c)
    return ad.add(reg_loss, ad.mul(flow_loss, lam_node))


# ---------------------------------------------------------------------------
# configuration and trained bundle


@dataclass
class CfreConfig:
    """Training-time knobs shared by the three trainers."""

    c: float = 0.1
    base: BaseDistribution = field(default_factory=BaseDistribution)
    flow: flow_mod.FlowConfig = field(default_factory=flow_mod.FlowConfig)
    ode: OdeConfig = None  # evaluation grid; filled in __post_init__
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    reg_hidden: tuple = (64, 64)
    flow_hidden: tuple = (64, 64)
    train_ode_steps: int = 8
    val_ode_steps: int = 32
    residual_backprop: bool = True
    sigma_floor: float = 1e-4

    def __post_init__(self):
        if self.ode is None:
            self.ode = flow_mod.OdeConfig()
        self.reg_hidden = tuple(self.reg_hidden)
        self.flow_hidden = tuple(self.flow_hidden)
        if self.c < 0.0:
            raise InputError("c must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise InputError("learning_rate must be positive")
        if self.train_ode_steps < 1 or self.val_ode_steps < 1:
            raise InputError("ODE step counts must be >= 1")


OdeConfig = flow_mod.OdeConfig  # re-export for config construction


@dataclass
class EpochStats:
    epoch: int
    l_reg: float
    l_flow: float
    l_total: float
    val_nll: float


@dataclass
class TrainedCfre:
    """A trained bundle: regression head, flow, and training history."""

    regression: RegressionModel
    flow: flow_mod.VectorFieldNet
    base: BaseDistribution
    config: CfreConfig
    history: list
    flow_trained: bool

    def __post_init__(self):
        if len(self.history) not in (0, self.config.epochs):
            raise InputError("history length must equal the configured epochs")


# ---------------------------------------------------------------------------
# joint density


def _joint_rows(arr):
    """(B, K, D) -> (K*B, D), joint-major blocks."""
    b, k, d = arr.shape
    return np.ascontiguousarray(arr.transpose(1, 0, 2).reshape(k * b, d))


def _node_joint_rows(node, k, d):
    """(B, K*D) node -> (K*B, D) node matching _joint_rows ordering."""
    return ad.concat_rows([ad.take_cols(node, j * d, (j + 1) * d) for j in range(k)])


def joint_log_density(model, inputs, targets, ode=None):
    """Instance log density, summed over joints.

    Residuals are standardized per axis; with a trained flow the density
    is the flow's, rescaled by 1/prod(sigma); otherwise the parametric
    base density is used directly.  Accepts one instance or a batch.
    """
    arr = np.asarray(inputs, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
        tgt = tgt[None, :]
    k, d = model.regression.n_joints, model.regression.n_axes
    if tgt.shape != (arr.shape[0], k, d):
        raise InputError("targets must have shape (B, %d, %d)" % (k, d))
    if ode is None:
        ode = model.config.ode
    mu, sigma = model.regression.predict_values(arr)
    resid = tgt.reshape(-1, k * d) - mu
    log_sigma_sum = np.log(sigma).sum(axis=1)
    if model.flow_trained:
        rows = _joint_rows((resid / sigma).reshape(-1, k, d))
        cfg = flow_mod.FlowConfig(sigma_min=model.config.flow.sigma_min,
                                  trace_mode="exact")
        logp_rows, _, _ = flow_mod.log_density_batch(model.flow, rows, cfg, ode)
        logp = logp_rows.reshape(k, -1).sum(axis=0) - log_sigma_sum
    else:
        logp = model.base.log_density_values(resid, sigma)
    return float(logp[0]) if single else logp


def held_out_nll(model, inputs, targets, ode=None):
    """Mean negative instance log density over a split."""
    logp = joint_log_density(model, inputs, targets, ode=ode)
    return float(-np.mean(logp))


# ---------------------------------------------------------------------------
# trainers


def _rng_streams(seed):
    names = ("reg_init", "flow_init", "data", "flow_noise", "probe")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.Generator(np.random.PCG64(child))
            for name, child in zip(names, children)}


def _dataset_arrays(dataset):
    inputs = np.asarray(dataset.inputs, dtype=np.float64)
    targets = np.asarray(dataset.targets, dtype=np.float64)
    if inputs.ndim != 2 or targets.ndim != 3 or inputs.shape[0] != targets.shape[0]:
        raise InputError("dataset must carry inputs (N, F) and targets (N, K, D)")
    if not (np.isfinite(inputs).all() and np.isfinite(targets).all()):
        raise InputError("dataset contains non-finite values")
    return inputs, targets


def _epoch_val_nll(trained, val_data, steps):
    if val_data is None:
        return float("nan")
    val_inputs, val_targets = val_data
    ode = flow_mod.OdeConfig(steps=steps)
    return held_out_nll(trained, val_inputs, val_targets, ode=ode)


def _finite_or_abort(loss_value, epoch, batch_index):
    if not np.isfinite(loss_value):
        raise NumericError("training loss became non-finite at epoch %d, batch %d"
                           % (epoch, batch_index))


def train_cfre(dataset, cfg, val_data=None):
    """Decoupled training: base loss for the head, flow matching for the flow.

    The standardized residuals enter the flow loss as graph nodes, so
    the squared velocity error also reshapes the scale head; this is
    the route by which the flow sharpens the scale estimates.  The
    per-sample weight lambda = c (1 - mean sigma) enters as a constant.
    Setting cfg.residual_backprop False detaches the residuals, leaving
    the head trained by the base loss alone; with c = 0 the flow is
    skipped entirely and the run is bit-identical to
    train_heteroscedastic.
    """
    inputs, targets = _dataset_arrays(dataset)
    n, k, d = targets.shape
    streams = _rng_streams(cfg.seed)
    reg = RegressionModel(inputs.shape[1], k, d, hidden=cfg.reg_hidden,
                          rng=streams["reg_init"], sigma_floor=cfg.sigma_floor)
    vf = flow_mod.VectorFieldNet(d, hidden=cfg.flow_hidden, rng=streams["flow_init"])
    flow_on = cfg.c > 0.0
    params = reg.parameters() + (vf.parameters() if flow_on else [])
    n_reg = len(reg.parameters())
    opt = Adam(cfg.learning_rate)
    targets_flat = targets.reshape(n, k * d)
    trained = TrainedCfre(regression=reg, flow=vf, base=cfg.base, config=cfg,
                          history=[], flow_trained=flow_on)
    history = []
    for epoch in range(cfg.epochs):
        perm = streams["data"].permutation(n)
        sums = np.zeros(3)
        batches = 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            mu, sigma = reg.forward_nodes(inputs[idx])
            l_reg = cfg.base.nll(mu, sigma, ad.constant(targets_flat[idx]))
            if flow_on:
                # Mean detached: only the scale path carries flow feedback.
                x_bar = ad.div(ad.constant(targets_flat[idx] - mu.value), sigma)
                if not cfg.residual_backprop:
                    x_bar = ad.constant(x_bar.value)
                rows_sq = flow_mod.flow_matching_row_losses(
                    vf, _node_joint_rows(x_bar, k, d),
                    cfg.flow, streams["flow_noise"])
                lam = cfg.c * (1.0 - sigma.value.mean(axis=1, keepdims=True))
                lam_rows = ad.constant(np.concatenate([lam] * k, axis=0))
                l_flow = ad.reduce_mean(rows_sq)
                l_total = ad.add(l_reg, ad.reduce_mean(ad.mul(lam_rows, rows_sq)))
            else:
                l_flow = ad.constant(0.0)
                l_total = l_reg
            _finite_or_abort(float(l_total.value), epoch, bi)
            grads = ad.grad(l_total, params)
            new_values = opt.step([p.value for p in params], [g.value for g in grads])
            reg.set_parameter_values(new_values[:n_reg])
            if flow_on:
                vf.set_parameter_values(new_values[n_reg:])
            params = reg.parameters() + (vf.parameters() if flow_on else [])
            sums += (float(l_reg.value), float(l_flow.value), float(l_total.value))
            batches += 1
        avg = sums / batches
        history.append(EpochStats(epoch=epoch, l_reg=avg[0], l_flow=avg[1],
                                  l_total=avg[2],
                                  val_nll=_epoch_val_nll(trained, val_data,
                                                         cfg.val_ode_steps)))
    trained.history = history
    return trained


def train_heteroscedastic(dataset, cfg, val_data=None):
    """Pure parametric training; the flow net is built but never updated."""
    inputs, targets = _dataset_arrays(dataset)
    n, k, d = targets.shape
    streams = _rng_streams(cfg.seed)
    reg = RegressionModel(inputs.shape[1], k, d, hidden=cfg.reg_hidden,
                          rng=streams["reg_init"], sigma_floor=cfg.sigma_floor)
    vf = flow_mod.VectorFieldNet(d, hidden=cfg.flow_hidden, rng=streams["flow_init"])
    params = reg.parameters()
    opt = Adam(cfg.learning_rate)
    targets_flat = targets.reshape(n, k * d)
    trained = TrainedCfre(regression=reg, flow=vf, base=cfg.base, config=cfg,
                          history=[], flow_trained=False)
    history = []
    for epoch in range(cfg.epochs):
        perm = streams["data"].permutation(n)
        total = 0.0
        batches = 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            mu, sigma = reg.forward_nodes(inputs[idx])
            l_reg = cfg.base.nll(mu, sigma, ad.constant(targets_flat[idx]))
            _finite_or_abort(float(l_reg.value), epoch, bi)
            grads = ad.grad(l_reg, params)
            new_values = opt.step([p.value for p in params], [g.value for g in grads])
            reg.set_parameter_values(new_values)
            params = reg.parameters()
            total += float(l_reg.value)
            batches += 1
        avg = total / batches
        history.append(EpochStats(epoch=epoch, l_reg=avg, l_flow=0.0, l_total=avg,
                                  val_nll=_epoch_val_nll(trained, val_data,
                                                         cfg.val_ode_steps)))
    trained.history = history
    return trained


def train_explicit_nll(dataset, cfg, val_data=None):
    """End-to-end maximum likelihood through the ODE unroll.

    Every optimizer step differentiates through the backward integration
    including the trace term, reaching both the field weights and the
    regression head.  Slow by construction; kept as the reference the
    decoupled trainer is compared against under equal step budgets.
    """
    inputs, targets = _dataset_arrays(dataset)
    n, k, d = targets.shape
    streams = _rng_streams(cfg.seed)
    reg = RegressionModel(inputs.shape[1], k, d, hidden=cfg.reg_hidden,
                          rng=streams["reg_init"], sigma_floor=cfg.sigma_floor)
    vf = flow_mod.VectorFieldNet(d, hidden=cfg.flow_hidden, rng=streams["flow_init"])
    params = reg.parameters() + vf.parameters()
    n_reg = len(reg.parameters())
    opt = Adam(cfg.learning_rate)
    train_ode = flow_mod.OdeConfig(steps=cfg.train_ode_steps)
    trained = TrainedCfre(regression=reg, flow=vf, base=cfg.base, config=cfg,
                          history=[], flow_trained=True)
    history = []
    for epoch in range(cfg.epochs):
        perm = streams["data"].permutation(n)
        total = 0.0
        batches = 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            mu, sigma = reg.forward_nodes(inputs[idx])
            mu_rows = _node_joint_rows(mu, k, d)
            sigma_rows = _node_joint_rows(sigma, k, d)
            x_rows = ad.constant(_joint_rows(targets[idx]))
            try:
                loss = flow_mod.explicit_nll_loss(vf, mu_rows, sigma_rows, x_rows,
                                                  cfg.flow, train_ode,
                                                  rng=streams["probe"])
            except NumericError as err:
                raise NumericError("epoch %d, batch %d: %s" % (epoch, bi, err)) from None
            _finite_or_abort(float(loss.value), epoch, bi)
            grads = ad.grad(loss, params)
            new_values = opt.step([p.value for p in params], [g.value for g in grads])
            reg.set_parameter_values(new_values[:n_reg])
            vf.set_parameter_values(new_values[n_reg:])
            params = reg.parameters() + vf.parameters()
            total += float(loss.value)
            batches += 1
        avg = total / batches
        history.append(EpochStats(epoch=epoch, l_reg=0.0, l_flow=0.0, l_total=avg,
                                  val_nll=_epoch_val_nll(trained, val_data,
                                                         cfg.val_ode_steps)))
    trained.history = history
    return trained
