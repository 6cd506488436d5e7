"""Continuous normalizing flow over low-dimensional residuals.

A time-conditioned MLP is the velocity field f(z, t).  Transport runs
z(0) ~ N(0, I) at t=0 to data at t=1.  Training uses the simulation-free
flow-matching objective on straight-line transport paths; densities come
from integrating the velocity field backward from the data point while
accumulating the Jacobian trace on the same fixed Runge-Kutta grid.

Two evaluation routes coexist on purpose: pure-numpy forward/Jacobian
passes for fast density and sampling sweeps, and graph-building passes
(exact_trace, hutchinson_trace, explicit_nll_loss) for losses that must
be differentiated end to end, including through the trace terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InputError, NumericError, SingularityError

LOG_2PI = math.log(2.0 * math.pi)

_TRACE_MODES = ("exact", "hutchinson")
_PROBE_LAWS = ("gaussian", "rademacher")
_EXACT_TRACE_MAX_DIM = 8


@dataclass
class FlowConfig:
    """Knobs for flow training and trace estimation."""

    sigma_min: float = 0.01
    trace_mode: str = "exact"
    hutchinson_probes: int = 1
    probe_law: str = "rademacher"

    def __post_init__(self):
        if not 0.0 <= self.sigma_min < 1.0:
            raise InputError("sigma_min must be in [0, 1)")
        if self.trace_mode not in _TRACE_MODES:
            raise InputError("trace_mode must be one of %s" % (_TRACE_MODES,))
        if self.hutchinson_probes < 1:
            raise InputError("hutchinson_probes must be >= 1")
        if self.probe_law not in _PROBE_LAWS:
            raise InputError("probe_law must be one of %s" % (_PROBE_LAWS,))


@dataclass
class OdeConfig:
    """Fixed-step integration grid on t in [0, 1]."""

    steps: int = 64
    scheme: str = "rk4"
    t_span: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.steps < 1:
            raise InputError("steps must be >= 1")
        if self.scheme != "rk4":
            raise InputError("only the rk4 scheme is supported")
        t0, t1 = self.t_span
        if not t0 < t1:
            raise InputError("t_span must be increasing")


@dataclass
class PathSample:
    """One draw of the straight-line transport path."""

    z0: np.ndarray
    z1: np.ndarray
    t: float
    z_t: np.ndarray
    u_t: np.ndarray


@dataclass
class DensityResult:
    """log-density of one point plus the pieces it decomposes into."""

    log_prob: float
    z0_terminal: np.ndarray
    trace_integral: float


class VectorFieldNet:
    """Time-conditioned tanh MLP velocity field.

    The raw time scalar is appended to the state, so the first layer has
    width data_dim + 1.  Weights live as graph parameter nodes; numpy
    forward/Jacobian evaluation paths skip graph construction entirely.
    """

    def __init__(self, data_dim, hidden=(64, 64), rng=None):
        if data_dim < 1:
            raise InputError("data_dim must be >= 1")
        self.data_dim = int(data_dim)
        self.widths = [self.data_dim + 1, *[int(h) for h in hidden], self.data_dim]
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
        """Swap in externally built parameter nodes (training steps, checks)."""
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

    def _time_column(self, t, n_rows):
        if isinstance(t, ad.DiffNode):
            return t
        t_arr = np.asarray(t, dtype=np.float64)
        if t_arr.ndim == 0:
            return ad.constant(np.full((n_rows, 1), float(t_arr)))
        return ad.constant(t_arr.reshape(n_rows, 1))

    def forward(self, z, t):
        """Graph-mode evaluation; z is a (B, d) node, t a scalar or (B, 1)."""
        if not isinstance(z, ad.DiffNode):
            z = ad.constant(z)
        if z.value.ndim != 2 or z.value.shape[1] != self.data_dim:
            raise InputError("forward expects z of shape (B, %d)" % self.data_dim)
        n = z.value.shape[0]
        x = ad.concat_cols([z, self._time_column(t, n)])
        last = len(self._weights) - 1
        for i, (w, b) in enumerate(zip(self._weights, self._biases)):
            x = ad.add(ad.matmul(x, w), ad.expand_rows(b, n))
            if i != last:
                x = ad.tanh(x)
        return x

    def eval_values(self, z, t):
        """Numpy-only forward pass, same arithmetic as forward()."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        if single:
            z = z[None, :]
        n = z.shape[0]
        t_arr = np.asarray(t, dtype=np.float64)
        t_col = np.full((n, 1), float(t_arr)) if t_arr.ndim == 0 else t_arr.reshape(n, 1)
        x = np.concatenate([z, t_col], axis=1)
        last = len(self._weights) - 1
        for i, (w, b) in enumerate(zip(self._weights, self._biases)):
            x = x @ w.value + b.value
            if i != last:
                x = np.tanh(x)
        return x[0] if single else x

    def jacobian_values(self, z, t):
        """Batched d f / d z by forward accumulation, shape (B, d, d)."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        if single:
            z = z[None, :]
        n, d = z.shape
        t_arr = np.asarray(t, dtype=np.float64)
        t_col = np.full((n, 1), float(t_arr)) if t_arr.ndim == 0 else t_arr.reshape(n, 1)
        x = np.concatenate([z, t_col], axis=1)
        # jac[b, i, k] = d x_i / d z_k; time row contributes zero.
        jac = np.zeros((n, d + 1, d))
        jac[:, :d, :] = np.eye(d)
        last = len(self._weights) - 1
        for i, (w, b) in enumerate(zip(self._weights, self._biases)):
            pre = x @ w.value + b.value
            jac = np.einsum("io,bik->bok", w.value, jac, optimize=True)
            if i != last:
                x = np.tanh(pre)
                jac = jac * (1.0 - x * x)[:, :, None]
            else:
                x = pre
        return jac[0] if single else jac

    def trace_values(self, z, t):
        """Exact per-sample Jacobian trace via the numpy route."""
        jac = self.jacobian_values(z, t)
        if jac.ndim == 2:
            return float(np.trace(jac))
        return np.einsum("bii->b", jac)


class AnalyticField:
    """Injected velocity field with a hand-specified Jacobian.

    Used to exercise the integrators against dynamics with closed-form
    solutions; fn(z, t) -> (B, d) and jac(z, t) -> (B, d, d).
    """

    def __init__(self, fn, jac=None):
        self._fn = fn
        self._jac = jac

    def eval_values(self, z, t):
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        out = np.asarray(self._fn(z[None, :] if single else z, t), dtype=np.float64)
        return out[0] if single else out

    def jacobian_values(self, z, t):
        if self._jac is None:
            raise InputError("this field has no Jacobian; give jac= at construction")
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        out = np.asarray(self._jac(z[None, :] if single else z, t), dtype=np.float64)
        return out[0] if single else out

    def trace_values(self, z, t):
        jac = self.jacobian_values(z, t)
        if jac.ndim == 2:
            return float(np.trace(jac))
        return np.einsum("bii->b", jac)


# ---------------------------------------------------------------------------
# transport paths


def ot_path(z0, z1, t, sigma_min):
    """Straight-line interpolant between a base draw and a data point.

    z(t) = (1 - (1 - sigma_min) t) z0 + t z1 for t in [0, 1].
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise InputError("ot_path: z0 and z1 shapes differ (%s vs %s)"
                         % (z0.shape, z1.shape))
    if not 0.0 <= t <= 1.0:
        raise InputError("ot_path: t must lie in [0, 1], got %r" % (t,))
    return (1.0 - (1.0 - sigma_min) * t) * z0 + t * z1


def ot_target_field(z_t, z1, t, sigma_min):
    """Conditional velocity consistent with ot_path.

    u(z_t, t) = (z1 - (1 - sigma_min) z_t) / (1 - (1 - sigma_min) t).
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z_t.shape != z1.shape:
        raise InputError("ot_target_field: z_t and z1 shapes differ")
    denom = 1.0 - (1.0 - sigma_min) * t
    if denom <= 1e-12:
        raise SingularityError("ot_target_field: denominator %.3e below 1e-12 at t=%r"
                               % (denom, t))
    return (z1 - (1.0 - sigma_min) * z_t) / denom


def sample_ot_path(z0, z1, t, sigma_min):
    """Bundle one path draw with the velocity the field should regress to."""
    z_t = ot_path(z0, z1, t, sigma_min)
    return PathSample(z0=np.asarray(z0, dtype=np.float64),
                      z1=np.asarray(z1, dtype=np.float64),
                      t=float(t), z_t=z_t,
                      u_t=ot_target_field(z_t, z1, t, sigma_min))


# ---------------------------------------------------------------------------
# flow-matching objective


def _draw_probes(rng, law, shape):
    if law == "gaussian":
        return rng.standard_normal(shape)
    if law == "rademacher":
        return rng.integers(0, 2, size=shape) * 2.0 - 1.0
    raise InputError("unknown probe law %r" % (law,))


def flow_matching_row_losses(net, x_bar, cfg, rng):
    """Per-example squared regression error of the velocity field.

    Draws t ~ U[0,1] and z0 ~ N(0,I) per row, forms the straight-line
    state, and returns a (B, 1) node of squared velocity errors.  The
    path draws themselves are constants; passing the residuals as a
    graph node keeps the loss differentiable with respect to them in
    addition to the net's weights.
    """
    node_input = isinstance(x_bar, ad.DiffNode)
    values = x_bar.value if node_input else np.asarray(x_bar, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 1:
        raise InputError("flow matching expects a (B, d) batch with B >= 1")
    if not np.isfinite(values).all():
        raise InputError("flow matching: non-finite residuals in the batch")
    n, d = values.shape
    t = rng.uniform(size=(n, 1))
    z0 = rng.standard_normal((n, d))
    if node_input:
        z_t = ad.add(ad.mul(x_bar, ad.constant(np.repeat(t, d, axis=1))),
                     ad.constant((1.0 - (1.0 - cfg.sigma_min) * t) * z0))
        target = ad.sub(x_bar, ad.constant((1.0 - cfg.sigma_min) * z0))
    else:
        z_t = ad.constant((1.0 - (1.0 - cfg.sigma_min) * t) * z0 + t * values)
        target = ad.constant(values - (1.0 - cfg.sigma_min) * z0)
    f = net.forward(z_t, ad.constant(t))
    diff = ad.sub(f, target)
    return ad.matmul(ad.square(diff), ad.constant(np.ones((d, 1))))


def flow_matching_loss(net, x_bar, cfg, rng):
    """Mean squared velocity error over the batch (a scalar node)."""
    rows = flow_matching_row_losses(net, x_bar, cfg, rng)
    return ad.reduce_mean(rows)


# ---------------------------------------------------------------------------
# integration


def integrate_sample(field, z0, ode):
    """Transport base draws forward through the field on the RK4 grid."""
    z = np.asarray(z0, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    t0, t1 = ode.t_span
    h = (t1 - t0) / ode.steps
    for k in range(ode.steps):
        t = t0 + k * h
        k1 = field.eval_values(z, t)
        k2 = field.eval_values(z + 0.5 * h * k1, t + 0.5 * h)
        k3 = field.eval_values(z + 0.5 * h * k2, t + 0.5 * h)
        k4 = field.eval_values(z + h * k3, t + h)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(z).all():
            raise NumericError("integration diverged at step %d of %d" % (k, ode.steps))
    return z[0] if single else z


def _eval_trace(field, z, t, cfg, probes):
    if cfg is None or cfg.trace_mode == "exact":
        return field.trace_values(z, t)
    jac = field.jacobian_values(z, t)
    # probes: (P, B, d); exact quadratic form per probe, then averaged.
    est = np.einsum("pbi,bij,pbj->pb", probes, jac, probes, optimize=True)
    return est.mean(axis=0)


def log_density_batch(field, x, cfg, ode, rng=None):
    """Backward sweep from the data at t=1 with trace accumulation.

    Returns (log_prob, z0_terminal, trace_integral) over the batch.  The
    trace integral is reported on the forward orientation (t: 0 -> 1).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InputError("log_density_batch expects a (B, d) batch")
    if not np.isfinite(x).all():
        raise InputError("log_density_batch: non-finite inputs")
    cfg = cfg if cfg is not None else FlowConfig()
    probes = None
    if cfg.trace_mode == "hutchinson":
        if rng is None:
            raise InputError("hutchinson trace mode needs an rng")
        probes = _draw_probes(rng, cfg.probe_law, (cfg.hutchinson_probes,) + x.shape)

    t0, t1 = ode.t_span
    h = -(t1 - t0) / ode.steps
    z = x.copy()
    acc = np.zeros(x.shape[0])
    for k in range(ode.steps):
        t = t1 + k * h
        k1 = field.eval_values(z, t)
        a1 = _eval_trace(field, z, t, cfg, probes)
        z2 = z + 0.5 * h * k1
        k2 = field.eval_values(z2, t + 0.5 * h)
        a2 = _eval_trace(field, z2, t + 0.5 * h, cfg, probes)
        z3 = z + 0.5 * h * k2
        k3 = field.eval_values(z3, t + 0.5 * h)
        a3 = _eval_trace(field, z3, t + 0.5 * h, cfg, probes)
        z4 = z + h * k3
        k4 = field.eval_values(z4, t + h)
        a4 = _eval_trace(field, z4, t + h, cfg, probes)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        acc = acc + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        if not np.isfinite(z).all():
            raise NumericError("density integration diverged at step %d of %d"
                               % (k, ode.steps))
    d = x.shape[1]
    trace_integral = -acc
    base_logp = -0.5 * np.sum(z * z, axis=1) - 0.5 * d * LOG_2PI
    return base_logp - trace_integral, z, trace_integral


def log_density(net, x_bar, cfg, ode, rng=None):
    """Density of one standardized residual under the flow."""
    x = np.asarray(x_bar, dtype=np.float64)
    if x.ndim != 1:
        raise InputError("log_density expects a single 1-D point; "
                         "use log_density_batch for batches")
    logp, z0, tr = log_density_batch(net, x[None, :], cfg, ode, rng=rng)
    return DensityResult(log_prob=float(logp[0]), z0_terminal=z0[0],
                         trace_integral=float(tr[0]))


# ---------------------------------------------------------------------------
# graph-mode trace estimators


def _promote_trace_input(net, z):
    if isinstance(z, ad.DiffNode):
        node = z
    else:
        node = ad.constant(np.asarray(z, dtype=np.float64))
    single = node.value.ndim == 1
    if single:
        node = ad.reshape(node, (1, node.value.shape[0]))
    if node.value.ndim != 2 or node.value.shape[1] != net.data_dim:
        raise InputError("trace input must have %d columns" % net.data_dim)
    # The inner gradient needs a differentiable entry point.
    if not node.requires_grad:
        node = ad.parameter(node.value)
    return node, single


def exact_trace(net, z, t):
    """Trace of d f / d z as a graph node, one basis gradient per column.

    Returns a scalar node for 1-D z, else a (B, 1) node of per-sample
    traces.  Stays differentiable with respect to z and the weights.
    """
    if net.data_dim > _EXACT_TRACE_MAX_DIM:
        raise InputError("exact_trace is limited to data_dim <= %d" % _EXACT_TRACE_MAX_DIM)
    node, single = _promote_trace_input(net, z)
    n, d = node.value.shape
    f = net.forward(node, t)
    total = None
    for i in range(d):
        basis = np.zeros((n, d))
        basis[:, i] = 1.0
        s = ad.reduce_sum(ad.mul(f, ad.constant(basis)))
        (rows,) = ad.grad(s, [node], create_graph=True)
        col = ad.take_cols(rows, i, i + 1)
        total = col if total is None else ad.add(total, col)
    return ad.reduce_sum(total) if single else total


def hutchinson_trace(net, z, t, probes, law="rademacher", rng=None):
    """Stochastic trace estimate mean_p eps_p^T (df/dz) eps_p as a node.

    Each probe costs one vector-Jacobian evaluation.  Shapes follow
    exact_trace.  Deterministic given the rng state.
    """
    if probes < 1:
        raise InputError("hutchinson_trace: probes must be >= 1")
    if law not in _PROBE_LAWS:
        raise InputError("hutchinson_trace: unknown probe law %r" % (law,))
    if rng is None:
        raise InputError("hutchinson_trace needs an rng")
    node, single = _promote_trace_input(net, z)
    n, d = node.value.shape
    f = net.forward(node, t)
    ones_col = ad.constant(np.ones((d, 1)))
    total = None
    for _ in range(probes):
        eps = ad.constant(_draw_probes(rng, law, (n, d)))
        s = ad.reduce_sum(ad.mul(f, eps))
        (vjp_rows,) = ad.grad(s, [node], create_graph=True)
        est = ad.matmul(ad.mul(vjp_rows, eps), ones_col)
        total = est if total is None else ad.add(total, est)
    est = ad.mul(total, 1.0 / probes)
    return ad.reduce_sum(est) if single else est


def _trace_node(net, z, t, cfg, rng):
    if cfg.trace_mode == "exact":
        return exact_trace(net, z, t)
    return hutchinson_trace(net, z, t, cfg.hutchinson_probes, cfg.probe_law, rng)


def explicit_nll_loss(net, reg_mu, reg_sigma, x, cfg, ode, rng=None):
    """Differentiable negative log-likelihood through the ODE unroll.

    Standardizes x with (reg_mu, reg_sigma), integrates the flow backward
    on the fixed grid with per-stage trace nodes, and returns the batch
    mean of per-row  sum(log sigma) - log N(z(0)) + integral of the
    trace.  Gradients reach both the field weights and the regression
    outputs.
    """
    mu = ad.as_node(reg_mu)
    sigma = ad.as_node(reg_sigma)
    x = ad.as_node(x)
    for name, node in (("reg_mu", mu), ("reg_sigma", sigma), ("x", x)):
        if node.value.ndim != 2:
            raise InputError("explicit_nll_loss: %s must be 2-D (B, d)" % name)
    if not (mu.value.shape == sigma.value.shape == x.value.shape):
        raise InputError("explicit_nll_loss: mu, sigma and x shapes must match")
    if np.any(sigma.value <= 0.0):
        raise InputError("explicit_nll_loss: sigma must be strictly positive")
    if cfg.trace_mode == "hutchinson" and rng is None:
        raise InputError("explicit_nll_loss: hutchinson mode needs an rng")

    n, d = x.value.shape
    z = ad.div(ad.sub(x, mu), sigma)
    t0, t1 = ode.t_span
    h = -(t1 - t0) / ode.steps
    acc = ad.constant(np.zeros((n, 1)))
    for k in range(ode.steps):
        t = t1 + k * h
        k1 = net.forward(z, t)
        a1 = _trace_node(net, z, t, cfg, rng)
        z2 = ad.add(z, ad.mul(k1, 0.5 * h))
        k2 = net.forward(z2, t + 0.5 * h)
        a2 = _trace_node(net, z2, t + 0.5 * h, cfg, rng)
        z3 = ad.add(z, ad.mul(k2, 0.5 * h))
        k3 = net.forward(z3, t + 0.5 * h)
        a3 = _trace_node(net, z3, t + 0.5 * h, cfg, rng)
        z4 = ad.add(z, ad.mul(k3, h))
        k4 = net.forward(z4, t + h)
        a4 = _trace_node(net, z4, t + h, cfg, rng)
        stage_z = ad.add(ad.add(k1, ad.mul(ad.add(k2, k3), 2.0)), k4)
        stage_a = ad.add(ad.add(a1, ad.mul(ad.add(a2, a3), 2.0)), a4)
        z = ad.add(z, ad.mul(stage_z, h / 6.0))
        acc = ad.add(acc, ad.mul(stage_a, h / 6.0))
        if not np.isfinite(z.value).all():
            raise NumericError("explicit_nll_loss: unroll diverged at step %d of %d"
                               % (k, ode.steps))
    ones_col = ad.constant(np.ones((d, 1)))
    log_sigma_rows = ad.matmul(ad.log(sigma), ones_col)
    base_rows = ad.add(ad.mul(ad.matmul(ad.square(z), ones_col), -0.5),
                       ad.constant(np.full((n, 1), -0.5 * d * LOG_2PI)))
    # acc holds the integral on the reversed sweep, i.e. minus the
    # forward-orientation trace integral.
    nll_rows = ad.sub(ad.sub(log_sigma_rows, base_rows), acc)
    return ad.reduce_mean(nll_rows)


# ---------------------------------------------------------------------------
# grids


def grid_log_density(field, xs, ys, cfg, ode):
    """log-density on a mesh, row-major with x varying slowest."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    logp, _, _ = log_density_batch(field, pts, cfg, ode)
    return logp.reshape(len(xs), len(ys))
