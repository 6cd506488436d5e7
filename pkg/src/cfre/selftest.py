"""Built-in invariant suites, runnable from the command line.

Each suite re-derives a property from scratch (finite differences,
brute-force enumeration, closed-form constants) and checks the library
against it.  `run_selftest` prints one line per suite and reports
overall success.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import bounds as bounds_mod
from . import flow as flow_mod
from . import metrics as metrics_mod
from . import model as model_mod
from .experiment import split_indices

# ---------------------------------------------------------------------------
# random expression programs for gradient checking

_UNARY = ("tanh", "sigmoid", "softplus", "square", "neg", "exp_t", "log_sp",
          "abs_shift")
_BINARY = ("add", "sub", "mul", "div_safe")
_SHAPES = ((2, 3), (3, 2), (2, 2))


def _apply_unary(name, a, shift):
    # growth ops are damped so no intermediate saturates tanh/sigmoid,
    # which would push gradient components into finite-difference noise
    if name == "tanh":
        return ad.tanh(a)
    if name == "sigmoid":
        return ad.sigmoid(a)
    if name == "softplus":
        return ad.softplus(a)
    if name == "square":
        return ad.mul(ad.square(a), 0.5)
    if name == "neg":
        return ad.neg(a)
    if name == "exp_t":
        return ad.exp(ad.mul(ad.tanh(a), 0.7))
    if name == "log_sp":
        return ad.log(ad.add(ad.softplus(a), 0.5))
    if name == "abs_shift":
        # argument stays at least 0.7 away from the kink
        return ad.absolute(ad.add(ad.mul(ad.tanh(a), 0.5), shift))
    raise AssertionError(name)


def _apply_binary(name, a, b):
    if name == "add":
        return ad.add(a, b)
    if name == "sub":
        return ad.sub(a, b)
    if name == "mul":
        return ad.mul(ad.mul(a, b), 0.6)
    if name == "div_safe":
        return ad.div(a, ad.add(ad.mul(ad.tanh(b), 0.4), 1.5))
    raise AssertionError(name)


def random_expression(rng, n_ops=6):
    """A random differentiable program and a point to probe it at.

    Returns (fn, point) where fn maps a list of parameter nodes to a
    scalar node and point is the list of leaf arrays.  The program mixes
    elementwise ops, reuse of earlier intermediates and matrix products,
    with every potentially singular op guarded away from its bad set.
    """
    leaves = [rng.normal(size=_SHAPES[0]) * 0.5]
    program = []
    pool = [("leaf", 0, _SHAPES[0])]
    consumed = set()

    def new_leaf(shape):
        leaves.append(rng.normal(size=shape) * 0.5)
        return len(leaves) - 1

    for _ in range(n_ops):
        kind = rng.choice(("un", "bin", "mm"), p=(0.45, 0.4, 0.15))
        src_i = int(rng.integers(len(pool)))
        _, _, shape = pool[src_i]
        consumed.add(src_i)
        if kind == "un":
            name = str(rng.choice(_UNARY))
            shift = float(rng.choice((-1.2, 1.2)))
            program.append(("un", name, src_i, shift))
            pool.append(("node", len(program) - 1, shape))
        elif kind == "bin":
            name = str(rng.choice(_BINARY))
            mates = [i for i, (_, _, s) in enumerate(pool) if s == shape]
            mate = int(rng.choice(mates))
            consumed.add(mate)
            program.append(("bin", name, src_i, mate))
            pool.append(("node", len(program) - 1, shape))
        else:
            cols = int(rng.choice((2, 3)))
            leaf_i = new_leaf((shape[1], cols))
            program.append(("mm", src_i, leaf_i))
            pool.append(("node", len(program) - 1, (shape[0], cols)))

    sinks = [i for i in range(len(pool)) if i not in consumed]

    def fn(nodes):
        values = []
        for entry in pool:
            if entry[0] == "leaf":
                values.append(nodes[entry[1]])
                continue
            step = program[entry[1]]
            if step[0] == "un":
                values.append(_apply_unary(step[1], values[step[2]], step[3]))
            elif step[0] == "bin":
                values.append(_apply_binary(step[1], values[step[2]],
                                            values[step[3]]))
            else:
                values.append(ad.mul(ad.matmul(values[step[1]],
                                               nodes[step[2]]), 0.5))
        out = None
        for i in sinks:
            term = ad.reduce_sum(values[i])
            out = term if out is None else ad.add(out, term)
        # weak direct coupling keeps every leaf gradient off the noise floor
        for node in nodes:
            out = ad.add(out, ad.mul(ad.reduce_sum(node), 0.05))
        return out

    return fn, leaves


# ---------------------------------------------------------------------------
# suites


def _suite_gradients(rng, n_expressions=20):
    worst = 0.0
    for _ in range(n_expressions):
        fn, point = random_expression(rng)
        report = ad.check_gradient(fn, point)
        worst = max(worst, report.max_rel_error)
    ok = worst < 1e-4
    return ok, "max rel err %.3g over %d expressions" % (worst, n_expressions)


def _suite_trace_chain(rng, n_matrices=200):
    worst = -math.inf
    for _ in range(n_matrices):
        n = int(rng.integers(2, 7))
        a = rng.normal(size=(n, n)) * rng.uniform(0.1, 3.0)
        tr, fro_bound, spec_bound = bounds_mod.trace_norm_chain(a)
        worst = max(worst, tr - fro_bound, fro_bound - spec_bound)
    tr, fro_bound, _ = bounds_mod.trace_norm_chain(np.eye(4) * 2.5)
    tight = abs(tr - fro_bound) < 1e-9
    ok = worst <= 1e-9 and tight
    return ok, "max inequality violation %.3g; scalar-of-identity tight: %s" \
        % (worst, tight)


def _suite_hutchinson(rng):
    net = flow_mod.VectorFieldNet(3, hidden=(8,), rng=rng)
    z = rng.normal(size=3)
    exact = net.trace_values(z[None, :], 0.3)[0]
    est = flow_mod.hutchinson_trace(net, z, 0.3, probes=4000,
                                    rng=np.random.default_rng(0))
    rel = abs(float(est.value) - exact) / max(abs(exact), 1e-8)
    ok = rel < 0.05
    return ok, "4000-probe estimate rel err %.3g" % rel


def _suite_ode(rng):
    field = flow_mod.AnalyticField(lambda z, t: -z, lambda z, t: -np.eye(1))
    z = flow_mod.integrate_sample(field, np.array([1.0]),
                                  flow_mod.OdeConfig(steps=100))
    err = abs(float(z[0]) - math.exp(-1.0))
    ok = err < 1e-6
    return ok, "linear field error %.3g at 100 steps" % err


def _suite_identity_density(rng):
    field = flow_mod.AnalyticField(lambda z, t: np.zeros_like(z),
                                   lambda z, t: np.zeros((2, 2)))
    pts = rng.normal(size=(20, 2))
    logp, _, _ = flow_mod.log_density_batch(field, pts,
                                            flow_mod.FlowConfig(),
                                            flow_mod.OdeConfig(steps=16))
    want = -0.5 * (pts ** 2).sum(axis=1) - math.log(2.0 * math.pi)
    err = np.abs(logp - want).max()
    ok = err < 1e-12
    return ok, "identity-flow max log-density error %.3g" % err


def _suite_transport_path(rng):
    z = flow_mod.ot_path(np.array([1.0]), np.array([0.0]), 0.5, 0.1)
    u = flow_mod.ot_target_field(np.array([0.5]), np.array([1.0]), 0.5, 0.0)
    ok = abs(float(z[0]) - 0.55) < 1e-12 and abs(float(u[0]) - 1.0) < 1e-12
    return ok, "midpoint %.6g, field %.6g" % (float(z[0]), float(u[0]))


def _suite_metrics(rng):
    errs = rng.uniform(0.0, 2.0, size=9)
    uncs = rng.uniform(0.0, 1.0, size=9)
    recs = [metrics_mod.PredictionRecord(float(e), float(u), 0.5)
            for e, u in zip(errs, uncs)]
    curve = metrics_mod.sparsification_curve(recs)
    order = np.argsort(-uncs, kind="stable")
    full = errs.mean()
    worst = 0.0
    for f, got in zip(curve.fractions, curve.remaining_error):
        m = min(int(math.ceil(f * 9)), 8)
        want = errs[order[m:]].mean() / full
        worst = max(worst, abs(got - want))
    ok = worst < 1e-12
    return ok, "brute-force curve deviation %.3g" % worst


def _suite_losses(rng):
    mu = np.zeros((1, 2))
    sig = np.full((1, 2), 1.0 / math.sqrt(2.0))
    tgt = np.zeros((1, 2))
    lap = float(model_mod.laplace_nll(mu, sig, tgt).value)
    gau = float(model_mod.gaussian_nll(np.zeros((1, 1)), np.ones((1, 1)),
                                       np.zeros((1, 1))).value)
    ok = abs(lap) < 1e-12 and abs(gau - 0.5 * math.log(2.0 * math.pi)) < 1e-12
    return ok, "laplace at mode %.3g, gaussian at mode %.6g" % (lap, gau)


def _suite_split(rng):
    tr, va, te = split_indices(5000, 11)
    tr2, va2, te2 = split_indices(5000, 11)
    same = (np.array_equal(tr, tr2) and np.array_equal(va, va2)
            and np.array_equal(te, te2))
    covered = len(tr) + len(va) + len(te) == 5000
    frac = len(tr) / 5000.0
    ok = same and covered and 0.75 < frac < 0.85
    return ok, "deterministic %s, train fraction %.3f" % (same, frac)


SUITES = (
    ("gradients", _suite_gradients),
    ("trace-chain", _suite_trace_chain),
    ("hutchinson", _suite_hutchinson),
    ("ode", _suite_ode),
    ("identity-density", _suite_identity_density),
    ("transport-path", _suite_transport_path),
    ("metrics", _suite_metrics),
    ("losses", _suite_losses),
    ("split", _suite_split),
)


def run_selftest(out=print, seed=0):
    """Run every suite; returns True when all pass."""
    all_ok = True
    for index, (name, suite) in enumerate(SUITES):
        rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
        ok, detail = suite(rng)
        all_ok = all_ok and ok
        out("%-18s %s  (%s)" % (name, "ok" if ok else "FAIL", detail))
    return all_ok
