"""Acceptance gate: eleven numbered checks, one printed line each.

Run with `pytest tests/test_acceptance.py -s` to see the lines as they
complete.  The benchmark-backed checks (7-9) train real models and take
tens of minutes combined on one CPU core; everything else is fast.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from cfre import autodiff as ad
from cfre import bounds as bounds_mod
from cfre import flow as flow_mod
from cfre import metrics as metrics_mod
from cfre import model as model_mod
from cfre.checkpoint import load_checkpoint
from cfre.experiment import ExperimentConfig, run_experiment
from cfre.flow import FlowConfig, OdeConfig, VectorFieldNet
from cfre.model import BaseDistribution, CfreConfig, RegressionModel
from cfre.optim import Adam
from cfre.selftest import random_expression
from cfre.tasks import SyntheticTask


def _report(num, name, ok, detail):
    print("criterion %2d %-34s %s  (%s)"
          % (num, name, "PASS" if ok else "FAIL", detail), flush=True)
    assert ok, "criterion %d failed: %s" % (num, detail)


# ---------------------------------------------------------------------------
# shared trained artifacts


def _train_reference_flow(seed=0, steps=2000, batch=256, lr=1e-3,
                          hidden=(64, 64), sigma_min=0.01):
    """2-D flow fit to standard-Laplace samples by flow matching."""
    root = np.random.SeedSequence(seed)
    s_init, s_noise, s_data = root.spawn(3)
    net = VectorFieldNet(2, hidden=hidden,
                         rng=np.random.Generator(np.random.PCG64(s_init)))
    rng_noise = np.random.Generator(np.random.PCG64(s_noise))
    rng_data = np.random.Generator(np.random.PCG64(s_data))
    cfg = FlowConfig(sigma_min=sigma_min)
    values = net.parameter_values()
    adam = Adam(learning_rate=lr)
    for _ in range(steps):
        x = rng_data.laplace(size=(batch, 2))
        params = [ad.parameter(v) for v in values]
        net.set_parameter_nodes(params)
        loss = flow_mod.flow_matching_loss(net, x, cfg, rng_noise)
        grads = ad.grad(loss, params)
        values = adam.step(values, [g.value for g in grads])
    net.set_parameter_values(values)
    return net, cfg


def _chunked_log_density(net, pts, cfg, ode, chunk=8192):
    out = []
    for lo in range(0, len(pts), chunk):
        lp, z0, _ = flow_mod.log_density_batch(net, pts[lo:lo + chunk], cfg, ode)
        out.append((lp, z0))
    return (np.concatenate([a for a, _ in out]),
            np.concatenate([b for _, b in out]))


@pytest.fixture(scope="module")
def reference_flow():
    t_train = time.perf_counter()
    net, cfg = _train_reference_flow()
    t_train = time.perf_counter() - t_train

    ode = OdeConfig(steps=32)
    xs = np.linspace(-8.0, 8.0, 161)
    ys = np.linspace(-8.0, 8.0, 161)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    logp, _ = _chunked_log_density(net, pts, cfg, ode)
    p = np.exp(logp).reshape(161, 161)
    tz = getattr(np, "trapezoid", np.trapz)
    mass = float(tz(tz(p, ys, axis=1), xs))
    ex2 = (float(tz(tz(p * gx ** 2, ys, axis=1), xs) / mass),
           float(tz(tz(p * gy ** 2, ys, axis=1), xs) / mass))

    t_ll = time.perf_counter()
    held_out = np.random.default_rng(999).laplace(size=(10_000, 2))
    ll_rows, _ = _chunked_log_density(net, held_out, cfg, ode)
    t_ll = time.perf_counter() - t_ll

    return {"net": net, "cfg": cfg, "ode": ode, "mass": mass, "ex2": ex2,
            "held_out_ll": float(ll_rows.mean()), "train_seconds": t_train,
            "ll_seconds": t_ll}


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_expr = 0.0
    for _ in range(100):
        fn, point = random_expression(rng)
        rep = ad.check_gradient(fn, point)
        worst_expr = max(worst_expr, rep.max_rel_error)

    # composite training loss: base NLL plus confidence-weighted flow term
    reg = RegressionModel(3, 1, 2, hidden=(5,),
                          rng=np.random.default_rng(1))
    vf = VectorFieldNet(2, hidden=(6,), rng=np.random.default_rng(2))
    n_reg = len(reg.parameters())
    data_rng = np.random.default_rng(3)
    inputs = data_rng.normal(size=(4, 3))
    targets = data_rng.normal(size=(4, 2))
    fcfg = FlowConfig(sigma_min=0.01)

    # the trainer treats the residual numerator and the weighting
    # lambda = c (1 - mean sigma) as constants of the step, so the
    # checked function freezes both at the base point
    mu0, sigma0 = reg.forward_nodes(inputs)
    numer = targets - mu0.value
    sigma_frozen = sigma0.value

    def cfre_loss_of(params):
        reg.set_parameter_nodes(params[:n_reg])
        vf.set_parameter_nodes(params[n_reg:])
        mu, sigma = reg.forward_nodes(inputs)
        l_reg = model_mod.laplace_nll(mu, sigma, ad.constant(targets))
        x_bar = ad.div(ad.constant(numer), sigma)
        rows = flow_mod.flow_matching_row_losses(
            vf, x_bar, fcfg, np.random.default_rng(11))
        return model_mod.cfre_loss(l_reg, ad.reduce_mean(rows),
                                   sigma_frozen, 0.3)

    point = reg.parameter_values() + vf.parameter_values()
    rep_cfre = ad.check_gradient(cfre_loss_of, point)

    # explicit likelihood through a 4-step unroll, exact trace
    ecfg = FlowConfig(sigma_min=0.01, trace_mode="exact")
    ode4 = OdeConfig(steps=4)

    def explicit_loss_of(params):
        reg.set_parameter_nodes(params[:n_reg])
        vf.set_parameter_nodes(params[n_reg:])
        mu, sigma = reg.forward_nodes(inputs)
        return flow_mod.explicit_nll_loss(vf, mu, sigma,
                                          ad.constant(targets), ecfg, ode4)

    rep_expl = ad.check_gradient(explicit_loss_of, point)
    dt = time.perf_counter() - t0

    ok = (worst_expr < 1e-4 and rep_cfre.max_rel_error < 1e-4
          and rep_expl.max_rel_error < 1e-3 and dt < 60.0)
    _report(1, "gradient correctness", ok,
            "expr %.2e, composite %.2e, unrolled %.2e, %.1fs"
            % (worst_expr, rep_cfre.max_rel_error, rep_expl.max_rel_error, dt))


# ---------------------------------------------------------------------------
# 2. trace / norm inequality chain


def test_criterion_02_norm_chain():
    t0 = time.perf_counter()
    rng = np.random.default_rng(12)
    worst = -math.inf
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        a = rng.normal(size=(n, n)) * rng.uniform(0.05, 5.0)
        tr, fro_bound, spec_bound = bounds_mod.trace_norm_chain(a, iters=300)
        worst = max(worst, tr - fro_bound, fro_bound - spec_bound)
    tr_eq, fro_eq, _ = bounds_mod.trace_norm_chain(np.eye(5) * 1.7)
    eq_gap = abs(tr_eq - fro_eq)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and eq_gap < 1e-9 and dt < 10.0
    _report(2, "trace/norm inequality chain", ok,
            "max violation %.2e, scalar-identity gap %.2e, %.1fs"
            % (worst, eq_gap, dt))


# ---------------------------------------------------------------------------
# 3. stochastic trace estimator


def _random_trace_dominant_net(rng, d, gamma=0.15, gain=0.7):
    """Random net whose Jacobian is a noisy multiple of the identity.

    A relative tolerance on the trace is only statistically meaningful
    when the probe noise (set by the off-diagonal mass) is small next
    to the trace itself; generic random inits put most Jacobian mass
    off the diagonal, where no finite probe budget reaches 2%.
    """
    h = d + int(rng.integers(0, 3))
    net = VectorFieldNet(d, hidden=(h,), rng=rng)
    w1, b1, w2, b2 = [gamma * rng.normal(size=v.shape)
                      for v in net.parameter_values()]
    w1[:d, :d] += gain * np.eye(d)
    w2[:d, :d] += gain * np.eye(d)
    net.set_parameter_values([w1, b1, w2, b2])
    return net


def test_criterion_03_hutchinson():
    t0 = time.perf_counter()
    rng = np.random.default_rng(21)
    worst_rel = 0.0
    min_var = math.inf
    for _ in range(50):
        d = int(rng.integers(2, 9))
        net = _random_trace_dominant_net(rng, d)
        z = 0.3 * rng.normal(size=d)
        exact = float(flow_mod.exact_trace(net, z, 0.4).value)
        # 1e4 single-probe estimates in one batched pass: replicate the
        # point, one probe per replica, then average
        tiled = np.tile(z, (10_000, 1))
        est_rows = flow_mod.hutchinson_trace(
            net, tiled, 0.4, probes=1,
            rng=np.random.default_rng(rng.integers(2 ** 32))).value.ravel()
        rel = abs(est_rows.mean() - exact) / abs(exact)
        worst_rel = max(worst_rel, rel)
        min_var = min(min_var, est_rows.var())
    dt = time.perf_counter() - t0
    ok = worst_rel < 0.02 and min_var > 0.0 and dt < 60.0
    _report(3, "stochastic trace estimator", ok,
            "worst rel err %.4f over 50 nets, min probe var %.2e, %.1fs"
            % (worst_rel, min_var, dt))


# ---------------------------------------------------------------------------
# 4. ODE integrator accuracy and order


def test_criterion_04_integrator():
    field = flow_mod.AnalyticField(lambda z, t: -z, lambda z, t: -np.eye(1))
    z1 = flow_mod.integrate_sample(field, np.array([1.0]), OdeConfig(steps=100))
    lin_err = abs(float(z1[0]) - math.exp(-1.0))

    # empirical order on a nonlinear field with a stepsize halving ladder
    nl = flow_mod.AnalyticField(lambda z, t: np.sin(z) + t * np.cos(z))
    z0 = np.array([0.3])
    ref = flow_mod.integrate_sample(nl, z0, OdeConfig(steps=4096))
    errs = [abs(float(flow_mod.integrate_sample(nl, z0, OdeConfig(steps=s))[0]
                      - ref[0])) for s in (8, 16, 32, 64)]
    orders = [math.log2(a / b) for a, b in zip(errs[:-1], errs[1:])]
    order = float(np.mean(orders))
    ok = lin_err < 1e-6 and 3.5 <= order <= 4.5
    _report(4, "integrator accuracy and order", ok,
            "linear err %.2e at 100 steps, order %.2f" % (lin_err, order))


# ---------------------------------------------------------------------------
# 5. density conservation


def test_criterion_05_density_conservation(reference_flow):
    identity = flow_mod.AnalyticField(lambda z, t: np.zeros_like(z),
                                      lambda z, t: np.zeros((2, 2)))
    pts = np.random.default_rng(5).normal(size=(50, 2))
    logp, _, _ = flow_mod.log_density_batch(identity, pts, FlowConfig(),
                                            OdeConfig(steps=16))
    want = -0.5 * (pts ** 2).sum(axis=1) - math.log(2.0 * math.pi)
    ident_err = float(np.abs(logp - want).max())

    mass = reference_flow["mass"]
    ex2 = reference_flow["ex2"]
    draws = flow_mod.integrate_sample(
        reference_flow["net"],
        np.random.default_rng(77).normal(size=(10_000, 2)),
        OdeConfig(steps=32))
    samp_m2 = (draws ** 2).mean(axis=0)
    moment_rel = max(abs(samp_m2[0] - ex2[0]) / ex2[0],
                     abs(samp_m2[1] - ex2[1]) / ex2[1])
    ok = ident_err < 1e-12 and abs(mass - 1.0) < 0.05 and moment_rel < 0.05
    _report(5, "density conservation", ok,
            "identity err %.1e, grid mass %.5f, moment rel %.3f"
            % (ident_err, mass, moment_rel))


# ---------------------------------------------------------------------------
# 6. distribution recovery


def test_criterion_06_distribution_recovery(reference_flow):
    analytic = -2.0 * (1.0 + math.log(2.0))
    gap = abs(reference_flow["held_out_ll"] - analytic)
    runtime = reference_flow["train_seconds"] + reference_flow["ll_seconds"]
    ok = gap < 0.10 and runtime < 180.0
    _report(6, "distribution recovery", ok,
            "held-out LL %.4f vs analytic %.4f, gap %.4f, %.0fs"
            % (reference_flow["held_out_ll"], analytic, gap, runtime))


# ---------------------------------------------------------------------------
# benchmark runs shared by criteria 7 and 9


BENCH_TASK = SyntheticTask("heavy_tail_mixture", seed=1)
BENCH_MODEL = CfreConfig(c=0.1, base=BaseDistribution("laplace"),
                         flow=FlowConfig(sigma_min=0.01), epochs=300,
                         batch_size=96, learning_rate=1e-3,
                         reg_hidden=(32, 32), flow_hidden=(64, 64),
                         train_ode_steps=8, val_ode_steps=32)
BENCH_SEEDS = (0, 1, 2, 3, 4)
C_GRID = (0.0, 0.05, 0.1, 0.2, 0.5)


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")

    def make(trainer, **kw):
        return ExperimentConfig(task=BENCH_TASK, model=BENCH_MODEL,
                                trainer=trainer, out_dir=str(root / trainer),
                                seeds=BENCH_SEEDS, n_samples=3000, **kw)

    reports = {
        "gaussian_only": run_experiment(make("gaussian_only")),
        "laplace_only": run_experiment(make("laplace_only")),
        "cfre": run_experiment(make("cfre", c_sweep=C_GRID)),
    }
    return reports


def _median_metric(runs, key):
    return float(np.median([r.metrics[key] for r in runs]))


def test_criterion_07_base_family_direction(bench):
    gauss = bench["gaussian_only"].runs
    lap = bench["laplace_only"].runs
    cfre = [r for r in bench["cfre"].runs if r.c == 0.1]
    wall = sum(r.wall_clock_seconds for r in gauss + lap + cfre)

    ause_g = _median_metric(gauss, "ause")
    ause_l = _median_metric(lap, "ause")
    ause_c = _median_metric(cfre, "ause")
    nll_g = _median_metric(gauss, "test_nll")
    nll_l = _median_metric(lap, "test_nll")
    nll_c = _median_metric(cfre, "test_nll")

    ok = (ause_l < ause_g and ause_c < ause_l
          and nll_c < nll_l < nll_g and wall < 1500.0)
    _report(7, "base-family benchmark direction", ok,
            "AUSE %.4f<%.4f<%.4f, NLL %.4f<%.4f<%.4f, %.0fs"
            % (ause_c, ause_l, ause_g, nll_c, nll_l, nll_g, wall))


# ---------------------------------------------------------------------------
# 8. equal-budget comparison against explicit likelihood training
#    (bimodal residuals: the regime where the flow's shape modeling
#    carries the likelihood, probed at matched optimizer-step budgets)


C8_TASK = SyntheticTask("bimodal", seed=1)
C8_MODEL = CfreConfig(c=0.5, base=BaseDistribution("laplace"),
                      flow=FlowConfig(sigma_min=0.01,
                                      trace_mode="hutchinson",
                                      hutchinson_probes=1),
                      epochs=120, batch_size=96, learning_rate=1e-3,
                      reg_hidden=(32, 32), flow_hidden=(64, 64),
                      train_ode_steps=4, val_ode_steps=32)
C8_SEEDS = (0, 1, 2)


def test_criterion_08_equal_budget_vs_explicit(tmp_path_factory):
    root = tmp_path_factory.mktemp("budget")

    def make(trainer):
        return ExperimentConfig(task=C8_TASK, model=C8_MODEL, trainer=trainer,
                                out_dir=str(root / trainer), seeds=C8_SEEDS,
                                n_samples=3000)

    rep_cfre = run_experiment(make("cfre"))
    rep_expl = run_experiment(make("explicit_nll"))

    # identical step budgets: same epochs over the same split sizes
    for a, b in zip(rep_cfre.runs, rep_expl.runs):
        ta = load_checkpoint(a.checkpoint_path)
        tb = load_checkpoint(b.checkpoint_path)
        assert len(ta.history) == len(tb.history) == C8_MODEL.epochs

    med_cfre = _median_metric(rep_cfre.runs, "test_nll")
    med_expl = _median_metric(rep_expl.runs, "test_nll")
    ok = med_cfre <= med_expl
    _report(8, "equal-budget vs explicit NLL", ok,
            "median NLL %.4f (flow-matched) vs %.4f (explicit), %d epochs x %d seeds"
            % (med_cfre, med_expl, C8_MODEL.epochs, len(C8_SEEDS)))


# ---------------------------------------------------------------------------
# 9. flow-weight sweep


def test_criterion_09_c_sweep(bench):
    sweep = bench["cfre"].runs
    lap = {r.seed: r for r in bench["laplace_only"].runs}

    # c=0 must reproduce the pure parametric trainer bit for bit
    identical = True
    for run in [r for r in sweep if r.c == 0.0]:
        a = load_checkpoint(run.checkpoint_path)
        b = load_checkpoint(lap[run.seed].checkpoint_path)
        pairs = zip(a.regression.parameter_values() + a.flow.parameter_values(),
                    b.regression.parameter_values() + b.flow.parameter_values())
        identical &= all(x.tobytes() == y.tobytes() for x, y in pairs)
        identical &= all(
            (ha.l_reg, ha.l_flow, ha.l_total, ha.val_nll)
            == (hb.l_reg, hb.l_flow, hb.l_total, hb.val_nll)
            for ha, hb in zip(a.history, b.history))

    med = {c: float(np.median([r.metrics["val_nll"] for r in sweep
                               if r.c == c])) for c in C_GRID}
    best = min(C_GRID, key=lambda c: med[c])
    interior = best not in (C_GRID[0], C_GRID[-1])
    ok = identical and interior
    _report(9, "flow-weight sweep", ok,
            "c=0 bit-identical: %s; medians %s; best c=%g"
            % (identical,
               " ".join("%g:%.4f" % (c, med[c]) for c in C_GRID), best))


# ---------------------------------------------------------------------------
# 10. ranking-metric oracle equivalence


def _brute_remaining(errors, order, fractions):
    """Literal restatement: drop the first ceil(f*N), average the rest."""
    n = len(errors)
    ordered = errors[order]
    out = []
    for f in fractions:
        m = min(int(math.ceil(f * n)), n - 1)
        out.append(ordered[m:].mean())
    return np.array(out)


def test_criterion_10_metric_oracles():
    rng = np.random.default_rng(1010)
    fractions = metrics_mod.default_fraction_grid()
    mismatches = 0
    checked = 0
    for _ in range(300):
        n = int(rng.integers(1, 13))
        errs = rng.uniform(0.0, 3.0, size=n)
        uncs = rng.uniform(0.0, 1.0, size=n)
        recs = [metrics_mod.PredictionRecord(float(e), float(u), 0.5)
                for e, u in zip(errs, uncs)]
        curve = metrics_mod.sparsification_curve(recs, fractions=fractions)
        order = np.argsort(-uncs, kind="stable")
        brute = _brute_remaining(errs, order, fractions)
        brute = brute / errs.mean() if errs.mean() > 0 else brute
        checked += len(fractions)
        mismatches += int(np.sum(curve.remaining_error != brute))

        oracle = metrics_mod.oracle_curve(recs, fractions=fractions)
        brute_o = _brute_remaining(errs, np.argsort(-errs, kind="stable"),
                                   fractions)
        brute_o = brute_o / errs.mean() if errs.mean() > 0 else brute_o
        checked += len(fractions)
        mismatches += int(np.sum(oracle.remaining_error != brute_o))

        # areas: trapezoid over the same grids, exact arithmetic path
        ause_lib = metrics_mod.ause(curve, oracle)
        tz = getattr(np, "trapezoid", np.trapz)
        ause_brute = float(tz(curve.remaining_error - oracle.remaining_error,
                              fractions))
        checked += 1
        mismatches += int(ause_lib != ause_brute)

    hand = [metrics_mod.PredictionRecord(float(e), float(u), 0.5)
            for e, u in zip((5.0, 4.0, 3.0, 2.0, 1.0),
                            (0.9, 0.8, 0.7, 0.6, 0.5))]
    hand_curve = metrics_mod.sparsification_curve(
        hand, fractions=np.array([0.0, 0.2, 0.4]))
    hand_ok = (abs(hand_curve.remaining_error[0] - 1.0) < 1e-15
               and hand_curve.remaining_error[1] == (10.0 / 4.0) / 3.0
               and hand_curve.remaining_error[2] == 2.0 / 3.0)

    ok = mismatches == 0 and hand_ok
    _report(10, "ranking-metric oracle equivalence", ok,
            "%d exact comparisons, %d mismatches, hand case %s"
            % (checked, mismatches, hand_ok))


# ---------------------------------------------------------------------------
# 11. likelihood upper bound


def test_criterion_11_upper_bound(reference_flow):
    net = reference_flow["net"]
    cfg = reference_flow["cfg"]
    pts = np.random.default_rng(555).laplace(size=(1000, 2))
    logp, z0 = _chunked_log_density(net, pts, cfg, OdeConfig(steps=32))
    nll = -logp
    lip = bounds_mod.lipschitz_estimate(
        net, region_samples=2048, rng=np.random.default_rng(42),
        region_scale=4.0, extra_states=[(pts, 1.0), (z0, 0.0)])
    base_lp_min = float((-0.5 * np.sum(z0 * z0, axis=1)
                         - math.log(2.0 * math.pi)).min())
    bound = bounds_mod.upper_bound_value(net, base_lp_min, 2, lip)
    slack = float(bound - nll.max())
    ok = slack >= 0.0
    _report(11, "likelihood upper bound", ok,
            "bound %.3f >= max NLL %.3f, slack %.3f, L-hat %.3f"
            % (bound, nll.max(), slack, lip))
