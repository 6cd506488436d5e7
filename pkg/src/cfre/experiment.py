"""Deterministic experiment harness: train, evaluate, persist.

A run trains one model per (seed, c) combination, evaluates it on a
hash-partitioned 80/10/10 split, and writes a self-describing artifact
directory: checkpoint, per-epoch history CSV, metrics JSON, a residual
density grid for one probe input, the per-joint prediction records, and
a manifest with content hashes.  Reruns with the same config are
byte-identical; wall-clock time lives only in the returned report.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import flow as flow_mod
from . import metrics as metrics_mod
from . import model as model_mod
from .errors import InputError
from .tasks import SyntheticTask, generate

TRAINERS = ("cfre", "explicit_nll", "laplace_only", "gaussian_only")

MANIFEST_VERSION = 1

_M64 = (1 << 64) - 1


@dataclass
class ExperimentConfig:
    task: SyntheticTask
    model: model_mod.CfreConfig = field(default_factory=model_mod.CfreConfig)
    trainer: str = "cfre"
    c_sweep: tuple = None
    out_dir: str = "runs"
    seeds: tuple = (0,)
    n_samples: int = 4000
    grid_range: tuple = (-1.0, 1.0)
    grid_steps: int = 41
    probe_index: int = 0
    probe_joint: int = 0

    def __post_init__(self):
        if self.trainer not in TRAINERS:
            raise InputError("trainer must be one of %s" % ", ".join(TRAINERS))
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise InputError("need at least one seed")
        if self.c_sweep is not None:
            if self.trainer != "cfre":
                raise InputError("c_sweep only applies to the cfre trainer")
            self.c_sweep = tuple(float(c) for c in self.c_sweep)
            if not self.c_sweep:
                raise InputError("c_sweep must not be empty when given")
            if any(c < 0.0 for c in self.c_sweep):
                raise InputError("c_sweep values must be nonnegative")
        if self.n_samples < 100:
            raise InputError("n_samples must be >= 100 so every split is populated")
        self.grid_range = (float(self.grid_range[0]), float(self.grid_range[1]))
        if not self.grid_range[0] < self.grid_range[1]:
            raise InputError("grid_range must be (low, high) with low < high")
        if self.grid_steps < 2:
            raise InputError("grid_steps must be >= 2")
        if self.probe_index < 0:
            raise InputError("probe_index must be >= 0")
        if not 0 <= self.probe_joint < self.task.n_joints:
            raise InputError("probe_joint out of range")


@dataclass
class RunRecord:
    trainer: str
    seed: int
    c: float
    metrics: dict
    run_dir: str
    checkpoint_path: str
    history_path: str
    metrics_path: str
    manifest_path: str
    wall_clock_seconds: float


@dataclass
class RunReport:
    trainer: str
    out_dir: str
    runs: list
    summary_path: str
    wall_clock_seconds: float


# ---------------------------------------------------------------------------
# config serialization


def _task_to_dict(t):
    return {"kind": t.kind, "input_dim": t.input_dim, "n_joints": t.n_joints,
            "n_axes": t.n_axes, "noise_lo": t.noise_lo, "noise_hi": t.noise_hi,
            "seed": t.seed}


def _task_from_dict(d):
    return SyntheticTask(kind=d["kind"], input_dim=int(d["input_dim"]),
                         n_joints=int(d["n_joints"]), n_axes=int(d["n_axes"]),
                         noise_lo=float(d["noise_lo"]),
                         noise_hi=float(d["noise_hi"]), seed=int(d["seed"]))


def _model_to_dict(m):
    return {
        "c": m.c,
        "base": m.base.kind,
        "sigma_min": m.flow.sigma_min,
        "trace_mode": m.flow.trace_mode,
        "hutchinson_probes": m.flow.hutchinson_probes,
        "probe_law": m.flow.probe_law,
        "epochs": m.epochs,
        "batch_size": m.batch_size,
        "learning_rate": m.learning_rate,
        "seed": m.seed,
        "reg_hidden": list(m.reg_hidden),
        "flow_hidden": list(m.flow_hidden),
        "train_ode_steps": m.train_ode_steps,
        "val_ode_steps": m.val_ode_steps,
        "residual_backprop": m.residual_backprop,
        "sigma_floor": m.sigma_floor,
    }


def _model_from_dict(d):
    return model_mod.CfreConfig(
        c=float(d["c"]),
        base=model_mod.BaseDistribution(d["base"]),
        flow=flow_mod.FlowConfig(sigma_min=float(d["sigma_min"]),
                                 trace_mode=d["trace_mode"],
                                 hutchinson_probes=int(d["hutchinson_probes"]),
                                 probe_law=d["probe_law"]),
        epochs=int(d["epochs"]),
        batch_size=int(d["batch_size"]),
        learning_rate=float(d["learning_rate"]),
        seed=int(d["seed"]),
        reg_hidden=tuple(int(h) for h in d["reg_hidden"]),
        flow_hidden=tuple(int(h) for h in d["flow_hidden"]),
        train_ode_steps=int(d["train_ode_steps"]),
        val_ode_steps=int(d["val_ode_steps"]),
        residual_backprop=bool(d["residual_backprop"]),
        sigma_floor=float(d["sigma_floor"]),
    )


def config_to_dict(cfg):
    return {
        "task": _task_to_dict(cfg.task),
        "model": _model_to_dict(cfg.model),
        "trainer": cfg.trainer,
        "c_sweep": None if cfg.c_sweep is None else list(cfg.c_sweep),
        "out_dir": cfg.out_dir,
        "seeds": list(cfg.seeds),
        "n_samples": cfg.n_samples,
        "grid_range": list(cfg.grid_range),
        "grid_steps": cfg.grid_steps,
        "probe_index": cfg.probe_index,
        "probe_joint": cfg.probe_joint,
    }


def config_from_dict(d):
    try:
        return ExperimentConfig(
            task=_task_from_dict(d["task"]),
            model=_model_from_dict(d["model"]),
            trainer=d["trainer"],
            c_sweep=None if d.get("c_sweep") is None else tuple(d["c_sweep"]),
            out_dir=d["out_dir"],
            seeds=tuple(d["seeds"]),
            n_samples=int(d["n_samples"]),
            grid_range=tuple(d["grid_range"]),
            grid_steps=int(d["grid_steps"]),
            probe_index=int(d["probe_index"]),
            probe_joint=int(d["probe_joint"]),
        )
    except KeyError as err:
        raise InputError("experiment config missing field %s" % err) from None


def save_config(path, cfg):
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path):
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as err:
        raise InputError("config is not valid JSON: %s" % err) from None
    if not isinstance(payload, dict):
        raise InputError("config must be a JSON object")
    return config_from_dict(payload)


# ---------------------------------------------------------------------------
# deterministic splitting


def _mix64(x):
    """splitmix64 finalizer; a stateless integer hash."""
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return (x ^ (x >> 31)) & _M64


def split_indices(n, seed):
    """Hash-partitioned train/val/test index arrays, roughly 80/10/10.

    Each index lands in a bucket by splitmix64(seed-mixed index) mod 10;
    buckets 0-7 train, 8 validation, 9 test.  The assignment of a given
    index is independent of n.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    base = _mix64(int(seed) & _M64)
    buckets = np.fromiter((_mix64(base ^ _mix64(i)) % 10 for i in range(n)),
                          dtype=np.int64, count=n)
    train = np.flatnonzero(buckets <= 7)
    val = np.flatnonzero(buckets == 8)
    test = np.flatnonzero(buckets == 9)
    if len(train) == 0 or len(val) == 0 or len(test) == 0:
        raise InputError("split produced an empty partition; increase n")
    return train, val, test


def _data_seed(task_seed, run_seed):
    return int(_mix64((int(task_seed) & _M64) ^ _mix64(int(run_seed))) >> 1)


@dataclass
class _Split:
    inputs: np.ndarray
    targets: np.ndarray


# ---------------------------------------------------------------------------
# artifact writers


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        fh.write("epoch,l_reg,l_flow,l_total,val_nll\n")
        for st in history:
            fh.write("%d,%r,%r,%r,%r\n"
                     % (st.epoch, st.l_reg, st.l_flow, st.l_total, st.val_nll))


def prediction_records(trained, inputs, targets):
    """Per-(instance, joint) error / spread / confidence triples.

    Error is the Euclidean distance between predicted and true joint
    position; uncertainty is the mean predicted per-axis scale; the
    confidence is its complement.
    """
    mu, sigma, s_joint, _ = model_mod.predict(trained, inputs)
    err = np.linalg.norm(mu - targets, axis=2)
    unc = sigma.mean(axis=2)
    records = []
    for e_row, u_row, s_row in zip(err, unc, s_joint):
        for e, u, s in zip(e_row, u_row, s_row):
            records.append(metrics_mod.PredictionRecord(float(e), float(u),
                                                        float(s)))
    return records


def density_grid_rows(trained, probe_input, joint, grid_range, grid_steps):
    """Residual-space density rows (x, y, log_prob, prob) for one joint.

    The grid coordinates are residual offsets from the predicted mean.
    Each point is standardized by the predicted per-axis scales and
    scored by the trained flow when present, otherwise by the parametric
    base; the log-density is shifted by -sum(log sigma) so it integrates
    to one in residual coordinates.
    """
    reg = trained.regression
    if reg.n_axes != 2:
        raise InputError("density grid export needs exactly 2 axes")
    if not 0 <= joint < reg.n_joints:
        raise InputError("probe joint out of range")
    mu, sigma = reg.predict_values(np.asarray(probe_input, dtype=np.float64)[None, :])
    sig = sigma.reshape(reg.n_joints, reg.n_axes)[joint]
    xs = np.linspace(grid_range[0], grid_range[1], grid_steps)
    ys = np.linspace(grid_range[0], grid_range[1], grid_steps)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if trained.flow_trained:
        cfg = flow_mod.FlowConfig(sigma_min=trained.config.flow.sigma_min,
                                  trace_mode="exact")
        ode = flow_mod.OdeConfig(steps=trained.config.val_ode_steps)
        logp, _, _ = flow_mod.log_density_batch(trained.flow, pts / sig, cfg, ode)
        logp = logp - np.log(sig).sum()
    else:
        logp = trained.base.log_density_values(pts, np.broadcast_to(sig, pts.shape))
    return np.column_stack([pts, logp, np.exp(logp)])


def _write_grid_csv(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write("x,y,log_prob,prob\n")
        for x, y, lp, p in rows:
            fh.write("%r,%r,%r,%r\n" % (float(x), float(y), float(lp), float(p)))


def run_dataset(cfg, seed):
    """The dataset a given run seed sees, regenerated from the config."""
    task = dataclasses.replace(cfg.task, seed=_data_seed(cfg.task.seed, seed))
    return generate(task, cfg.n_samples)


def evaluate_trained(trained, cfg, seed, data=None):
    """Metrics payload on the run's validation and test partitions.

    Returns (payload, test records, model sparsification curve) so
    callers can persist the intermediate artifacts as well.
    """
    if data is None:
        data = run_dataset(cfg, seed)
    _, va, te = split_indices(cfg.n_samples, seed)
    eval_ode = flow_mod.OdeConfig(steps=trained.config.val_ode_steps)
    val_nll = model_mod.held_out_nll(trained, data.inputs[va], data.targets[va],
                                     ode=eval_ode)
    test_nll = model_mod.held_out_nll(trained, data.inputs[te], data.targets[te],
                                      ode=eval_ode)
    records = prediction_records(trained, data.inputs[te], data.targets[te])
    model_curve = metrics_mod.sparsification_curve(records)
    oracle = metrics_mod.oracle_curve(records)
    random_curve = metrics_mod.random_baseline_curve(records, seed=seed)
    ause_v = metrics_mod.ause(model_curve, oracle)
    aurg_v = metrics_mod.aurg(model_curve, random_curve)
    errs = np.array([r.error for r in records])
    uncs = np.array([r.uncertainty for r in records])
    pcc_v = metrics_mod.pcc(errs, uncs)
    payload = metrics_mod.metrics_payload(ause_v, aurg_v, pcc_v,
                                          normalized=model_curve.normalized)
    payload["val_nll"] = float(val_nll)
    payload["test_nll"] = float(test_nll)
    for key in ("val_nll", "test_nll", "ause", "aurg", "pcc"):
        if not np.isfinite(payload[key]):
            raise model_mod.NumericError("metric %s is not finite" % key)
    return payload, records, model_curve


# ---------------------------------------------------------------------------
# the runner


def _effective_model(cfg, seed, c):
    base = cfg.model.base
    if cfg.trainer == "laplace_only":
        base = model_mod.BaseDistribution("laplace")
    elif cfg.trainer == "gaussian_only":
        base = model_mod.BaseDistribution("gaussian")
    return dataclasses.replace(cfg.model, seed=seed, base=base,
                               c=cfg.model.c if c is None else c)


def _train(trainer, dataset, model_cfg, val_data):
    if trainer == "cfre":
        return model_mod.train_cfre(dataset, model_cfg, val_data=val_data)
    if trainer == "explicit_nll":
        return model_mod.train_explicit_nll(dataset, model_cfg, val_data=val_data)
    return model_mod.train_heteroscedastic(dataset, model_cfg, val_data=val_data)


def _run_name(trainer, seed, c):
    name = "%s_seed%d" % (trainer, seed)
    if c is not None:
        name += "_c%s" % format(float(c), "g")
    return name


def _single_run(cfg, seed, c):
    start = time.perf_counter()
    run_dir = os.path.join(cfg.out_dir, _run_name(cfg.trainer, seed, c))
    os.makedirs(run_dir, exist_ok=True)
    model_cfg = _effective_model(cfg, seed, c)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "config": config_to_dict(cfg),
        "run": {"trainer": cfg.trainer, "seed": seed,
                "c": None if c is None else float(c),
                "data_seed": _data_seed(cfg.task.seed, seed),
                "base": model_cfg.base.kind},
        "status": "aborted",
        "error": None,
        "files": {},
    }

    def _finish(status, error=None):
        manifest["status"] = status
        manifest["error"] = error
        manifest["files"] = {name: _sha256(os.path.join(run_dir, name))
                             for name in sorted(os.listdir(run_dir))
                             if name != "manifest.json"
                             and os.path.isfile(os.path.join(run_dir, name))}
        _write_json(os.path.join(run_dir, "manifest.json"), manifest)

    try:
        data = run_dataset(cfg, seed)
        tr, va, te = split_indices(cfg.n_samples, seed)
        train_split = _Split(data.inputs[tr], data.targets[tr])
        val_split = (data.inputs[va], data.targets[va])
        trained = _train(cfg.trainer, train_split, model_cfg, val_split)

        ckpt.save_checkpoint(os.path.join(run_dir, "checkpoint.json"), trained)
        _write_history_csv(os.path.join(run_dir, "history.csv"), trained.history)

        payload, records, model_curve = evaluate_trained(trained, cfg, seed,
                                                         data=data)
        metrics_mod.write_records_csv(os.path.join(run_dir, "records.csv"),
                                      records)
        metrics_mod.write_curve_csv(os.path.join(run_dir, "sparsification.csv"),
                                    model_curve)
        _write_json(os.path.join(run_dir, "metrics.json"), payload)

        if cfg.task.n_axes == 2:
            test_inputs = data.inputs[te]
            probe = test_inputs[min(cfg.probe_index, len(test_inputs) - 1)]
            rows = density_grid_rows(trained, probe, cfg.probe_joint,
                                     cfg.grid_range, cfg.grid_steps)
            _write_grid_csv(os.path.join(run_dir, "density_grid.csv"), rows)
    except BaseException as err:
        _finish("aborted", error="%s: %s" % (type(err).__name__, err))
        raise
    _finish("complete")
    return RunRecord(
        trainer=cfg.trainer, seed=seed, c=None if c is None else float(c),
        metrics=payload, run_dir=run_dir,
        checkpoint_path=os.path.join(run_dir, "checkpoint.json"),
        history_path=os.path.join(run_dir, "history.csv"),
        metrics_path=os.path.join(run_dir, "metrics.json"),
        manifest_path=os.path.join(run_dir, "manifest.json"),
        wall_clock_seconds=time.perf_counter() - start,
    )


def _write_summary(path, runs):
    with open(path, "w", newline="") as fh:
        fh.write("trainer,seed,c,val_nll,test_nll,ause,aurg,pcc\n")
        for r in runs:
            c_txt = "" if r.c is None else repr(r.c)
            m = r.metrics
            fh.write("%s,%d,%s,%r,%r,%r,%r,%r\n"
                     % (r.trainer, r.seed, c_txt, m["val_nll"], m["test_nll"],
                        m["ause"], m["aurg"], m["pcc"]))


def run_experiment(cfg):
    """Train and evaluate every (seed, c) combination in the config."""
    if not isinstance(cfg, ExperimentConfig):
        raise InputError("run_experiment expects an ExperimentConfig")
    start = time.perf_counter()
    os.makedirs(cfg.out_dir, exist_ok=True)
    cs = cfg.c_sweep if cfg.c_sweep is not None else (None,)
    runs = []
    for seed in cfg.seeds:
        for c in cs:
            runs.append(_single_run(cfg, seed, c))
    summary_path = os.path.join(cfg.out_dir, "summary.csv")
    _write_summary(summary_path, runs)
    report = RunReport(trainer=cfg.trainer, out_dir=cfg.out_dir, runs=runs,
                       summary_path=summary_path,
                       wall_clock_seconds=time.perf_counter() - start)
    _validate_report(report)
    return report


def _validate_report(report):
    for r in report.runs:
        for path in (r.checkpoint_path, r.history_path, r.metrics_path,
                     r.manifest_path):
            if not os.path.isfile(path):
                raise InputError("missing artifact %s" % path)
        for key, value in r.metrics.items():
            if isinstance(value, float) and not np.isfinite(value):
                raise InputError("non-finite metric %s in %s" % (key, r.run_dir))
    if not os.path.isfile(report.summary_path):
        raise InputError("missing summary %s" % report.summary_path)
