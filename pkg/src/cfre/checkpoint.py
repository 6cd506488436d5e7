"""Versioned JSON checkpoints.

The header records both network architectures plus the base family and
sigma_min; weights follow as flat arrays in declaration order (layer by
layer, weight matrix then bias).  Floats are written with full
round-trip precision, so save/load/save is byte-stable.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import InputError
from .flow import FlowConfig, VectorFieldNet
from .model import BaseDistribution, CfreConfig, RegressionModel, TrainedCfre

FORMAT_VERSION = 1


def _flatten(values):
    return [v.ravel().tolist() for v in values]


def _restore(model, flats):
    shapes = [p.value.shape for p in model.parameters()]
    if len(flats) != len(shapes):
        raise InputError("checkpoint holds %d arrays, model expects %d"
                         % (len(flats), len(shapes)))
    values = []
    for flat, shape in zip(flats, shapes):
        arr = np.asarray(flat, dtype=np.float64)
        if arr.size != int(np.prod(shape)):
            raise InputError("checkpoint array size %d does not fit shape %s"
                             % (arr.size, shape))
        values.append(arr.reshape(shape))
    model.set_parameter_values(values)


def checkpoint_payload(trained):
    """The JSON-ready dict for a trained bundle."""
    reg = trained.regression
    return {
        "format_version": FORMAT_VERSION,
        "data_dim": trained.flow.data_dim,
        "K": reg.n_joints,
        "widths": list(trained.flow.widths),
        "base_kind": trained.base.kind,
        "sigma_min": trained.config.flow.sigma_min,
        "axes": reg.n_axes,
        "reg_widths": list(reg.widths),
        "sigma_floor": reg.sigma_floor,
        "flow_trained": bool(trained.flow_trained),
        "regression_params": _flatten(reg.parameter_values()),
        "flow_params": _flatten(trained.flow.parameter_values()),
    }


def save_checkpoint(path, trained):
    with open(path, "w") as fh:
        json.dump(checkpoint_payload(trained), fh)
        fh.write("\n")


def load_checkpoint(path):
    """Rebuild a TrainedCfre (with empty history) from a checkpoint file."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise InputError("checkpoint is not valid JSON: %s" % err) from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise InputError("unsupported checkpoint format_version %r"
                         % (doc.get("format_version"),))
    for key in ("data_dim", "K", "widths", "base_kind", "sigma_min", "axes",
                "reg_widths", "regression_params", "flow_params"):
        if key not in doc:
            raise InputError("checkpoint is missing field %r" % key)
    reg_widths = doc["reg_widths"]
    k, d = int(doc["K"]), int(doc["axes"])
    if reg_widths[-1] != 2 * k * d:
        raise InputError("checkpoint head width %d does not match 2*K*axes"
                         % reg_widths[-1])
    reg = RegressionModel(reg_widths[0], k, d, hidden=tuple(reg_widths[1:-1]),
                          sigma_floor=float(doc.get("sigma_floor", 1e-4)))
    widths = doc["widths"]
    if widths[0] != int(doc["data_dim"]) + 1 or widths[-1] != int(doc["data_dim"]):
        raise InputError("checkpoint flow widths do not match data_dim")
    vf = VectorFieldNet(int(doc["data_dim"]), hidden=tuple(widths[1:-1]))
    _restore(reg, doc["regression_params"])
    _restore(vf, doc["flow_params"])
    base = BaseDistribution(doc["base_kind"])
    cfg = CfreConfig(base=base,
                     flow=FlowConfig(sigma_min=float(doc["sigma_min"])),
                     reg_hidden=tuple(reg_widths[1:-1]),
                     flow_hidden=tuple(widths[1:-1]),
                     sigma_floor=float(doc.get("sigma_floor", 1e-4)))
    return TrainedCfre(regression=reg, flow=vf, base=base, config=cfg,
                       history=[], flow_trained=bool(doc.get("flow_trained", True)))
