"""Checkpoint round trips and format validation."""

import json

import numpy as np
import pytest

from cfre.checkpoint import (
    FORMAT_VERSION,
    checkpoint_payload,
    load_checkpoint,
    save_checkpoint,
)
from cfre.errors import InputError
from cfre.model import BaseDistribution, CfreConfig, train_cfre
from cfre.tasks import SyntheticTask, generate


@pytest.fixture(scope="module")
def trained():
    data = generate(SyntheticTask("aniso_laplace", input_dim=4, n_joints=2,
                                  n_axes=2, seed=0), 120)
    cfg = CfreConfig(c=0.1, base=BaseDistribution("laplace"), epochs=1,
                     batch_size=60, reg_hidden=(8,), flow_hidden=(8,), seed=3)
    return train_cfre(data, cfg), data


class TestRoundTrip:
    def test_weights_survive_exactly(self, trained, tmp_path):
        model, data = trained
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, model)
        back = load_checkpoint(path)
        for a, b in zip(model.regression.parameter_values(),
                        back.regression.parameter_values()):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(model.flow.parameter_values(),
                        back.flow.parameter_values()):
            np.testing.assert_array_equal(a, b)
        assert back.base.kind == "laplace"
        assert back.flow_trained
        assert back.config.flow.sigma_min == model.config.flow.sigma_min
        assert back.regression.sigma_floor == model.regression.sigma_floor
        assert back.history == []

    def test_predictions_identical_after_reload(self, trained, tmp_path):
        model, data = trained
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, model)
        back = load_checkpoint(path)
        mu_a, sig_a = model.regression.predict_values(data.inputs[:5])
        mu_b, sig_b = back.regression.predict_values(data.inputs[:5])
        np.testing.assert_array_equal(mu_a, mu_b)
        np.testing.assert_array_equal(sig_a, sig_b)

    def test_save_load_save_is_byte_stable(self, trained, tmp_path):
        model, _ = trained
        first = tmp_path / "a.json"
        second = tmp_path / "b.json"
        save_checkpoint(first, model)
        save_checkpoint(second, load_checkpoint(first))
        assert first.read_bytes() == second.read_bytes()

    def test_payload_header_fields(self, trained):
        model, _ = trained
        doc = checkpoint_payload(model)
        assert doc["format_version"] == FORMAT_VERSION
        assert doc["data_dim"] == 2
        assert doc["K"] == 2
        assert doc["widths"] == [3, 8, 2]
        assert doc["base_kind"] == "laplace"
        assert len(doc["regression_params"]) == 4  # two layers, w then b


class TestValidation:
    def _doc(self, trained, **overrides):
        doc = checkpoint_payload(trained[0])
        doc.update(overrides)
        return doc

    def _write(self, tmp_path, doc):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        return path

    def test_rejects_bad_json(self, tmp_path):
        path = tmp_path / "garbage.json"
        path.write_text("{not json")
        with pytest.raises(InputError, match="JSON"):
            load_checkpoint(path)

    def test_rejects_unknown_version(self, trained, tmp_path):
        path = self._write(tmp_path, self._doc(trained, format_version=99))
        with pytest.raises(InputError, match="format_version"):
            load_checkpoint(path)

    def test_rejects_missing_field(self, trained, tmp_path):
        doc = self._doc(trained)
        del doc["widths"]
        path = self._write(tmp_path, doc)
        with pytest.raises(InputError, match="widths"):
            load_checkpoint(path)

    def test_rejects_inconsistent_head(self, trained, tmp_path):
        doc = self._doc(trained)
        doc["K"] = 3  # head width no longer matches 2*K*axes
        path = self._write(tmp_path, doc)
        with pytest.raises(InputError, match="head width"):
            load_checkpoint(path)

    def test_rejects_wrong_flow_widths(self, trained, tmp_path):
        doc = self._doc(trained)
        doc["widths"] = [5, 8, 2]
        path = self._write(tmp_path, doc)
        with pytest.raises(InputError, match="data_dim"):
            load_checkpoint(path)

    def test_rejects_truncated_weights(self, trained, tmp_path):
        doc = self._doc(trained)
        doc["flow_params"] = doc["flow_params"][:-1]
        path = self._write(tmp_path, doc)
        with pytest.raises(InputError, match="arrays"):
            load_checkpoint(path)

    def test_rejects_misshapen_weights(self, trained, tmp_path):
        doc = self._doc(trained)
        doc["flow_params"] = [f + [0.0] for f in doc["flow_params"]]
        path = self._write(tmp_path, doc)
        with pytest.raises(InputError, match="size"):
            load_checkpoint(path)
