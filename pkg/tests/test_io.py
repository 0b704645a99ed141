import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpredict import io
from vpredict.evaluate import BoundCheck, EvalReport
from vpredict.exact import GridSpec, build_grid
from vpredict.model import generate_dataset


class TestJson:
    @settings(max_examples=100, deadline=None)
    @given(v=st.floats(allow_nan=False, allow_infinity=False))
    def test_floats_round_trip_bit_exact(self, v):
        assert json.loads(io.dumps({"v": v}))["v"] == v

    def test_integral_floats_stay_floats(self):
        assert io.dumps([2.0]).strip() == "[2.0]"

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            io.dumps({"v": float("nan")})

    def test_schema_version_checked(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text('{"schema_version": 2}')
        with pytest.raises(io.SchemaError, match="schema_version"):
            io.read_json(p, "dataset")

    def test_not_json(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text("{")
        with pytest.raises(io.SchemaError):
            io.read_json(p, "fit")


class TestDataset:
    def test_round_trip(self, tmp_path):
        ds = generate_dataset(7)
        digest = io.save_dataset(tmp_path / "d.json", ds)
        assert io.load_dataset(tmp_path / "d.json") == ds
        assert digest == io.file_digest(tmp_path / "d.json")

    def test_count_mismatch(self, tmp_path):
        d = io.dataset_to_dict(generate_dataset(7))
        d["n"] = 9
        (tmp_path / "d.json").write_text(io.dumps(d))
        with pytest.raises(io.SchemaError):
            io.load_dataset(tmp_path / "d.json")

    def test_fixture(self, fixture_data):
        assert fixture_data.seed == io.FIXTURE_SEED and fixture_data.n == 8


class TestFits:
    @pytest.mark.parametrize("name", ["map_fit", "mfvi_fit", "bayesdark_fit", "vp_fit", "uncond_fit"])
    def test_round_trip(self, tmp_path, request, name):
        fit = request.getfixturevalue(name)
        io.save_fit(tmp_path / "f.json", fit)
        again = io.load_fit(tmp_path / "f.json")
        assert again.method == fit.method
        assert again.train_curve == [tuple(map(float, c)) for c in fit.train_curve] or again.train_curve == fit.train_curve
        a, b = io.params_to_dict(fit.method, fit.params), io.params_to_dict(again.method, again.params)
        assert a == b

    def test_vp_records_reference(self, vp_fit):
        d = io.fit_to_dict(vp_fit)
        assert d["reference"] == {"lambda": 0.004, "beta": 12.8}
        assert d["params"]["lambda"] == vp_fit.params.aug_cfg.step_size

    def test_unknown_method(self, tmp_path, map_fit):
        d = io.fit_to_dict(map_fit)
        d["method"] = "bogus"
        (tmp_path / "f.json").write_text(io.dumps(d))
        with pytest.raises(io.SchemaError):
            io.load_fit(tmp_path / "f.json")


class TestGrid:
    def test_round_trip(self, tmp_path, fixture_data, prior):
        grid = build_grid(fixture_data, prior, GridSpec(resolution=(32, 48)))
        io.save_grid(tmp_path / "g.csv", grid)
        again = io.load_grid(tmp_path / "g.csv")
        assert again.log_evidence == pytest.approx(grid.log_evidence, abs=1e-12)
        np.testing.assert_allclose(again.log_joint, grid.log_joint, rtol=1e-14)
        assert again.dataset == fixture_data

    def test_header_checked(self, tmp_path, fixture_data, prior):
        grid = build_grid(fixture_data, prior, GridSpec(resolution=(16, 16)))
        io.save_grid(tmp_path / "g.csv", grid)
        text = (tmp_path / "g.csv").read_text().replace("log_density", "density", 1)
        (tmp_path / "g.csv").write_text(text)
        with pytest.raises(io.SchemaError):
            io.load_grid(tmp_path / "g.csv")


class TestReport:
    def test_round_trip(self, tmp_path):
        rep = EvalReport({"map": 0.1, "vp": 1 / 3}, [BoundCheck("b", 1.0, 0.5, 0.1, True)], {"seed": 1})
        io.save_report(tmp_path / "r.json", rep)
        again = io.load_report(tmp_path / "r.json")
        assert again.kl == rep.kl and again.bound_checks == rep.bound_checks

    def test_kl_csv(self, tmp_path):
        io.save_kl_csv(tmp_path / "r.csv", EvalReport({"map": 0.25}))
        assert (tmp_path / "r.csv").read_text().splitlines() == ["method,expected_kl_nats", "map,0.25"]
