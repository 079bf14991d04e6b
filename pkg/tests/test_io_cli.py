import json
import struct

import numpy as np
import pytest

from cptar import io
from cptar.cli import main
from cptar.factor import CPLoadingSet, LowRankCoef, TensorSeries, assemble_coef
from cptar.lrs import SparseCoef
from cptar.tensor import col_norm


def random_coef(rng, dims=(2, 3), P=2, ry=2, rx=1):
    u = CPLoadingSet([col_norm(rng.standard_normal((d, ry))) for d in dims])
    v = CPLoadingSet([col_norm(rng.standard_normal((d, rx))) for d in dims])
    return LowRankCoef(u, rng.standard_normal((ry, P * rx)), v, P)


def test_series_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = TensorSeries(rng.standard_normal((7, 2, 3, 2)))
    path = tmp_path / "s.bin"
    io.write_series(s, path)
    back = io.read_series(path)
    np.testing.assert_array_equal(back.data, s.data)
    raw = path.read_bytes()
    assert raw[:8] == b"TSERIES1"
    assert len(raw) == 8 + 4 + 3 * 8 + 8 + 7 * 12 * 8
    # Payload is column-major per step.
    first = np.frombuffer(raw, "<f8", count=12, offset=44)
    np.testing.assert_array_equal(first, s.data[0].ravel(order="F"))


def _expect_code(path, code):
    with pytest.raises(io.FormatError) as info:
        io.read_series(path)
    assert info.value.code == code


def test_series_format_errors(tmp_path):
    good = tmp_path / "g.bin"
    io.write_series(np.ones((3, 2)), good)
    raw = good.read_bytes()
    bad = tmp_path / "b.bin"
    bad.write_bytes(raw[:-3])
    _expect_code(bad, "truncated")
    bad.write_bytes(raw[:10])
    _expect_code(bad, "truncated")
    bad.write_bytes(b"XSERIES1" + raw[8:])
    _expect_code(bad, "bad_magic")
    bad.write_bytes(raw + b"\0")
    _expect_code(bad, "trailing_bytes")
    huge = b"TSERIES1" + struct.pack("<I", 2) + struct.pack("<2Q", 2 ** 40, 2 ** 40)
    bad.write_bytes(huge + struct.pack("<Q", 2 ** 20))
    _expect_code(bad, "dim_overflow")
    bad.write_bytes(b"TSERIES1" + struct.pack("<I", 1) + struct.pack("<2Q", 2, 0))
    _expect_code(bad, "dim_overflow")
    with pytest.raises(io.FormatError) as info:
        io.write_series(np.ones((0, 2)), bad)
    assert info.value.code == "empty_series"


def test_model_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    c = random_coef(rng)
    sp = SparseCoef((2, 3), 2, {(0, 1, 1, 1, 2): 0.1 + 1e-17, (1, 0, 0, 0, 0): -3.3})
    path = tmp_path / "m.json"
    io.write_model(path, c, sp, {"seed": 4})
    low, sp2, meta = io.read_model(path)
    np.testing.assert_array_equal(assemble_coef(low), assemble_coef(c))
    assert sp2.entries == sp.entries
    assert meta == {"seed": 4}
    io.write_model(path, c)
    assert io.read_model(path)[1] is None


def test_bad_model_documents(tmp_path):
    path = tmp_path / "m.json"
    path.write_text("{not json")
    with pytest.raises(io.FormatError):
        io.read_model(path)
    doc = io.model_to_dict(random_coef(np.random.default_rng(2)))
    doc["version"] = 99
    with pytest.raises(io.FormatError):
        io.model_from_dict(doc)
    doc["version"] = 1
    doc["core"]["shape"] = [5, 5]
    with pytest.raises(io.FormatError):
        io.model_from_dict(doc)


def test_tables_carry_schema(tmp_path):
    path = tmp_path / "t.csv"
    io.write_table(path, "scores", [{"P": 1, "R_y": 2, "R_x": 1, "lambda": None,
                                     "d_ar": 9, "msfe": 0.25, "note": ""}])
    assert path.read_text().splitlines()[0] == "schema,cptar.scores/1"
    schema, rows = io.read_table(path)
    assert schema == "cptar.scores/1"
    assert rows[0]["msfe"] == "0.25" and rows[0]["lambda"] == ""
    path.write_text("P,R_y\n1,2\n")
    with pytest.raises(io.FormatError):
        io.read_table(path)


def test_config_loading(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('dims = [2, 3]\nP = 1\nerror_kind = "uniform"\n')
    assert io.load_config(path) == {"dims": [2, 3], "P": 1, "error_kind": "uniform"}
    path.write_text("[section]\nx = 1\n")
    with pytest.raises(io.FormatError):
        io.load_config(path)
    path.write_text("x = = 1\n")
    with pytest.raises(io.FormatError):
        io.load_config(path)


def test_csv_conversion(tmp_path):
    src = tmp_path / "in.csv"
    src.write_text("a,b,c,d\n1,2,3,4\n5,6,7,8\n")
    s = io.csv_to_series(src, (2, 2))
    np.testing.assert_array_equal(s.data[1], [[5, 7], [6, 8]])
    src.write_text("1,2,3\n")
    with pytest.raises(io.FormatError):
        io.csv_to_series(src, (2, 2))


# ---------------------------------------------------------------------------
# Command line.


def _noise_free_series(tmp_path):
    cfg = tmp_path / "dgp.toml"
    cfg.write_text('dims = [2, 2]\nP = 1\nR_y = 1\nR_x = 1\nerror_kind = "none"\n')
    out = tmp_path / "y.bin"
    assert main(["simulate", "--config", str(cfg), "--output", str(out), "--seed", "3",
                 "-T", "60"]) == 0
    return out


def test_cli_fit_forecast_round_trip(tmp_path):
    series = _noise_free_series(tmp_path)
    model = tmp_path / "model.json"
    assert main(["fit", "--input", str(series), "--output", str(model), "--seed", "1",
                 "-P", "1", "--rank-y", "1", "--rank-x", "1"]) == 0
    report = json.loads((tmp_path / "model.json.report.json").read_text())
    assert "loss_trace" in report
    pred = tmp_path / "pred.bin"
    assert main(["forecast", "--input", str(series), "--model", str(model),
                 "--output", str(pred)]) == 0
    metrics = json.loads((tmp_path / "pred.bin.metrics.json").read_text())
    assert metrics["msfe"] <= 1e-10
    assert len(io.read_series(pred)) == 59


def test_cli_simulate_is_deterministic(tmp_path):
    cfg = tmp_path / "dgp.toml"
    cfg.write_text("dims = [2, 3]\nP = 2\nR_y = 2\nR_x = 1\n")
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    for out in (a, b):
        assert main(["simulate", "--config", str(cfg), "--output", str(out),
                     "--seed", "7", "-T", "40"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.bin.truth.json").read_bytes() == \
        (tmp_path / "b.bin.truth.json").read_bytes()


def test_cli_rate_experiment(tmp_path):
    cfg = tmp_path / "dgp.toml"
    cfg.write_text("dims = [2, 2]\nP = 1\nR_y = 1\nR_x = 1\n")
    out = tmp_path / "exp"
    assert main(["simulate", "--config", str(cfg), "--output", str(out), "--seed", "2",
                 "--design", "vary-t", "--grid", "60,80", "--replications", "2",
                 "--restarts", "1"]) == 0
    schema, rows = io.read_table(str(out) + ".rows.csv")
    assert schema == "cptar.rate_rows/1" and len(rows) == 4
    diag = json.loads((tmp_path / "exp.diagnostics.json").read_text())
    assert -1 <= diag["correlation"] <= 1


def test_cli_select_single_configuration(tmp_path):
    series = _noise_free_series(tmp_path)
    out = tmp_path / "scores.csv"
    assert main(["select", "--input", str(series), "--output", str(out), "--seed", "0",
                 "--grid-pmax", "1", "--grid-rymax", "1", "--grid-rxmax", "1",
                 "--restarts", "1"]) == 0
    chosen = json.loads((tmp_path / "scores.csv.chosen.json").read_text())
    assert (chosen["P"], chosen["R_y"], chosen["R_x"]) == (1, 1, 1)
    assert chosen["train_len"] + chosen["val_len"] == 60


def test_cli_convert(tmp_path):
    src = tmp_path / "in.csv"
    src.write_text("1,2,3,4\n5,6,7,8\n")
    out = tmp_path / "o.bin"
    assert main(["convert", "--input", str(src), "--output", str(out), "--dims", "2,2"]) == 0
    assert io.read_series(out).data.shape == (2, 2, 2)


def test_cli_errors_are_json(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    code = main(["fit", "--input", str(bad), "--output", str(tmp_path / "m.json"),
                 "--seed", "1", "-P", "1", "--rank-y", "1", "--rank-x", "1"])
    assert code == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["code"] == "bad_magic" and "message" in err and "context" in err
    assert main(["fit", "--input", str(bad)]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["code"] == "usage"
    series = _noise_free_series(tmp_path)
    assert main(["fit", "--input", str(series), "--output", str(tmp_path / "m.json"),
                 "--seed", "1", "-P", "1", "--rank-y", "1", "--rank-x", "1",
                 "--variant", "lrs"]) != 0


def test_cli_select_lrs(tmp_path):
    series = _noise_free_series(tmp_path)
    out = tmp_path / "scores.csv"
    assert main(["select", "--input", str(series), "--output", str(out), "--seed", "0",
                 "--variant", "lrs", "--grid-pmax", "1", "--grid-rymax", "1",
                 "--grid-rxmax", "1", "--lambda-grid", "0.1,1", "--restarts", "1",
                 "--refit-every", "5"]) == 0
    chosen = json.loads((tmp_path / "scores.csv.chosen.json").read_text())
    assert chosen["lambda"] in (0.1, 1.0) and chosen["joint"] is False
    assert len(io.read_table(out)[1]) == 3
