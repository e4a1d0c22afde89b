import csv
import json

import numpy as np
import pytest

from gstppca.cli import _nu_label, main, read_panel
from gstppca.core_types import ModelKind, ModelParams
from gstppca.simulate import SimSpec, simulate


def write_csv(path, Y, index=None, header=None):
    d = Y.shape[1]
    header = header or [f"c{i}" for i in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((["date"] if index is not None else []) + header)
        for i, row in enumerate(Y):
            lead = [index[i]] if index is not None else []
            w.writerow(lead + ["NA" if np.isnan(x) else repr(float(x)) for x in row])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def panel(kind, N, seed, nu_eps=np.inf, nu_x=np.inf, d=4):
    W = np.linspace(0.5, 1.5, d)[:, None]
    p = ModelParams.create(W, np.zeros(d), 0.3, nu_eps=nu_eps, nu_x=nu_x)
    return simulate(SimSpec(p, kind, N, seed)).Y.copy()


def test_read_panel_index_and_missing(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("date,a,b\n2020-01,1.5,NA\n2020-02,,2\n")
    pan = read_panel(str(f))
    assert pan.index == ["2020-01", "2020-02"]
    assert pan.columns == ["a", "b"]
    assert np.isnan(pan.Y[0, 1]) and np.isnan(pan.Y[1, 0])


def test_standardize_writes_scales(tmp_path, rng):
    Y = rng.standard_normal((100, 3)) * [1.0, 2.0, 3.0]
    write_csv(tmp_path / "in.csv", Y, index=[f"r{i}" for i in range(100)])
    assert main(["standardize", "--input", str(tmp_path / "in.csv"), "--output", str(tmp_path / "z.csv")]) == 0
    scales = read_rows(tmp_path / "z_scales.csv")
    assert [r["column"] for r in scales] == ["c0", "c1", "c2"]
    z = read_panel(str(tmp_path / "z.csv"))
    assert z.index[0] == "r0"
    assert abs(np.median(z.Y[:, 2])) < 0.5


def test_fit_report_schema_and_selection(tmp_path):
    Y = panel(ModelKind.GaussianPPCA, 400, 1)
    write_csv(tmp_path / "g.csv", Y)
    (tmp_path / "groups.csv").write_text("column_name,group_name\nc0,a\nc1,a\nc2,b\nc3,b\n")
    out = tmp_path / "fit.json"
    code = main(
        [
            "fit", "--input", str(tmp_path / "g.csv"), "--output", str(out), "--kind", "GroupedT",
            "--nu-grid", "4,100", "--nu-groups", str(tmp_path / "groups.csv"), "--quad-n", "16",
        ]
    )
    rep = json.loads(out.read_text())
    assert code == (0 if not rep["failures"] else 3)
    assert rep["schema_version"] == 1
    assert len(rep["grid"]) == 8
    assert rep["params"]["nu_eps"] == [100.0] * 4
    assert rep["params"]["nu_x"] == [100.0]
    assert rep["eigen"]["defined"]["cov"]


def test_fit_selects_heavy_tail(tmp_path):
    Y = panel(ModelKind.StudentTGSt, 400, 2, nu_eps=2.0, nu_x=2.0)
    write_csv(tmp_path / "t.csv", Y)
    out = tmp_path / "fit.json"
    main(["fit", "--input", str(tmp_path / "t.csv"), "--output", str(out), "--kind", "StudentTGSt",
          "--nu-grid", "2,100", "--quad-n", "16"])
    rep = json.loads(out.read_text())
    assert rep["params"]["nu_eps"] == [2.0] * 4
    assert rep["params"]["nu_x"] == [2.0]


def test_baseline_kind_with_missing_errors(tmp_path, capsys):
    Y = panel(ModelKind.GaussianPPCA, 50, 3)
    Y[0, 0] = np.nan
    write_csv(tmp_path / "m.csv", Y)
    code = main(["fit", "--input", str(tmp_path / "m.csv"), "--output", str(tmp_path / "o.json"),
                 "--kind", "StudentTPPCA", "--nu-grid", "4"])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "complete" in err["message"]


def test_missing_cells_route_to_em(tmp_path):
    Y = panel(ModelKind.GaussianPPCA, 200, 4)
    Y[::7, 1] = np.nan
    write_csv(tmp_path / "m.csv", Y)
    out = tmp_path / "o.json"
    code = main(["fit", "--input", str(tmp_path / "m.csv"), "--output", str(out), "--kind", "GaussianPPCA"])
    rep = json.loads(out.read_text())
    assert code == 0
    assert rep["n_missing"] == int(np.isnan(Y).sum())


def test_non_convergence_exit_code(tmp_path):
    Y = panel(ModelKind.StudentTGSt, 200, 5, nu_eps=4.0, nu_x=4.0)
    write_csv(tmp_path / "t.csv", Y)
    out = tmp_path / "o.json"
    code = main(["fit", "--input", str(tmp_path / "t.csv"), "--output", str(out), "--kind", "StudentTGSt",
                 "--nu-grid", "4", "--max-iter", "1", "--quad-n", "8"])
    rep = json.loads(out.read_text())
    assert code == 3
    assert rep["failures"] and rep["failures"][0]["converged"] is False


def test_bad_input_exit_code(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b\n1,x\n")
    assert main(["fit", "--input", str(tmp_path / "bad.csv"), "--output", str(tmp_path / "o.json")]) == 2
    assert main(["fit", "--input", str(tmp_path / "none.csv"), "--output", str(tmp_path / "o.json")]) == 2


def write_params(path, W, sigma2=0.1, **kw):
    p = ModelParams.create(np.asarray(W, dtype=float), np.zeros(len(W)), sigma2, **kw)
    path.write_text(json.dumps({"kind": kw.pop("kind", "GaussianPPCA"), "params": p.to_dict()}))


def decompose(tmp_path, W, **kw):
    write_params(tmp_path / "p.json", W, **kw)
    assert main(["decompose", "--input", str(tmp_path / "p.json"), "--output", str(tmp_path / "e.csv")]) == 0
    rows = read_rows(tmp_path / "e.csv")
    names = [k for k in rows[0] if k.startswith("v")]
    table = {r["row"]: np.array([float(r[n]) for n in names]) for r in rows}
    return table


def test_decompose_one_factor_same_sign(tmp_path):
    t = decompose(tmp_path, [[0.8], [1.2], [0.5], [0.9], [1.1]])
    v1 = np.array([t[f"y{i + 1}"][0] for i in range(5)])
    assert np.all(v1 > 0) or np.all(v1 < 0)


def test_decompose_two_blocks_sparse(tmp_path):
    W = [[1.0, 0.0], [0.9, 0.0], [1.1, 0.0], [0.0, 2.0], [0.0, 1.8]]
    t = decompose(tmp_path, W)
    V = np.array([t[f"y{i + 1}"][:2] for i in range(5)])
    top, bottom = np.abs(V[:3]), np.abs(V[3:])
    for j in range(2):
        block, other = (top[:, j], bottom[:, j]) if top[:, j].max() > bottom[:, j].max() else (bottom[:, j], top[:, j])
        assert other.max() < 0.1 and block.min() > 0.3


def test_decompose_identity_ratios(tmp_path):
    t = decompose(tmp_path, np.full((4, 1), 1e-7), sigma2=1.0)
    np.testing.assert_allclose(t["ratio"], 1.0, atol=1e-10)
    np.testing.assert_allclose(t["proportion"], 0.25, atol=1e-10)


def test_simulate_is_reproducible(tmp_path):
    args = ["simulate", "--n", "50", "--seed", "9", "--missing-rate", "0.1"]
    assert main(args + ["--output", str(tmp_path / "a.csv")]) == 0
    assert main(args + ["--output", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    pan = read_panel(str(tmp_path / "a.csv"))
    assert pan.Y.shape == (50, 3) and np.isnan(pan.Y).any()


def test_fit_decompose_round_trip(tmp_path):
    Y = panel(ModelKind.GaussianPPCA, 300, 6)
    write_csv(tmp_path / "g.csv", Y)
    out = tmp_path / "fit.json"
    assert main(["fit", "--input", str(tmp_path / "g.csv"), "--output", str(out), "--kind", "GaussianPPCA"]) == 0
    rep = json.loads(out.read_text())
    assert ModelParams.from_dict(rep["params"]).to_dict() == rep["params"]
    runs = []
    for name in ("e1.csv", "e2.csv"):
        assert main(["decompose", "--input", str(out), "--output", str(tmp_path / name)]) == 0
        runs.append((tmp_path / name).read_bytes())
    assert runs[0] == runs[1]
    rows = read_rows(tmp_path / "e1.csv")
    assert rows[0]["row"] == "c0"


@pytest.mark.parametrize("nu, label", [((4.0, 100.0, 4.0), "4_100_4"), ((np.inf, 2.5), "inf_2.5")])
def test_nu_labels(nu, label):
    assert _nu_label(np.array(nu)) == label


def test_influence_s1_table_shape(tmp_path):
    out = tmp_path / "s1.csv"
    assert main(["influence", "--scenario", "S1", "--n", "40", "--quad-n", "8", "--output", str(out)]) == 0
    rows = read_rows(out)
    assert list(rows[0]) == ["measure", "parameter", "Gaussian", "Student-t", "Grouped-t"]
    asy = [r["parameter"] for r in rows if r["measure"] == "asy_var"]
    assert asy == ["sigma2", "w1", "w2", "w3", "w4", "w5", "w6"]
    assert len(rows) == 21
