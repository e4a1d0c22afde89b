"""Command-line front end: fit, decompose, standardize, simulate and influence studies.

Every command reads and writes plain CSV or JSON; figures are left to the
caller. Fit reports carry ``"schema_version": 1``.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .core_types import DataSet, ModelKind, ModelParams, ValidationError
from .covariance import model_covariance, proportion_of_variance
from .em_baselines import fit_gaussian_ppca, fit_student_t_ppca
from .em_gst import EmConfig, fit, initialize
from .influence import influence_report, mse_study, row_loglik_kind, s1_cases, simulate_case
from .simulate import S1_SIGMA2, S1_W, mask_mar, simulate_params
from .skewt_simplified import DEFAULT_MARGINAL_GRID, fit_skew_t_grid, product_grid
from .standardize import standardize

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MISSING = {"", "NA", "na", "NaN", "nan"}
DEFAULT_NU_GRID = (2.0, 4.0, 10.0, 20.0, 100.0)
COMMANDS = ("fit", "simulate", "influence", "decompose", "standardize", "mse-study")


@dataclass
class RunConfig:
    command: str
    input_path: str | None = None
    output_path: str | None = None
    kind: ModelKind = ModelKind.GroupedT
    k: int = 1
    nu_grid: tuple = DEFAULT_NU_GRID
    nu_groups: str | None = None
    delta_grid: tuple = DEFAULT_MARGINAL_GRID
    quad_n: int = 32
    max_iter: int = 500
    tol: float = 1e-6
    seed: int = 0
    standardize: bool = False
    threads: int = 1
    n: int | None = None
    missing_rate: float = 0.0
    reps: int = 50
    n_list: tuple = (100, 1000, 5000)
    scenario: str = "S1"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        if self.command in ("fit", "standardize", "decompose") and not self.input_path:
            raise ValueError(f"{self.command} needs --input")
        if self.command == "fit" and not self.nu_grid:
            raise ValueError("empty nu grid")
        if self.k < 1:
            raise ValueError("k must be positive")

    @property
    def em(self) -> EmConfig:
        return EmConfig(grid_n=self.quad_n, max_iter=self.max_iter, rel_tol=self.tol)


# --------------------------------------------------------------------------
# CSV and JSON helpers


@dataclass(frozen=True)
class Panel:
    columns: list
    Y: np.ndarray
    index: list | None = None
    index_name: str | None = None


def _number(s: str) -> float:
    s = s.strip()
    return math.nan if s in MISSING else float(s)


def _is_number(s: str) -> bool:
    try:
        _number(s)
        return True
    except ValueError:
        return False


def read_panel(path: str) -> Panel:
    """Header row plus numeric columns; a non-numeric first column is kept as the index."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValidationError(f"{path}: need a header and at least one row")
    header, body = rows[0], [r for r in rows[1:] if r]
    if any(len(r) != len(header) for r in body):
        raise ValidationError(f"{path}: ragged rows")
    index = None
    index_name = None
    if not all(_is_number(r[0]) for r in body):
        index_name = header[0]
        index = [r[0] for r in body]
        header, body = header[1:], [r[1:] for r in body]
    try:
        Y = np.array([[_number(x) for x in r] for r in body], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{path}: unparseable cell ({exc})") from exc
    if Y.size == 0:
        raise ValidationError(f"{path}: no numeric columns")
    return Panel(list(header), Y.reshape(len(body), len(header)), index, index_name)


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "NA" if not np.isfinite(x) else repr(float(x))
    return str(x)


def write_panel(path: str, panel: Panel) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ([panel.index_name or "index"] if panel.index is not None else []) + list(panel.columns)
        w.writerow(head)
        for i, row in enumerate(panel.Y):
            lead = [panel.index[i]] if panel.index is not None else []
            w.writerow(lead + [_fmt(x) for x in row])


def write_table(path: str, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("empty table")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = list(rows[0])
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r[k2]) for k2 in keys])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, ModelKind):
        return x.value
    return x


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def read_groups(path: str, columns: list) -> list:
    """Group label per data column from a two-column ``column_name, group_name`` file."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and rows[0][0].strip().lower() in ("column", "column_name"):
        rows = rows[1:]
    mapping = {r[0].strip(): r[1].strip() for r in rows}
    missing = [c for c in columns if c not in mapping]
    if missing:
        raise ValidationError(f"no group for columns {missing}")
    return [mapping[c] for c in columns]


# --------------------------------------------------------------------------
# fit


def _nu_combinations(kind: ModelKind, grid, groups, d: int, k: int):
    """Candidate ``(nu_eps, nu_x)`` vectors for ``kind``."""
    grid = [float(g) for g in grid]
    if kind is ModelKind.GaussianPPCA:
        return [(np.full(d, np.inf), np.full(k, np.inf))]
    if kind in (ModelKind.StudentTPPCA,):
        return [(np.full(d, g), np.full(k, g)) for g in grid]
    if kind in (ModelKind.StudentTGSt, ModelKind.SkewTGStSimplified):
        return [(np.full(d, a), np.full(k, b)) for a in grid for b in grid]
    labels = groups if groups is not None else ["all"] * d
    names = list(dict.fromkeys(labels))
    out = []
    for combo in itertools.product(grid, repeat=len(names)):
        value = dict(zip(names, combo))
        nu_eps = np.array([value[g] for g in labels])
        for b in grid:
            out.append((nu_eps, np.full(k, b)))
    return out


def _nu_list(nu):
    return [None if np.isinf(x) else float(x) for x in nu]


def _fit_one(data: DataSet, kind: ModelKind, k: int, nu_eps, nu_x, cfg: RunConfig):
    """Return ``(params, loglik, converged, iterations)``."""
    if kind is ModelKind.StudentTPPCA:
        if not data.complete:
            raise ValidationError("StudentTPPCA is a complete-data baseline; use an EM kind for missing cells")
        est = fit_student_t_ppca(data, k, float(nu_eps[0]))
        params = ModelParams.create(est.W_hat, est.mu_hat, est.sigma2_hat, nu_eps=nu_eps, nu_x=nu_x)
        ll = float(np.sum(row_loglik_kind(data.Y, params, kind)))
        return params, ll, est.converged, est.iterations
    if kind is ModelKind.GaussianPPCA and data.complete:
        est = fit_gaussian_ppca(data, k)
        params = ModelParams.create(est.W_hat, est.mu_hat, est.sigma2_hat)
        ll = float(np.sum(row_loglik_kind(data.Y, params, kind)))
        return params, ll, True, 0
    if kind is ModelKind.SkewTGStSimplified:
        if not data.complete:
            raise ValidationError("SkewTGStSimplified needs complete data")
        points = product_grid(k, cfg.delta_grid)
        best, _ = fit_skew_t_grid(data, k, float(nu_eps[0]), float(nu_x[0]), points, cfg.em)
        return best.params, best.loglik, best.converged, best.iterations
    res = fit(data, kind, initialize(data, k, nu_eps, nu_x), cfg.em)
    return res.params, res.loglik, res.converged, res.iterations


def eigen_report(params: ModelParams, kind: ModelKind, columns: list) -> dict:
    rep = model_covariance(params, kind)
    out = {"defined": rep.defined, "columns": columns}
    if rep.defined["cov"]:
        shares, ratios = proportion_of_variance(np.clip(rep.eigvals, 0.0, None))
        out.update(cov=rep.cov, eigvals=rep.eigvals, eigvecs=rep.eigvecs, proportion=shares, ratio=ratios)
    else:
        out.update(cov=None, eigvals=None, eigvecs=None, proportion=None, ratio=None)
    return out


def fit_command(cfg: RunConfig) -> int:
    panel = read_panel(cfg.input_path)
    Y = panel.Y
    report_std = None
    if cfg.standardize:
        Y, loc, scale = standardize(Y)
        report_std = {"location": loc, "scale": scale}
    data = DataSet(Y)
    kind = ModelKind.parse(cfg.kind)
    groups = read_groups(cfg.nu_groups, panel.columns) if cfg.nu_groups else None
    combos = _nu_combinations(kind, cfg.nu_grid, groups, data.d, cfg.k)
    grid_rows, failures = [], []
    best = None
    for nu_eps, nu_x in combos:
        entry = {"nu_eps": _nu_list(nu_eps), "nu_x": _nu_list(nu_x)}
        try:
            params, ll, conv, its = _fit_one(data, kind, cfg.k, nu_eps, nu_x, cfg)
        except (ValidationError, ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
            if isinstance(exc, ValidationError) and "complete" in str(exc):
                raise
            entry.update(loglik=None, converged=False, iterations=0, error=str(exc))
            failures.append(entry)
            grid_rows.append(entry)
            continue
        entry.update(loglik=ll, converged=bool(conv), iterations=int(its))
        if not conv:
            failures.append(entry)
        grid_rows.append(entry)
        if best is None or ll > best[1]:
            best = (params, ll, conv)
    if best is None:
        raise RuntimeError("all fits failed")
    params, ll, _ = best
    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind.value,
        "k": cfg.k,
        "columns": panel.columns,
        "index_name": panel.index_name,
        "n_rows": data.N,
        "n_missing": int((~data.mask).sum()),
        "quad_n": cfg.quad_n,
        "standardization": report_std,
        "grid": grid_rows,
        "params": params.to_dict(),
        "loglik": ll,
        "eigen": eigen_report(params, kind, panel.columns),
        "failures": failures,
    }
    write_json(cfg.output_path, report)
    return 0 if not failures else 3


# --------------------------------------------------------------------------
# decompose


def _load_params(path: str):
    obj = read_json(path)
    if "params" in obj:
        kind = ModelKind.parse(obj.get("kind", "GStGeneral"))
        columns = obj.get("columns")
        params = ModelParams.from_dict(obj["params"])
    else:
        params = ModelParams.from_dict(obj)
        kind = ModelKind.parse(obj["kind"]) if "kind" in obj else None
        columns = obj.get("columns")
    if kind is None:
        from .core_types import collapse_kind

        kind = collapse_kind(params)
    columns = columns or [f"y{i + 1}" for i in range(params.d)]
    return params, kind, columns


def decompose_command(cfg: RunConfig) -> int:
    params, kind, columns = _load_params(cfg.input_path)
    rep = eigen_report(params, kind, columns)
    m = params.d if cfg.n is None else min(cfg.n, params.d)
    names = [f"v{j + 1}" for j in range(m)]
    rows = []
    defined = bool(rep["defined"]["cov"])
    for i, col in enumerate(columns):
        row = {"row": col}
        for j, nm in enumerate(names):
            row[nm] = rep["eigvecs"][i, j] if defined else math.nan
        row["defined"] = defined
        rows.append(row)
    for label, key in (("eigenvalue", "eigvals"), ("ratio", "ratio"), ("proportion", "proportion")):
        row = {"row": label}
        for j, nm in enumerate(names):
            row[nm] = rep[key][j] if defined else math.nan
        row["defined"] = defined
        rows.append(row)
    write_table(cfg.output_path, rows)
    return 0


# --------------------------------------------------------------------------
# standardize


def standardize_command(cfg: RunConfig) -> int:
    panel = read_panel(cfg.input_path)
    Z, loc, scale = standardize(panel.Y)
    write_panel(cfg.output_path, Panel(panel.columns, Z, panel.index, panel.index_name))
    report = [{"column": c, "location": float(a), "scale": float(b)} for c, a, b in zip(panel.columns, loc, scale)]
    base, _ = os.path.splitext(cfg.output_path)
    write_table(base + "_scales.csv", report)
    return 0


# --------------------------------------------------------------------------
# simulate


def _default_params(nu_eps=4.0, nu_x=4.0):
    return ModelParams.create(S1_W, np.zeros(S1_W.shape[0]), S1_SIGMA2, nu_eps=nu_eps, nu_x=nu_x)


def simulate_command(cfg: RunConfig) -> int:
    if cfg.input_path:
        params, kind, columns = _load_params(cfg.input_path)
    else:
        params, kind = _default_params(), ModelKind.StudentTGSt
        columns = [f"y{i + 1}" for i in range(params.d)]
    kind = ModelKind.parse(cfg.extra.get("sim_kind") or kind)
    data = simulate_params(params, cfg.n or 1000, cfg.seed, kind)
    if cfg.missing_rate > 0:
        data = mask_mar(data, cfg.missing_rate, cfg.seed)
    write_panel(cfg.output_path, Panel(columns, np.where(data.mask, data.Y, np.nan)))
    return 0


# --------------------------------------------------------------------------
# influence studies


def _nu_label(nu) -> str:
    return "_".join("inf" if np.isinf(x) else f"{x:g}" for x in np.atleast_1d(nu))


def _s1_table(cfg: RunConfig, M: int):
    results = []
    for idx, (label, kind, ne, nx) in enumerate(s1_cases()):
        params = ModelParams.create(S1_W, np.zeros(3), S1_SIGMA2, nu_eps=ne, nu_x=nx)
        data = simulate_case(params, kind, M, cfg.seed, idx)
        results.append((label, influence_report(data, params, kind, cfg.quad_n)))
    labels = ["sigma2"] + [f"w{i + 1}" for i in range(6)]
    # W is flattened column-major; the table lists w1..w6 row by row
    order = [0] + [1 + i + 3 * j for i in range(3) for j in range(2)]
    rows = []
    for measure in ("asy_var", "gross_error", "local_shift"):
        for pos, name in zip(order, labels):
            row = {"measure": measure, "parameter": name}
            for model in ("Gaussian", "Student-t", "Grouped-t"):
                vals = [getattr(r, measure)[pos] for lab, r in results if lab == model]
                row[model] = float(np.median(vals))
            rows.append(row)
    return rows


def _s2_long(cfg: RunConfig, M: int):
    rows = []
    grid = (4.0, 100.0)
    idx = 0
    for ne in itertools.product(grid, repeat=3):
        for nx in itertools.product(grid, repeat=2):
            truth = ModelParams.create(S1_W, np.zeros(3), S1_SIGMA2, nu_eps=ne, nu_x=nx)
            data = simulate_case(truth, ModelKind.GroupedT, M, cfg.seed, idx)
            idx += 1
            models = [("Gaussian", ModelKind.GaussianPPCA, np.inf)]
            models += [("Student-t", ModelKind.StudentTPPCA, nu) for nu in (4.0, 10.0, 20.0, 100.0)]
            models += [("Grouped-t", ModelKind.GroupedT, None)]
            for label, kind, nu in models:
                params = truth if nu is None else truth.replace(nu_eps=np.full(3, nu), nu_x=np.full(2, nu))
                rep = influence_report(data, params, kind, cfg.quad_n)
                for j, par in enumerate(rep.labels):
                    rows.append(
                        {
                            "model": label,
                            "model_nu": "" if nu is None else _nu_label(nu),
                            "nu_eps": _nu_label(ne),
                            "nu_x": _nu_label(nx),
                            "parameter": par,
                            "asy_var": rep.asy_var[j],
                            "gross_error": rep.gross_error[j],
                            "local_shift": rep.local_shift[j],
                        }
                    )
    return rows


def influence_command(cfg: RunConfig) -> int:
    M = cfg.n or 1000
    rows = _s1_table(cfg, M) if cfg.scenario.upper() == "S1" else _s2_long(cfg, M)
    write_table(cfg.output_path, rows)
    return 0


def mse_study_command(cfg: RunConfig) -> int:
    if cfg.input_path:
        truth, data_kind, _ = _load_params(cfg.input_path)
    else:
        truth, data_kind = _default_params(), ModelKind.StudentTGSt
    kinds = [ModelKind.GaussianPPCA, ModelKind.StudentTPPCA, data_kind]
    rows = mse_study(truth, kinds, cfg.n_list, cfg.reps, cfg.seed, data_kind=data_kind, config=cfg.em)
    write_table(cfg.output_path, rows)
    failed = sum(r["n_failed"] for r in rows)
    return 0 if failed == 0 else 3


# --------------------------------------------------------------------------
# entry point


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gstppca", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--input")
        p.add_argument("--output", required=True)
        p.add_argument("--kind", default="GroupedT")
        p.add_argument("--k", type=int, default=1)
        p.add_argument("--nu-grid", type=_floats, default=DEFAULT_NU_GRID)
        p.add_argument("--nu-groups")
        p.add_argument("--delta-grid", type=_floats, default=DEFAULT_MARGINAL_GRID)
        p.add_argument("--quad-n", type=int, default=32)
        p.add_argument("--max-iter", type=int, default=500)
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--standardize", action="store_true")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        p.add_argument("--n", type=int, help="rows to simulate, sample size M, or eigenvectors to report")
        p.add_argument("--missing-rate", type=float, default=0.0)
        p.add_argument("--reps", type=int, default=50)
        p.add_argument("--n-list", type=_ints, default=(100, 1000, 5000))
        p.add_argument("--scenario", choices=("S1", "S2"), default="S1")
        p.add_argument("--sim-kind")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def config_from_args(args) -> RunConfig:
    return RunConfig(
        command=args.command,
        input_path=args.input,
        output_path=args.output,
        kind=ModelKind.parse(args.kind),
        k=args.k,
        nu_grid=args.nu_grid,
        nu_groups=args.nu_groups,
        delta_grid=args.delta_grid,
        quad_n=args.quad_n,
        max_iter=args.max_iter,
        tol=args.tol,
        seed=args.seed,
        standardize=args.standardize,
        threads=args.threads,
        n=args.n,
        missing_rate=args.missing_rate,
        reps=args.reps,
        n_list=args.n_list,
        scenario=args.scenario,
        extra={"sim_kind": args.sim_kind},
    )


HANDLERS = {
    "fit": fit_command,
    "simulate": simulate_command,
    "influence": influence_command,
    "decompose": decompose_command,
    "standardize": standardize_command,
    "mse-study": mse_study_command,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        return HANDLERS[cfg.command](cfg)
    except (ValidationError, ValueError, OSError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
