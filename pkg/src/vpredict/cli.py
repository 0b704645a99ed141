"""Command-line driver: ``vpredict gen-data | grid | fit | eval | export | verify``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 data or
schema error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import io
from .evaluate import METHODS, compare_methods, predictive_for
from .exact import DEFAULT_GRID, GridError, GridSpec, bounded_prior, build_converged_grid
from .methods import (FitResult, TrainConfig, TrainingError, VpState, train_bayesdark, train_map, train_mfvi,
                      train_uncond_vp, train_vp)
from .model import PriorSpec, SinusoidParams, generate_dataset, mean_function
from .variational import AugmentedPosteriorConfig, MeanFieldGaussian, gh_expectation
from .verify import SUITES, bounds_suite, candidates_suite, gradients_suite, vp_state_of

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3
CURVE_POINTS = 201

log = logging.getLogger("vpredict")


class UsageError(Exception):
    pass


# run configuration -------------------------------------------------------


@dataclass
class RunConfig:
    """Settings read from ``--config``; command-line flags override them."""

    dataset: str | dict | None = None
    grid: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    out_dir: str | None = None
    seed: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if d.get("schema_version") != io.SCHEMA_VERSION:
            raise UsageError(f"config schema_version must be {io.SCHEMA_VERSION}")
        known = {f.name for f in fields(cls)} | {"schema_version"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**{k: v for k, v in d.items() if k != "schema_version"})
        bad = sorted(set(cfg.grid) - {"log_f_range", "phi_range", "resolution"})
        if bad:
            raise UsageError(f"unknown grid keys: {', '.join(bad)}")
        train_keys = {f.name for f in fields(TrainConfig)}
        for key, sub in cfg.train.items():
            if isinstance(sub, dict):
                if key not in io.METHOD_NAMES:
                    raise UsageError(f"unknown method section in train: {key}")
                extra = sorted(set(sub) - train_keys)
            else:
                extra = [] if key in train_keys else [key]
            if extra:
                raise UsageError(f"unknown train keys: {', '.join(extra)}")
        if isinstance(cfg.dataset, dict):
            extra = sorted(set(cfg.dataset) - {"seed", "n", "true_log_f", "true_phi"})
            if extra:
                raise UsageError(f"unknown dataset keys: {', '.join(extra)}")
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise UsageError("config must be a JSON object")
        return cls.from_dict(d)

    def train_config(self, method: str, seed: int | None, overrides: dict) -> TrainConfig:
        base = {k: v for k, v in self.train.items() if not isinstance(v, dict)}
        base.update(self.train.get(method, {}))
        base.update({k: v for k, v in overrides.items() if v is not None})
        if seed is not None:
            base["seed"] = seed
        elif self.seed is not None:
            base.setdefault("seed", self.seed)
        try:
            return TrainConfig(**base)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc

    def grid_spec(self, args) -> GridSpec:
        g = dict(self.grid)
        for key in ("log_f_range", "phi_range", "resolution"):
            if getattr(args, key, None) is not None:
                g[key] = getattr(args, key)
        try:
            return GridSpec(**{k: tuple(v) for k, v in g.items()}) if g else DEFAULT_GRID
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad grid spec: {exc}") from exc


def _run_config(args) -> RunConfig:
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


def _dataset(args, rc: RunConfig):
    if getattr(args, "data", None):
        return io.load_dataset(args.data)
    if isinstance(rc.dataset, str):
        return io.load_dataset(rc.dataset)
    if isinstance(rc.dataset, dict):
        d = rc.dataset
        return generate_dataset(d.get("seed", 0), d.get("n", 8),
                                SinusoidParams(d.get("true_log_f", 0.0), d.get("true_phi", 1.0)))
    return io.load_fixture()


def _out_path(args, rc: RunConfig, default: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(rc.out_dir or ".") / default


def _check_writable(path: Path):
    if not path.parent.exists():
        raise OSError(f"output directory {path.parent} does not exist")


def _grid_for(args, dataset, rc: RunConfig):
    if getattr(args, "grid", None):
        grid = io.load_grid(args.grid)
        if not (np.array_equal(grid.dataset.xs, dataset.xs) and np.array_equal(grid.dataset.ys, dataset.ys)):
            raise io.SchemaError(f"grid {args.grid} was built from a different dataset")
        return grid
    spec = rc.grid_spec(args)
    grid, _ = build_converged_grid(dataset, bounded_prior(PriorSpec(), spec), spec)
    return grid


# subcommands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("n must be ≥ 1")
    ds = generate_dataset(args.seed, args.n, SinusoidParams(args.true_log_f, args.true_phi))
    out = Path(args.out)
    _check_writable(out)
    digest = io.save_dataset(out, ds)
    print(out)
    print(f"sha256 {digest}")
    return EXIT_OK


def cmd_grid(args) -> int:
    rc = _run_config(args)
    ds = _dataset(args, rc)
    spec = rc.grid_spec(args)
    out = _out_path(args, rc, "grid.csv")
    _check_writable(out)
    grid, delta = build_converged_grid(ds, bounded_prior(PriorSpec(), spec), spec)
    digest = io.save_grid(out, grid)
    print(out)
    print(f"log_evidence {grid.log_evidence:.17g}")
    print(f"resolution {grid.spec.resolution[0]}x{grid.spec.resolution[1]} (doubling change {delta:.3g})")
    print(f"sha256 {digest}")
    return EXIT_OK


def _summary(fit: FitResult) -> str:
    p = io.params_to_dict(fit.method, fit.params)
    final = fit.train_curve[-1][1] if fit.train_curve else float("nan")
    return f"{fit.method}: final loss {final:.6g}; params {json.dumps(p)}"


def run_fit(method: str, dataset, cfg: TrainConfig, grid=None, spec: GridSpec = DEFAULT_GRID) -> FitResult:
    prior = bounded_prior(PriorSpec(), spec)
    if method == "map":
        return train_map(dataset, prior, cfg)
    if method == "mfvi":
        return train_mfvi(dataset, prior, cfg)
    if method == "bayesdark":
        return train_bayesdark(grid, cfg)
    if method == "vp":
        return train_vp(dataset, prior, cfg)
    if method == "uncondvp":
        return train_uncond_vp(dataset, prior, cfg)
    raise UsageError(f"invalid method {method!r}; choose from {', '.join(io.METHOD_NAMES)}")


def cmd_fit(args) -> int:
    if args.method not in io.METHOD_NAMES:
        raise UsageError(f"invalid method {args.method!r}; choose from {', '.join(io.METHOD_NAMES)}")
    if args.method == "bayesdark" and not args.grid:
        raise UsageError("bayesdark needs --grid")
    rc = _run_config(args)
    cfg = rc.train_config(args.method, args.seed, {"steps": args.steps, "learning_rate": args.learning_rate,
                                                    "mc_draws_per_step": args.mc_draws})
    ds = _dataset(args, rc)
    grid = io.load_grid(args.grid) if args.grid else None
    spec = grid.spec if grid is not None else rc.grid_spec(args)
    out = _out_path(args, rc, f"fit_{args.method}.json")
    _check_writable(out)
    fit = run_fit(args.method, ds, cfg, grid, spec)
    digest = io.save_fit(out, fit)
    print(out)
    print(_summary(fit))
    if args.method == "vp":
        c = fit.params.aug_cfg
        print(f"lambda {c.step_size:.6g} (reference {io.REFERENCE_LAMBDA}), "
              f"beta {c.inverse_temperature:.6g} (reference {io.REFERENCE_BETA})")
    print(f"sha256 {digest}")
    return EXIT_OK


def _load_fits(paths) -> dict:
    fits = {}
    for p in paths:
        fit = io.load_fit(p)
        fits[fit.method] = fit
    return fits


def cmd_eval(args) -> int:
    rc = _run_config(args)
    ds = _dataset(args, rc)
    grid = _grid_for(args, ds, rc)
    fits = _load_fits(args.fits)
    missing = [m for m in METHODS if m != "bayes" and m not in fits]
    if missing:
        raise UsageError(f"missing fits: {', '.join(missing)}")
    meta = {"created": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    vp = fits["vp"].params
    meta["vp_lambda"] = vp.aug_cfg.step_size
    meta["vp_beta"] = vp.aug_cfg.inverse_temperature
    meta["reference_lambda"] = io.REFERENCE_LAMBDA
    meta["reference_beta"] = io.REFERENCE_BETA
    report = compare_methods(ds, grid, fits, n_mc=args.n_mc, n_bound=args.n_bound, seed=args.seed or 0,
                             bounds=not args.no_bounds, metadata=meta)
    out = _out_path(args, rc, "report.json")
    _check_writable(out)
    digest = io.save_report(out, report)
    io.save_kl_csv(out.with_suffix(".csv"), report)
    for m, v in report.kl.items():
        print(f"{m:>10}  {v:.6g}")
    for b in report.bound_checks:
        print(b.line())
    print(f"sha256 {digest}")
    return EXIT_OK


def _curve(method: str, params, grid, xs: np.ndarray) -> np.ndarray:
    if method == "bayes":
        return np.array([grid.moments(x) for x in xs])
    if method == "mfvi":
        xc = xs[:, None]
        m1 = gh_expectation(params, lambda th: mean_function(xc, th), 20)
        m2 = gh_expectation(params, lambda th: mean_function(xc, th) ** 2, 20)
        return np.column_stack([m1, np.sqrt(1.0 + np.maximum(m2 - m1 * m1, 0.0))])
    p = params.predictive if isinstance(params, VpState) else params
    return np.column_stack([mean_function(xs, p.as_params()), np.ones_like(xs)])


def _gaussian_log_density(eta: MeanFieldGaussian, lf: np.ndarray, ph: np.ndarray) -> np.ndarray:
    v = eta.values()
    out = 0.0
    for t, m, ls in ((lf[:, None], v[0], v[2]), (ph[None, :], v[1], v[3])):
        out = out - 0.5 * ((t - m) / np.exp(ls)) ** 2 - ls - 0.5 * np.log(2 * np.pi)
    return out


def cmd_export(args) -> int:
    rc = _run_config(args)
    ds = _dataset(args, rc)
    grid = _grid_for(args, ds, rc)
    fits = _load_fits(args.fits or [])
    outdir = Path(args.outdir or rc.out_dir or ".")
    if not outdir.is_dir():
        raise OSError(f"output directory {outdir} does not exist")
    xs = np.linspace(0.0, 1.0, CURVE_POINTS)
    methods = {"bayes": None, **{m: f.params for m, f in fits.items()}}
    for m, params in methods.items():
        c = _curve(m, params, grid, xs)
        io.write_csv(outdir / f"curve_{m}.csv", ("x", "mean", "std"), np.column_stack([xs, c]))
    s = args.stride
    lf, ph = grid.spec.centers
    lf, ph = lf[::s], ph[::s]
    LF, PH = np.meshgrid(lf, ph, indexing="ij")
    posts = {"bayes": grid.log_density()[::s, ::s]}
    for m in ("mfvi", "vp", "uncondvp"):
        if m in fits:
            eta = fits[m].params if m == "mfvi" else fits[m].params.eta
            posts[m] = _gaussian_log_density(eta, lf, ph)
    for name, dens in posts.items():
        io.write_csv(outdir / f"posterior_{name}.csv", ("log_f", "phi", "log_density"),
                     np.column_stack([LF.ravel(), PH.ravel(), dens.ravel()]))
    markers = [("true", ds.true_params.log_f, ds.true_params.phi)] if ds.true_params is not None else []
    for m in ("map", "bayesdark", "vp", "uncondvp"):
        if m in fits:
            p = fits[m].params
            p = p.predictive if isinstance(p, VpState) else p
            markers.append((m, p.log_f_hat, p.phi_hat))
    with open(outdir / "markers.csv", "w") as fh:
        fh.write("name,log_f,phi\n")
        for name, a, b in markers:
            fh.write(f"{name},{float(a):.17g},{float(b):.17g}\n")
    print(outdir)
    print(f"curves: {', '.join(methods)}; posteriors: {', '.join(posts)}")
    return EXIT_OK


def cmd_verify(args) -> int:
    rc = _run_config(args)
    suites = SUITES if args.suite == "all" else (args.suite,)
    ds = _dataset(args, rc)
    checks = []
    grid = None
    if "candidates" in suites or "bounds" in suites:
        grid = _grid_for(args, ds, rc)
    if "candidates" in suites:
        checks += candidates_suite(grid, seed=args.seed or 0)
    if "gradients" in suites:
        state = vp_state_of(io.load_fit(args.fit).params) if args.fit else None
        checks += gradients_suite(ds, bounded_prior(PriorSpec(), rc.grid_spec(args)), state, seed=args.seed or 0)
    if "bounds" in suites:
        trained = vp_state_of(io.load_fit(args.fit)) if args.fit else None
        cfg = rc.train_config("vp", args.seed, {})
        checks += bounds_suite(ds, grid, trained, n_bound=args.n_bound, n_mc=args.n_mc, seed=args.seed or 0, cfg=cfg)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


# parser ------------------------------------------------------------------


def _add_grid_flags(p):
    p.add_argument("--log-f-range", dest="log_f_range", nargs=2, type=float, metavar=("LO", "HI"))
    p.add_argument("--phi-range", dest="phi_range", nargs=2, type=float, metavar=("LO", "HI"))
    p.add_argument("--resolution", nargs=2, type=int, metavar=("N_LOGF", "N_PHI"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vpredict", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--true-log-f", type=float, default=0.0)
    p.add_argument("--true-phi", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("grid", help="build the exact posterior grid")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--config")
    _add_grid_flags(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("fit", help="train one method")
    p.add_argument("--method", required=True)
    p.add_argument("--data")
    p.add_argument("--grid")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--mc-draws", type=int)
    _add_grid_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="compare fits against the exact predictive")
    p.add_argument("--data")
    p.add_argument("--grid")
    p.add_argument("--fits", nargs="+", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-mc", type=int, default=2000)
    p.add_argument("--n-bound", type=int, default=10000)
    p.add_argument("--no-bounds", action="store_true")
    _add_grid_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write curve and posterior CSVs for plotting")
    p.add_argument("--data")
    p.add_argument("--grid")
    p.add_argument("--fits", nargs="*")
    p.add_argument("--outdir")
    p.add_argument("--config")
    p.add_argument("--stride", type=int, default=4, help="keep every stride-th grid cell per axis")
    _add_grid_flags(p)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("verify", help="run an invariant suite")
    p.add_argument("--suite", choices=(*SUITES, "all"), default="all")
    p.add_argument("--data")
    p.add_argument("--grid")
    p.add_argument("--fit", help="trained VP fit for the bounds and gradients suites")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-mc", type=int, default=2000)
    p.add_argument("--n-bound", type=int, default=10000)
    _add_grid_flags(p)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vpredict {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.SchemaError, GridError, FileNotFoundError) as exc:
        print(f"vpredict {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, OSError, ValueError) as exc:
        print(f"vpredict {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
