"""File formats: datasets, fits, grids and evaluation reports.

Every JSON file carries ``schema_version``; floats are written with 17
significant digits so doubles survive a round trip bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .evaluate import EvalReport
from .exact import GridSpec, PosteriorGrid, from_log_joint
from .methods import FitResult, PredictiveParams, TrainConfig, VpState
from .model import Dataset, PriorSpec, SinusoidParams
from .variational import AugmentedPosteriorConfig, MeanFieldGaussian

SCHEMA_VERSION = 1
METHOD_NAMES = ("map", "mfvi", "bayesdark", "vp", "uncondvp")
REFERENCE_LAMBDA = 0.004
REFERENCE_BETA = 12.8


class SchemaError(ValueError):
    """A file is malformed or written under another schema version."""


# JSON with fixed float precision -----------------------------------------


def _fmt_float(v: float) -> str:
    if not math.isfinite(v):
        raise ValueError(f"cannot serialize non-finite float {v}")
    s = format(v, ".17g")
    if not any(c in s for c in ".en"):
        s += ".0"
    return s


def _encode(obj, indent: int, level: int) -> str:
    pad = "\n" + " " * (indent * (level + 1))
    end = "\n" + " " * (indent * level)
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{" + pad + ("," + pad).join(items) + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.number)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        return "[" + pad + ("," + pad).join(_encode(v, indent, level + 1) for v in obj) + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    return _encode(obj, indent, 0) + "\n"


def write_json(path, obj) -> str:
    """Write ``obj`` and return the sha256 digest of the bytes written."""
    text = dumps(obj)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_json(path, kind: str) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise SchemaError(f"{path}: expected a JSON object")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{path}: {kind} schema_version {version!r}, expected {SCHEMA_VERSION}")
    return d


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _need(d: dict, keys, where: str):
    missing = [k for k in keys if k not in d]
    if missing:
        raise SchemaError(f"{where}: missing {', '.join(missing)}")


# datasets ----------------------------------------------------------------


def dataset_to_dict(ds: Dataset) -> dict:
    tp = ds.true_params
    return {"schema_version": SCHEMA_VERSION, "seed": ds.seed, "n": ds.n,
            "true_log_f": None if tp is None else float(tp.log_f),
            "true_phi": None if tp is None else float(tp.phi),
            "xs": ds.xs.tolist(), "ys": ds.ys.tolist()}


def dataset_from_dict(d: dict, where: str = "dataset") -> Dataset:
    _need(d, ("seed", "n", "true_log_f", "true_phi", "xs", "ys"), where)
    tp = None if d["true_log_f"] is None else SinusoidParams(d["true_log_f"], d["true_phi"])
    try:
        ds = Dataset(np.array(d["xs"], dtype=float), np.array(d["ys"], dtype=float), d["seed"], tp)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from exc
    if ds.n != d["n"]:
        raise SchemaError(f"{where}: n={d['n']} but {ds.n} points stored")
    return ds


def save_dataset(path, ds: Dataset) -> str:
    return write_json(path, dataset_to_dict(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_dict(read_json(path, "dataset"), str(path))


# fits --------------------------------------------------------------------


def _eta_dict(eta: MeanFieldGaussian) -> dict:
    v = eta.values()
    return {"mu": v[:2].tolist(), "log_sigma": v[2:].tolist()}


def _eta_from(d: dict) -> MeanFieldGaussian:
    return MeanFieldGaussian(tuple(d["mu"]), tuple(d["log_sigma"]))


def params_to_dict(method: str, params) -> dict:
    if method in ("map", "bayesdark"):
        return {"log_f_hat": float(params.log_f_hat), "phi_hat": float(params.phi_hat)}
    if method == "mfvi":
        return _eta_dict(params)
    if method in ("vp", "uncondvp"):
        p = params.predictive
        cfg = params.aug_cfg
        out = {"predictive": {"log_f_hat": float(p.log_f_hat), "phi_hat": float(p.phi_hat)},
               "eta": _eta_dict(params.eta), "log_lambda": float(cfg.log_lambda), "log_beta": float(cfg.log_beta),
               "lambda": cfg.step_size, "beta": cfg.inverse_temperature}
        return out
    raise SchemaError(f"unknown method {method!r}")


def params_from_dict(method: str, d: dict):
    try:
        if method in ("map", "bayesdark"):
            return PredictiveParams(d["log_f_hat"], d["phi_hat"])
        if method == "mfvi":
            return _eta_from(d)
        if method in ("vp", "uncondvp"):
            p = d["predictive"]
            return VpState(PredictiveParams(p["log_f_hat"], p["phi_hat"]), _eta_from(d["eta"]),
                           AugmentedPosteriorConfig(d["log_lambda"], d["log_beta"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad {method} params: {exc}") from exc
    raise SchemaError(f"unknown method {method!r}")


def fit_to_dict(fit: FitResult) -> dict:
    cfg = fit.config.to_dict() if fit.config is not None else {}
    out = {"schema_version": SCHEMA_VERSION, "method": fit.method, "params": params_to_dict(fit.method, fit.params),
           "train_curve": [{"step": int(s), "loss": float(v)} for s, v in fit.train_curve],
           "config_echo": cfg, "seed": cfg.get("seed")}
    if fit.method == "vp":
        out["reference"] = {"lambda": REFERENCE_LAMBDA, "beta": REFERENCE_BETA}
    return out


def fit_from_dict(d: dict, where: str = "fit") -> FitResult:
    _need(d, ("method", "params", "train_curve", "config_echo", "seed"), where)
    if d["method"] not in METHOD_NAMES:
        raise SchemaError(f"{where}: unknown method {d['method']!r}")
    try:
        cfg = TrainConfig(**d["config_echo"]) if d["config_echo"] else None
    except TypeError as exc:
        raise SchemaError(f"{where}: bad config_echo ({exc})") from exc
    curve = [(c["step"], c["loss"]) for c in d["train_curve"]]
    return FitResult(d["method"], params_from_dict(d["method"], d["params"]), curve, cfg)


def save_fit(path, fit: FitResult) -> str:
    return write_json(path, fit_to_dict(fit))


def load_fit(path) -> FitResult:
    return fit_from_dict(read_json(path, "fit"), str(path))


# grids -------------------------------------------------------------------


def _sidecar_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".json")


def grid_sidecar(grid: PosteriorGrid) -> dict:
    s = grid.spec
    pr = grid.prior
    return {"schema_version": SCHEMA_VERSION,
            "spec": {"log_f_range": list(s.log_f_range), "phi_range": list(s.phi_range),
                     "resolution": list(s.resolution)},
            "log_evidence": grid.log_evidence,
            "prior": {"mean": list(pr.mean), "variance": list(pr.variance),
                      "bounds": None if pr.bounds is None else [list(b) for b in pr.bounds]},
            "dataset": dataset_to_dict(grid.dataset)}


def save_grid(csv_path, grid: PosteriorGrid) -> str:
    """CSV ``log_f,phi,log_density`` row-major over the grid, plus a JSON sidecar.

    Returns the digest of the CSV.
    """
    lf, ph = grid.spec.centers
    LF, PH = np.meshgrid(lf, ph, indexing="ij")
    table = np.column_stack([LF.ravel(), PH.ravel(), grid.log_density().ravel()])
    with open(csv_path, "w", newline="") as fh:
        fh.write("log_f,phi,log_density\n")
        np.savetxt(fh, table, fmt="%.17g", delimiter=",")
    write_json(_sidecar_path(csv_path), grid_sidecar(grid))
    return file_digest(csv_path)


def load_grid(csv_path) -> PosteriorGrid:
    side = read_json(_sidecar_path(csv_path), "grid")
    _need(side, ("spec", "log_evidence", "prior", "dataset"), "grid sidecar")
    spec = GridSpec(tuple(side["spec"]["log_f_range"]), tuple(side["spec"]["phi_range"]),
                    tuple(side["spec"]["resolution"]))
    pr = side["prior"]
    prior = PriorSpec(tuple(pr["mean"]), tuple(pr["variance"]),
                      None if pr["bounds"] is None else tuple(tuple(b) for b in pr["bounds"]))
    with open(csv_path) as fh:
        header = fh.readline().strip()
        if header != "log_f,phi,log_density":
            raise SchemaError(f"{csv_path}: unexpected header {header!r}")
        table = np.loadtxt(fh, delimiter=",", ndmin=2)
    n = spec.resolution[0] * spec.resolution[1]
    if table.shape != (n, 3):
        raise SchemaError(f"{csv_path}: expected {n} rows of 3 columns, got {table.shape}")
    lf, ph = spec.centers
    LF, PH = np.meshgrid(lf, ph, indexing="ij")
    if not (np.allclose(table[:, 0], LF.ravel(), atol=1e-12) and np.allclose(table[:, 1], PH.ravel(), atol=1e-12)):
        raise SchemaError(f"{csv_path}: coordinates do not match the sidecar grid spec")
    log_joint = table[:, 2].reshape(spec.resolution) + side["log_evidence"]
    return from_log_joint(spec, log_joint, dataset_from_dict(side["dataset"], "grid sidecar"), prior)


# reports -----------------------------------------------------------------


def save_report(path, report: EvalReport) -> str:
    return write_json(path, {"schema_version": SCHEMA_VERSION, **report.to_dict()})


def load_report(path) -> EvalReport:
    d = read_json(path, "report")
    _need(d, ("kl", "bound_checks", "metadata"), str(path))
    return EvalReport.from_dict(d)


def save_kl_csv(path, report: EvalReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "expected_kl_nats"])
        for m, v in report.kl.items():
            w.writerow([m, _fmt_float(v)])


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_fmt_float(float(v)) for v in r) + "\n")


# fixture -----------------------------------------------------------------

FIXTURE_SEED = 0


def load_fixture() -> Dataset:
    """The frozen benchmark dataset (seed 0, eight points, true log f = 0, phi = 1)."""
    from importlib.resources import files
    text = files("vpredict").joinpath("data/fixture.json").read_text()
    return dataset_from_dict(json.loads(text), "fixture")
