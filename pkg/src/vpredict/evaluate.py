"""Compare predictive densities against the exact oracle and check the KL bound chain."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import ndimage
from scipy.special import ndtr

from .exact import PosteriorGrid, augmented_grid, bounded_prior, predictive_density_on
from .methods import (_EVAL_STREAM, FitResult, PredictiveParams, VpNoise, VpState, mfvi_predictive_density,
                      vp_loss)
from .model import Dataset, PriorSpec, SinusoidParams, log_joint, log_likelihood_point, mean_function
from .variational import DEFAULT_GH_ORDER, MeanFieldGaussian, gh_expectation, maml_update

METHODS = ("map", "bayes", "mfvi", "bayesdark", "vp", "uncondvp")
EVAL_GH_ORDER = 20
KL_FLOOR = -1e-6
QUAD_CUSHION = 1e-3


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class YQuadrature:
    lo: float = -9.0
    hi: float = 9.0
    nodes: int = 2001

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.nodes)


@dataclass
class BoundCheck:
    name: str
    lhs: float
    rhs: float
    slack: float
    passed: bool

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name}: lhs={self.lhs:.10g} rhs={self.rhs:.10g} slack={self.slack:.3g}"


@dataclass
class EvalReport:
    kl: dict = field(default_factory=dict)
    bound_checks: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kl": dict(self.kl), "bound_checks": [asdict(b) for b in self.bound_checks],
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(dict(d["kl"]), [BoundCheck(**b) for b in d["bound_checks"]], dict(d["metadata"]))


DensityFn = Callable[[float, np.ndarray], np.ndarray]


class OracleTable:
    """Exact posterior predictive tabulated on the evaluation (x, y) nodes."""

    def __init__(self, grid: PosteriorGrid, x_nodes: int = 101, yq: YQuadrature = YQuadrature()):
        self.grid = grid
        self.xs = np.linspace(0.0, 1.0, x_nodes)
        self.yq = yq
        self.ys = yq.ys
        self.density = np.array([predictive_density_on(grid, x, self.ys) for x in self.xs])

    def __call__(self, x: float, ys: np.ndarray) -> np.ndarray:
        i = np.flatnonzero(np.isclose(self.xs, x, rtol=0, atol=1e-15))
        if i.size and ys is self.ys:
            return self.density[i[0]]
        return predictive_density_on(self.grid, x, ys)


def _kl_1d(q: np.ndarray, p: np.ndarray, ys: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = np.where(q > 0, q * (np.log(q) - np.log(p)), 0.0)
    return float(np.trapezoid(integrand, ys))


def expected_predictive_kl(density_q: DensityFn, grid: PosteriorGrid | OracleTable, x_nodes: int = 101,
                           yq: YQuadrature = YQuadrature()) -> float:
    """Average over equispaced x in [0, 1] of KL[q(.|x) || p(.|x, D)], trapezoid in y."""
    table = grid if isinstance(grid, OracleTable) else None
    if table is not None and (table.xs.size != x_nodes or table.yq != yq):
        table = None
    base = grid.grid if isinstance(grid, OracleTable) else grid
    xs = np.linspace(0.0, 1.0, x_nodes)
    ys = yq.ys
    total = 0.0
    for i, x in enumerate(xs):
        p = table.density[i] if table is not None else predictive_density_on(base, x, ys)
        total += _kl_1d(np.asarray(density_q(x, ys), dtype=float), p, ys)
    kl = total / x_nodes
    if kl < KL_FLOOR:
        raise EvaluationError(f"quadrature too coarse: expected KL {kl:.3g} < {KL_FLOOR}")
    return kl


def point_predictive(params: PredictiveParams | SinusoidParams) -> DensityFn:
    theta = params.as_params() if isinstance(params, PredictiveParams) else params

    def density(x, ys):
        return np.exp(log_likelihood_point(ys, x, theta))
    return density


def mfvi_predictive(eta: MeanFieldGaussian, order: int = EVAL_GH_ORDER) -> DensityFn:
    def density(x, ys):
        return mfvi_predictive_density(eta, x, ys, order)
    return density


def predictive_for(method: str, params, grid: PosteriorGrid) -> DensityFn:
    if method == "bayes":
        return lambda x, ys: predictive_density_on(grid, x, ys)
    if method == "mfvi":
        return mfvi_predictive(params)
    if isinstance(params, VpState):
        return point_predictive(params.predictive)
    return point_predictive(params)


def hpd_components(grid: PosteriorGrid, level: float) -> tuple[np.ndarray, int]:
    """Connected components (8-neighbour) of the smallest cell set holding ``level`` of the posterior."""
    flat = np.sort(grid.masses.ravel())[::-1]
    cut = flat[min(np.searchsorted(np.cumsum(flat), level), flat.size - 1)]
    return ndimage.label(grid.masses >= cut, structure=np.ones((3, 3), dtype=int))


def gaussian_cell_masses(eta: MeanFieldGaussian, grid: PosteriorGrid) -> np.ndarray:
    """Mass q assigns to each grid cell, exact per-axis normal CDF differences."""
    v = eta.values()
    out = []
    for centers, h, m, ls in zip(grid.spec.centers, grid.spec.steps, v[:2], v[2:]):
        s = np.exp(ls)
        out.append(ndtr((centers + h / 2 - m) / s) - ndtr((centers - h / 2 - m) / s))
    return out[0][:, None] * out[1][None, :]


def mode_seeking_check(eta: MeanFieldGaussian, grid: PosteriorGrid, level: float = 0.95,
                       required: float = 0.95) -> BoundCheck:
    """q's own mass inside the connected HPD component that contains q's mean."""
    labels, _ = hpd_components(grid, level)
    try:
        i, j = grid.index_of(eta.mean_params())
    except ValueError:
        return BoundCheck("MFVI mass in one posterior super-level component", 0.0, required, 0.0, False)
    if labels[i, j] == 0:
        return BoundCheck("MFVI mass in one posterior super-level component", 0.0, required, 0.0, False)
    comp = labels == labels[i, j]
    inside = float(gaussian_cell_masses(eta, grid)[comp].sum())
    name = (f"MFVI mass in one posterior super-level component "
            f"({level:.0%} HPD, component posterior mass {grid.masses[comp].sum():.3f})")
    return BoundCheck(name, inside, required, 0.0, bool(inside >= required))


# stochastic bound checks --------------------------------------------------


def _se(v: np.ndarray) -> float:
    return float(np.std(v, ddof=1) / np.sqrt(v.size))


def eval_noise(seed: int, n: int) -> VpNoise:
    return VpNoise.draw(np.random.default_rng([seed, _EVAL_STREAM]), n)


def loss_draws(state: VpState, dataset: Dataset, n: int, seed: int = 0, gh_order: int = DEFAULT_GH_ORDER,
               prior: PriorSpec = PriorSpec(), chunk: int = 2000) -> np.ndarray:
    """``n`` independent single-draw loss values."""
    noise = eval_noise(seed, n)
    out = [np.atleast_1d(vp_loss(state, dataset, noise[s:s + chunk], gh_order, prior))
           for s in range(0, n, chunk)]
    return np.concatenate(out)


def evidence_bound_check(state: VpState, dataset: Dataset, grid: PosteriorGrid, n: int = 10000, seed: int = 0,
                         gh_order: int = DEFAULT_GH_ORDER, name: str = "evidence bound") -> BoundCheck:
    """mean loss + log p(D) >= 0, allowing three standard errors."""
    draws = loss_draws(state, dataset, n, seed, gh_order, grid_prior(grid))
    lhs = float(draws.mean() + grid.log_evidence)
    slack = 3.0 * _se(draws)
    return BoundCheck(name, lhs, 0.0, slack, bool(lhs >= -slack))


def grid_prior(grid: PosteriorGrid) -> PriorSpec:
    return bounded_prior(grid.prior, grid.spec)


@dataclass
class Decomposition:
    """Per-draw estimates of the joint KL (A), predictive KL (B) and augmented-posterior KL (C)."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    @property
    def means(self) -> tuple[float, float, float]:
        return float(self.a.mean()), float(self.b.mean()), float(self.c.mean())


def decomposition_draws(state: VpState, dataset: Dataset, grid: PosteriorGrid, n_mc: int, seed: int = 0,
                        gh_order: int = DEFAULT_GH_ORDER, kl_order: int = 40) -> Decomposition:
    prior = grid_prior(grid)
    noise = eval_noise(seed, n_mc)
    a = np.asarray(vp_loss(state, dataset, noise, gh_order, prior), dtype=float) + grid.log_evidence
    pred = state.predictive.as_params()
    ys = mean_function(noise.x, pred) + noise.eps_y
    log_q_ys = log_likelihood_point(ys, noise.x, pred)
    etas = maml_update(state.eta, noise.x, ys, state.aug_cfg, gh_order, prior)
    b = np.empty(n_mc)
    c = np.empty(n_mc)
    for i in range(n_mc):
        x, y = float(noise.x[i]), float(ys[i])
        log_z_aug = augmented_grid(grid, x, y).log_evidence
        b[i] = log_q_ys[i] - (log_z_aug - grid.log_evidence)
        eta_aug = MeanFieldGaussian.from_vector([float(np.broadcast_to(v, ys.shape)[i]) for v in etas.as_vector()])
        aug_data = Dataset(np.append(dataset.xs, x), np.append(dataset.ys, y))
        neg_entropy = -float(np.sum(eta_aug.log_sigma)) - 1.0 - np.log(2.0 * np.pi)
        cross = float(gh_expectation(eta_aug, lambda th: log_joint(aug_data, th, prior), kl_order))
        c[i] = neg_entropy - cross + log_z_aug
    return Decomposition(a, b, c)


def bound_decomposition_check(vp: VpState, dataset: Dataset, grid: PosteriorGrid, n_mc: int = 2000,
                              seed: int = 0, gh_order: int = DEFAULT_GH_ORDER) -> list[BoundCheck]:
    """Check A = B + C, A >= B and B, C >= 0 on coupled draws."""
    if n_mc < 1000:
        raise ValueError("n_mc must be at least 1000")
    dec = decomposition_draws(vp, dataset, grid, n_mc, seed, gh_order)
    a, b, c = dec.means
    resid = dec.a - dec.b - dec.c
    return [
        BoundCheck("joint KL = predictive KL + augmented-posterior KL", a, b + c,
                   3.0 * _se(resid) + QUAD_CUSHION, bool(abs(a - (b + c)) <= 3.0 * _se(resid) + QUAD_CUSHION)),
        BoundCheck("joint KL >= predictive KL", a, b, 3.0 * _se(dec.a - dec.b),
                   bool(a >= b - 3.0 * _se(dec.a - dec.b))),
        BoundCheck("predictive KL >= 0", b, 0.0, -KL_FLOOR, bool(b >= KL_FLOOR)),
        BoundCheck("augmented-posterior KL >= 0", c, 0.0, -KL_FLOOR, bool(c >= KL_FLOOR)),
    ]


def _params_of(fit):
    return fit.params if isinstance(fit, FitResult) else fit


def compare_methods(dataset: Dataset, grid: PosteriorGrid, fits: Mapping[str, object], x_nodes: int = 101,
                    yq: YQuadrature = YQuadrature(), n_mc: int = 2000, n_bound: int = 10000, seed: int = 0,
                    bounds: bool = True, metadata: dict | None = None) -> EvalReport:
    """Expected predictive KL of every method plus the bound checks on the VP fit.

    ``fits`` maps method name to a FitResult or bare parameters; "bayes" may be
    omitted since the oracle is its own fit.
    """
    missing = [m for m in METHODS if m != "bayes" and m not in fits]
    if missing:
        raise EvaluationError(f"missing fits: {', '.join(missing)}")
    table = OracleTable(grid, x_nodes, yq)
    kl = {}
    for m in METHODS:
        if m == "bayes":
            kl[m] = expected_predictive_kl(table, table, x_nodes, yq)
        else:
            kl[m] = expected_predictive_kl(predictive_for(m, _params_of(fits[m]), grid), table, x_nodes, yq)
    checks = []
    if bounds:
        vp = _params_of(fits["vp"])
        checks.append(evidence_bound_check(vp, dataset, grid, n_bound, seed))
        checks.extend(bound_decomposition_check(vp, dataset, grid, n_mc, seed))
        b_det = kl["vp"]
        checks.append(BoundCheck("predictive KL (node quadrature) >= 0", b_det, 0.0, -KL_FLOOR, bool(b_det >= KL_FLOOR)))
    meta = {"grid": {"log_f_range": list(grid.spec.log_f_range), "phi_range": list(grid.spec.phi_range),
                     "resolution": list(grid.spec.resolution)},
            "log_evidence": grid.log_evidence, "dataset_seed": dataset.seed, "eval_seed": seed,
            "x_nodes": x_nodes, "y_nodes": yq.nodes}
    meta.update(metadata or {})
    return EvalReport(kl, checks, meta)
