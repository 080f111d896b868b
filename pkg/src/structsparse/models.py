"""Supervised estimators: Lasso, (overlapping) group Lasso, latent group Lasso
via variable expansion, regularization paths, cross-validation, and the
OLS-hybrid refit selector."""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import prox_solvers as ps
from .errors import StructSparseError, UnsupportedStructureError, ValidationError
from .groups import GroupStructure, Q_L2
from .norms import NormSpec, dual_norm
from .prox_solvers import LossKind, SolverConfig, make_penalty_ops, run_proximal

SUPPORT_THRESHOLD = 1e-8


@dataclass
class Problem:
    """A single regularized estimation problem: data, loss, penalty, strength."""

    X: np.ndarray
    y: np.ndarray
    loss: LossKind
    norm: NormSpec
    lam: float

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2:
            raise ValidationError("X must be a 2-d matrix")
        if self.X.shape[0] != len(self.y):
            raise ValidationError(
                f"X has {self.X.shape[0]} rows but y has {len(self.y)} entries"
            )
        if self.lam < 0:
            raise ValidationError("lambda must be nonnegative")
        expected = self.norm.dim()
        if expected is not None and expected != self.X.shape[1]:
            raise ValidationError(
                f"norm is over {expected} coordinates but X has {self.X.shape[1]} columns"
            )
        ps.validate_targets(self.loss, self.y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def with_lambda(self, lam: float) -> "Problem":
        return dataclasses.replace(self, lam=float(lam))


@dataclass
class SolveDiagnostics:
    residual: float
    iterations: int
    objective: float
    converged: bool


@dataclass
class FitResult:
    w: np.ndarray
    support: tuple[int, ...]
    diagnostics: SolveDiagnostics
    intercept: float = 0.0
    latent: tuple[np.ndarray, ...] | None = None
    extras: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.w + self.intercept


def _support_of(w, threshold=SUPPORT_THRESHOLD) -> tuple[int, ...]:
    return tuple(int(j) for j in np.flatnonzero(np.abs(w) > threshold))


def lambda_max(problem: Problem) -> float:
    """Smallest lambda for which the all-zero model is optimal.

    Exact where the dual norm is computable (l1, disjoint groups, and latent
    norms through their expansion); for overlapping mixed-group norms this
    returns the latent-norm dual value, a valid upper bound since the group
    norm dominates the latent norm.
    """
    z = problem.X.T @ problem.y / problem.n
    if problem.loss == LossKind.LOGISTIC:
        z = z / 2.0  # gradient of the logistic mean loss at w = 0
    spec = problem.norm
    if spec.variant in ("l1",):
        return float(np.max(np.abs(z), initial=0.0))
    if spec.variant in ("mixed_group", "latent_group"):
        st = spec.structure
        best = 0.0
        for g, d in zip(st.member_arrays(), st.weights):
            sub = z[g]
            val = float(np.linalg.norm(sub)) if st.q == Q_L2 else float(np.sum(np.abs(sub)))
            best = max(best, val / d)
        return best
    raise UnsupportedStructureError(
        f"lambda_max unavailable for variant {spec.variant!r}; supply a grid upper bound"
    )


def _state_to_result(state: ps.SolverState, intercept=0.0, latent=None) -> FitResult:
    diag = SolveDiagnostics(
        residual=state.residuals[-1] if state.residuals else math.inf,
        iterations=state.k,
        objective=state.objectives[-1] if state.objectives else math.inf,
        converged=state.converged,
    )
    return FitResult(
        w=state.w, support=_support_of(state.w), diagnostics=diag,
        intercept=intercept, latent=latent,
    )


def fit(problem: Problem, config: SolverConfig | None = None, *,
        intercept: bool = False, w0: np.ndarray | None = None,
        keep_state: bool = False) -> FitResult:
    """Solve the problem to the solver's stopping criterion.

    Latent-group norms are dispatched to :func:`fit_latent`, which assembles
    the expanded disjoint formulation internally.  With ``intercept`` the
    offset is unpenalized: centering for the square loss, an explicit extra
    coordinate for the logistic loss.
    """
    if problem.norm.variant == "latent_group":
        if intercept:
            raise ValidationError("intercept is not supported for latent fits")
        return fit_latent(problem, config, w0=w0)
    config = config or SolverConfig()

    if intercept and problem.loss == LossKind.SQUARE:
        x_mean = problem.X.mean(axis=0)
        y_mean = float(problem.y.mean())
        centered = dataclasses.replace(
            problem, X=problem.X - x_mean, y=problem.y - y_mean
        )
        ops = make_penalty_ops(problem.norm)
        state = run_proximal(centered, ops, config, w0=w0)
        b0 = y_mean - float(x_mean @ state.w)
        res = _state_to_result(state, intercept=b0)
    elif intercept:
        X_aug = np.hstack([problem.X, np.ones((problem.n, 1))])
        augmented = _BareProblem(X_aug, problem.y, problem.loss, problem.lam)
        ops = make_penalty_ops(problem.norm, n_unpenalized=1)
        w_init = None if w0 is None else np.append(w0, 0.0)
        state = run_proximal(augmented, ops, config, w0=w_init)
        b0 = float(state.w[-1])
        state.w = state.w[:-1]
        res = _state_to_result(state, intercept=b0)
    else:
        ops = make_penalty_ops(problem.norm)
        state = run_proximal(problem, ops, config, w0=w0)
        res = _state_to_result(state)
    if keep_state:
        res.extras["state"] = state
    return res


@dataclass
class _BareProblem:
    X: np.ndarray
    y: np.ndarray
    loss: LossKind
    lam: float


def latent_expansion(problem: Problem):
    """Expanded design and disjoint structure for a latent-group problem."""
    st = problem.norm.structure
    if not st.covers().all():
        missing = int(np.flatnonzero(~st.covers())[0])
        raise ValidationError(
            f"latent fit requires the groups to cover every coordinate; {missing} is uncovered"
        )
    members = st.member_arrays()
    X_parts = [problem.X[:, g] for g in members]
    X_exp = np.concatenate(X_parts, axis=1) if X_parts else problem.X[:, :0]
    blocks = []
    start = 0
    for g in members:
        blocks.append(tuple(range(start, start + len(g))))
        start += len(g)
    exp_structure = GroupStructure(
        p=start, groups=tuple(blocks), weights=st.weights.copy(), q=st.q,
        kind="partition",
    )
    return X_exp, exp_structure, members


def fit_latent(problem: Problem, config: SolverConfig | None = None, *,
               w0: np.ndarray | None = None) -> FitResult:
    """Latent group Lasso by duplicating shared variables into disjoint blocks."""
    if problem.norm.variant != "latent_group":
        raise ValidationError("fit_latent requires a latent_group norm")
    config = config or SolverConfig()
    X_exp, exp_structure, members = latent_expansion(problem)
    exp_spec = NormSpec(variant="mixed_group", structure=exp_structure)
    bare = _BareProblem(X_exp, problem.y, problem.loss, problem.lam)
    ops = make_penalty_ops(exp_spec)
    state = run_proximal(bare, ops, config, w0=w0)
    v = state.w
    w = np.zeros(problem.p)
    latent = []
    for block, g in zip(exp_structure.groups, members):
        vb = v[list(block)]
        latent.append(vb)
        w[g] += vb
    diag = SolveDiagnostics(
        residual=state.residuals[-1] if state.residuals else math.inf,
        iterations=state.k,
        objective=state.objectives[-1] if state.objectives else math.inf,
        converged=state.converged,
    )
    return FitResult(w=w, support=_support_of(w), diagnostics=diag,
                     latent=tuple(latent))


@dataclass
class PathSpec:
    """Geometric lambda grid, largest first."""

    num: int = 50
    ratio: float = 1e-3
    lambda_max: float | None = None
    warm_start: bool = True
    lambdas: np.ndarray | None = None

    def __post_init__(self):
        if self.lambdas is not None:
            lam = np.asarray(self.lambdas, dtype=float)
            if lam.ndim != 1 or len(lam) == 0:
                raise ValidationError("explicit lambda grid must be a nonempty vector")
            if np.any(lam <= 0) or np.any(np.diff(lam) >= 0):
                raise ValidationError("lambda grid must be positive and strictly decreasing")
            self.lambdas = lam
        else:
            if self.num < 1:
                raise ValidationError("path needs at least one grid point")
            if not 0 < self.ratio < 1:
                raise ValidationError("ratio must lie in (0, 1)")

    def grid(self, problem: Problem) -> np.ndarray:
        if self.lambdas is not None:
            return self.lambdas
        top = self.lambda_max if self.lambda_max is not None else lambda_max(problem)
        if top <= 0:
            raise ValidationError("lambda_max must be positive; is y identically zero?")
        if self.num == 1:
            return np.array([top])
        return np.geomspace(top, top * self.ratio, self.num)


@dataclass
class PathPoint:
    lam: float
    fit: FitResult | None
    error: str | None = None


def regularization_path(problem: Problem, path: PathSpec | None = None,
                        config: SolverConfig | None = None) -> list[PathPoint]:
    """Fits along a decreasing lambda grid, warm-starting each from the last."""
    path = path or PathSpec()
    config = config or SolverConfig()
    lams = path.grid(problem)
    points: list[PathPoint] = []
    w_carry: np.ndarray | None = None
    for lam in lams:
        sub = problem.with_lambda(float(lam))
        try:
            res = fit(sub, config, w0=w_carry if path.warm_start else None)
            points.append(PathPoint(lam=float(lam), fit=res))
            if path.warm_start:
                w_carry = res.w.copy()
        except StructSparseError as exc:  # record and continue
            points.append(PathPoint(lam=float(lam), fit=None, error=str(exc)))
    return points


def _fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, folds)]


def _degenerate(y_train) -> bool:
    return len(np.unique(y_train)) < 2


@dataclass
class CvRow:
    lam: float
    mean: float
    sd: float


def cross_validate(problem: Problem, path: PathSpec | None = None, folds: int = 5,
                   seed: int = 0, config: SolverConfig | None = None,
                   threads: int = 1):
    """K-fold validation-loss curve over the lambda grid.

    Fold assignment is a deterministic function of the seed.  Returns
    (best_lambda, rows); the best lambda is the largest minimizer of the mean
    validation loss.
    """
    if folds < 2:
        raise ValidationError("cross-validation needs at least 2 folds")
    if problem.n < folds:
        raise ValidationError(f"cannot split {problem.n} samples into {folds} folds")
    path = path or PathSpec()
    config = config or SolverConfig()
    lams = path.grid(problem)

    assignment = _fold_indices(problem.n, folds, seed)
    if problem.loss == LossKind.LOGISTIC:
        def any_degenerate(assign):
            for val_idx in assign:
                mask = np.ones(problem.n, dtype=bool)
                mask[val_idx] = False
                if _degenerate(problem.y[mask]):
                    return True
            return False
        if any_degenerate(assignment):
            assignment = _fold_indices(problem.n, folds, seed + 1)
            if any_degenerate(assignment):
                raise ValidationError(
                    "a training fold contains a single class even after reshuffling"
                )

    def run_fold(val_idx):
        mask = np.ones(problem.n, dtype=bool)
        mask[val_idx] = False
        train = dataclasses.replace(problem, X=problem.X[mask], y=problem.y[mask])
        losses = np.empty(len(lams))
        w_carry = None
        for i, lam in enumerate(lams):
            res = fit(train.with_lambda(float(lam)), config,
                      w0=w_carry if path.warm_start else None)
            w_carry = res.w.copy() if path.warm_start else None
            pred = res.predict(problem.X[val_idx])
            losses[i] = ps.loss_value(problem.loss, problem.y[val_idx], pred)
        return losses

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_fold = list(pool.map(run_fold, assignment))
    else:
        per_fold = [run_fold(v) for v in assignment]
    table = np.stack(per_fold)  # folds x lambdas
    means = table.mean(axis=0)
    sds = table.std(axis=0, ddof=1)
    best_i = int(np.argmin(means))
    rows = [CvRow(lam=float(l), mean=float(m), sd=float(s))
            for l, m, s in zip(lams, means, sds)]
    return float(lams[best_i]), rows


def _ols_refit(X, y, support):
    """Minimum-norm least squares restricted to the support columns."""
    p = X.shape[1]
    w = np.zeros(p)
    if len(support):
        sol, *_ = np.linalg.lstsq(X[:, list(support)], y, rcond=None)
        w[list(support)] = sol
        return w, 0.0
    return w, float(np.mean(y))


def ols_hybrid(problem: Problem, path_points: list[PathPoint], folds: int = 5,
               seed: int = 0) -> FitResult:
    """Refit every path support without regularization; pick by K-fold CV.

    Square loss only.  Empty supports fall back to an intercept-only model
    (predict the training mean).  Rank-deficient refits take the minimum-norm
    solution, so the procedure is deterministic.
    """
    if problem.loss != LossKind.SQUARE:
        raise ValidationError("the OLS hybrid applies to the square loss only")
    supports: list[tuple[int, ...]] = []
    support_lambda: dict[tuple[int, ...], float] = {}
    for pt in path_points:
        if pt.fit is None:
            continue
        s = tuple(pt.fit.support)
        if s not in support_lambda:
            support_lambda[s] = pt.lam
            supports.append(s)
    if not supports:
        raise ValidationError("no successful path points to refit")

    assignment = _fold_indices(problem.n, folds, seed)
    cv_errors = []
    for s in supports:
        errs = []
        for val_idx in assignment:
            mask = np.ones(problem.n, dtype=bool)
            mask[val_idx] = False
            w, b0 = _ols_refit(problem.X[mask], problem.y[mask], s)
            pred = problem.X[val_idx] @ w + b0
            errs.append(ps.loss_value(LossKind.SQUARE, problem.y[val_idx], pred))
        cv_errors.append(float(np.mean(errs)))
    order = sorted(range(len(supports)), key=lambda i: (cv_errors[i], len(supports[i])))
    best = order[0]
    w, b0 = _ols_refit(problem.X, problem.y, supports[best])
    pred = problem.X @ w + b0
    obj = ps.loss_value(LossKind.SQUARE, problem.y, pred)
    diag = SolveDiagnostics(residual=0.0, iterations=0, objective=obj, converged=True)
    return FitResult(
        w=w, support=tuple(supports[best]), diagnostics=diag, intercept=b0,
        extras={
            "cv_errors": dict(zip(map(tuple, supports), cv_errors)),
            "selected_lambda": support_lambda[supports[best]],
        },
    )
