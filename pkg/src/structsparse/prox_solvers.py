"""Proximal operators for every supported penalty, plus ISTA/FISTA loops
with Lipschitz estimation and convergence monitoring.

Every operator maps u to argmin_v 1/2 ||u - v||^2 + t * Omega(v) for its
penalty.  The solver loop only ever talks to a penalty through a small
``PenaltyOps`` bundle (value, prox, optional KKT residual, optional dual
norm), so new penalties plug in without touching the loop.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConvergenceError, UnsupportedStructureError, ValidationError
from .groups import CoefficientWeights, GroupStructure, Q_L2, Q_LINF


class LossKind(str, enum.Enum):
    SQUARE = "square"
    LOGISTIC = "logistic"


def validate_targets(loss: LossKind, y: np.ndarray) -> None:
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValidationError("targets must be finite")
    if loss == LossKind.LOGISTIC and not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValidationError("logistic targets must be in {-1, +1}")


def loss_value(loss: LossKind, y: np.ndarray, pred: np.ndarray) -> float:
    """Mean per-sample loss: 1/2 (y - pred)^2 for square, log(1 + e^{-y pred}) for logistic."""
    if loss == LossKind.SQUARE:
        r = pred - y
        return 0.5 * float(r @ r) / len(y)
    return float(np.mean(np.logaddexp(0.0, -y * pred)))


def loss_value_grad(loss: LossKind, X: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Value and gradient of w -> mean loss of predictions X @ w."""
    n = X.shape[0]
    pred = X @ w
    if loss == LossKind.SQUARE:
        r = pred - y
        return 0.5 * float(r @ r) / n, X.T @ r / n
    margins = y * pred
    val = float(np.mean(np.logaddexp(0.0, -margins)))
    # d/dpred log(1+e^{-m}) = -y * sigmoid(-m)
    sig = 0.5 * (1.0 + np.tanh(-0.5 * margins))
    return val, X.T @ (-y * sig) / n


@dataclass
class SolverConfig:
    max_iter: int = 2000
    tol: float = 1e-7
    step_rule: str = "fixed_L"  # fixed_L | backtracking
    acceleration: str = "fista"  # ista | fista
    L_init: float = 1.0

    def __post_init__(self):
        if self.tol <= 0:
            raise ValidationError("tol must be positive")
        if self.L_init <= 0:
            raise ValidationError("L_init must be positive")
        if self.step_rule not in ("fixed_L", "backtracking"):
            raise ValidationError(f"unknown step rule {self.step_rule!r}")
        if self.acceleration not in ("ista", "fista"):
            raise ValidationError(f"unknown acceleration {self.acceleration!r}")


@dataclass
class SolverState:
    w: np.ndarray
    w_prev: np.ndarray
    momentum: float
    k: int
    objectives: list[float] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)
    wall_ns: list[int] = field(default_factory=list)
    converged: bool = False
    stop_reason: str = ""
    L: float = 0.0


# ---------------------------------------------------------------------------
# elementary shrinkage and projection kernels


def prox_l1(u, t):
    """Soft thresholding, elementwise; t may be a scalar or per-coordinate array."""
    u = np.asarray(u, dtype=float)
    if np.any(np.asarray(t) < 0):
        raise ValidationError("threshold t must be nonnegative")
    return np.sign(u) * np.maximum(np.abs(u) - t, 0.0)


def shrink_l2(v, thr):
    """Scale v toward zero so its l2 norm drops by thr (zero if it would cross)."""
    nrm = float(np.linalg.norm(v))
    if nrm <= thr:
        return np.zeros_like(v)
    return v * (1.0 - thr / nrm)


def project_linf_ball(u, t):
    return np.clip(u, -t, t)


def project_l1_ball(u, radius):
    """Euclidean projection onto {v : ||v||_1 <= radius} by sorted thresholding."""
    if radius <= 0:
        raise ValidationError("radius must be positive")
    u = np.asarray(u, dtype=float)
    a = np.abs(u)
    if a.sum() <= radius:
        return u.copy()
    srt = np.sort(a)[::-1]
    cum = np.cumsum(srt) - radius
    idx = np.arange(1, len(u) + 1)
    shifted = srt - cum / idx
    rho = int(np.max(np.flatnonzero(shifted > 0))) + 1
    theta = cum[rho - 1] / rho
    return np.sign(u) * np.maximum(a - theta, 0.0)


def project_simplex(u, radius=1.0):
    """Projection onto {v >= 0, sum v = radius}."""
    if radius <= 0:
        raise ValidationError("radius must be positive")
    u = np.asarray(u, dtype=float)
    srt = np.sort(u)[::-1]
    cum = np.cumsum(srt) - radius
    idx = np.arange(1, len(u) + 1)
    shifted = srt - cum / idx
    rho = int(np.max(np.flatnonzero(shifted > 0))) + 1
    theta = cum[rho - 1] / rho
    return np.maximum(u - theta, 0.0)


# ---------------------------------------------------------------------------
# group proximal operators


def prox_group(u, structure: GroupStructure, t):
    """Group thresholding for a partition with q = 2."""
    if structure.kind != "partition":
        raise UnsupportedStructureError(
            "prox_group requires a partition; route overlapping or tree "
            "structures to prox_overlap/prox_tree"
        )
    if structure.q != Q_L2:
        raise UnsupportedStructureError("prox_group handles q = 2 only")
    u = np.asarray(u, dtype=float)
    out = u.copy()
    for g, d in zip(structure.member_arrays(), structure.weights):
        out[g] = shrink_l2(u[g], t * d)
    return out


def prox_group_linf(u, structure: GroupStructure, t):
    """Partition prox for q = inf via Moreau: subtract the l1-ball projection."""
    if structure.kind != "partition":
        raise UnsupportedStructureError("prox_group_linf requires a partition")
    if structure.q != Q_LINF:
        raise UnsupportedStructureError("prox_group_linf handles q = inf only")
    u = np.asarray(u, dtype=float)
    out = u.copy()
    if t == 0:
        return out
    for g, d in zip(structure.member_arrays(), structure.weights):
        r = t * d
        out[g] = u[g] - project_l1_ball(u[g], r)
    return out


def _inclusion_order(structure: GroupStructure):
    """Group indices ordered so each group comes after everything it contains."""
    order = sorted(range(len(structure.groups)),
                   key=lambda k: (len(structure.groups[k]), structure.groups[k]))
    return order


def _check_laminar(structure: GroupStructure) -> None:
    sets = [set(g) for g in structure.groups]
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            inter = sets[i] & sets[j]
            if inter and inter != sets[i] and inter != sets[j]:
                raise ValidationError(
                    f"groups {i} and {j} overlap without nesting; "
                    "not totally ordered along paths"
                )


def prox_tree(u, structure: GroupStructure, t):
    """Exact prox for tree-structured q = 2 groups by composed group thresholding.

    Groups are processed leaves-to-root: ascending size, ties by member tuple,
    so every group is handled after all groups it strictly contains.
    """
    if structure.q != Q_L2:
        raise UnsupportedStructureError("prox_tree handles q = 2 only")
    if structure.kind != "tree":
        _check_laminar(structure)
    u = np.asarray(u, dtype=float)
    out = u.copy()
    members = structure.member_arrays()
    for k in _inclusion_order(structure):
        g = members[k]
        out[g] = shrink_l2(out[g], t * structure.weights[k])
    return out


def _project_ellipsoid(z, c, radius):
    """Projection onto {xi : ||xi / c||_2 <= radius} (c > 0 elementwise)."""
    if radius <= 0:
        return np.zeros_like(z)
    ratio = z / c
    if float(np.linalg.norm(ratio)) <= radius:
        return z.copy()
    zc = z * c
    c2 = c * c

    def resid(mu):
        return float(np.sum((zc / (c2 + mu)) ** 2)) - radius * radius

    hi = max(float(np.linalg.norm(zc)) / radius, 1e-12)
    while resid(hi) > 0:
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if resid(mid) > 0:
            lo = mid
        else:
            hi = mid
    mu = hi
    return z * c2 / (c2 + mu)


def prox_overlap(u, structure: GroupStructure, t, tol=1e-10, *,
                 coefficient_weights: CoefficientWeights | None = None,
                 max_sweeps=50000, dual_state: dict | None = None):
    """Prox for arbitrary overlapping q = 2 groups by cyclic dual block ascent.

    Works on the dual decomposition u = v + sum_g xi^g with each xi^g confined
    to a ball (an ellipsoid under coefficient weights); cyclic updates converge
    because the prox problem is strongly convex.  ``dual_state`` lets a solver
    loop warm-start the duals between nearby prox calls.
    """
    if structure.q != Q_L2:
        raise UnsupportedStructureError(
            "overlapping q = inf prox is out of scope; use q = 2 structures"
        )
    u = np.asarray(u, dtype=float)
    if t == 0 or len(structure.groups) == 0:
        return u.copy()
    members = structure.member_arrays()
    radii = t * structure.weights
    cw = coefficient_weights.per_group if coefficient_weights is not None else None

    if dual_state is not None and "xi" in dual_state:
        xi = dual_state["xi"]
    else:
        xi = [np.zeros(len(g)) for g in members]
        if dual_state is not None:
            dual_state["xi"] = xi

    r = u.copy()
    for k, g in enumerate(members):
        r[g] -= xi[k]

    last_delta = math.inf
    for _sweep in range(max_sweeps):
        delta = 0.0
        for k, g in enumerate(members):
            z = xi[k] + r[g]
            if cw is None:
                nrm = float(np.linalg.norm(z))
                new = z if nrm <= radii[k] else z * (radii[k] / nrm)
            else:
                new = _project_ellipsoid(z, cw[k], radii[k])
            diff = new - xi[k]
            dmax = float(np.max(np.abs(diff), initial=0.0))
            if dmax > delta:
                delta = dmax
            r[g] -= diff
            xi[k] = new
        last_delta = delta
        if delta <= tol:
            return r
    raise ConvergenceError(
        f"dual ascent failed to reach tol {tol} within {max_sweeps} sweeps",
        residual=last_delta, iterations=max_sweeps,
    )


def prox_tv1d(u, t):
    """Exact 1-D total-variation prox by the direct taut-string scan.

    Single forward pass maintaining candidate lower/upper segment values; O(p)
    in practice.
    """
    y = np.asarray(u, dtype=float)
    n = len(y)
    if t < 0:
        raise ValidationError("threshold t must be nonnegative")
    if n == 0:
        return y.copy()
    if t == 0 or n == 1:
        return y.copy()
    x = np.empty(n)
    lam = float(t)
    k = k0 = kminus = kplus = 0
    vmin = y[0] - lam
    vmax = y[0] + lam
    umin = lam
    umax = -lam
    while True:
        if k == n - 1:
            # terminal flushes
            if umin < 0.0:
                x[k0:kminus + 1] = vmin
                k = k0 = kminus = kminus + 1
                vmin = y[k]
                umin = lam
                umax = y[k] + lam - vmax
                continue
            if umax > 0.0:
                x[k0:kplus + 1] = vmax
                k = k0 = kplus = kplus + 1
                vmax = y[k]
                umax = -lam
                umin = y[k] - lam - vmin
                continue
            x[k0:n] = vmin + umin / (k - k0 + 1)
            return x
        if y[k + 1] + umin < vmin - lam:  # segment ends with a drop
            x[k0:kminus + 1] = vmin
            k = k0 = kminus = kplus = kminus + 1
            vmin = y[k]
            vmax = y[k] + 2.0 * lam
            umin = lam
            umax = -lam
        elif y[k + 1] + umax > vmax + lam:  # segment ends with a rise
            x[k0:kplus + 1] = vmax
            k = k0 = kminus = kplus = kplus + 1
            vmin = y[k] - 2.0 * lam
            vmax = y[k]
            umin = lam
            umax = -lam
        else:  # extend the segment
            k += 1
            umin += y[k] - vmin
            umax += y[k] - vmax
            if umin >= lam:
                vmin += (umin - lam) / (k - k0 + 1)
                umin = lam
                kminus = k
            if umax <= -lam:
                vmax += (umax + lam) / (k - k0 + 1)
                umax = -lam
                kplus = k


# ---------------------------------------------------------------------------
# Lipschitz estimation


def _sigma_max_sq(X, tol=1e-9, max_iter=1000):
    """Largest squared singular value by power iteration; None on stagnation."""
    n, p = X.shape
    v = np.full(p, 1.0 / math.sqrt(p))
    # nudge the start so it is not orthogonal to the top singular subspace
    v[::2] += 1e-3 / math.sqrt(p)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        z = X.T @ (X @ v)
        nz = float(np.linalg.norm(z))
        if nz == 0.0:
            return None
        v = z / nz
        lam_new = float(v @ (X.T @ (X @ v)))
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1.0):
            return lam_new
        lam = lam_new
    return None


def lipschitz_estimate(X, loss: LossKind) -> float:
    """Upper bound on the Lipschitz constant of the mean-loss gradient."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if not np.any(X):
        raise ValidationError("design matrix is identically zero")
    sig2 = _sigma_max_sq(X)
    if sig2 is None:
        sig2 = float(np.sum(X * X))  # Frobenius bound, always valid
    base = sig2 / n
    if loss == LossKind.LOGISTIC:
        base /= 4.0
    return base


# ---------------------------------------------------------------------------
# penalty dispatch


@dataclass
class PenaltyOps:
    """Everything the solver loop needs to know about one penalty.

    ``kkt_residual(w, grad, lam)`` returns None when no computable optimality
    certificate exists for the structure (the loop then stops on objective
    stall).  Instances holding dual warm-start state must not be shared across
    concurrent solver runs.
    """

    name: str
    value: Callable[[np.ndarray], float]
    prox: Callable[[np.ndarray, float], np.ndarray]
    kkt_residual: Optional[Callable[[np.ndarray, np.ndarray, float], float]] = None
    dual_norm: Optional[Callable[[np.ndarray], float]] = None


def _kkt_l1(w, grad, lam):
    zero = w == 0.0
    res = 0.0
    if np.any(zero):
        res = float(np.max(np.maximum(np.abs(grad[zero]) - lam, 0.0)))
    if np.any(~zero):
        res = max(res, float(np.max(np.abs(grad[~zero] + lam * np.sign(w[~zero])))))
    return res


def _kkt_group_l2(w, grad, lam, members, weights):
    res = 0.0
    for g, d in zip(members, weights):
        wg = w[g]
        gg = grad[g]
        nw = float(np.linalg.norm(wg))
        if nw == 0.0:
            res = max(res, max(float(np.linalg.norm(gg)) - lam * d, 0.0))
        else:
            res = max(res, float(np.linalg.norm(gg + lam * d * wg / nw)))
    return res


def _kkt_group_linf(w, grad, lam, members, weights):
    res = 0.0
    for g, d in zip(members, weights):
        wg = w[g]
        gg = grad[g]
        mx = float(np.max(np.abs(wg)))
        if mx == 0.0:
            res = max(res, max(float(np.sum(np.abs(gg))) - lam * d, 0.0))
            continue
        on = np.abs(wg) >= mx - 1e-12 * max(mx, 1.0)
        off = ~on
        dist_sq = float(gg[off] @ gg[off])
        target = -gg[on] * np.sign(wg[on]) / (lam * d)
        alpha = project_simplex(target, 1.0)
        dist_sq += (lam * d) ** 2 * float(np.sum((target - alpha) ** 2))
        res = max(res, math.sqrt(dist_sq))
    return res


def make_penalty_ops(spec, n_unpenalized=0) -> PenaltyOps:
    """Build the prox/value/certificate bundle for a norm spec.

    ``n_unpenalized`` trailing coordinates (an explicit intercept) pass through
    the prox untouched and contribute their plain gradient magnitude to the
    KKT residual.
    """

    def split(v):
        if n_unpenalized:
            return v[:len(v) - n_unpenalized], v[len(v) - n_unpenalized:]
        return v, v[:0]

    def wrap_prox(head_prox):
        def _prox(u, t):
            head, tail = split(np.asarray(u, dtype=float))
            out = np.concatenate([head_prox(head, t), tail]) if n_unpenalized else head_prox(head, t)
            return out
        return _prox

    def wrap_value(head_value):
        def _value(w):
            head, _ = split(np.asarray(w, dtype=float))
            return head_value(head)
        return _value

    def wrap_kkt(head_kkt):
        if head_kkt is None:
            return None

        def _kkt(w, grad, lam):
            wh, _ = split(w)
            gh, gt = split(grad)
            res = head_kkt(wh, gh, lam)
            if n_unpenalized:
                res = max(res, float(np.max(np.abs(gt), initial=0.0)))
            return res
        return _kkt

    variant = spec.variant
    if variant == "l1":
        return PenaltyOps(
            name="l1",
            value=wrap_value(lambda w: float(np.sum(np.abs(w)))),
            prox=wrap_prox(prox_l1),
            kkt_residual=wrap_kkt(_kkt_l1),
            dual_norm=lambda z: float(np.max(np.abs(split(z)[0]), initial=0.0)),
        )
    if variant == "tv1d":
        return PenaltyOps(
            name="tv1d",
            value=wrap_value(lambda w: float(np.sum(np.abs(np.diff(w)))) if len(w) > 1 else 0.0),
            prox=wrap_prox(prox_tv1d),
        )
    if variant == "latent_group":
        raise UnsupportedStructureError(
            "latent penalties are fit through their expanded disjoint form"
        )
    if variant != "mixed_group":
        raise ValidationError(f"unknown norm variant {variant!r}")

    st: GroupStructure = spec.structure
    cw = spec.coefficient_weights
    members = st.member_arrays()
    weights = st.weights

    def group_value(w):
        total = 0.0
        for gi, g in enumerate(members):
            sub = w[g]
            if cw is not None:
                sub = sub * cw.per_group[gi]
            if st.q == Q_L2:
                total += weights[gi] * float(np.linalg.norm(sub))
            else:
                total += weights[gi] * float(np.max(np.abs(sub), initial=0.0))
        return total

    disjoint = st.is_disjoint()
    if cw is not None:
        if st.q != Q_L2:
            raise UnsupportedStructureError("coefficient weights require q = 2")
        state: dict = {}

        def head_prox(u, t):
            return prox_overlap(u, st, t, tol=1e-12, coefficient_weights=cw,
                                dual_state=state)
        return PenaltyOps(
            name="mixed_group(weighted)",
            value=wrap_value(group_value),
            prox=wrap_prox(head_prox),
        )

    if st.kind == "partition":
        if st.q == Q_L2:
            head_prox = lambda u, t: prox_group(u, st, t)
            head_kkt = lambda w, g, lam: _kkt_group_l2(w, g, lam, members, weights)
            dn = lambda z: max(
                (float(np.linalg.norm(split(z)[0][g])) / d for g, d in zip(members, weights)),
                default=0.0,
            )
        else:
            head_prox = lambda u, t: prox_group_linf(u, st, t)
            head_kkt = lambda w, g, lam: _kkt_group_linf(w, g, lam, members, weights)
            dn = lambda z: max(
                (float(np.sum(np.abs(split(z)[0][g]))) / d for g, d in zip(members, weights)),
                default=0.0,
            )
        return PenaltyOps(
            name=f"mixed_group(partition,q={st.q})",
            value=wrap_value(group_value),
            prox=wrap_prox(head_prox),
            kkt_residual=wrap_kkt(head_kkt),
            dual_norm=dn,
        )

    if st.kind == "tree" and st.q == Q_L2:
        return PenaltyOps(
            name="mixed_group(tree)",
            value=wrap_value(group_value),
            prox=wrap_prox(lambda u, t: prox_tree(u, st, t)),
        )

    if st.q != Q_L2:
        raise UnsupportedStructureError(
            "overlapping q = inf penalties are out of scope (q = 2 only)"
        )
    state = {}

    def overlap_prox(u, t):
        return prox_overlap(u, st, t, tol=1e-11, dual_state=state)

    # disjoint families declared as overlap still admit exact certificates
    head_kkt = None
    if disjoint:
        head_kkt = lambda w, g, lam: _kkt_group_l2(w, g, lam, members, weights)
    return PenaltyOps(
        name=f"mixed_group({st.kind})",
        value=wrap_value(group_value),
        prox=wrap_prox(overlap_prox),
        kkt_residual=wrap_kkt(head_kkt),
    )


def make_ball_constraint_ops(radius, project=None) -> PenaltyOps:
    """Ops for a hard norm-ball constraint: zero value, projection as prox."""
    proj = project if project is not None else (lambda u: project_l1_ball(u, radius))
    return PenaltyOps(
        name=f"ball({radius})",
        value=lambda w: 0.0,
        prox=lambda u, t: proj(np.asarray(u, dtype=float)),
    )


# ---------------------------------------------------------------------------
# the proximal-gradient loop


STALL_WINDOW = 5


def run_proximal(problem, ops: PenaltyOps, config: SolverConfig | None = None,
                 w0: np.ndarray | None = None) -> SolverState:
    """ISTA/FISTA on  mean-loss(X w, y) + lam * Omega(w).

    Stops when the KKT residual drops below tol where a certificate is
    available, otherwise when the relative objective change over a
    five-iteration window falls below tol; always stops at max_iter.
    """
    config = config or SolverConfig()
    X = np.asarray(problem.X, dtype=float)
    y = np.asarray(problem.y, dtype=float)
    lam = float(problem.lam)
    loss = problem.loss
    validate_targets(loss, y)
    if X.shape[0] != len(y):
        raise ValidationError(f"X has {X.shape[0]} rows but y has {len(y)} entries")
    p = X.shape[1]
    w = np.zeros(p) if w0 is None else np.asarray(w0, dtype=float).copy()
    if len(w) != p:
        raise ValidationError(f"w0 has length {len(w)}, expected {p}")

    if config.step_rule == "fixed_L":
        L = lipschitz_estimate(X, loss)
    else:
        L = config.L_init

    state = SolverState(w=w, w_prev=w.copy(), momentum=0.0, k=0, L=L)
    fw, gw = loss_value_grad(loss, X, y, w)
    use_kkt = ops.kkt_residual is not None
    t0 = time.perf_counter_ns()

    for k in range(1, config.max_iter + 1):
        if config.acceleration == "fista" and k > 1:
            mom = (k - 2.0) / (k + 1.0)  # (k-1)/(k+2) counted from 0
            yk = state.w + mom * (state.w - state.w_prev)
            fy, gy = loss_value_grad(loss, X, y, yk)
            state.momentum = mom
        else:
            yk, fy, gy = state.w, fw, gw
            state.momentum = 0.0

        if config.step_rule == "backtracking":
            while True:
                cand = ops.prox(yk - gy / L, lam / L)
                diff = cand - yk
                f_cand, g_cand = loss_value_grad(loss, X, y, cand)
                bound = fy + float(gy @ diff) + 0.5 * L * float(diff @ diff)
                if f_cand <= bound + 1e-12 * max(1.0, abs(bound)):
                    break
                L *= 2.0
                if L > 1e30:
                    raise ConvergenceError("backtracking failed to find a valid step")
            w_new, f_new, g_new = cand, f_cand, g_cand
        else:
            w_new = ops.prox(yk - gy / L, lam / L)
            f_new, g_new = loss_value_grad(loss, X, y, w_new)

        obj = f_new + lam * ops.value(w_new)
        if not math.isfinite(obj):
            raise ConvergenceError(
                "objective diverged; the fixed step size is too large, "
                "retry with step_rule='backtracking'",
                iterations=k,
            )
        state.objectives.append(obj)
        state.wall_ns.append(time.perf_counter_ns() - t0)

        if use_kkt:
            residual = ops.kkt_residual(w_new, g_new, lam)
        else:
            if len(state.objectives) > STALL_WINDOW:
                prev = state.objectives[-1 - STALL_WINDOW]
                residual = abs(prev - obj) / max(1.0, abs(obj))
            else:
                residual = math.inf
        state.residuals.append(residual)

        state.w_prev = state.w
        state.w = w_new
        state.k = k
        fw, gw = f_new, g_new

        if residual <= config.tol:
            state.converged = True
            state.stop_reason = "kkt" if use_kkt else "stall"
            break
    else:
        state.stop_reason = "max_iter"

    state.L = L
    return state
