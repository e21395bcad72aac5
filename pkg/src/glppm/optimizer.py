"""Solvers for the penalized likelihood.

Two routes to the minimizer:

* ``fit_linear``: for the linear link the minimizer lies in the finite
  representer basis, so a damped Newton iteration on the coefficients is
  exact (closed-form compensator, no quadrature).  Nonnegativity of the
  intensity between events is restored, when violated, by a few passes of a
  quadratically-penalized hinge on the quadrature-node predictors.

* ``fit_descent``: for any link, descent over a growing atom dictionary.
  The gradient of the objective is itself a finite combination of kernel
  atoms (event history atoms, one integral atom per channel, and the
  penalty part), so each iteration appends the new integral atoms, forms
  the exact gradient coordinates on the dictionary, takes a subspace Newton
  step (steepest descent when that fails the angle test) and moves along it
  with a weak Wolfe line search.

Both report convergence in the function-space gradient norm
||grad Lambda(g)|| <= tol * max(1, ||grad Lambda(g_0)||).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import ConfigError, DomainError, InfeasibleError, SolverError
from .filters import (
    Atom,
    FilterFunction,
    full_inner_row,
    h0_poly,
    h1_inner_row,
)
from .kernel import SobolevKernel
from .likelihood import Objective, _BOUNDARY_SLACK, gradient, objective_value
from .representer import RepresenterBasis, build_f_atoms, build_h_atoms

__all__ = [
    "FitResult",
    "LineSearchConfig",
    "fit_descent",
    "fit_linear",
    "wolfe_angle_step",
]

# numerical slack on node feasibility: the multiplier iteration leaves a
# residual violation of about (inner gradient tolerance) / penalty weight,
# which floors near 1e-8 on unit-scale problems.  Shared with the likelihood
# domain checks so converged fits always evaluate cleanly.
_FEAS_SLACK = _BOUNDARY_SLACK


@dataclass(frozen=True)
class LineSearchConfig:
    """Weak Wolfe line search with an angle safeguard on the direction.

    Accepts a step alpha with
        f(alpha) <= f(0) + c1 alpha f'(0)      (sufficient decrease)
        f'(alpha) >= c2 f'(0)                  (weak curvature)
    after checking once per direction that
        cos(direction, -gradient) >= delta.
    """

    c1: float = 1e-4
    c2: float = 0.4
    delta: float = 0.1
    max_step_trials: int = 60

    def __post_init__(self):
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise ConfigError(f"need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"need 0 < delta < 1, got delta={self.delta}")
        if self.max_step_trials < 1:
            raise ConfigError("max_step_trials must be >= 1")


@dataclass
class FitResult:
    """Outcome of a fit: estimate, traces and solver diagnostics."""

    g_hat: FilterFunction
    status: str  # "converged" | "max_iter" | "stalled"
    n_iter: int
    objective: float
    grad_norm: float
    objective_trace: np.ndarray
    grad_norm_trace: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _weak_wolfe_search(trial, f0: float, d0: float, cfg: LineSearchConfig):
    """Bracketing weak Wolfe search along a descent direction.

    ``trial(alpha) -> (feasible, value, deriv)``; infeasible trials shrink
    the bracket like Armijo failures.  Returns (alpha, value, deriv, log,
    ok); the log records every trial with its test outcomes.
    """
    lo, hi = 0.0, np.inf
    alpha = 1.0
    log = []
    for _ in range(cfg.max_step_trials):
        feasible, f_a, d_a = trial(alpha)
        armijo = feasible and f_a <= f0 + cfg.c1 * alpha * d0
        curvature = feasible and d_a >= cfg.c2 * d0
        log.append(
            {
                "alpha": alpha,
                "value": f_a if feasible else np.nan,
                "deriv": d_a if feasible else np.nan,
                "feasible": feasible,
                "armijo": bool(armijo),
                "curvature": bool(curvature),
            }
        )
        if armijo and curvature:
            return alpha, f_a, d_a, log, True
        if not armijo:
            hi = alpha
        else:
            lo = alpha
        alpha = 2.0 * alpha if np.isinf(hi) else 0.5 * (lo + hi)
    return alpha, np.nan, np.nan, log, False


def wolfe_angle_step(
    g: FilterFunction,
    direction: FilterFunction,
    obj: Objective,
    config: LineSearchConfig | None = None,
) -> tuple[FilterFunction, dict]:
    """One safeguarded line search step along a filter-space direction.

    Verifies the angle condition against the gradient at ``g``, then finds a
    weak Wolfe step alpha and returns (g + alpha * direction, stats).  The
    stats record alpha, the cosine, the directional derivatives and the full
    trial log.  Raises SolverError for non-descent directions, angle
    failures or exhausted trials (reporting the last bracket).
    """
    cfg = config if config is not None else LineSearchConfig()
    grad = gradient(g, obj)
    gn = np.sqrt(max(grad.inner_product(grad), 0.0))
    dn = np.sqrt(max(direction.inner_product(direction), 0.0))
    if dn == 0.0:
        raise SolverError("line search direction is zero")
    d0 = grad.inner_product(direction)
    if d0 >= 0.0:
        raise SolverError(f"not a descent direction: directional derivative {d0}")
    cosine = -d0 / (gn * dn) if gn > 0 else 1.0
    if cosine < cfg.delta:
        raise SolverError(
            f"angle condition failed: cos {cosine:.3g} < delta {cfg.delta}"
        )
    f0 = objective_value(g, obj)

    def trial(alpha: float):
        g_a = g + direction.scale(alpha)
        try:
            f_a = objective_value(g_a, obj)
            grad_a = gradient(g_a, obj)
        except (InfeasibleError, DomainError):
            return False, np.nan, np.nan
        return True, f_a, grad_a.inner_product(direction)

    alpha, f_a, d_a, log, ok = _weak_wolfe_search(trial, f0, d0, cfg)
    if not ok:
        raise SolverError(
            f"no weak Wolfe step within {cfg.max_step_trials} trials; "
            f"last bracket near alpha={log[-1]['alpha']:.3g}"
        )
    stats = {
        "alpha": float(alpha),
        "cosine": float(cosine),
        "value": float(f_a),
        "deriv": float(d_a),
        "deriv0": float(d0),
        "wolfe_log": log,
    }
    return g + direction.scale(alpha), stats


# -- linear link: Newton in the representer basis -------------------------------


def _solve_spd(H: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve H x = rhs for symmetric positive semidefinite H.

    Jacobi-scales the system first (kernel Grams over long horizons are
    badly conditioned), then tries Cholesky, a tiny ridge, and least
    squares in that order.  Returns (x, ridge_used).
    """
    if not (np.isfinite(H).all() and np.isfinite(rhs).all()):
        raise SolverError(
            "non-finite values in the Newton system; the objective may be "
            "unbounded (zero penalty weight?)"
        )
    s = np.sqrt(np.maximum(np.diag(H), 1e-300))
    Hs = H / np.outer(s, s)
    rs = rhs / s
    try:
        c, low = scipy.linalg.cho_factor(Hs)
        return scipy.linalg.cho_solve((c, low), rs) / s, False
    except (np.linalg.LinAlgError, ValueError):
        pass
    ridge = 1e-10 * max(np.trace(Hs) / Hs.shape[0], 1.0)
    Hr = Hs + ridge * np.eye(Hs.shape[0])
    try:
        c, low = scipy.linalg.cho_factor(Hr)
        return scipy.linalg.cho_solve((c, low), rs) / s, True
    except (np.linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(Hr, rs, rcond=None)[0] / s, True


def fit_linear(
    basis: RepresenterBasis,
    obj: Objective,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> FitResult:
    """Exact penalized fit for the linear link in the representer basis.

    Damped Newton on the coefficients with backtracking that keeps every
    event intensity positive.  If the minimizer would let the predictor dip
    below -d between events, hinge-squared penalties on the violating
    quadrature nodes push it back.  The penalties are warm-started with
    multiplier estimates updated after every pass (an augmented Lagrangian),
    so the penalty weight stays bounded and the passes converge to exact
    node feasibility.  Each pass also grows the basis by one kernel atom
    per newly forced node and channel: an active node constraint
    contributes its own representer to the solution, so the constrained
    optimum lies in this enlarged span rather than in the unconstrained
    representer span.
    """
    if obj.link.kind != "linear":
        raise ConfigError("fit_linear requires the linear link")
    lam = obj.penalty_weight
    d = obj.link.d
    kernel = basis.kernel
    n_ch = basis.n_channels
    h_sl = basis.h_slice
    f_sl = basis.f_slice

    ws = _Workspace(kernel, obj)
    active: list[bool] = []
    for atom, zero in zip(basis.atoms, basis.zero_mask):
        ws.add(atom)
        active.append(not zero)
    phi_cols = {
        (a.channel, a.k): i for i, a in enumerate(basis.atoms) if a.kind == "h0"
    }
    completions = np.stack([a.sections_h0(kernel) for a in basis.atoms])
    hinge_cols: list[int] = []
    hinge_nodes: list[int] = []
    node_added = np.zeros(obj.nodes.size, dtype=bool)
    y_mult = np.zeros(obj.nodes.size)
    mu = 1.0

    def force_weights(c: np.ndarray) -> np.ndarray:
        """Augmented-Lagrangian force on each node, max(0, y - 2 mu gap)."""
        return np.maximum(0.0, y_mult - 2.0 * mu * node_gap(c))

    def add_node_atoms(c: np.ndarray, nodes_new: np.ndarray) -> np.ndarray:
        nonlocal completions
        onehot = np.zeros(obj.nodes.size)
        for q in nodes_new:
            node_added[q] = True
            onehot[q] = 1.0
            for atom in build_f_atoms(kernel, obj, part="r", link_weights=onehot):
                if atom.is_zero:
                    continue
                hinge_nodes.append(int(q))
                hinge_cols.append(ws.add(atom))
                active.append(True)
                completions = np.vstack([completions, atom.sections_h0(kernel)])
            onehot[q] = 0.0
        return np.append(c, np.zeros(len(ws) - c.size))

    def node_gap(c: np.ndarray) -> np.ndarray:
        return ws.U @ c + d

    def worst_violation(c: np.ndarray) -> float:
        if not ws.U.size:
            return 0.0
        return float(max(0.0, -node_gap(c).min()))

    def grad_coords(c: np.ndarray, rho: np.ndarray, mu: float) -> np.ndarray:
        """Function-space gradient of the current objective in atom
        coordinates; exact once every forced node carries an atom."""
        n = len(ws)
        gam = np.zeros(n)
        comp_coeff = np.zeros(n)
        if rho.size:
            gam[h_sl] -= np.repeat(rho, n_ch)
            comp_coeff[h_sl] -= np.repeat(rho, n_ch)
        gam[f_sl] += 1.0
        comp_coeff[f_sl] += 1.0
        gam += 2.0 * lam * np.where(ws.non_poly, c, 0.0)
        if mu > 0.0 and hinge_cols:
            w = force_weights(c)
            if w.any():
                np.subtract.at(
                    gam, np.asarray(hinge_cols), w[np.asarray(hinge_nodes)]
                )
        # completion of the H1-pure gradient atoms onto the phi columns, and
        # the polynomial strip of the penalty for atoms storing h0 content
        for (ch, k), col in phi_cols.items():
            mask = ws.non_poly & (ws.channel == ch)
            gam[col] += float(comp_coeff[mask] @ completions[mask, k - 1])
            gam[col] -= 2.0 * lam * float(c[mask] @ ws.h0_mat[mask, k - 1])
        return gam

    def current_gn(c: np.ndarray, rho: np.ndarray, mu: float) -> float:
        """Norm of the gradient of the current objective, with corrections
        for forced nodes that do not have a basis atom yet."""
        gam = grad_coords(c, rho, mu)
        gn2 = float(gam @ ws.G @ gam)
        if mu > 0.0:
            w_rem = np.where(node_added, 0.0, force_weights(c))
            if w_rem.any():
                gn2 -= 2.0 * float(w_rem @ (ws.U @ gam))
                for atom in build_f_atoms(kernel, obj, part="r", link_weights=w_rem):
                    gn2 += float(full_inner_row(atom, [atom])[0])
        return float(np.sqrt(max(gn2, 0.0)))

    def value(c: np.ndarray, mu: float) -> float:
        phi = ws.E @ c + d
        if phi.size and phi.min() <= 0.0:
            return np.inf
        val = ws.comp @ c + d * obj.int_y + lam * c @ ws.Gp @ c
        if phi.size:
            val -= float(np.sum(np.log(obj.y_events * phi)))
        if mu > 0.0:
            w = force_weights(c)
            if w.any() or y_mult.any():
                val += float(np.sum(w**2 - y_mult**2)) / (4.0 * mu)
        return float(val)

    c = np.zeros(len(ws))
    if d == 0.0 and len(obj.events):
        for ch in range(n_ch):
            c[phi_cols[(ch, 1)]] = 1.0
        if (ws.E @ c).min() <= 0.0:
            i = int(np.argmin(ws.E @ c))
            raise InfeasibleError(
                f"event t={obj.events.times[i]} has no driver history and d=0"
            )

    def newton_pass(c: np.ndarray, mu: float):
        """Minimize the (possibly hinged) objective from c.

        Returns (c, reason), reason one of "grad" (function-space gradient
        test met), "stationary" (Newton decrement at rounding level),
        "stall" (no backtracking decrease) or "max_iter".
        """
        nonlocal ridge_used, newton_iters, gn0
        idx_active = np.flatnonzero(active)
        for _ in range(max_iter):
            phi = ws.E @ c + d
            if phi.size and phi.min() <= 0.0:
                raise InfeasibleError("event intensity vanished during Newton")
            rho = 1.0 / phi if phi.size else np.empty(0)
            grad_c = ws.comp + 2.0 * lam * (ws.Gp @ c)
            if phi.size:
                grad_c -= ws.E.T @ rho
            if mu > 0.0:
                w = force_weights(c)
                if w.any():
                    grad_c -= ws.U.T @ w

            gn = current_gn(c, rho, mu)
            obj_trace.append(value(c, mu))
            gn_trace.append(gn)
            if gn0 is None:
                gn0 = gn
            if gn <= tol * max(1.0, gn0):
                return c, "grad"

            H = 2.0 * lam * ws.Gp.copy()
            if phi.size:
                H += (ws.E * (rho**2)[:, None]).T @ ws.E
            if mu > 0.0:
                act = (y_mult - 2.0 * mu * node_gap(c)) > 0.0
                if act.any():
                    Ua = ws.U[act]
                    H += 2.0 * mu * Ua.T @ Ua
            step = np.zeros(len(ws))
            sol, used = _solve_spd(
                H[np.ix_(idx_active, idx_active)], -grad_c[idx_active]
            )
            ridge_used = ridge_used or used
            step[idx_active] = sol
            slope = float(grad_c @ step)
            if slope >= 0.0:
                step[idx_active] = -grad_c[idx_active]
                slope = float(grad_c @ step)
            f_here = value(c, mu)
            if slope >= 0.0 or -slope <= 1e-14 * max(1.0, abs(f_here)):
                return c, "stationary"
            t = 1.0
            accepted = False
            for _ in range(60):
                f_trial = value(c + t * step, mu)
                if f_trial <= f_here + 1e-4 * t * slope:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                return c, "stall"
            c = c + t * step
            newton_iters += 1
        return c, "max_iter"

    obj_trace: list[float] = []
    gn_trace: list[float] = []
    pass_starts: list[int] = [0]
    ridge_used = False
    newton_iters = 0
    gn0 = None

    slack = _FEAS_SLACK * max(1.0, d)
    hinge_passes = 0
    viol_prev = np.inf
    while True:
        c, reason = newton_pass(c, mu)
        hinge_passes += 1
        v = worst_violation(c)
        w = force_weights(c)
        y_top = float(w.max()) if w.size else 0.0
        gaps = np.maximum(node_gap(c), 0.0)
        comp = float(np.max(np.minimum(w, gaps))) if w.size else 0.0
        kkt_ok = (
            v <= slack
            and comp <= 1e-6 * max(1.0, y_top)
            and reason in ("grad", "stationary")
        )
        if kkt_ok or hinge_passes >= 20:
            break
        grow = np.flatnonzero((w > 0.0) & ~node_added)
        if grow.size:
            c = add_node_atoms(c, grow)
        y_mult = w
        if v > slack and v > 0.25 * viol_prev and mu < 1e4:
            mu *= 10.0
        if v > 0.0:
            viol_prev = v
        pass_starts.append(len(obj_trace))
    status = "converged" if kkt_ok else "max_iter"

    phi = ws.E @ c + d
    rho = 1.0 / phi if phi.size else np.empty(0)
    gam = grad_coords(c, rho, 0.0)
    gn = float(np.sqrt(max(gam @ ws.G @ gam, 0.0)))
    final_val = value(c, 0.0)
    obj_trace.append(final_val)
    gn_trace.append(gn)
    g_hat = FilterFunction(kernel, n_ch, tuple(ws.atoms), c)
    return FitResult(
        g_hat=g_hat,
        status=status,
        n_iter=newton_iters,
        objective=float(final_val),
        grad_norm=gn,
        objective_trace=np.array(obj_trace),
        grad_norm_trace=np.array(gn_trace),
        diagnostics={
            "ridge_used": ridge_used,
            "hinge_passes": hinge_passes,
            "hinge_mu": mu,
            "pass_starts": pass_starts,
            "max_node_violation": worst_violation(c),
            "newton_exit": reason,
            "coefficients": c,
            "kkt_residual": current_gn(c, rho, mu),
            "n_node_atoms": len(hinge_cols),
            "unpenalized": lam == 0.0,
        },
    )


# -- general links: dictionary descent ------------------------------------------


class _Workspace:
    """Growing dictionary with cached predictor columns and Gram matrices."""

    def __init__(self, kernel: SobolevKernel, obj: Objective):
        self.kernel = kernel
        self.obj = obj
        self.atoms: list[Atom] = []
        self.U = np.zeros((obj.nodes.size, 0))
        self.E = np.zeros((len(obj.events), 0))
        self.comp = np.zeros(0)
        self.G = np.zeros((0, 0))
        self.Gp = np.zeros((0, 0))
        self.h0_mat = np.zeros((0, kernel.m))
        self.channel = np.zeros(0, dtype=int)
        self.non_poly = np.zeros(0, dtype=bool)

    def __len__(self) -> int:
        return len(self.atoms)

    def add(self, atom: Atom) -> int:
        n = len(self.atoms)
        u = self.obj.node_column(self.kernel, atom)
        e = self.obj.event_column(self.kernel, atom)
        cr = self.obj.comp_row(self.kernel, atom)
        row_p = h1_inner_row(atom, self.atoms + [atom])
        row_f = full_inner_row(atom, self.atoms + [atom])
        self.atoms.append(atom)
        self.U = np.column_stack([self.U, u]) if n else u[:, None]
        self.E = np.column_stack([self.E, e]) if n else e[:, None]
        self.comp = np.append(self.comp, cr)
        G = np.zeros((n + 1, n + 1))
        G[:n, :n] = self.G
        G[n, :] = row_f
        G[:, n] = row_f
        self.G = G
        Gp = np.zeros((n + 1, n + 1))
        Gp[:n, :n] = self.Gp
        Gp[n, :] = row_p
        Gp[:, n] = row_p
        self.Gp = Gp
        self.h0_mat = np.vstack([self.h0_mat, atom.h0])
        self.channel = np.append(self.channel, atom.channel)
        self.non_poly = np.append(self.non_poly, atom.kind != "h0")
        return n


def fit_descent(
    kernel: SobolevKernel,
    obj: Objective,
    init: FilterFunction | None = None,
    tol: float = 1e-6,
    max_iter: int = 500,
    max_atoms: int = 200,
    line_search: LineSearchConfig | None = None,
) -> FitResult:
    """Dictionary descent for any link.

    The dictionary holds the polynomial atoms, one full-kernel history atom
    per (event, channel), and a growing family of smooth-part integral atoms
    produced by the gradient: the data-independent weight set for the linear
    link (added once), or the weights Y phi'(X) at the current iterate for
    non-linear links (one set per iteration).  Each iteration expresses the
    exact gradient in dictionary coordinates, solves the subspace Newton
    system, falls back to steepest descent when the Newton direction fails
    the descent or angle test, and moves by a weak Wolfe step.

    For the linear link the intensity must stay nonnegative between events.
    Node feasibility is kept by hinge-squared terms on the violating nodes,
    warm-started with multiplier estimates (an augmented Lagrangian): the
    multipliers drive the violation to zero while the penalty weight stays
    bounded, so the inner problems remain well enough conditioned for the
    angle-safeguarded Newton steps.  Atoms for the forced nodes join the
    dictionary, which makes the constraint force representable and lets the
    subspace Newton direction steer along the boundary.  Convergence is
    always measured in the function-space norm of the gradient of the
    objective currently minimized, which coincides with grad Lambda whenever
    no node force is active.

    The default start is f_0 scaled by a one-dimensional minimization of the
    objective along it; pass ``init`` to start elsewhere.
    """
    cfg = line_search if line_search is not None else LineSearchConfig()
    if tol <= 0 or max_iter < 1:
        raise ConfigError("need tol > 0 and max_iter >= 1")
    link = obj.link
    lam = obj.penalty_weight
    linear = link.kind == "linear"
    ws = _Workspace(kernel, obj)

    phi_cols = np.zeros((obj.n_channels, kernel.m), dtype=int)
    for ch in range(obj.n_channels):
        for k in range(1, kernel.m + 1):
            phi_cols[ch, k - 1] = ws.add(h0_poly(kernel, ch, k))

    eta_events: list[int] = []
    eta_cols: list[int] = []
    for pos, atom in enumerate(build_h_atoms(kernel, obj.events, obj.drivers, part="r")):
        if not atom.is_zero:
            eta_events.append(pos // obj.n_channels)
            eta_cols.append(ws.add(atom))
    eta_events_arr = np.array(eta_events, dtype=int)
    eta_cols_arr = np.array(eta_cols, dtype=int)

    # integral atoms are kept as their smooth parts; completions[i] is the
    # polynomial content that, added on the phi columns, restores the
    # full-kernel gradient atom
    def add_f_atoms(link_weights, part="r1"):
        cols, chans, comps = [], [], []
        for atom in build_f_atoms(kernel, obj, part=part, link_weights=link_weights):
            if not atom.is_zero:
                cols.append(ws.add(atom))
                chans.append(atom.channel)
                comps.append(atom.sections_h0(kernel))
        return cols, chans, comps

    gamma = np.zeros(len(ws))

    def pad(vec: np.ndarray) -> np.ndarray:
        return np.append(vec, np.zeros(len(ws) - vec.size))

    init_f_weights = None
    if linear:
        f_cols, f_chans, f_comps = add_f_atoms(None)
    else:
        init_f_weights = obj.weights * obj.y_nodes * link.deriv(np.zeros(obj.nodes.size))
        f_cols, f_chans, f_comps = add_f_atoms(init_f_weights)
    gamma = pad(gamma)
    if len(ws) + obj.n_channels > max_atoms:
        raise ConfigError(
            f"max_atoms={max_atoms} cannot hold the initial dictionary "
            f"({len(ws)} atoms) plus one integral atom per channel"
        )

    def event_terms(x_events: np.ndarray):
        phi_e = link.value(x_events)
        lam_e = obj.y_events * phi_e
        if lam_e.size and lam_e.min() <= 0.0:
            i = int(np.argmin(lam_e))
            raise InfeasibleError(
                f"non-positive intensity {lam_e[i]} at event t={obj.events.times[i]}"
            )
        return phi_e

    log_y = float(np.sum(np.log(obj.y_events))) if len(obj.events) else 0.0

    def value_at(gam_vec: np.ndarray, check_nodes: bool = True) -> float:
        """Plain objective at dictionary coefficients; +inf when infeasible.

        ``check_nodes`` rejects linear-link predictors below -d; used only
        for the initialization search, which must start feasible.
        """
        xe = ws.E @ gam_vec
        phi_e = link.value(xe)
        if phi_e.size and (obj.y_events * phi_e).min() <= 0.0:
            return np.inf
        pen = lam * float(gam_vec @ ws.Gp @ gam_vec)
        xn = ws.U @ gam_vec
        if linear:
            if check_nodes and xn.size and xn.min() < -link.d - _FEAS_SLACK * max(
                1.0, link.d
            ):
                return np.inf
            val = float(ws.comp @ gam_vec) + link.d * obj.int_y + pen
        else:
            val = float(obj.weights @ (obj.y_nodes * link.value(xn))) + pen
        if phi_e.size:
            val -= float(np.sum(np.log(phi_e))) + log_y
        return val

    if init is not None:
        if init.kernel != kernel or init.n_channels != obj.n_channels:
            raise ConfigError("init filter does not match the kernel/data")
        for atom, coeff in zip(init.atoms, init.coefficients):
            if coeff != 0.0:
                idx = ws.add(atom)
                gamma = pad(gamma)
                gamma[idx] = coeff
    elif f_cols:
        # default start: f_0 scaled by a 1-D minimization of the objective
        direction = np.zeros(len(ws))
        direction[f_cols] = 1.0

        def along(a: float) -> float:
            with np.errstate(over="ignore"):
                return value_at(a * direction)

        best_a, best_f = 0.0, along(0.0)
        for a in np.concatenate([np.geomspace(1e-4, 1e4, 33), -np.geomspace(1e-4, 1e4, 33)]):
            fa = along(float(a))
            if fa < best_f:
                best_a, best_f = float(a), fa
        if best_a != 0.0:
            lo, hi = sorted((best_a / 8.0, best_a * 8.0))
            res = scipy.optimize.minimize_scalar(along, bounds=(lo, hi), method="bounded")
            if np.isfinite(res.fun) and res.fun < best_f:
                best_a = float(res.x)
        gamma = best_a * direction

    obj_trace: list[float] = []
    gn_trace: list[float] = []
    wolfe_log: list[dict] = []
    dict_size_trace: list[int] = []
    pass_starts: list[int] = []
    status = "max_iter"
    gn0 = None
    ridge_used = False
    cap_reached = False
    n_iter = 0
    n_eval = 0
    # Linear link: augmented Lagrangian on the node constraints X_q + d >= 0.
    # The force weight on node q is w_q = max(0, y_q - 2 mu (X_q + d)); the
    # term added to the objective is sum_q (w_q^2 - y_q^2) / (4 mu), which at
    # y = 0 reduces to the plain hinge square mu min(X_q + d, 0)^2.  The term
    # vanishes identically on the feasible region when y = 0, so interior
    # problems never see it.
    n_nodes = obj.nodes.size
    y_mult = np.zeros(n_nodes)
    mu = 1.0 if linear else 0.0
    n_pass = 0
    mu_raises = 0
    viol_prev = np.inf
    pass_tol = max(tol, 1e-3)
    node_cols: list[int] = []
    node_idx: list[int] = []
    node_added = np.zeros(n_nodes, dtype=bool)
    last_f_weights = init_f_weights
    val_plain = np.inf
    gn_plain = np.inf
    viol_inf = 0.0
    w_force = np.zeros(0)
    c_nodes = np.zeros(0)

    def pass_update() -> None:
        """Multiplier update, with a penalty raise when violation stalls."""
        nonlocal y_mult, mu, n_pass, mu_raises, viol_prev, pass_tol
        y_new = w_force.copy()
        infeasible = viol_inf > _FEAS_SLACK * max(1.0, link.d)
        # keep mu moderate: a stiff hinge Hessian makes the Newton direction
        # fail the search-direction angle test, and the damped fallback
        # crawls; extra multiplier passes are much cheaper
        if infeasible and viol_inf > 0.25 * viol_prev and mu_raises < 20 and mu < 1e2:
            mu *= 10.0
            mu_raises += 1
        if viol_inf > 0.0:
            viol_prev = viol_inf
        y_mult = y_new
        n_pass += 1
        pass_starts.append(len(obj_trace) - 1)
        pass_tol = max(tol, 0.1 * pass_tol)

    while True:
        Xn = ws.U @ gamma
        if linear:
            c_nodes = Xn + link.d
            w_force = np.maximum(0.0, y_mult - 2.0 * mu * c_nodes)
            viol_inf = float(max(0.0, -c_nodes.min())) if c_nodes.size else 0.0
            if w_force.size and w_force.max() > 0.0:
                wanted = (~node_added) & (w_force > 1e-2 * w_force.max())
                room = max_atoms - len(ws) - obj.n_channels
                if wanted.any() and room > 0:
                    cand = np.flatnonzero(wanted)
                    cand = cand[np.argsort(w_force[cand])[::-1]][: min(room, 64)]
                    onehot = np.zeros(n_nodes)
                    for q in cand:
                        node_added[q] = True
                        onehot[q] = 1.0
                        for atom in build_f_atoms(
                            kernel, obj, part="r", link_weights=onehot
                        ):
                            if not atom.is_zero:
                                node_idx.append(int(q))
                                node_cols.append(ws.add(atom))
                        onehot[q] = 0.0
                    gamma = pad(gamma)
                    Xn = ws.U @ gamma
                elif wanted.any():
                    cap_reached = True
        Xe = ws.E @ gamma
        phi_e = event_terms(Xe)
        rho = link.deriv(Xe) / phi_e if phi_e.size else np.empty(0)

        # integral atoms of the gradient at the current iterate
        if linear:
            f_now, f_now_chans, f_now_comps = f_cols, f_chans, f_comps
        else:
            w_link = obj.weights * obj.y_nodes * link.deriv(Xn)
            if last_f_weights is not None and np.array_equal(w_link, last_f_weights):
                f_now, f_now_chans, f_now_comps = f_cols, f_chans, f_comps
            elif len(ws) + obj.n_channels <= max_atoms:
                f_now, f_now_chans, f_now_comps = add_f_atoms(w_link)
                gamma = pad(gamma)
                Xn = ws.U @ gamma
                Xe = ws.E @ gamma
                f_cols, f_chans, f_comps = f_now, f_now_chans, f_now_comps
                last_f_weights = w_link
            else:
                cap_reached = True
                f_now, f_now_chans, f_now_comps = f_cols, f_chans, f_comps

        # structural coordinates of grad Lambda on the dictionary
        gam_grad = np.zeros(len(ws))
        if rho.size and eta_cols_arr.size:
            gam_grad[eta_cols_arr] -= rho[eta_events_arr]
        for col, ch, comp_vec in zip(f_now, f_now_chans, f_now_comps):
            gam_grad[col] += 1.0
            gam_grad[phi_cols[ch]] += comp_vec
        if lam != 0.0:
            gam_grad += 2.0 * lam * np.where(ws.non_poly, gamma, 0.0)
            # the penalty gradient is 2 lam P g: strip the polynomial content
            # that full-kernel atoms carry
            for ch in range(obj.n_channels):
                mask = ws.non_poly & (ws.channel == ch)
                if mask.any():
                    gam_grad[phi_cols[ch]] -= 2.0 * lam * (
                        ws.h0_mat[mask].T @ gamma[mask]
                    )

        gn_plain = float(np.sqrt(max(gam_grad @ ws.G @ gam_grad, 0.0)))
        val_plain = value_at(gamma, check_nodes=False)
        val = val_plain
        w_rem = np.zeros(0)
        force_on = linear and w_force.size and w_force.max() > 0.0
        if force_on:
            # constraint force -sum_q w_q eta_q: exact coordinates on the
            # node atoms in the dictionary, norm corrections for the rest
            if node_cols:
                np.subtract.at(
                    gam_grad,
                    np.asarray(node_cols),
                    w_force[np.asarray(node_idx)],
                )
            w_rem = np.where(node_added, 0.0, w_force)
            gn2 = float(gam_grad @ ws.G @ gam_grad)
            if w_rem.max() > 0.0:
                gn2 -= 2.0 * float(w_rem @ (ws.U @ gam_grad))
                for atom in build_f_atoms(kernel, obj, part="r", link_weights=w_rem):
                    gn2 += float(full_inner_row(atom, [atom])[0])
            gn = float(np.sqrt(max(gn2, 0.0)))
        else:
            gn = gn_plain
        if linear and mu > 0.0 and (force_on or y_mult.max() > 0.0):
            val += float(np.sum(w_force**2 - y_mult**2)) / (4.0 * mu)

        obj_trace.append(val)
        gn_trace.append(gn)
        dict_size_trace.append(len(ws))
        n_eval += 1
        if gn0 is None:
            gn0 = gn

        feasible_now = not linear or viol_inf <= _FEAS_SLACK * max(1.0, link.d)
        comp_ok = True
        if linear and w_force.size:
            comp = float(np.max(np.minimum(w_force, np.maximum(c_nodes, 0.0))))
            comp_ok = comp <= 1e-6 * max(1.0, float(w_force.max()))
        if feasible_now and comp_ok and gn <= tol * max(1.0, gn0):
            status = "converged"
            break
        if linear and n_pass < 60 and gn <= pass_tol * max(1.0, gn0):
            # the current multiplier problem is solved to its pass tolerance
            pass_update()
            continue
        if n_iter >= max_iter or n_eval > max_iter + 80:
            break

        # coordinate gradient of the current objective
        if linear:
            d_vec = ws.comp + 2.0 * lam * (ws.Gp @ gamma)
        else:
            wq = obj.weights * obj.y_nodes * link.deriv(Xn)
            d_vec = ws.U.T @ wq + 2.0 * lam * (ws.Gp @ gamma)
        if rho.size:
            d_vec -= ws.E.T @ rho
        if force_on:
            d_vec -= ws.U.T @ w_force

        wq2 = obj.weights * obj.y_nodes * link.deriv2(Xn)
        H = (ws.U * wq2[:, None]).T @ ws.U + 2.0 * lam * ws.Gp
        if phi_e.size:
            dphi = link.deriv(Xe)
            b_ev = (link.deriv2(Xe) * phi_e - dphi**2) / phi_e**2
            H -= (ws.E * b_ev[:, None]).T @ ws.E
        if linear and mu > 0.0:
            act = (y_mult - 2.0 * mu * c_nodes) > 0.0
            if act.any():
                Ua = ws.U[act]
                H += 2.0 * mu * Ua.T @ Ua
        H = 0.5 * (H + H.T)

        def _dir_cosine(slope: float, norm2: float) -> float:
            return -slope / max(gn * np.sqrt(max(norm2, 0.0)), 1e-300)

        delta, used = _solve_spd(H, -d_vec)
        ridge_used = ridge_used or used
        d0 = float(d_vec @ delta)
        dn2 = float(delta @ ws.G @ delta)
        direction_kind = "newton"
        cosine = _dir_cosine(d0, dn2)
        good_dir = d0 < 0.0 and dn2 > 0.0 and cosine >= cfg.delta
        if not good_dir:
            # Levenberg damping in the function-space metric: sigma sweeps
            # the direction from Newton toward the best in-span descent
            # direction, which raises the angle with -grad without growing
            # the dictionary
            sigma = 1e-6 * max(float(np.trace(H)) / max(len(ws), 1), 1.0)
            for _ in range(14):
                delta_t, used = _solve_spd(H + sigma * ws.G, -d_vec)
                d0_t = float(d_vec @ delta_t)
                dn2_t = float(delta_t @ ws.G @ delta_t)
                cos_t = _dir_cosine(d0_t, dn2_t)
                if d0_t < 0.0 and dn2_t > 0.0 and cos_t >= cfg.delta:
                    delta, d0, dn2, cosine = delta_t, d0_t, dn2_t, cos_t
                    direction_kind = "damped_newton"
                    ridge_used = ridge_used or used
                    good_dir = True
                    break
                sigma *= 10.0
        if not good_dir:
            direction_kind = "steepest"
            if force_on and w_rem.size and w_rem.max() > 0.0:
                # -grad needs the unrepresented part of the constraint force
                # in the dictionary; add it as one combined atom per channel
                if len(ws) + obj.n_channels <= max_atoms:
                    rem_cols, _, _ = add_f_atoms(w_rem, part="r")
                    gamma = pad(gamma)
                    gam_grad = pad(gam_grad)
                    delta = -gam_grad
                    delta[rem_cols] = 1.0
                    Xn = ws.U @ gamma
                    Xe = ws.E @ gamma
                    d0 = -float(gn**2)
                else:
                    cap_reached = True
                    delta = -gam_grad
                    d0 = float(d_vec @ delta)
                    if d0 >= 0.0:
                        status = "converged" if gn <= tol * max(1.0, gn0) else "stalled"
                        break
            else:
                delta = -gam_grad
                d0 = -float(gn**2)
            cosine = -d0 / max(gn, 1e-300) / max(
                float(np.sqrt(max(delta @ ws.G @ delta, 0.0))), 1e-300
            )
            if d0 >= 0.0:
                status = "converged" if gn <= tol * max(1.0, gn0) else "stalled"
                break

        Ud = ws.U @ delta
        Ed = ws.E @ delta
        Gp_d = ws.Gp @ delta
        g_gp_d = float(gamma @ Gp_d)
        d_gp_d = float(delta @ Gp_d)
        g_gp_g = float(gamma @ (ws.Gp @ gamma))
        comp_d = float(ws.comp @ delta) if linear else 0.0
        comp_g = float(ws.comp @ gamma) if linear else 0.0

        def trial(alpha: float):
            xe = Xe + alpha * Ed
            phi_a = link.value(xe)
            if phi_a.size and (obj.y_events * phi_a).min() <= 0.0:
                return False, np.nan, np.nan
            pen = lam * (g_gp_g + 2.0 * alpha * g_gp_d + alpha**2 * d_gp_d)
            pen_d = 2.0 * lam * (g_gp_d + alpha * d_gp_d)
            xn = Xn + alpha * Ud
            if linear:
                f_a = comp_g + alpha * comp_d + link.d * obj.int_y + pen
                df = comp_d + pen_d
                if mu > 0.0:
                    w_a = np.maximum(0.0, y_mult - 2.0 * mu * (xn + link.d))
                    f_a += float(np.sum(w_a**2 - y_mult**2)) / (4.0 * mu)
                    df -= float(w_a @ Ud)
            else:
                f_a = float(obj.weights @ (obj.y_nodes * link.value(xn))) + pen
                df = float((obj.weights * obj.y_nodes * link.deriv(xn)) @ Ud) + pen_d
            if phi_a.size:
                f_a -= float(np.sum(np.log(phi_a))) + log_y
                df -= float((link.deriv(xe) / phi_a) @ Ed)
            return True, f_a, df

        alpha, f_a, d_a, log, ok = _weak_wolfe_search(trial, val, d0, cfg)
        wolfe_log.append(
            {
                "iteration": n_iter,
                "mu": mu,
                "direction": direction_kind,
                "cosine": float(cosine),
                "f0": val,
                "deriv0": d0,
                "grad_norm": gn,
                "step_norm": float(np.sqrt(max(delta @ ws.G @ delta, 0.0))),
                "accepted_alpha": float(alpha) if ok else None,
                "n_trials": len(log),
                "trials": log,
            }
        )
        if not ok:
            best = None
            for entry in log:
                if entry["feasible"] and entry["value"] < val:
                    if best is None or entry["value"] < best["value"]:
                        best = entry
            if best is None:
                if linear and n_pass < 60 and (
                    force_on or viol_inf > _FEAS_SLACK * max(1.0, link.d)
                ):
                    # stalled under an active constraint force: updating the
                    # multipliers changes the landscape, so try that before
                    # giving up
                    pass_update()
                    continue
                status = "stalled"
                break
            alpha = best["alpha"]
        gamma = gamma + alpha * delta
        n_iter += 1

    g_hat = FilterFunction(kernel, obj.n_channels, tuple(ws.atoms), gamma)
    return FitResult(
        g_hat=g_hat,
        status=status,
        n_iter=n_iter,
        objective=float(val_plain),
        grad_norm=float(gn_trace[-1]) if gn_trace else 0.0,
        objective_trace=np.array(obj_trace),
        grad_norm_trace=np.array(gn_trace),
        diagnostics={
            "ridge_used": ridge_used,
            "atom_cap_reached": cap_reached,
            "n_atoms": len(ws),
            "dict_size_trace": dict_size_trace,
            "wolfe_log": wolfe_log,
            "hinge_passes": n_pass,
            "hinge_mu": mu,
            "hinge_starts": pass_starts,
            "max_node_violation": viol_inf,
            "plain_grad_norm": float(gn_plain),
            "multiplier_max": float(y_mult.max()) if y_mult.size else 0.0,
            "n_node_atoms": len(node_cols),
            "unpenalized": lam == 0.0,
        },
    )
