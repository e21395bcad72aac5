"""Penalized minus-log-likelihood of a generalized linear point process.

For a counting process N with events tau_i, at-risk process Y, drivers Z and
filter g, the intensity is lambda_s = Y_s * phi(X_s-) with linear predictor
X_s- = sum_j sum_{sigma < s} dZ g_j(s - sigma), and

    l_t(g) = int_0^t Y_s phi(X_s-) ds - sum_i log(Y_tau_i phi(X_tau_i-)).

The penalized objective adds lam * ||P g||^2, the squared H1 semi-norm.

Two consistent evaluation regimes are used.  For the linear link phi(x)=x+d
the compensator integral is linear in g and every atom has an exact
antiderivative, so the integral term is closed-form (no quadrature at all).
For general links the integral is discretized by composite Gauss-Legendre
quadrature on a partition split at every event, driver jump and at-risk
breakpoint; the reported gradient is then the exact gradient of the
discretized objective, which keeps line searches and finite-difference
checks sharp in both regimes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .data import AtRiskProcess, DriverSeries, EventSeries
from .errors import ConfigError, DomainError, InfeasibleError
from .filters import Atom, FilterFunction, integrated_points, integrated_segments, section_sum
from .kernel import SobolevKernel

__all__ = [
    "LinkSpec",
    "Objective",
    "QuadratureConfig",
    "compensator",
    "exponential_link",
    "gradient",
    "hessian_coords",
    "intensity",
    "linear_link",
    "linear_predictor",
    "neg_log_lik",
    "objective_value",
    "softplus_link",
]

# numerical slack on the linear-link domain boundary: fitted filters may sit
# on the constraint up to the solvers' feasibility tolerance, and evaluating
# them must not fail there
_BOUNDARY_SLACK = 1e-7


# -- link functions -----------------------------------------------------------


@dataclass(frozen=True)
class LinkSpec:
    """Monotone link phi mapping the linear predictor to an intensity scale."""

    kind: str
    d: float = 0.0

    def __post_init__(self):
        if self.kind not in ("linear", "exponential", "softplus"):
            raise ConfigError(f"unknown link kind {self.kind!r}")
        if self.kind == "linear" and (not np.isfinite(self.d) or self.d < 0):
            raise ConfigError(f"linear link offset d must be >= 0, got {self.d!r}")

    @property
    def domain_min(self) -> float:
        """Lower edge of the predictor domain (inclusive)."""
        return -self.d if self.kind == "linear" else -np.inf

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            return x + self.d
        if self.kind == "exponential":
            return np.exp(x)
        return np.logaddexp(0.0, x)

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            return np.ones(x.shape)
        if self.kind == "exponential":
            return np.exp(x)
        return expit(x)

    def deriv2(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            return np.zeros(x.shape)
        if self.kind == "exponential":
            return np.exp(x)
        sig = expit(x)
        return sig * (1.0 - sig)


def linear_link(d: float) -> LinkSpec:
    return LinkSpec("linear", float(d))


def exponential_link() -> LinkSpec:
    return LinkSpec("exponential")


def softplus_link() -> LinkSpec:
    return LinkSpec("softplus")


# -- quadrature ----------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureConfig:
    """Composite Gauss-Legendre rule: this many nodes per partition interval."""

    nodes_per_interval: int = 8

    def __post_init__(self):
        if not isinstance(self.nodes_per_interval, int) or self.nodes_per_interval < 2:
            raise ConfigError(
                f"nodes_per_interval must be an integer >= 2, got {self.nodes_per_interval!r}"
            )


@lru_cache(maxsize=None)
def _leggauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def _partition(horizon: float, events: EventSeries, drivers: DriverSeries, at_risk: AtRiskProcess) -> np.ndarray:
    pts = [np.array([0.0, horizon]), events.times]
    for ch in drivers.channels:
        pts.append(ch.times)
    pts.append(at_risk.breakpoints)
    edges = np.unique(np.concatenate(pts))
    return edges[(edges >= 0.0) & (edges <= horizon)]


def _gauss_nodes(edges: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = _leggauss(n)
    a = edges[:-1]
    width = np.diff(edges)
    keep = width > 0
    a, width = a[keep], width[keep]
    nodes = (a[:, None] + (x[None, :] + 1.0) * width[:, None] / 2.0).ravel()
    weights = (w[None, :] * width[:, None] / 2.0).ravel()
    return nodes, weights


def _history_pairs(eval_times: np.ndarray, times: np.ndarray, sizes: np.ndarray):
    """Flatten all (evaluation point, strictly earlier jump) pairs."""
    counts = np.searchsorted(times, eval_times, side="left")
    total = int(counts.sum())
    eval_idx = np.repeat(np.arange(eval_times.size), counts)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    jump_idx = np.arange(total) - offsets
    lags = eval_times[eval_idx] - times[jump_idx]
    return eval_idx, counts, lags, sizes[jump_idx]


# -- the objective -------------------------------------------------------------


class Objective:
    """Data, link, penalty weight and quadrature bundled for repeated evaluation.

    Precomputes the quadrature grid and, for every driver channel, the flat
    arrays of (evaluation point, earlier jump) pairs at both the quadrature
    nodes and the event times.  Per-atom predictor columns and compensator
    rows are then single vectorized passes.
    """

    def __init__(
        self,
        link: LinkSpec,
        penalty_weight: float,
        events: EventSeries,
        drivers: DriverSeries,
        at_risk: AtRiskProcess | None = None,
        quadrature: QuadratureConfig | None = None,
    ):
        if not np.isfinite(penalty_weight) or penalty_weight < 0:
            raise ConfigError(f"penalty weight must be >= 0, got {penalty_weight!r}")
        if events.horizon != drivers.horizon:
            raise ConfigError("events and drivers disagree on the horizon")
        self.link = link
        self.penalty_weight = float(penalty_weight)
        self.events = events
        self.drivers = drivers
        self.at_risk = at_risk if at_risk is not None else AtRiskProcess.unit()
        self.quadrature = quadrature if quadrature is not None else QuadratureConfig()
        self.horizon = float(events.horizon)
        self.n_channels = drivers.n_channels

        edges = _partition(self.horizon, events, drivers, self.at_risk)
        self.nodes, self.weights = _gauss_nodes(edges, self.quadrature.nodes_per_interval)
        self.y_nodes = self.at_risk.at(self.nodes)
        self.y_events = self.at_risk.at(events.times)
        self.int_y = self.at_risk.integral(self.horizon)
        self.pieces = self.at_risk.pieces(self.horizon)

        if len(events) and self.y_events.min() <= 0.0:
            i = int(np.argmin(self.y_events))
            raise InfeasibleError(
                f"at-risk process is zero at observed event t={events.times[i]}"
            )

        self._node_pairs = [
            _history_pairs(self.nodes, ch.times, ch.sizes) for ch in drivers.channels
        ]
        self._event_pairs = [
            _history_pairs(events.times, ch.times, ch.sizes) for ch in drivers.channels
        ]
        self._segment_support = [
            self._build_segment_support(j) for j in range(self.n_channels)
        ]

    def _build_segment_support(self, channel: int):
        """Lag segments carrying int_0^t Y_s X_s-(.) ds on one channel.

        Over each constancy piece (a, b] of Y, a jump at sigma < b contributes
        the lag interval (max(a - sigma, 0), b - sigma] with weight Y * dZ.
        """
        ch = self.drivers.channels[channel]
        lo_all, hi_all, w_all = [], [], []
        for a, b, y in self.pieces:
            if y == 0.0:
                continue
            mask = ch.times < b
            if not mask.any():
                continue
            sigma = ch.times[mask]
            lo_all.append(np.maximum(a - sigma, 0.0))
            hi_all.append(b - sigma)
            w_all.append(y * ch.sizes[mask])
        if not lo_all:
            return np.empty(0), np.empty(0), np.empty(0)
        return np.concatenate(lo_all), np.concatenate(hi_all), np.concatenate(w_all)

    def integral_support(self, channel: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(lo, hi, weights) arrays of the exact compensator support."""
        return self._segment_support[channel]

    # -- per-atom structural columns ------------------------------------------

    def _column(self, pairs, size: int, kernel: SobolevKernel, atom: Atom) -> np.ndarray:
        eval_idx, _, lags, dz = pairs[atom.channel]
        if lags.size == 0:
            return np.zeros(size)
        vals = atom.value(kernel, lags) * dz
        return np.bincount(eval_idx, weights=vals, minlength=size)

    def node_column(self, kernel: SobolevKernel, atom: Atom) -> np.ndarray:
        """Predictor of the atom at all quadrature nodes."""
        return self._column(self._node_pairs, self.nodes.size, kernel, atom)

    def event_column(self, kernel: SobolevKernel, atom: Atom) -> np.ndarray:
        """Predictor of the atom at all event times (strict left limits)."""
        return self._column(self._event_pairs, len(self.events), kernel, atom)

    def comp_row(self, kernel: SobolevKernel, atom: Atom) -> float:
        """Exact int_0^t Y_s X_s-(atom) ds via atom antiderivatives."""
        lo, hi, w = self._segment_support[atom.channel]
        if w.size == 0:
            return 0.0
        vals = atom.antiderivative(kernel, hi) - atom.antiderivative(kernel, lo)
        return float(w @ vals)

    # -- predictors of a full filter -------------------------------------------

    def _check_filter(self, g: FilterFunction) -> None:
        if g.kernel.horizon != self.horizon:
            raise ConfigError("filter kernel horizon does not match the data horizon")
        if g.n_channels != self.n_channels:
            raise ConfigError(
                f"filter has {g.n_channels} channels, data has {self.n_channels}"
            )

    def predictor_nodes(self, g: FilterFunction) -> np.ndarray:
        self._check_filter(g)
        out = np.zeros(self.nodes.size)
        for atom, c in zip(g.atoms, g.coefficients):
            if c != 0.0:
                out += c * self.node_column(g.kernel, atom)
        return out

    def predictor_events(self, g: FilterFunction) -> np.ndarray:
        self._check_filter(g)
        out = np.zeros(len(self.events))
        for atom, c in zip(g.atoms, g.coefficients):
            if c != 0.0:
                out += c * self.event_column(g.kernel, atom)
        return out


# -- public operations ----------------------------------------------------------


def linear_predictor(g: FilterFunction, drivers: DriverSeries, s) -> np.ndarray:
    """X_s-(g) = sum_j sum_{sigma < s} dZ g_j(s - sigma) at the given times."""
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    if s_arr.size and (s_arr.min() < 0.0 or s_arr.max() > drivers.horizon):
        raise DomainError("evaluation times must lie in [0, horizon]")
    out = np.zeros(s_arr.shape)
    for j, ch in enumerate(drivers.channels):
        eval_idx, _, lags, dz = _history_pairs(s_arr, ch.times, ch.sizes)
        if lags.size:
            vals = g.evaluate(j, lags) * dz
            out += np.bincount(eval_idx, weights=vals, minlength=s_arr.size)
    return float(out[0]) if np.isscalar(s) or np.ndim(s) == 0 else out


def intensity(g: FilterFunction, link: LinkSpec, at_risk: AtRiskProcess, drivers: DriverSeries, s):
    """lambda_s = Y_s phi(X_s-) at the given times."""
    x = linear_predictor(g, drivers, s)
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    slack = _BOUNDARY_SLACK * max(1.0, link.d)
    if link.kind == "linear" and x_arr.size and x_arr.min() < link.domain_min - slack:
        i = int(np.argmin(x_arr))
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        raise DomainError(
            f"predictor {x_arr[i]} below domain minimum {link.domain_min} at s={s_arr[i]}",
            at=float(s_arr[i]),
            value=float(x_arr[i]),
        )
    y = at_risk.at(s)
    out = y * link.value(x)
    if link.kind == "linear":
        out = np.maximum(out, 0.0)  # clip hairline boundary rounding
    return float(out) if np.ndim(out) == 0 else out


def _event_terms(g: FilterFunction, obj: Objective) -> tuple[np.ndarray, np.ndarray]:
    """(X at events, phi(X) at events), with feasibility checks."""
    x = obj.predictor_events(g)
    phi = obj.link.value(x)
    lam = obj.y_events * phi
    if lam.size and lam.min() <= 0.0:
        i = int(np.argmin(lam))
        raise InfeasibleError(
            f"non-positive intensity {lam[i]} at event t={obj.events.times[i]}"
        )
    return x, phi


def _check_node_domain(obj: Objective, x_nodes: np.ndarray) -> None:
    if obj.link.kind != "linear" or not x_nodes.size:
        return
    # tolerate rounding at an active boundary; matches the fitters' slack
    slack = _BOUNDARY_SLACK * max(1.0, obj.link.d)
    if x_nodes.min() < obj.link.domain_min - slack:
        i = int(np.argmin(x_nodes))
        raise DomainError(
            f"predictor {x_nodes[i]} below domain minimum at s={obj.nodes[i]}",
            at=float(obj.nodes[i]),
            value=float(x_nodes[i]),
        )


def neg_log_lik(g: FilterFunction, obj: Objective) -> float:
    """Minus log-likelihood; exact compensator for the linear link."""
    x_events, phi_events = _event_terms(g, obj)
    if obj.link.kind == "linear":
        x_nodes = obj.predictor_nodes(g)
        _check_node_domain(obj, x_nodes)
        comp = obj.link.d * obj.int_y
        for atom, c in zip(g.atoms, g.coefficients):
            if c != 0.0:
                comp += c * obj.comp_row(g.kernel, atom)
    else:
        x_nodes = obj.predictor_nodes(g)
        comp = float(obj.weights @ (obj.y_nodes * obj.link.value(x_nodes)))
    event_term = float(np.sum(np.log(obj.y_events * phi_events))) if phi_events.size else 0.0
    return comp - event_term


def objective_value(g: FilterFunction, obj: Objective) -> float:
    """Penalized objective l_t(g) + lam ||P g||^2."""
    return neg_log_lik(g, obj) + obj.penalty_weight * g.h1_seminorm_sq()


def _gradient_event_atoms(g: FilterFunction, obj: Objective, rho: np.ndarray):
    """Event atoms of the gradient: full-kernel history sums per event."""
    atoms = []
    coeffs = []
    for ch in range(obj.n_channels):
        eval_idx, counts, lags, dz = obj._event_pairs[ch]
        bounds = np.concatenate(([0], np.cumsum(counts)))
        for i in range(len(obj.events)):
            lo, hi = bounds[i], bounds[i + 1]
            if hi == lo:
                continue
            atoms.append(section_sum(g.kernel, ch, lags[lo:hi], dz[lo:hi], part="r"))
            coeffs.append(-float(rho[i]))
    return atoms, coeffs


def _gradient_integral_atoms(g: FilterFunction, obj: Objective, x_nodes: np.ndarray):
    """Integral atoms of the gradient, one per channel.

    Linear link: the weight Y_s phi'(X) = Y_s is piecewise constant, so the
    atom is an exact integrated-segment atom.  Other links: pointwise
    quadrature weights at the (node, jump) pairs, making the result the exact
    gradient of the discretized compensator.
    """
    atoms = []
    coeffs = []
    if obj.link.kind == "linear":
        for ch_idx in range(obj.n_channels):
            lo, hi, w = obj._segment_support[ch_idx]
            if w.size == 0:
                continue
            atom = integrated_segments(g.kernel, ch_idx, lo, hi, w, part="r")
            if not atom.is_zero:
                atoms.append(atom)
                coeffs.append(1.0)
    else:
        node_weight = obj.weights * obj.y_nodes * obj.link.deriv(x_nodes)
        for ch_idx in range(obj.n_channels):
            eval_idx, _, lags, dz = obj._node_pairs[ch_idx]
            if lags.size == 0:
                continue
            atom = integrated_points(
                g.kernel, ch_idx, lags, node_weight[eval_idx] * dz, part="r"
            )
            if not atom.is_zero:
                atoms.append(atom)
                coeffs.append(1.0)
    return atoms, coeffs


def gradient(g: FilterFunction, obj: Objective) -> FilterFunction:
    """Gradient of the penalized objective as a filter function.

    Consists of one integral atom per channel, one full-kernel history atom
    per event with coefficient -phi'/phi(X_tau-), and the penalty part
    2 lam P g.
    """
    x_events, phi_events = _event_terms(g, obj)
    x_nodes = obj.predictor_nodes(g)
    _check_node_domain(obj, x_nodes)
    rho = obj.link.deriv(x_events) / phi_events if phi_events.size else np.empty(0)

    atoms, coeffs = _gradient_integral_atoms(g, obj, x_nodes)
    ev_atoms, ev_coeffs = _gradient_event_atoms(g, obj, rho)
    atoms.extend(ev_atoms)
    coeffs.extend(ev_coeffs)

    if obj.penalty_weight != 0.0:
        for atom, c in zip(g.atoms, g.coefficients):
            if c == 0.0 or atom.kind == "h0":
                continue
            proj = atom.projected()
            if not proj.is_zero:
                atoms.append(proj)
                coeffs.append(2.0 * obj.penalty_weight * c)

    return FilterFunction(g.kernel, obj.n_channels, tuple(atoms), np.array(coeffs))


def hessian_coords(g: FilterFunction, obj: Objective, basis_atoms, kernel: SobolevKernel | None = None) -> np.ndarray:
    """Hessian of the penalized objective restricted to span(basis_atoms).

    H_ab = int Y phi''(X) X(a) X(b) ds
         - sum_i (phi'' phi - phi'^2)/phi^2 (X_tau-) X_tau-(a) X_tau-(b)
         + 2 lam <P a, P b>.
    """
    from .filters import h1_gram  # local import to avoid cycle at module load

    basis_atoms = list(basis_atoms)
    kernel = kernel if kernel is not None else g.kernel
    n = len(basis_atoms)
    if n == 0:
        return np.zeros((0, 0))
    x_events, phi_events = _event_terms(g, obj)
    x_nodes = obj.predictor_nodes(g)

    U = np.column_stack([obj.node_column(kernel, a) for a in basis_atoms])
    E = (
        np.column_stack([obj.event_column(kernel, a) for a in basis_atoms])
        if len(obj.events)
        else np.zeros((0, n))
    )
    w_nodes = obj.weights * obj.y_nodes * obj.link.deriv2(x_nodes)
    H = U.T @ (w_nodes[:, None] * U)
    if len(obj.events):
        dphi = obj.link.deriv(x_events)
        b_ev = (obj.link.deriv2(x_events) * phi_events - dphi**2) / phi_events**2
        H -= E.T @ (b_ev[:, None] * E)
    H += 2.0 * obj.penalty_weight * h1_gram(basis_atoms)
    return 0.5 * (H + H.T)


def compensator(
    g: FilterFunction,
    link: LinkSpec,
    at_risk: AtRiskProcess,
    drivers: DriverSeries,
    s: float,
    nodes_per_interval: int = 8,
) -> float:
    """Lambda(s) = int_0^s Y phi(X) du; exact for the linear link."""
    s = float(s)
    if not 0.0 <= s <= drivers.horizon:
        raise DomainError(f"compensator endpoint {s} outside [0, horizon]")
    if s == 0.0:
        return 0.0
    pieces = [(a, min(b, s), y) for a, b, y in at_risk.pieces(drivers.horizon) if a < s]
    if link.kind == "linear":
        total = link.d * sum(y * (b - a) for a, b, y in pieces)
        for atom, c in zip(g.atoms, g.coefficients):
            if c == 0.0:
                continue
            ch = drivers.channels[atom.channel]
            for a, b, y in pieces:
                if y == 0.0:
                    continue
                mask = ch.times < b
                if not mask.any():
                    continue
                sigma = ch.times[mask]
                dz = ch.sizes[mask]
                hi = b - sigma
                lo = np.maximum(a - sigma, 0.0)
                vals = atom.antiderivative(g.kernel, hi) - atom.antiderivative(g.kernel, lo)
                total += c * y * float(dz @ vals)
        return float(total)
    edges = [0.0, s]
    edges.extend(t for t in np.concatenate([ch.times for ch in drivers.channels]) if 0.0 < t < s)
    edges.extend(b for b in at_risk.breakpoints if 0.0 < b < s)
    nodes, weights = _gauss_nodes(np.unique(np.array(edges)), nodes_per_interval)
    x = linear_predictor(g, drivers, nodes)
    y = at_risk.at(nodes)
    return float(weights @ (y * link.value(x)))
