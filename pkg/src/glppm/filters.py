"""Filter functions as weighted sums of structured kernel atoms.

Every atom reduces to a normal form with three ingredients on its channel:

* ``sections``: weights w_l on kernel slices R1(lag_l, .) — point evaluations
  of the smooth-part kernel;
* ``segments``: weights w_p on integrated slices int_lo^hi R1(v, .) dv, kept
  symbolically so compensator integrals and inner products stay exact;
* ``h0``: coefficients on the polynomial basis phi_1..phi_m.

Atoms tagged ``part="r"`` carry the polynomial content of the full kernel
R = R0 + R1 inside ``h0``; atoms tagged ``part="r1"`` are orthogonal to the
polynomials.  With this split the H1/H0 projection is exact (drop or keep
``h0``), and all inner products reduce to closed-form kernel evaluations:
section-section pairs hit R1 itself, anything involving a segment hits the
once- or twice-integrated kernel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DomainError
from .kernel import SobolevKernel, _cross_weighted_sum

__all__ = [
    "Atom",
    "FilterFunction",
    "evaluate",
    "full_gram",
    "full_inner_row",
    "h0_poly",
    "h1_gram",
    "h1_inner_row",
    "h1_seminorm_sq",
    "inner_product",
    "integrated_points",
    "integrated_segments",
    "kernel_section",
    "project_p",
    "section_sum",
]

_MERGE_TOL = 1e-12


def _merge_sorted(lags: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort ascending and merge entries whose lags agree within 1e-12."""
    if lags.size == 0:
        return lags, weights
    order = np.argsort(lags, kind="stable")
    lags = lags[order]
    weights = weights[order]
    keep = np.empty(lags.size, dtype=bool)
    keep[0] = True
    np.greater(np.diff(lags), _MERGE_TOL, out=keep[1:])
    group = np.cumsum(keep) - 1
    merged_lags = lags[keep]
    merged_weights = np.bincount(group, weights=weights)
    return merged_lags, merged_weights


def _ro(arr) -> np.ndarray:
    out = np.asarray(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Atom:
    """One basis element of a filter function.  Use the constructors below."""

    channel: int
    kind: str  # "h0" | "section" | "integrated"
    part: str  # "h0" | "r1" | "r"
    m: int
    sec_lags: np.ndarray
    sec_weights: np.ndarray
    seg_nodes: np.ndarray  # sorted segment endpoints
    seg_weights: np.ndarray  # signed: +w at hi, -w at lo
    h0: np.ndarray
    k: int | None = None  # 1-based polynomial index for kind "h0"

    @property
    def is_zero(self) -> bool:
        return (
            self.sec_lags.size == 0
            and self.seg_nodes.size == 0
            and not np.any(self.h0)
        )

    # -- H1 algebra ----------------------------------------------------------

    def h1_value(self, u):
        """Smooth-part value at lag(s) u."""
        m = self.m
        out = _cross_weighted_sum(m, m, self.sec_lags, self.sec_weights, u)
        if self.seg_nodes.size:
            out = out + _cross_weighted_sum(m + 1, m, self.seg_nodes, self.seg_weights, u)
        return out

    def h1_antiderivative(self, x):
        """int_0^x of the smooth part, exactly (cross-order kernels)."""
        m = self.m
        out = _cross_weighted_sum(m, m + 1, self.sec_lags, self.sec_weights, x)
        if self.seg_nodes.size:
            out = out + _cross_weighted_sum(m + 1, m + 1, self.seg_nodes, self.seg_weights, x)
        return out

    def value(self, kernel: SobolevKernel, u):
        kernel._check_domain(u)
        out = self.h1_value(u)
        if np.any(self.h0):
            out = out + np.tensordot(self.h0, kernel.h0_basis(u), axes=(0, 0))
        return out

    def antiderivative(self, kernel: SobolevKernel, x):
        """int_0^x atom(v) dv including the polynomial part, exactly."""
        kernel._check_domain(x)
        out = self.h1_antiderivative(x)
        if np.any(self.h0):
            out = out + np.tensordot(self.h0, kernel.h0_antiderivative(x), axes=(0, 0))
        return out

    def h1_inner(self, other: "Atom") -> float:
        """<P self, P other> via reproducing identities; 0 across channels."""
        if self.channel != other.channel:
            return 0.0
        total = 0.0
        if other.sec_lags.size:
            total += float(other.sec_weights @ self.h1_value(other.sec_lags))
        if other.seg_nodes.size:
            total += float(other.seg_weights @ self.h1_antiderivative(other.seg_nodes))
        return total

    def sections_h0(self, kernel: SobolevKernel) -> np.ndarray:
        """Polynomial content the sections/segments would carry under the
        full kernel R: sum_l w_l phi_k(lag_l) + segment running integrals."""
        out = np.zeros(self.m)
        if self.sec_lags.size:
            out += kernel.h0_basis(self.sec_lags) @ self.sec_weights
        if self.seg_nodes.size:
            out += kernel.h0_antiderivative(self.seg_nodes) @ self.seg_weights
        return out

    def projected(self) -> "Atom":
        """Image under the projection onto H1 (drop polynomial content)."""
        part = "r1" if self.part != "h0" else "h0"
        return Atom(
            channel=self.channel,
            kind=self.kind,
            part=part,
            m=self.m,
            sec_lags=self.sec_lags,
            sec_weights=self.sec_weights,
            seg_nodes=self.seg_nodes,
            seg_weights=self.seg_weights,
            h0=_ro(np.zeros(self.m)),
            k=self.k,
        )

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        out: dict = {"channel": self.channel, "kind": self.kind, "part": self.part}
        if self.kind == "h0":
            out["k"] = self.k
            return out
        if self.sec_lags.size:
            out["sections"] = {
                "lags": self.sec_lags.tolist(),
                "weights": self.sec_weights.tolist(),
            }
        if self.seg_nodes.size:
            out["segments"] = {
                "nodes": self.seg_nodes.tolist(),
                "weights": self.seg_weights.tolist(),
            }
        return out

    @staticmethod
    def from_dict(kernel: SobolevKernel, d: dict) -> "Atom":
        kind = d["kind"]
        channel = int(d["channel"])
        if kind == "h0":
            return h0_poly(kernel, channel, int(d["k"]))
        part = d["part"]
        sec = d.get("sections", {"lags": [], "weights": []})
        seg = d.get("segments", {"nodes": [], "weights": []})
        return _normal_form_atom(
            kernel,
            channel,
            kind,
            part,
            np.asarray(sec["lags"], dtype=float),
            np.asarray(sec["weights"], dtype=float),
            np.asarray(seg["nodes"], dtype=float),
            np.asarray(seg["weights"], dtype=float),
        )


def _normal_form_atom(kernel, channel, kind, part, sec_lags, sec_weights, seg_nodes, seg_weights) -> Atom:
    if part not in ("r1", "r"):
        raise ConfigError(f"atom part must be 'r1' or 'r', got {part!r}")
    kernel._check_domain(sec_lags, seg_nodes)
    sec_lags, sec_weights = _merge_sorted(sec_lags, sec_weights)
    seg_nodes, seg_weights = _merge_sorted(seg_nodes, seg_weights)
    atom = Atom(
        channel=int(channel),
        kind=kind,
        part=part,
        m=kernel.m,
        sec_lags=_ro(sec_lags),
        sec_weights=_ro(sec_weights),
        seg_nodes=_ro(seg_nodes),
        seg_weights=_ro(seg_weights),
        h0=_ro(np.zeros(kernel.m)),
    )
    if part == "r":
        object.__setattr__(atom, "h0", _ro(atom.sections_h0(kernel)))
    return atom


# -- constructors -------------------------------------------------------------


def h0_poly(kernel: SobolevKernel, channel: int, k: int) -> Atom:
    """Polynomial basis atom phi_k(u) = u^(k-1)/(k-1)!."""
    if not 1 <= k <= kernel.m:
        raise ConfigError(f"h0 index k must be in 1..{kernel.m}, got {k}")
    h0 = np.zeros(kernel.m)
    h0[k - 1] = 1.0
    return Atom(
        channel=int(channel),
        kind="h0",
        part="h0",
        m=kernel.m,
        sec_lags=_ro(np.empty(0)),
        sec_weights=_ro(np.empty(0)),
        seg_nodes=_ro(np.empty(0)),
        seg_weights=_ro(np.empty(0)),
        h0=_ro(h0),
        k=k,
    )


def kernel_section(kernel: SobolevKernel, channel: int, lag: float, part: str = "r1") -> Atom:
    """Kernel slice R1(lag, .) or R(lag, .) at a fixed lag."""
    return _normal_form_atom(
        kernel, channel, "section", part,
        np.array([float(lag)]), np.array([1.0]), np.empty(0), np.empty(0),
    )


def section_sum(kernel: SobolevKernel, channel: int, lags, weights, part: str = "r1") -> Atom:
    """Weighted sum of kernel slices sharing one coefficient (event atoms)."""
    lags = np.asarray(lags, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if lags.shape != weights.shape:
        raise ConfigError("section lags and weights must have matching shapes")
    return _normal_form_atom(
        kernel, channel, "section", part, lags, weights, np.empty(0), np.empty(0)
    )


def integrated_points(kernel: SobolevKernel, channel: int, lags, weights, part: str = "r1") -> Atom:
    """Quadrature representation of a time-integrated kernel slice:
    sum of pointwise R^part(lag, .) terms with quadrature weights."""
    lags = np.asarray(lags, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if lags.shape != weights.shape:
        raise ConfigError("point lags and weights must have matching shapes")
    return _normal_form_atom(
        kernel, channel, "integrated", part, lags, weights, np.empty(0), np.empty(0)
    )


def integrated_segments(kernel: SobolevKernel, channel: int, lo, hi, weights, part: str = "r1") -> Atom:
    """Exact time-integrated kernel slices sum_p w_p int_lo^hi R^part(v, .) dv."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if not (lo.shape == hi.shape == weights.shape):
        raise ConfigError("segment lo/hi/weights must have matching shapes")
    if lo.size and np.any(hi < lo):
        raise ConfigError("segment upper bounds must be >= lower bounds")
    nodes = np.concatenate([hi, lo])
    signed = np.concatenate([weights, -weights])
    return _normal_form_atom(
        kernel, channel, "integrated", part, np.empty(0), np.empty(0), nodes, signed
    )


# -- filter functions ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FilterFunction:
    """Finite combination g = sum_a c_a atom_a, channels side by side."""

    kernel: SobolevKernel
    n_channels: int
    atoms: tuple[Atom, ...]
    coefficients: np.ndarray

    def __post_init__(self):
        atoms = tuple(self.atoms)
        coeffs = _ro(np.asarray(self.coefficients, dtype=float))
        if coeffs.ndim != 1 or coeffs.size != len(atoms):
            raise ConfigError("need one coefficient per atom")
        if coeffs.size and not np.isfinite(coeffs).all():
            raise ConfigError("coefficients must be finite")
        if self.n_channels < 1:
            raise ConfigError("n_channels must be >= 1")
        for a in atoms:
            if a.m != self.kernel.m:
                raise ConfigError("atom order does not match the kernel")
            if not 0 <= a.channel < self.n_channels:
                raise ConfigError(f"atom channel {a.channel} outside 0..{self.n_channels - 1}")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "coefficients", coeffs)

    @classmethod
    def zero(cls, kernel: SobolevKernel, n_channels: int = 1) -> "FilterFunction":
        return cls(kernel, n_channels, (), np.empty(0))

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, channel: int, u):
        """g_channel(u) for scalar or array lags u in [0, horizon]."""
        if not 0 <= channel < self.n_channels:
            raise DomainError(f"unknown channel {channel}")
        self.kernel._check_domain(u)
        arr = np.asarray(u, dtype=float)
        out = np.zeros(arr.shape)
        for atom, c in zip(self.atoms, self.coefficients):
            if atom.channel == channel and c != 0.0:
                out = out + c * atom.value(self.kernel, arr)
        return float(out) if out.ndim == 0 else out

    # -- linear structure ------------------------------------------------------

    def scale(self, alpha: float) -> "FilterFunction":
        return FilterFunction(
            self.kernel, self.n_channels, self.atoms, alpha * self.coefficients
        )

    def __add__(self, other: "FilterFunction") -> "FilterFunction":
        if other.kernel != self.kernel or other.n_channels != self.n_channels:
            raise ConfigError("cannot combine filters over different spaces")
        return FilterFunction(
            self.kernel,
            self.n_channels,
            self.atoms + other.atoms,
            np.concatenate([self.coefficients, other.coefficients]),
        )

    def __sub__(self, other: "FilterFunction") -> "FilterFunction":
        return self + other.scale(-1.0)

    # -- geometry ---------------------------------------------------------------

    def project(self) -> "FilterFunction":
        """Projection onto H1: drop polynomial atoms and polynomial content."""
        atoms = []
        coeffs = []
        for atom, c in zip(self.atoms, self.coefficients):
            if atom.kind == "h0":
                continue
            proj = atom.projected()
            if proj.is_zero:
                continue
            atoms.append(proj)
            coeffs.append(c)
        return FilterFunction(self.kernel, self.n_channels, tuple(atoms), np.array(coeffs))

    def h1_seminorm_sq(self) -> float:
        """||P g||^2 = sum over channels of the H1 norm of the smooth part."""
        total = 0.0
        for i, (a, ca) in enumerate(zip(self.atoms, self.coefficients)):
            if ca == 0.0:
                continue
            total += ca * ca * a.h1_inner(a)
            for b, cb in zip(self.atoms[i + 1:], self.coefficients[i + 1:]):
                if cb != 0.0 and b.channel == a.channel:
                    total += 2.0 * ca * cb * a.h1_inner(b)
        return total

    def inner_product(self, other: "FilterFunction") -> float:
        """Full Sobolev inner product; exactly symmetric in its arguments."""
        if other.kernel != self.kernel or other.n_channels != self.n_channels:
            raise ConfigError("cannot pair filters over different spaces")

        def bilinear(f, g):
            total = 0.0
            for a, ca in zip(f.atoms, f.coefficients):
                if ca == 0.0:
                    continue
                for b, cb in zip(g.atoms, g.coefficients):
                    if cb == 0.0 or b.channel != a.channel:
                        continue
                    total += ca * cb * (a.h1_inner(b) + float(a.h0 @ b.h0))
            return total

        return 0.5 * (bilinear(self, other) + bilinear(other, self))

    # -- serialization ----------------------------------------------------------

    def to_json(self) -> str:
        payload = {
            "format": "glppm.filter.v1",
            "kernel": {"m": self.kernel.m, "horizon": self.kernel.horizon},
            "n_channels": self.n_channels,
            "atoms": [
                dict(atom.to_dict(), coefficient=float(c))
                for atom, c in zip(self.atoms, self.coefficients)
            ],
        }
        return json.dumps(payload, indent=2)

    @staticmethod
    def from_json(text: str) -> "FilterFunction":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"bad filter JSON: {exc}") from exc
        if payload.get("format") != "glppm.filter.v1":
            raise DataError(f"unrecognized filter format {payload.get('format')!r}")
        kernel = SobolevKernel(int(payload["kernel"]["m"]), float(payload["kernel"]["horizon"]))
        atoms = []
        coeffs = []
        for entry in payload["atoms"]:
            atoms.append(Atom.from_dict(kernel, entry))
            coeffs.append(float(entry["coefficient"]))
        return FilterFunction(kernel, int(payload["n_channels"]), tuple(atoms), np.array(coeffs))

    @staticmethod
    def load(path) -> "FilterFunction":
        return FilterFunction.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


# -- module-level operation aliases ------------------------------------------


def evaluate(g: FilterFunction, channel: int, u):
    return g.evaluate(channel, u)


def inner_product(a: FilterFunction, b: FilterFunction) -> float:
    return a.inner_product(b)


def project_p(g: FilterFunction) -> FilterFunction:
    return g.project()


def h1_seminorm_sq(g: FilterFunction) -> float:
    return g.h1_seminorm_sq()


# -- Gram matrices over atom lists ---------------------------------------------


def h1_gram(atoms) -> np.ndarray:
    """Matrix of H1 inner products <P a_i, P a_j> over a list of atoms.

    Grouped by channel; within a channel all section lags and segment nodes
    are flattened into single support arrays so each row is one prefix-sum
    evaluation over the whole channel instead of a pairwise loop.
    """
    atoms = list(atoms)
    n = len(atoms)
    G = np.zeros((n, n))
    by_channel: dict[int, list[int]] = {}
    for i, a in enumerate(atoms):
        by_channel.setdefault(a.channel, []).append(i)
    for idxs in by_channel.values():
        local = {i: li for li, i in enumerate(idxs)}
        sec_lags = np.concatenate([atoms[i].sec_lags for i in idxs])
        sec_w = np.concatenate([atoms[i].sec_weights for i in idxs])
        sec_owner = np.concatenate(
            [np.full(atoms[i].sec_lags.size, local[i], dtype=int) for i in idxs]
        )
        seg_nodes = np.concatenate([atoms[i].seg_nodes for i in idxs])
        seg_w = np.concatenate([atoms[i].seg_weights for i in idxs])
        seg_owner = np.concatenate(
            [np.full(atoms[i].seg_nodes.size, local[i], dtype=int) for i in idxs]
        )
        for i in idxs:
            a = atoms[i]
            row = np.zeros(len(idxs))
            if sec_lags.size:
                row += np.bincount(
                    sec_owner, weights=sec_w * a.h1_value(sec_lags), minlength=len(idxs)
                )
            if seg_nodes.size:
                row += np.bincount(
                    seg_owner,
                    weights=seg_w * a.h1_antiderivative(seg_nodes),
                    minlength=len(idxs),
                )
            G[i, idxs] = row
    return 0.5 * (G + G.T)


def full_gram(atoms) -> np.ndarray:
    """Matrix of full Sobolev inner products (H0 part plus H1 part)."""
    atoms = list(atoms)
    G = h1_gram(atoms)
    if not atoms:
        return G
    h0 = np.stack([a.h0 for a in atoms])
    channels = np.array([a.channel for a in atoms])
    same = channels[:, None] == channels[None, :]
    return G + (h0 @ h0.T) * same


def h1_inner_row(atom: Atom, atoms) -> np.ndarray:
    """<P atom, P b> for every b in atoms, in one prefix-sum pass."""
    atoms = list(atoms)
    out = np.zeros(len(atoms))
    idxs = [i for i, b in enumerate(atoms) if b.channel == atom.channel]
    if not idxs:
        return out
    sec_lags = np.concatenate([atoms[i].sec_lags for i in idxs])
    if sec_lags.size:
        sec_w = np.concatenate([atoms[i].sec_weights for i in idxs])
        owner = np.concatenate(
            [np.full(atoms[i].sec_lags.size, li, dtype=int) for li, i in enumerate(idxs)]
        )
        out[idxs] += np.bincount(
            owner, weights=sec_w * atom.h1_value(sec_lags), minlength=len(idxs)
        )
    seg_nodes = np.concatenate([atoms[i].seg_nodes for i in idxs])
    if seg_nodes.size:
        seg_w = np.concatenate([atoms[i].seg_weights for i in idxs])
        owner = np.concatenate(
            [np.full(atoms[i].seg_nodes.size, li, dtype=int) for li, i in enumerate(idxs)]
        )
        out[idxs] += np.bincount(
            owner, weights=seg_w * atom.h1_antiderivative(seg_nodes), minlength=len(idxs)
        )
    return out


def full_inner_row(atom: Atom, atoms) -> np.ndarray:
    """Full Sobolev inner products of one atom against a list of atoms."""
    atoms = list(atoms)
    out = h1_inner_row(atom, atoms)
    if np.any(atom.h0):
        for i, b in enumerate(atoms):
            if b.channel == atom.channel and np.any(b.h0):
                out[i] += float(atom.h0 @ b.h0)
    return out
