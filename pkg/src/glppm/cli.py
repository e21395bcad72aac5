"""Command line front end: simulate, fit, intensity, gof and basis dumps.

Every run writes ``run_manifest.json`` into the output directory with the
command name, resolved input paths and their content hashes, the embedded
configuration, the seed, the tool version and the wall time, which is
enough to reproduce the outputs exactly.

Exit codes: 0 success, 2 bad configuration, 3 bad or out-of-domain data,
4 solver non-convergence (the fit outputs are still written), 5 infeasible
model.

``--threads`` caps BLAS parallelism through the usual environment
variables.  Those are read when the numerical libraries load, so this
module keeps its heavyweight imports inside the command functions instead
of at module top.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

__all__ = ["main"]

_EXIT_CONFIG = 2
_EXIT_DATA = 3
_EXIT_SOLVER = 4
_EXIT_INFEASIBLE = 5

_GRID_POINTS = 512  # lag grid resolution of the fitted-filter CSV


# -- small shared helpers -------------------------------------------------------


def _read_json(path) -> dict:
    from .errors import ConfigError

    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read JSON {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object at top level")
    return raw


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def _write_csv(path, header: list[str], rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _check_keys(cfg: dict, allowed: set, what: str) -> None:
    from .errors import ConfigError

    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown {what} keys {sorted(unknown)}")


def _parse_link(raw):
    from .errors import ConfigError
    from .likelihood import LinkSpec

    if not isinstance(raw, dict) or "kind" not in raw:
        raise ConfigError("link must be an object with a 'kind' field")
    _check_keys(raw, {"kind", "d"}, "link")
    return LinkSpec(str(raw["kind"]), float(raw.get("d", 0.0)))


def _link_dict(link) -> dict:
    return {"kind": link.kind, "d": link.d}


def _parse_at_risk(raw):
    from .data import AtRiskProcess
    from .errors import ConfigError, DataError

    if not isinstance(raw, dict):
        raise ConfigError("at_risk must be an object with breakpoints and values")
    _check_keys(raw, {"breakpoints", "values"}, "at_risk")
    try:
        return AtRiskProcess(raw.get("breakpoints", ()), raw.get("values", ()))
    except DataError as exc:
        raise ConfigError(f"bad at_risk: {exc}") from exc


def _load_dataset(data_path):
    """Dataset manifest plus the events/drivers from the CSV it names."""
    from .data import load_events, load_manifest

    data_path = Path(data_path)
    manifest = load_manifest(data_path)
    csv_name = manifest.csv or data_path.with_suffix(".csv").name
    csv_path = Path(csv_name)
    if not csv_path.is_absolute():
        csv_path = data_path.parent / csv_path
    events, drivers = load_events(csv_path, manifest)
    return manifest, csv_path, events, drivers


def _load_filter_bundle(path):
    """Filter JSON plus the link and at-risk process to evaluate it under.

    Accepts the payload written by ``fit`` (a filter with an embedded
    ``link`` key) or a wrapper object {"filter": payload-or-path, "link":
    {...}, "at_risk": {...}}.
    """
    from .data import AtRiskProcess
    from .errors import ConfigError
    from .filters import FilterFunction

    raw = _read_json(path)
    at_risk = AtRiskProcess.unit()
    if "format" in raw:
        payload = raw
        link_raw = raw.get("link")
    elif "filter" in raw:
        _check_keys(raw, {"filter", "link", "at_risk"}, "filter wrapper")
        inner = raw["filter"]
        payload = _read_json(Path(path).parent / inner) if isinstance(inner, str) else inner
        link_raw = raw.get("link", payload.get("link") if isinstance(payload, dict) else None)
        if "at_risk" in raw:
            at_risk = _parse_at_risk(raw["at_risk"])
    else:
        raise ConfigError(f"{path}: neither a filter payload nor a filter wrapper")
    g = FilterFunction.from_json(json.dumps(payload))
    if link_raw is None:
        raise ConfigError(f"{path}: no link recorded with the filter")
    return g, _parse_link(link_raw), at_risk


def _write_run_manifest(args, command: str, config_obj, seed=None) -> None:
    from . import __version__

    inputs = {}
    for name in ("data", "config"):
        p = getattr(args, name, None)
        if p:
            inputs[name] = {"path": str(Path(p).resolve()), "sha256": _sha256(p)}
    payload = {
        "command": command,
        "tool_version": __version__,
        "inputs": inputs,
        "config": config_obj,
        "seed": seed,
        "output_dir": str(Path(args.out).resolve()),
        "threads": args.threads,
        "wall_time_s": time.perf_counter() - args.t0,
    }
    _write_json(Path(args.out) / "run_manifest.json", payload)


# -- commands -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    import numpy as np

    from .data import DatasetManifest, save_events
    from .errors import ConfigError
    from .filters import FilterFunction
    from .simulator import SimSpec, simulate

    cfg = _read_json(args.config)
    _check_keys(
        cfg,
        {
            "link",
            "filters",
            "horizon",
            "self_exciting",
            "drivers",
            "at_risk",
            "max_events",
            "bound",
            "target_name",
        },
        "simulate config",
    )
    if "link" not in cfg or "horizon" not in cfg or "filters" not in cfg:
        raise ConfigError("simulate config needs link, horizon and filters")
    link = _parse_link(cfg["link"])

    raw_f = cfg["filters"]
    if isinstance(raw_f, str):
        g = FilterFunction.load(Path(args.config).parent / raw_f)
    elif isinstance(raw_f, dict) and raw_f.get("format"):
        g = FilterFunction.from_json(json.dumps(raw_f))
    else:
        raise ConfigError("filters must be a filter JSON payload or a path to one")

    drivers = None
    if "drivers" in cfg:
        if not isinstance(cfg["drivers"], str):
            raise ConfigError("drivers must be a path to a dataset manifest")
        _, _, _, drivers = _load_dataset(Path(args.config).parent / cfg["drivers"])

    kwargs = {}
    if "at_risk" in cfg:
        kwargs["at_risk"] = _parse_at_risk(cfg["at_risk"])
    if "max_events" in cfg:
        kwargs["max_events"] = int(cfg["max_events"])
    if "bound" in cfg:
        kwargs["bound"] = float(cfg["bound"])
    if "target_name" in cfg:
        kwargs["target_name"] = str(cfg["target_name"])
    spec = SimSpec(
        link=link,
        filters=g,
        horizon=float(cfg["horizon"]),
        self_exciting=bool(cfg.get("self_exciting", True)),
        drivers=drivers,
        **kwargs,
    )

    seed = args.seed if args.seed is not None else int.from_bytes(os.urandom(4), "little")
    events, drv = simulate(spec, seed=seed)

    out = Path(args.out)
    exo_names = tuple(ch.name for ch in drivers.channels) if drivers else ()
    manifest = DatasetManifest(
        horizon=spec.horizon,
        target_channel=spec.target_name,
        driver_channels=exo_names,
        self_exciting=spec.self_exciting,
        csv="events.csv",
    )
    save_events(out / "events.csv", events, drv, manifest)
    _write_json(out / "dataset.json", manifest.to_dict())
    _write_run_manifest(args, "simulate", cfg, seed=seed)
    print(f"simulated {len(events)} events over horizon {spec.horizon}")
    return 0


def _fit_config(cfg):
    """Validated pieces of a fit/basis config, with defaults filled in."""
    from .errors import ConfigError
    from .likelihood import QuadratureConfig
    from .optimizer import LineSearchConfig

    _check_keys(
        cfg,
        {
            "link",
            "penalty_weight",
            "m",
            "tol",
            "max_iter",
            "max_atoms",
            "line_search",
            "quadrature",
            "at_risk",
        },
        "fit config",
    )
    if "link" not in cfg:
        raise ConfigError("fit config needs a link")
    link = _parse_link(cfg["link"])
    lam = float(cfg.get("penalty_weight", 1.0))
    m = int(cfg.get("m", 1))
    tol = float(cfg.get("tol", 1e-6))

    quad = None
    if "quadrature" in cfg:
        _check_keys(cfg["quadrature"], {"nodes_per_interval"}, "quadrature")
        quad = QuadratureConfig(int(cfg["quadrature"]["nodes_per_interval"]))

    ls_raw = cfg.get("line_search", {})
    _check_keys(ls_raw, {"c1", "c2", "delta", "max_step_trials"}, "line_search")
    line_search = LineSearchConfig(**{k: v for k, v in ls_raw.items()})

    at_risk = _parse_at_risk(cfg["at_risk"]) if "at_risk" in cfg else None
    return link, lam, m, tol, quad, line_search, at_risk


def cmd_fit(args) -> int:
    import numpy as np

    from .kernel import SobolevKernel
    from .likelihood import Objective
    from .optimizer import fit_descent, fit_linear
    from .representer import assemble

    cfg = _read_json(args.config)
    link, lam, m, tol, quad, line_search, at_risk = _fit_config(cfg)
    manifest, _, events, drivers = _load_dataset(args.data)

    obj = Objective(link, lam, events, drivers, at_risk=at_risk, quadrature=quad)
    kernel = SobolevKernel(m=m, horizon=events.horizon)
    if link.kind == "linear":
        res = fit_linear(
            assemble(kernel, obj), obj, tol=tol, max_iter=int(cfg.get("max_iter", 100))
        )
    else:
        res = fit_descent(
            kernel,
            obj,
            tol=tol,
            max_iter=int(cfg.get("max_iter", 500)),
            max_atoms=int(cfg.get("max_atoms", 200)),
            line_search=line_search,
        )

    out = Path(args.out)
    payload = json.loads(res.g_hat.to_json())
    payload["link"] = _link_dict(link)
    _write_json(out / "filter.json", payload)

    lags = np.linspace(0.0, events.horizon, _GRID_POINTS)
    for j, name in enumerate(manifest.driver_names()):
        vals = np.asarray(res.g_hat.evaluate(j, lags), dtype=float)
        _write_csv(
            out / f"filter_grid_{name}.csv",
            ["lag", "value"],
            ((repr(float(u)), repr(float(v))) for u, v in zip(lags, vals)),
        )

    _write_csv(
        out / "trace.csv",
        ["iteration", "objective", "grad_norm"],
        (
            (i, repr(float(o)), repr(float(gn)))
            for i, (o, gn) in enumerate(zip(res.objective_trace, res.grad_norm_trace))
        ),
    )

    gn0 = float(res.grad_norm_trace[0]) if res.grad_norm_trace.size else 0.0
    # at a boundary-active optimum the plain gradient equals the constraint
    # force, so stationarity is measured on the KKT residual when the solver
    # reports one
    gn_res = float(res.diagnostics.get("kkt_residual", res.grad_norm))
    scalars = {}
    for key, val in res.diagnostics.items():
        if isinstance(val, (bool, int, float, str)):
            scalars[key] = val
        elif isinstance(val, (np.bool_, np.integer, np.floating)):
            scalars[key] = val.item()
    _write_json(
        out / "fit_result.json",
        {
            "status": res.status,
            "converged": res.converged,
            "n_iter": res.n_iter,
            "objective": res.objective,
            "grad_norm": res.grad_norm,
            "stationarity_residual": gn_res / max(1.0, gn0),
            "n_events": len(events),
            "n_channels": drivers.n_channels,
            "link": _link_dict(link),
            "penalty_weight": lam,
            "m": m,
            "tol": tol,
            "diagnostics": scalars,
        },
    )
    _write_run_manifest(args, "fit", cfg)
    print(
        f"fit {res.status}: objective {res.objective:.6f}, "
        f"grad norm {res.grad_norm:.3e}, {res.n_iter} iterations"
    )
    return 0 if res.converged else _EXIT_SOLVER


def cmd_intensity(args) -> int:
    import numpy as np

    from .likelihood import intensity

    g, link, at_risk = _load_filter_bundle(args.config)
    _, _, events, drivers = _load_dataset(args.data)
    grid = np.linspace(0.0, events.horizon, args.grid)
    s_all = np.unique(np.concatenate([grid, events.times]))
    lam = np.asarray(intensity(g, link, at_risk, drivers, s_all), dtype=float)
    _write_csv(
        Path(args.out) / "intensity.csv",
        ["s", "lambda"],
        ((repr(float(s)), repr(float(v))) for s, v in zip(s_all, lam)),
    )
    _write_run_manifest(args, "intensity", {"grid": args.grid})
    return 0


def cmd_gof(args) -> int:
    from scipy.stats import kstest

    from .simulator import time_rescale

    g, link, at_risk = _load_filter_bundle(args.config)
    _, _, events, drivers = _load_dataset(args.data)
    gaps = time_rescale(g, link, events, drivers, at_risk=at_risk)
    out = Path(args.out)
    _write_csv(out / "gaps.csv", ["gap"], ((repr(float(v)),) for v in gaps))
    if gaps.size:
        ks = kstest(gaps, "expon")
        payload = {
            "n": int(gaps.size),
            "statistic": float(ks.statistic),
            "p_value": float(ks.pvalue),
            "undefined": False,
        }
    else:
        payload = {"n": 0, "statistic": None, "p_value": None, "undefined": True}
    _write_json(out / "ks.json", payload)
    _write_run_manifest(args, "gof", None)
    return 0


def cmd_basis(args) -> int:
    from .kernel import SobolevKernel
    from .likelihood import Objective
    from .representer import assemble

    cfg = _read_json(args.config)
    link, lam, m, _, quad, _, at_risk = _fit_config(cfg)
    _, _, events, drivers = _load_dataset(args.data)
    obj = Objective(link, lam, events, drivers, at_risk=at_risk, quadrature=quad)
    kernel = SobolevKernel(m=m, horizon=events.horizon)
    basis = assemble(kernel, obj)
    _write_json(
        Path(args.out) / "basis.json",
        {
            "kernel": {"m": kernel.m, "horizon": kernel.horizon},
            "n_channels": basis.n_channels,
            "atoms": [a.to_dict() for a in basis.atoms],
            "slices": {
                "h0": [basis.h0_slice.start, basis.h0_slice.stop],
                "h": [basis.h_slice.start, basis.h_slice.stop],
                "f": [basis.f_slice.start, basis.f_slice.stop],
            },
            "design": basis.design.tolist(),
            "compensator": basis.comp.tolist(),
            "gram": basis.gram.tolist(),
            "gram_penalty": basis.gram_p.tolist(),
            "zero_mask": basis.zero_mask.tolist(),
        },
    )
    _write_run_manifest(args, "basis", cfg)
    return 0


# -- argument parsing and dispatch ----------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glppm",
        description="Point-process filter estimation: simulate, fit, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, config=False, seed=False, grid=False):
        if data:
            p.add_argument("--data", required=True, help="dataset manifest JSON")
        if config:
            p.add_argument("--config", required=True, help="configuration JSON")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="RNG seed")
        if grid:
            p.add_argument("--grid", type=int, default=_GRID_POINTS, help="grid points")

    p = sub.add_parser("simulate", help="draw events from a model spec")
    common(p, config=True, seed=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="penalized maximum likelihood fit")
    common(p, data=True, config=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("intensity", help="evaluate the fitted intensity on a grid")
    common(p, data=True, config=True, grid=True)
    p.set_defaults(func=cmd_intensity)

    p = sub.add_parser("gof", help="time-rescaling goodness of fit")
    common(p, data=True, config=True)
    p.set_defaults(func=cmd_gof)

    p = sub.add_parser("basis", help="dump the representer basis and Grams")
    common(p, data=True, config=True)
    p.set_defaults(func=cmd_basis)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(int(args.threads)))
    args.t0 = time.perf_counter()

    from .errors import (
        ConfigError,
        DataError,
        DomainError,
        InfeasibleError,
        SolverError,
    )

    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_CONFIG
    except (DataError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_DATA
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_INFEASIBLE
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
