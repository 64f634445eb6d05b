"""Command-line interface: ``densreg <subcommand> ...``.

Exit status is 0 on success, 1 on invalid input and 2 on numerical failure.
Failures print a single line starting with ``error:`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .alpha import SubjectSeries, fit_alpha
from .errors import NumericalError, ValidationError
from .fields import (
    INVERSE,
    PERIODIC,
    Density,
    Grid,
    ScalarField,
    jacobian_det,
    normalize,
    pushforward_alpha,
)
from .geometry import fr_distance
from .oit import OitConfig, draw_samples, oit_solve
from .synth import CASES, make_density, make_diffeo, torus_grid
from .wddr import WddrConfig, penalty_sigmoid, register

log = logging.getLogger("densreg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _out(args, cfg, default):
    return Path(args.out or cfg.out or default)


def _overrides(args, keys):
    return {k: getattr(args, k, None) for k in keys}


def _parse_params(items):
    params = {}
    for item in items or []:
        if "=" not in item:
            raise ValidationError(f"--param expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            params[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            params[key.strip()] = value
    return params


def _density(path, floor):
    vol = io.read_volume(path)
    if floor > 0:
        return Density(vol, floor)
    if np.any(vol.values <= 0):
        raise ValidationError(f"{path}: density must be strictly positive (use --floor)")
    return Density(vol)


# ---------------------------------------------------------------------------
# subcommands


def cmd_oit_sample(args):
    cfg = io.load_run_config(args.config, _overrides(args, ["steps", "seed", "floor", "scheme", "blocks"]))
    if args.track_inverse:
        cfg.track_inverse = True
    if args.target:
        rho1 = _density(args.target, cfg.floor)
        grid = rho1.grid
    else:
        grid = torus_grid(args.grid)
        rho1 = make_density(args.case, grid, _parse_params(args.param))
    rho0 = make_density("uniform", grid, {"mass": rho1.total_mass})
    res = oit_solve(rho0, rho1, OitConfig(steps=cfg.steps, track_inverse=cfg.track_inverse,
                                          renormalize=cfg.renormalize, floor=cfg.floor,
                                          diagnostics_every=cfg.diagnostics_every, scheme=cfg.scheme,
                                          blocks=cfg.blocks))
    out = _out(args, cfg, "oit")
    samples = draw_samples(res.phi, args.n, cfg.seed)
    io.write_points_csv(f"{out}_samples.csv", samples)
    io.write_map(f"{out}_phi", res.phi, cfg.dtype)
    if res.phi_inv is not None:
        io.write_map(f"{out}_phiinv", res.phi_inv, cfg.dtype)
    rows = [[d.k, d.v_norm, "" if d.residual is None else io.format_float(d.residual),
             "" if d.fr_traveled is None else io.format_float(d.fr_traveled)] for d in res.diagnostics]
    io.write_csv(f"{out}_diagnostics.csv", ["k", "v_norm", "residual", "fr_traveled"], rows)
    print(f"theta={res.theta!r} residual={res.final_residual!r} volume_ratio={res.warped_volume_ratio()!r}")
    return 0


def cmd_register(args):
    keys = ["step", "iterations", "sigmoid_center", "sigmoid_sharpness", "resync_every", "floor", "alpha", "form"]
    cfg = io.load_run_config(args.config, _overrides(args, keys))
    I0 = io.read_volume(args.source)
    I1 = io.read_volume(args.target)
    if I0.grid != I1.grid:
        raise ValidationError(f"grid mismatch: source dims {I0.grid.dims} vs target dims {I1.grid.dims}")
    if not cfg.alpha > 0:
        raise ValidationError(f"alpha must be > 0, got {cfg.alpha}")
    if cfg.alpha != 1.0:
        I0 = ScalarField(I0.grid, np.maximum(I0.values, 0.0) ** cfg.alpha)
        I1 = ScalarField(I1.grid, np.maximum(I1.values, 0.0) ** cfg.alpha)
    floor = cfg.floor
    d0, d1 = Density(I0, floor), Density(I1, floor)
    if not (d0.positive and d1.positive):
        raise ValidationError("images must be strictly positive; pass --floor")
    if args.weight:
        f = io.read_volume(args.weight)
    else:
        f = penalty_sigmoid(d0.field, cfg.sigmoid_center, cfg.sigmoid_sharpness)
    wcfg = WddrConfig(step=cfg.step, iterations=cfg.iterations, sigmoid_center=cfg.sigmoid_center,
                      sigmoid_sharpness=cfg.sigmoid_sharpness, floor=floor, resync_every=cfg.resync_every,
                      report_every=cfg.report_every, form=cfg.form, backtracking=cfg.backtracking)
    state = register(d0, d1, f, wcfg)
    out = _out(args, cfg, "register")
    phi_inv = state.phi_inv.with_jac_det(state.jac_det)
    io.write_map(f"{out}_phiinv", phi_inv, cfg.dtype)
    io.write_volume(f"{out}_deformed", state.deformed(d0), cfg.dtype)
    io.write_csv(f"{out}_energy.csv", ["iter", "E1", "E2", "E"], [list(r) for r in state.trace])
    last = state.trace[-1]
    print(f"E1={last.E1!r} E2={last.E2!r} E={last.E!r}")
    return 0


def _load_manifest(path):
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"manifest {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest {path} is not valid JSON: {exc}") from None
    root = path.parent
    subjects = []
    for s in spec.get("subjects", []):
        sid = str(s.get("id", len(subjects)))
        samples, names = [], []
        for k, ph in enumerate(s.get("phases", [])):
            vol = io.read_volume(root / ph["volume"])
            mask = io.read_volume(root / ph["mask"]).values != 0
            samples.append((vol, mask))
            names.append(str(ph.get("name", k)))
        subjects.append(SubjectSeries(samples, sid, names))
    if not subjects:
        raise ValidationError(f"manifest {path} lists no subjects")
    return subjects


def cmd_alpha_fit(args):
    cfg = io.load_run_config(args.config, _overrides(args, ["alpha_min", "alpha_max", "alpha_step"]))
    subjects = _load_manifest(args.manifest)
    report = fit_alpha(subjects, cfg.alpha_min, cfg.alpha_max, cfg.alpha_step)
    out = _out(args, cfg, "alpha")
    io.write_json(f"{out}_report.json", report.to_dict())
    io.write_csv(f"{out}_objective.csv", ["alpha", "objective"], zip(report.alphas.tolist(), report.objective.tolist()))
    io.write_csv(f"{out}_subjects.csv", ["id", "slope", "intercept", "r2", "slope_at_1"],
                 [[s.subject_id, s.slope, s.intercept, s.r2, s.slope_at_1] for s in report.subjects])
    print(f"alpha={report.alpha_star!r}")
    return 0


def cmd_fr_distance(args):
    a = _density(args.a, args.floor)
    b = _density(args.b, args.floor)
    if a.grid != b.grid:
        raise ValidationError(f"grid mismatch: dims {a.grid.dims} vs {b.grid.dims}")
    if args.renormalize:
        a, b = normalize(a), normalize(b)
    print(repr(fr_distance(a, b)))
    return 0


def cmd_apply(args):
    phi_inv = io.read_map(args.map, INVERSE)
    vol = io.read_volume(args.volume)
    if vol.grid != phi_inv.grid:
        raise ValidationError(f"grid mismatch: map dims {phi_inv.grid.dims} vs volume dims {vol.grid.dims}")
    if phi_inv.jac_det is None:
        jac = jacobian_det(phi_inv)
        if jac.folded:
            raise NumericalError(f"map folds at {jac.folds} nodes")
        phi_inv = phi_inv.with_jac_det(ScalarField(phi_inv.grid, jac.values))
    rho = Density(vol, args.floor)
    out = pushforward_alpha(rho, phi_inv, args.alpha)
    io.write_volume(args.out, out.field, args.dtype)
    return 0


def cmd_synth(args):
    if args.case not in CASES:
        raise ValidationError(f"unknown case {args.case!r}; known: {', '.join(sorted(CASES))}")
    if args.dims:
        dims = tuple(args.dims)
        spacing = tuple(args.spacing) if args.spacing else (1.0,) * len(dims)
        grid = Grid(dims, spacing, tuple(args.origin) if args.origin else None, args.bc)
    else:
        grid = torus_grid(args.grid, args.ndim)
    params = _parse_params(args.param)
    case = CASES[args.case]
    if case.kind == "density":
        io.write_volume(args.out, make_density(args.case, grid, params).field, args.dtype)
    else:
        io.write_map(args.out, make_diffeo(args.case, grid, params, args.direction), args.dtype)
    return 0


def cmd_eval_landmarks(args):
    phi = io.read_map(args.map)
    report = io.eval_landmarks(phi, io.read_landmarks(args.source), io.read_landmarks(args.target))
    if args.out:
        io.write_json(args.out, report.to_dict())
    print(f"mean={report.mean!r} sd={report.sd!r} max={report.max!r} n={report.count} excluded={len(report.excluded)}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="densreg", description="Density registration and transport-map sampling.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("oit-sample", help="solve OIT from uniform to a target density and draw samples")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--target", help="target density volume (periodic grid)")
    src.add_argument("--case", default="banana", help="synthetic target case (default banana)")
    s.add_argument("--grid", type=int, default=256, help="nodes per axis for a synthetic target")
    s.add_argument("--param", action="append", help="case parameter key=value (JSON values)")
    s.add_argument("--steps", type=int)
    s.add_argument("--scheme", choices=["midpoint", "euler"])
    s.add_argument("--blocks", type=int)
    s.add_argument("--n", type=int, default=100000, help="number of samples")
    s.add_argument("--seed", type=int)
    s.add_argument("--floor", type=float)
    s.add_argument("--track-inverse", action="store_true")
    s.add_argument("--config")
    s.add_argument("--out", help="output prefix")
    s.set_defaults(func=cmd_oit_sample)

    s = sub.add_parser("register", help="weighted diffeomorphic density registration")
    s.add_argument("--source", required=True, help="moving image I0")
    s.add_argument("--target", required=True, help="fixed image I1")
    s.add_argument("--weight", help="penalty weight volume f (default: sigmoid of I0)")
    s.add_argument("--sigmoid-center", dest="sigmoid_center", type=float)
    s.add_argument("--sigmoid-sharpness", dest="sigmoid_sharpness", type=float)
    s.add_argument("--step", type=float)
    s.add_argument("--iterations", type=int)
    s.add_argument("--resync-every", dest="resync_every", type=int)
    s.add_argument("--floor", type=float)
    s.add_argument("--alpha", type=float, help="power-correct both images before registering")
    s.add_argument("--form", choices=["adjoint", "paper"])
    s.add_argument("--config")
    s.add_argument("--out", help="output prefix")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("alpha-fit", help="fit the intensity exponent alpha from a manifest")
    s.add_argument("manifest")
    s.add_argument("--alpha-min", dest="alpha_min", type=float)
    s.add_argument("--alpha-max", dest="alpha_max", type=float)
    s.add_argument("--alpha-step", dest="alpha_step", type=float)
    s.add_argument("--config")
    s.add_argument("--out", help="output prefix")
    s.set_defaults(func=cmd_alpha_fit)

    s = sub.add_parser("fr-distance", help="Fisher-Rao distance between two density volumes")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--renormalize", action="store_true", help="scale both to unit mass first")
    s.add_argument("--floor", type=float, default=0.0)
    s.set_defaults(func=cmd_fr_distance)

    s = sub.add_parser("apply", help="push a volume forward with an inverse map and the alpha-action")
    s.add_argument("--map", required=True, help="inverse map prefix")
    s.add_argument("--volume", required=True)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--floor", type=float, default=0.0)
    s.add_argument("--dtype", choices=["f32", "f64"], default="f64")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_apply)

    s = sub.add_parser("synth", help="write a synthetic density volume or map bundle")
    s.add_argument("--case", required=True)
    s.add_argument("--grid", type=int, default=64, help="nodes per axis on the [-pi, pi) torus")
    s.add_argument("--ndim", type=int, default=2)
    s.add_argument("--dims", type=int, nargs="+")
    s.add_argument("--spacing", type=float, nargs="+")
    s.add_argument("--origin", type=float, nargs="+")
    s.add_argument("--bc", choices=["periodic", "clamped"], default=PERIODIC)
    s.add_argument("--param", action="append")
    s.add_argument("--direction", choices=["forward", "inverse"], default="forward")
    s.add_argument("--dtype", choices=["f32", "f64"], default="f64")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval-landmarks", help="landmark errors after mapping source points")
    s.add_argument("--map", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", help="report JSON path")
    s.set_defaults(func=cmd_eval_landmarks)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 2


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
