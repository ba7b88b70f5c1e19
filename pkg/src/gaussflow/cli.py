"""Config-driven experiment runner.

    gaussflow fields list
    gaussflow run CONFIG [--output DIR] [--set key=value ...]
    gaussflow replay MANIFEST
    gaussflow simulate|density|bounds|stability|mollify-check|maximal CONFIG

Every run writes CSV tables and then ``manifest.json`` into the output
directory.  The manifest is written last (atomically), so its presence means
every table listed in it is complete.  Exit status: 0 on success, 2 when a
report says a condition is violated, 1 on errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import density as dens
from . import mollify as moll
from . import stability as stab
from .config import ConfigError, ExperimentConfig, load_config, parse_config, parse_field
from .fields import CapabilityError, families
from .sde import BlowUpError, TimeGrid, integrate_flow, sample_brownian

MANIFEST = "manifest.json"
MANIFEST_FORMAT = "gaussflow-manifest/1"
EXIT_OK, EXIT_ERROR, EXIT_VIOLATED = 0, 1, 2

# alias subcommand -> (default experiment, experiments it accepts)
ALIASES = {
    "simulate": ("simulate", {"simulate"}),
    "density": ("density", {"density", "moments"}),
    "bounds": ("bounds", {"bounds", "check-condition"}),
    "stability": ("stability", {"stability", "cauchy", "lusin"}),
    "mollify-check": ("mollify-check", {"mollify-check"}),
    "maximal": ("maximal", {"maximal", "lusin"}),
}


# ---------------------------------------------------------------------------
# tables


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


class Table:
    def __init__(self, name: str, header: list[str]):
        self.name = name
        self.header = list(header)
        self.rows: list[list] = []

    def add(self, *row):
        if len(row) != len(self.header):
            raise ValueError(f"{self.name}: row has {len(row)} cells, header has {len(self.header)}")
        self.rows.append(list(row))

    def render(self) -> bytes:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for r in self.rows:
            w.writerow([_cell(v) for v in r])
        return buf.getvalue().encode("utf-8")


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _coords(d: int, name: str = "x") -> list[str]:
    return [name] if d == 1 else [f"{name}_{i + 1}" for i in range(d)]


# ---------------------------------------------------------------------------
# experiments: each returns (tables, violated)


def _grid(cfg: ExperimentConfig) -> TimeGrid:
    return TimeGrid(cfg["T"], cfg["N"])


def _exp_simulate(cfg):
    ens = cfg.ensemble()
    grid = _grid(cfg)
    x = np.array(cfg.get("x", [0.0] * ens.d))
    path = sample_brownian(grid, ens.m, cfg["seed"], cfg["path_index"])
    traj = integrate_flow(ens, x, path)
    t = Table("trajectory.csv", ["t", *_coords(ens.d), "ito_sum", "phi_sum"])
    for row in traj.table():
        t.add(*row)
    return [t], False


def _exp_density(cfg):
    ens = cfg.ensemble()
    grid = _grid(cfg)
    t_end = cfg.get("t", cfg["T"])
    K_idx = grid.index_of(t_end)
    pts = cfg.eval_points()
    if cfg["method"] == "inverse-flow":
        path = sample_brownian(grid, ens.m, cfg["seed"], cfg["path_index"])
        est = dens.density_via_inverse(ens, grid, t_end, pts, path)
        if est.flagged:
            print(f"warning: {est.flagged} points failed the round-trip check and were dropped", file=sys.stderr)
    else:
        sub = grid if K_idx == grid.N else grid.sub(0, K_idx)
        ends = dens.pushforward_sample(ens, sub, cfg["samples"], cfg["seed"], cfg["mode"], cfg["path_index"])
        est = dens.pushforward_kde(ends, pts, cfg.get("bandwidth"), cfg["mode"])
    tab = Table("density.csv", [*_coords(ens.d, "y"), "K", "method"])
    for y, k in zip(est.points, est.K):
        tab.add(*y, k, est.method)
    return [tab], False


def _exp_moments(cfg):
    ens = cfg.ensemble()
    grid = _grid(cfg)
    rep = dens.lp_norm_via_duality(ens, grid, cfg["p"], cfg["paths"], cfg["initials"], cfg["seed"])
    bound = dens.theorem22_bound(ens, cfg["p"], cfg["T"])
    tab = Table(
        "moments.csv",
        ["p", "t", "estimate", "se", "bound", "entropy", "entropy_se", "lambda_pT", "paths", "initials"],
    )
    tab.add(rep.p, rep.T, rep.lp_estimate, rep.lp_se, bound, rep.entropy_estimate, rep.entropy_se,
            rep.lambda_pT, rep.n_paths, rep.n_initials)
    return [tab], False


def _exp_bounds(cfg):
    ens = cfg.ensemble()
    rep = dens.entropy_bound_thm33(ens, cfg["T"], cfg["p"])
    tab = Table(
        "bounds.csv",
        ["T", "p", "T0", "Lambda", "C1", "C2", "N", "bound", "moment_bound", "dual_moment_bound", "status"],
    )
    tab.add(rep.T, rep.p, rep.T0, rep.lambda_T0, rep.C1, rep.C2, rep.N, rep.entropy_bound,
            rep.bound_2_7, rep.bound_2_8, rep.status)
    for note in rep.notes:
        print(f"note: {note}", file=sys.stderr)
    return [tab], rep.status != "ok"


def _exp_condition(cfg):
    ens = cfg.ensemble()
    rep = dens.check_exponential_condition(ens, cfg["lambda0"], cfg["condition"])
    tab = Table("condition.csv", ["condition", "lambda0", "value", "status"])
    tab.add(rep.condition, rep.lambda0, rep.value, rep.status)
    if not rep.finite:
        print(f"condition {rep.condition} at lambda0 = {rep.lambda0}: divergent integral", file=sys.stderr)
    return [tab], not rep.finite


def _exp_stability(cfg):
    ensA, ensB = cfg.ensemble(), cfg.ensemble("_b")
    rep = stab.log_distance_functional(
        ensA, ensB, _grid(cfg), cfg["sigma"], cfg["R"], cfg["paths"], cfg["initials"], cfg["seed"],
        q=cfg["q"], alpha=cfg["alpha"], with_lambda=cfg["with_lambda"],
    )
    b = rep.bracket
    tab = Table(
        "stability.csv",
        ["sigma", "R", "T", "q", "lhs", "se", "gr_mass", "grad_group", "sigma2_group", "sigma1_group",
         "bracket", "lambda_pT", "fitted_constant", "alpha", "alpha_moment", "alpha_moment_se"],
    )
    tab.add(rep.sigma, rep.R, rep.T, rep.q, rep.lhs, rep.lhs_se, rep.gr_mass, b.grad_group, b.sigma2_group,
            b.sigma1_group, b.total, rep.lambda_pT, rep.fitted_constant, rep.alpha, rep.sup_moment,
            rep.sup_moment_se)
    return [tab], False


def _exp_cauchy(cfg):
    pairs = cfg["pairs"]
    if len(pairs) % 2:
        raise ConfigError("key 'pairs' must list (n, k) pairs: an even number of integers")
    base = cfg.ensemble()
    grid = _grid(cfg)
    tab = Table("cauchy.csv", ["n", "k", "sigma_nk", "I_nk", "I_se", "alpha", "alpha_moment",
                               "alpha_moment_se", "gr_mass"])
    for n, k in zip(pairs[::2], pairs[1::2]):
        c = stab.cauchy_diagnostic(base, n, k, cfg["alpha"], grid, cfg["R"], cfg["paths"], cfg["initials"],
                                   cfg["seed"], q=cfg["q"], order=cfg["quad_order"])
        tab.add(c.n, c.k, c.sigma_nk, c.I_nk, c.I_se, c.alpha, c.sup_moment, c.sup_moment_se, c.gr_mass)
    return [tab], False


def _check_fields(cfg):
    if cfg.get("field"):
        return [parse_field(cfg["field"], cfg["d"])]
    ens = cfg.ensemble()
    return list(ens.fields)


def _exp_mollify(cfg):
    specs = _check_fields(cfg)
    pts = cfg.eval_points()
    d = cfg["d"]
    res = Table("mollify_residuals.csv", ["field", "epsilon", *_coords(d), "jacobian_residual",
                                          "divergence_residual"])
    lem = Table("mollify_margins.csv", ["field", "epsilon", "delta", "value_sq", "grad_sq", "delta_sq",
                                        "worst", "points"])
    for spec in specs:
        for eps in cfg["epsilons"]:
            mc = moll.MollifyConfig(eps, cfg["quad_order"], seed=cfg["seed"])
            jr, dr = moll.ou_identity_residuals(spec, mc, pts)
            for x, a, b in zip(pts, np.atleast_1d(jr), np.atleast_1d(dr)):
                res.add(spec.label, eps, *x, a, b)
            r = moll.lemma32_check(spec, mc, pts)
            lem.add(spec.label, eps, r.delta, r.value_sq, r.grad_sq, r.delta_sq, r.worst, r.points)
    return [res, lem], False


def _lattice(cfg) -> stab.SampleGrid:
    return stab.SampleGrid(cfg["box"], cfg["spacing"], cfg["d"], cfg["offset"])


def _exp_maximal(cfg):
    spec = _check_fields(cfg)[0]
    grid = _lattice(cfg)
    vals = grid.sample(spec.value)
    mf = stab.maximal_function(grid, vals, cfg["R"])
    mag = np.linalg.norm(vals, axis=-1).ravel()
    tab = Table("maximal.csv", [*_coords(grid.d), "f", "M_R_f"])
    for x, f, m, inside in zip(grid.points(), mag, mf.values.ravel(), mf.interior.ravel()):
        if inside:
            tab.add(*x, f, m)
    ratio = stab.maximal_lp_ratio(grid, vals, cfg["R"], cfg["p"], cfg["radius"])
    rt = Table("maximal_ratio.csv", ["spacing", "R", "p", "r", "ratio"])
    rt.add(grid.spacing, cfg["R"], cfg["p"], cfg["radius"], ratio)
    return [tab, rt], False


def _exp_lusin(cfg):
    spec = _check_fields(cfg)[0]
    grid = _lattice(cfg)
    tab = Table("lusin.csv", ["field", "spacing", "pairs", "max_ratio", "p99_ratio", "zero_denominator"])
    for g in (grid, grid.refine()):
        st = stab.lusin_lipschitz_ratio(spec, g, cfg["R"], cfg["pair_samples"], cfg["seed"])
        tab.add(spec.label, st.spacing, st.pairs, st.max, st.p99, st.zero_denominator)
    return [tab], False


EXPERIMENT_RUNNERS = {
    "simulate": _exp_simulate,
    "density": _exp_density,
    "moments": _exp_moments,
    "bounds": _exp_bounds,
    "check-condition": _exp_condition,
    "stability": _exp_stability,
    "cauchy": _exp_cauchy,
    "mollify-check": _exp_mollify,
    "maximal": _exp_maximal,
    "lusin": _exp_lusin,
}


# ---------------------------------------------------------------------------
# run / manifest


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def execute(cfg: ExperimentConfig, outdir: Path, overrides: dict | None = None) -> int:
    """Run one experiment, write its tables and then the manifest."""
    outdir.mkdir(parents=True, exist_ok=True)
    manifest_path = outdir / MANIFEST
    if manifest_path.exists():
        manifest_path.unlink()
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    tables, violated = EXPERIMENT_RUNNERS[cfg.experiment](cfg)
    outputs = {}
    for tab in tables:
        data = tab.render()
        _atomic_write(outdir / tab.name, data)
        outputs[tab.name] = _sha256(data)
    code = EXIT_VIOLATED if violated else EXIT_OK
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": __version__,
        "experiment": cfg.experiment,
        "seed": cfg["seed"],
        "config": {k: _json_value(v) for k, v in cfg.values.items()},
        "config_text": cfg.text,
        "config_source": cfg.source,
        "overrides": dict(overrides or {}),
        "started": started,
        "wall_clock_seconds": round(time.perf_counter() - t0, 3),
        "exit_code": code,
        "outputs": outputs,
    }
    _atomic_write(manifest_path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return code


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def cmd_run(config_path, output=None, overrides=None, alias: str | None = None) -> int:
    default, allowed = ALIASES.get(alias, (None, None))
    cfg = load_config(config_path, overrides, default_experiment=default)
    if allowed is not None and cfg.experiment not in allowed:
        raise ConfigError(
            f"{config_path}: experiment {cfg.experiment!r} does not belong to the {alias!r} subcommand "
            f"(accepted: {', '.join(sorted(allowed))})"
        )
    outdir = Path(output if output is not None else cfg["output"])
    code = execute(cfg, outdir, overrides)
    print(f"{cfg.experiment}: wrote {outdir / MANIFEST}")
    return code


def cmd_replay(manifest_path) -> int:
    mpath = Path(manifest_path)
    if mpath.is_dir():
        mpath = mpath / MANIFEST
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read manifest {mpath}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if manifest.get("format") != MANIFEST_FORMAT:
        print(f"error: {mpath} is not a gaussflow manifest", file=sys.stderr)
        return EXIT_ERROR
    if manifest.get("version") != __version__:
        print(
            f"error: manifest was written by gaussflow {manifest.get('version')}, this is {__version__}; "
            "refusing to replay",
            file=sys.stderr,
        )
        return EXIT_ERROR
    outputs = manifest["outputs"]
    ok = True
    for name, digest in outputs.items():
        path = mpath.parent / name
        if not path.exists():
            print(f"missing output: {name}", file=sys.stderr)
            ok = False
        elif _sha256(path.read_bytes()) != digest:
            print(f"checksum mismatch on disk: {name}", file=sys.stderr)
            ok = False
    overrides = manifest.get("overrides", {})
    cfg = parse_config(manifest["config_text"], manifest.get("config_source", "<manifest>"), overrides,
                       default_experiment=manifest["experiment"])
    with tempfile.TemporaryDirectory(prefix="gaussflow-replay-") as tmp:
        code = execute(cfg, Path(tmp), overrides)
        fresh = json.loads((Path(tmp) / MANIFEST).read_text(encoding="utf-8"))["outputs"]
    if fresh != outputs:
        for name in sorted(set(fresh) | set(outputs)):
            if fresh.get(name) != outputs.get(name):
                print(f"checksum mismatch on re-run: {name}", file=sys.stderr)
        ok = False
    if code != manifest.get("exit_code", EXIT_OK):
        print(f"re-run exit status {code} differs from recorded {manifest.get('exit_code')}", file=sys.stderr)
        ok = False
    if not ok:
        return EXIT_ERROR
    print(f"replay of {mpath}: {len(outputs)} outputs verified")
    return EXIT_OK


def _arity_text(fam) -> str:
    ds = [d for d in range(1, 5) if fam.dims(d)]
    vals = [fam.arity(d) for d in ds]
    if len(set(vals)) == 1:
        return str(vals[0])
    for text, fn in (("d", lambda d: d), ("d^2", lambda d: d * d), ("1+d", lambda d: 1 + d)):
        if all(v == fn(d) for d, v in zip(ds, vals)):
            return text
    return ",".join(f"d={d}:{v}" for d, v in zip(ds, vals))


def fields_table() -> Table:
    tab = Table("fields", ["id", "arity", "growth", "smoothness", "singular_set", "note"])
    for fam in families():
        tab.add(fam.name, _arity_text(fam), fam.growth_text or "params-dependent", fam.smoothness,
                fam.singular_set, fam.note)
    return tab


def cmd_fields_list(out=None) -> int:
    out = out or sys.stdout
    tab = fields_table()
    widths = [max(len(str(r[i])) for r in [tab.header, *tab.rows]) for i in range(len(tab.header) - 1)]
    for row in [tab.header, *tab.rows]:
        cells = [str(c).ljust(w) for c, w in zip(row, widths)] + [str(row[-1])]
        print("  ".join(cells).rstrip(), file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gaussflow", description="Gaussian push-forward densities of SDE flows.")
    ap.add_argument("--version", action="version", version=f"gaussflow {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    fl = sub.add_parser("fields", help="field registry")
    fl.add_argument("action", choices=["list"])

    def add_run(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="key = value config file")
        p.add_argument("--output", "-o", help="output directory (overrides the config)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return p

    add_run("run", "run the experiment named in the config")
    add_run("simulate", "single-path Euler-Maruyama trajectory with density sums")
    add_run("density", "push-forward density tables or duality moment estimates")
    add_run("bounds", "analytic moment and entropy bounds, exponential condition checks")
    add_run("stability", "coupled-flow log functional, Cauchy diagnostic, Lusin-Lipschitz ratios")
    add_run("mollify-check", "OU identities and mollifier inequalities")
    add_run("maximal", "lattice maximal functions and ratio statistics")

    rp = sub.add_parser("replay", help="re-run a manifest and verify checksums")
    rp.add_argument("manifest", help="manifest.json or its directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "fields":
            return cmd_fields_list()
        if args.command == "replay":
            return cmd_replay(args.manifest)
        alias = None if args.command == "run" else args.command
        return cmd_run(args.config, args.output, _parse_overrides(args.set), alias)
    except (ConfigError, CapabilityError, BlowUpError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
