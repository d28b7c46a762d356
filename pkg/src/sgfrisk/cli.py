"""``sgfrisk`` command line.

Precedence of settings: built-in defaults < ``--config`` file < command-line
flags.  The config file is INI with sections named after the modules
(``[mp_asymptotics]``, ``[weak_features]``, ``[experiments]``, ``[cli]``).

Exit codes: 0 success, 1 invalid input (or a failed validation check),
2 numerical divergence.
"""
from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import sys
import tempfile
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as ex
from . import mp_asymptotics as mp
from . import weak_features as wf
from .kernels import BACKEND
from .sde_core import DivergenceError

OUTPUT_ENV = "SGFRISK_OUTPUT_DIR"
SUBCOMMANDS = ("theory", "finite", "simulate", "compare", "phase", "heatmap", "validate-sde", "mp")


class CliError(ValueError):
    """Invalid user input (exit code 1)."""


# ---------------------------------------------------------------------------
# config schema


@dataclass(frozen=True)
class CliConfig:
    command: str
    # mp_asymptotics
    alpha: tuple = (0.5,)
    psi: float = 2.5
    mu: float = 0.5
    gamma_prime: float = 1.0
    norm_beta_sq: float = 1.0
    delta_sq: float = 2.0
    # weak_features
    n: int = 80
    d: int = 200
    p: int = 40
    replicates: int = 100
    subsets: int = 300
    sgd_seeds: int = 1
    iters: int = 10000
    record_every: int = 1000
    batch_size: int = 1
    # experiments
    t_grid: str = "0.001:1000:13:log"
    t_large: float = 50.0
    preset: str = ""
    scenario: str = "constant"
    steps: int = 2000
    mc_replicates: int = 20000
    sde_gamma: float = 0.01
    t_end: float = 2.0
    quad_nodes: int = 400
    quad_panels: int = 64
    # cli
    seed: int = 0
    threads: int = 1
    out: str = ""
    name: str = ""
    verbose: int = 0


SECTIONS = {
    "mp_asymptotics": ("alpha", "psi", "mu", "gamma_prime", "norm_beta_sq", "delta_sq"),
    "weak_features": ("n", "d", "p", "replicates", "subsets", "sgd_seeds", "iters", "record_every",
                      "batch_size"),
    "experiments": ("t_grid", "t_large", "preset", "scenario", "steps", "mc_replicates", "sde_gamma",
                    "t_end", "quad_nodes", "quad_panels"),
    "cli": ("seed", "threads", "out", "name", "verbose"),
}
KEY_SECTION = {k: s for s, keys in SECTIONS.items() for k in keys}
TYPES = {f.name: f.type for f in fields(CliConfig)}


def _parse_value(key, text):
    kind = TYPES[key]
    text = text.strip()
    try:
        if kind == "tuple":
            vals = tuple(float(v) for v in text.split(",") if v.strip())
            if not vals:
                raise ValueError
            return vals
        if kind == "float":
            return float(text)
        if kind == "int":
            return int(text)
    except ValueError:
        raise CliError(f"bad value {text!r} for key {key!r} (expected {kind})") from None
    return text


def _format_value(key, value):
    if TYPES[key] == "tuple":
        return ",".join(repr(float(v)) for v in value)
    if TYPES[key] == "float":
        return repr(float(value))
    return str(value)


def serialize_config(cfg):
    """INI text holding every resolved setting."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["cli"] = {"command": cfg.command}
    for section, keys in SECTIONS.items():
        if section not in cp:
            cp[section] = {}
        for k in keys:
            cp[section][k] = _format_value(k, getattr(cfg, k))
    buf = []

    class _W:
        def write(self, s):
            buf.append(s)

    cp.write(_W())
    return "".join(buf)


def read_config_text(text, source="<config>"):
    """Settings in an INI document, rejecting unknown sections and keys."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise CliError(f"cannot parse config {source}: {e}") from None
    out = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise CliError(f"unknown config section [{section}] in {source}")
        for key, val in cp[section].items():
            if key == "command" and section == "cli":
                out["command"] = val.strip()
                continue
            if KEY_SECTION.get(key) != section:
                raise CliError(f"unknown config key {key!r} in section [{section}] of {source}")
            out[key] = _parse_value(key, val)
    return out


def parse_config(text):
    """Inverse of :func:`serialize_config`."""
    data = read_config_text(text)
    if "command" not in data:
        raise CliError("config has no command")
    return CliConfig(**data)


def parse_t_grid(spec):
    """``min:max:points[:log|lin]``, a comma list, or ``inf``.  Returns ``(times, is_inf)``."""
    spec = spec.strip().lower()
    if spec == "inf":
        return (), True
    malformed = CliError(f"malformed time grid {spec!r}; use min:max:points[:log|lin], a comma list or inf")
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) not in (3, 4):
            raise malformed
        try:
            lo, hi, pts = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise malformed from None
        scale = parts[3] if len(parts) == 4 else "log"
        if pts < 1 or hi < lo or scale not in ("log", "lin"):
            raise malformed
        if scale == "log" and lo <= 0:
            raise CliError(f"log time grid needs min > 0 (got {spec!r})")
        if pts == 1:
            vals = (lo,)
        elif scale == "log":
            vals = ex.log_grid(lo, hi, pts)
        else:
            vals = tuple(float(v) for v in np.linspace(lo, hi, pts))
    else:
        try:
            vals = tuple(float(v) for v in spec.split(","))
        except ValueError:
            raise malformed from None
    if any(v < 0 or not math.isfinite(v) for v in vals) or list(vals) != sorted(set(vals)):
        raise CliError(f"time grid {spec!r} must be finite, nonnegative and strictly increasing")
    return vals, False


# ---------------------------------------------------------------------------
# argument parsing


def _common(sp):
    sp.add_argument("--config", help="INI config file (flags override it)")
    sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./results)")
    sp.add_argument("--name", help="base name of the output files")
    sp.add_argument("--seed", type=int, help="master seed (default 0; always echoed)")
    sp.add_argument("--threads", type=int, help="worker threads, 0 = all cores")
    sp.add_argument("-v", "--verbose", action="count", default=None)


def _theory_flags(sp):
    sp.add_argument("--alpha", help="p/n ratio, or a comma list")
    sp.add_argument("--psi", type=float, help="d/n ratio")
    sp.add_argument("--mu", type=float, help="label noise strength")
    sp.add_argument("--gamma-prime", type=float, help="rescaled learning rate (gamma = gamma'/d)")
    sp.add_argument("--norm-beta-sq", type=float)
    sp.add_argument("--delta-sq", type=float, help="||beta - beta0||^2")
    sp.add_argument("--t-grid", help="min:max:points[:log|lin], comma list, or inf")


def _size_flags(sp):
    sp.add_argument("--n", type=int)
    sp.add_argument("--d", type=int)
    sp.add_argument("--p", type=int)


def build_parser():
    ap = argparse.ArgumentParser(prog="sgfrisk", description="Test risk of GF, SGF and SGD in the weak features model.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({BACKEND} kernels)")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    sp = sub.add_parser("theory", help="asymptotic GF risk and SGF correction")
    _theory_flags(sp)
    sp.add_argument("--quad-nodes", type=int)
    _common(sp)

    sp = sub.add_parser("finite", help="finite-size expected risks (Monte Carlo over spectra)")
    _theory_flags(sp)
    _size_flags(sp)
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--quad-panels", type=int)
    _common(sp)

    sp = sub.add_parser("simulate", help="paired SGD / GD runs averaged over subsets")
    _theory_flags(sp)
    _size_flags(sp)
    sp.add_argument("--subsets", type=int)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--record-every", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--sgd-seeds", type=int)
    _common(sp)

    for name, help_ in (("compare", "time sweep: theory vs simulation"),
                        ("phase", "large-time SGD - GD across alpha")):
        sp = sub.add_parser(name, help=help_)
        _theory_flags(sp)
        sp.add_argument("--d", type=int)
        sp.add_argument("--subsets", type=int)
        sp.add_argument("--replicates", type=int)
        sp.add_argument("--t-large", type=float)
        sp.add_argument("--preset", help="named preset (see README)")
        _common(sp)

    sp = sub.add_parser("heatmap", help="SGF correction over the (t, alpha) plane")
    _theory_flags(sp)
    sp.add_argument("--quad-nodes", type=int)
    _common(sp)

    sp = sub.add_parser("validate-sde", help="engine vs exact vs Monte Carlo")
    sp.add_argument("--scenario", choices=("constant", "pinning", "time_varying", "weakfeatures"))
    sp.add_argument("--t-grid")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--mc-replicates", type=int)
    sp.add_argument("--sde-gamma", type=float)
    sp.add_argument("--t-end", type=float)
    _common(sp)

    sp = sub.add_parser("mp", help="Marchenko-Pastur mass, mean and inverse moment")
    sp.add_argument("--alpha")
    sp.add_argument("--quad-nodes", type=int)
    _common(sp)
    return ap


def resolve(argv):
    """Parse ``argv`` into a :class:`CliConfig` (defaults < file < flags)."""
    args = build_parser().parse_args(argv)
    values = {}
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as e:
            raise CliError(f"cannot read config file {args.config}: {e.strerror}") from None
        values.update(read_config_text(text, args.config))
        values.pop("command", None)
    for key, val in vars(args).items():
        if key in ("config", "command") or val is None:
            continue
        values[key] = _parse_value(key, val) if key == "alpha" else val
    if args.command == "validate-sde" and "t_grid" not in values:
        values["t_grid"] = "0.05:2:10:log"
    if args.command == "validate-sde" and values.get("scenario") == "weakfeatures":
        values.setdefault("sde_gamma", 1e-3)
        if values.get("t_grid") == "0.05:2:10:log":
            values["t_grid"] = "0.5,1,2"
    return CliConfig(command=args.command, **values)


# ---------------------------------------------------------------------------
# output


def output_dir(cfg):
    return Path(cfg.out or os.environ.get(OUTPUT_ENV) or "results")


def _atomic_write(path, text):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_result(result, directory, config=None):
    """Write ``<name>.csv`` and ``<name>.meta.json`` atomically; return both paths."""
    if not result.rows:
        raise CliError("result has no rows; nothing written")
    name = result.name
    if not name or os.sep in name or (os.altsep and os.altsep in name) or name in (".", ".."):
        raise CliError(f"output name {name!r} must be a plain file name")
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / f"{name}.csv"
        meta_path = directory / f"{name}.meta.json"
        meta = dict(result.meta)
        meta["columns"] = list(result.columns)
        meta["kind"] = result.kind
        if config is not None:
            meta["cli_config"] = asdict(config)
        _atomic_write(csv_path, result.to_csv())
        _atomic_write(meta_path, json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    except OSError as e:
        raise OSError(f"cannot write results to {directory}: {e.strerror or e}") from e
    return csv_path, meta_path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.ndarray, tuple)):
        return list(o)
    raise TypeError(type(o).__name__)


def _print_table(result, out=sys.stdout, limit=60):
    cols = result.columns
    print("  ".join(f"{c:>14}" for c in cols), file=out)
    for row in result.rows[:limit]:
        cells = []
        for v in row:
            if isinstance(v, (bool, np.bool_)):
                cells.append(f"{'yes' if v else 'no':>14}")
            elif isinstance(v, (float, np.floating)):
                cells.append(f"{float(v):>14.10g}")
            else:
                cells.append(f"{v!s:>14}")
        print("  ".join(cells), file=out)
    if len(result.rows) > limit:
        print(f"... {len(result.rows) - limit} more rows", file=out)


# ---------------------------------------------------------------------------
# commands


def _workers(cfg):
    if cfg.threads < 0:
        raise CliError("--threads must be >= 0")
    return cfg.threads or (os.cpu_count() or 1)


def _check_alpha(cfg):
    for a in cfg.alpha:
        if a <= 0:
            raise CliError(f"alpha must be positive (got {a})")
        if a > cfg.psi:
            raise CliError(f"alpha={a} exceeds psi={cfg.psi}: need alpha <= psi (p <= d)")


def _asym(cfg, alpha):
    try:
        return mp.AsymptoticParams(alpha, cfg.psi, cfg.mu, cfg.gamma_prime, cfg.norm_beta_sq, cfg.delta_sq)
    except ValueError as e:
        raise CliError(str(e)) from None


def _named(cfg, default):
    return cfg.name or default


def cmd_theory(cfg):
    _check_alpha(cfg)
    times, is_inf = parse_t_grid(cfg.t_grid)
    rows = []
    for a in cfg.alpha:
        ap = _asym(cfg, a)
        if is_inf:
            gf = mp.gf_risk_limit(ap)
            sgf = mp.sgf_correction_limit(ap)
            rows.append((a, math.inf, gf, sgf, gf + sgf))
        else:
            for t in times:
                gf = mp.gf_risk_asymptotic(ap, t, cfg.quad_nodes)
                sgf = mp.sgf_correction_asymptotic(ap, t, cfg.quad_nodes)
                rows.append((a, t, gf, sgf, gf + sgf))
    return ex.ExperimentResult(_named(cfg, "theory"), "theory",
                               ("alpha", "t", "gf_risk", "sgf_correction", "sgf_risk"), rows)


def _model(cfg, p=None):
    p = cfg.p if p is None else p
    if cfg.n < 1 or cfg.d < 1:
        raise CliError("need n >= 1 and d >= 1")
    if not 1 <= p <= cfg.d:
        raise CliError(f"p={p} must satisfy 1 <= p <= d={cfg.d}")
    return wf.ModelParams(n=cfg.n, d=cfg.d, p=p, mu=cfg.mu, gamma_prime=cfg.gamma_prime,
                          norm_beta=math.sqrt(cfg.norm_beta_sq), delta_sq=cfg.delta_sq,
                          batch_size=cfg.batch_size)


def cmd_finite(cfg):
    params = _model(cfg)
    times, is_inf = parse_t_grid(cfg.t_grid)
    if is_inf:
        raise CliError("the inf time grid is only available for `theory`")
    if cfg.replicates < 2:
        raise CliError("--replicates must be >= 2")
    curve = wf.risk_curve_finite(params, np.array(times), cfg.replicates, cfg.seed, cfg.quad_panels)
    rows = [(float(t), g, gs, c, cs, s, tr) for t, g, gs, c, cs, s, tr in
            zip(curve.times, curve.gf_risk, curve.gf_se, curve.sgf_correction, curve.sgf_se,
                curve.sgf_risk, curve.train_error)]
    return ex.ExperimentResult(_named(cfg, "finite"), "finite",
                               ("t", "gf_risk", "gf_se", "sgf_correction", "sgf_se", "sgf_risk",
                                "train_error"), rows)


def cmd_simulate(cfg):
    params = _model(cfg)
    if cfg.iters < 1 or cfg.record_every < 1:
        raise CliError("--iters and --record-every must be >= 1")
    if cfg.subsets < 2:
        raise CliError("--subsets must be >= 2")
    pts = np.arange(0, cfg.iters + 1, cfg.record_every)
    if pts[-1] != cfg.iters:
        pts = np.append(pts, cfg.iters)
    curve = wf.sgd_minus_gd_expectation(params, pts * params.gamma, cfg.subsets, cfg.sgd_seeds,
                                        cfg.seed, _workers(cfg))
    rows = [(int(v), float(t), g, gs, m, s) for v, t, g, gs, m, s in
            zip(curve.iterations, curve.times, curve.gd_mean, curve.gd_stderr, curve.mean, curve.stderr)]
    return ex.ExperimentResult(_named(cfg, "simulate"), "simulate",
                               ("iteration", "t", "gd_risk", "gd_se", "sgd_minus_gd", "sgd_minus_gd_se"),
                               rows, {"delta_sq": curve.delta_sq, "norm_beta_sq": curve.norm_beta_sq})


def _experiment_config(cfg, kind, default_preset, given):
    overrides = {"seed": cfg.seed, "workers": _workers(cfg), "mu": cfg.mu, "psi": cfg.psi,
                 "gamma_prime": cfg.gamma_prime, "norm_beta_sq": cfg.norm_beta_sq,
                 "delta_sq": cfg.delta_sq, "quad_nodes": cfg.quad_nodes, "quad_panels": cfg.quad_panels}
    if "alpha" in given:
        overrides["alphas"] = cfg.alpha
    if "t_grid" in given:
        times, is_inf = parse_t_grid(cfg.t_grid)
        if is_inf:
            raise CliError("the inf time grid is only available for `theory`")
        overrides["times"] = times
    for key in ("d", "subsets", "replicates", "t_large"):
        if key in given:
            overrides[key] = getattr(cfg, key)
    if cfg.name:
        overrides["name"] = cfg.name
    name = cfg.preset or default_preset
    if name not in ex.PRESETS or ex.PRESETS[name]["kind"] != kind:
        options = sorted(k for k, v in ex.PRESETS.items() if v["kind"] == kind)
        raise CliError(f"preset {name!r} is not a {kind} preset; choose from {options}")
    try:
        return ex.preset(name, **overrides)
    except ex.ConfigError as e:
        raise CliError(str(e)) from None


def cmd_compare(cfg, given):
    return ex.run(_experiment_config(cfg, "time_sweep", "fig3", given))


def cmd_phase(cfg, given):
    return ex.run(_experiment_config(cfg, "phase_sweep", "fig2-desk", given))


def cmd_heatmap(cfg, given):
    _check_alpha(cfg)
    alphas = cfg.alpha if "alpha" in given else ex.PRESETS["fig4"]["alphas"]
    times = parse_t_grid(cfg.t_grid)[0] if "t_grid" in given else ex.PRESETS["fig4"]["times"]
    if not times:
        raise CliError("the inf time grid is only available for `theory`")
    try:
        ecfg = ex.ExperimentConfig(kind="heatmap", name=cfg.name or "heatmap", alphas=alphas,
                                   times=times, psi=cfg.psi, mu=cfg.mu, gamma_prime=cfg.gamma_prime,
                                   norm_beta_sq=cfg.norm_beta_sq, delta_sq=cfg.delta_sq,
                                   quad_nodes=cfg.quad_nodes, seed=cfg.seed)
    except ex.ConfigError as e:
        raise CliError(str(e)) from None
    return ex.run(ecfg)


def cmd_validate(cfg):
    times, is_inf = parse_t_grid(cfg.t_grid)
    if is_inf:
        raise CliError("validate-sde needs a finite time grid")
    try:
        ecfg = ex.ExperimentConfig(kind="sde_validation", name=cfg.name or f"validate-{cfg.scenario}",
                                   scenario=cfg.scenario, times=times, steps=cfg.steps,
                                   mc_replicates=cfg.mc_replicates, sde_gamma=cfg.sde_gamma,
                                   t_end=max(cfg.t_end, times[-1]), seed=cfg.seed, workers=_workers(cfg),
                                   mu=cfg.mu, quad_panels=cfg.quad_panels)
    except ex.ConfigError as e:
        raise CliError(str(e)) from None
    return ex.run(ecfg)


def cmd_mp(cfg):
    rows = []
    for a in cfg.alpha:
        if a <= 0:
            raise CliError(f"alpha must be positive (got {a})")
        mass = mp.mp_integral(a, np.ones_like)
        mean = mp.mp_integral(a, lambda s: s)
        inv = math.inf if a == 1 else mp.mp_integral(a, lambda s: 1.0 / s)
        closed = mp.inverse_moment_closed_form(a) / a
        rows.append((a, mass, min(1.0, 1.0 / a), mean, inv, closed))
    return ex.ExperimentResult(_named(cfg, "mp"), "mp",
                               ("alpha", "mass", "mass_exact", "mean", "inv_moment", "inv_moment_exact"),
                               rows)


def _validation_lines(result):
    cols = result.columns
    lines = []
    ok = True
    for row in result.rows:
        rec = dict(zip(cols, row))
        t = rec["t"]
        if "rel_err_var" in rec:
            e = max(rec["rel_err_mean"], rec["rel_err_var"])
            lines.append(f"{'PASS' if rec['pass_engine'] else 'FAIL'} t={t:.6g} engine vs exact mean/variance "
                         f"rel err {e:.2e} (tol 1e-05)")
        else:
            lines.append(f"{'PASS' if rec['pass_engine'] else 'FAIL'} t={t:.6g} covariance trace engine vs "
                         f"closed form rel err {rec['rel_err']:.2e} (tol 1e-04)")
        lines.append(f"{'PASS' if rec['pass_mc'] else 'FAIL'} t={t:.6g} Monte Carlo vs engine z={rec['mc_z']:+.2f}")
        ok = ok and bool(rec["pass_engine"]) and bool(rec["pass_mc"])
    return lines, ok


def dispatch(argv=None):
    """Run the command line; returns the exit code."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = resolve(argv)
        given = _given_keys(argv, cfg)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RuntimeWarning)
            result = _run(cfg, given)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        paths = write_result(result, output_dir(cfg), cfg)
        _print_table(result)
        if cfg.verbose:
            print(f"seed={cfg.seed} wrote {paths[0]} and {paths[1]}", file=sys.stderr)
        if cfg.command == "validate-sde":
            lines, ok = _validation_lines(result)
            print("\n".join(lines))
            return 0 if ok else 1
        return 0
    except (DivergenceError, mp.ThresholdDivergenceError, FloatingPointError, OverflowError) as e:
        print(f"error: numerical divergence: {e}", file=sys.stderr)
        return 2
    except (CliError, ex.ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _given_keys(argv, cfg):
    """Settings explicitly provided on the command line or in the config file."""
    given = set()
    args = build_parser().parse_args(argv)
    for key, val in vars(args).items():
        if val is not None and key not in ("config", "command"):
            given.add(key)
    if args.config:
        given.update(k for k in read_config_text(Path(args.config).read_text(encoding="utf-8")) if k != "command")
    return given


def _run(cfg, given):
    if cfg.command == "theory":
        return cmd_theory(cfg)
    if cfg.command == "finite":
        return cmd_finite(cfg)
    if cfg.command == "simulate":
        return cmd_simulate(cfg)
    if cfg.command == "compare":
        return cmd_compare(cfg, given)
    if cfg.command == "phase":
        return cmd_phase(cfg, given)
    if cfg.command == "heatmap":
        return cmd_heatmap(cfg, given)
    if cfg.command == "validate-sde":
        return cmd_validate(cfg)
    if cfg.command == "mp":
        return cmd_mp(cfg)
    raise CliError(f"unknown command {cfg.command!r}")


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
