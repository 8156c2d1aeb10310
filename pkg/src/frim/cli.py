"""Command-line entry point: ``frim {fit,simulate,coverage,detect,export}``.

Settings resolve in the order config file > command-line flags > defaults.
Config files are flat ``key = value`` lines; keys are the long flag names
with dashes or underscores.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConvergenceBudgetError, FRIMError, InputError

log = logging.getLogger("frim")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_BUDGET = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "out": "frim-out",
    "family": "gaussian",
    "pve": 0.95,
    "kmax": 10,
    "chains": 4,
    "warmup": 1000,
    "draws": 2000,
    "thin": 1,
    "missing_policy": "drop",
    "alpha": 0.05,
    "add_intercept": True,
    # simulation
    "I": 100,
    "J": 10,
    "L": 100,
    "case": "case1",
    "p_visit": 0.2,
    "missing_frac": 0.0,
    "fixed_scores": True,
    "replicates": 20,
    "replicate": 0,
    # detection
    "min_duration": 0.0,
    "reference": "pooled",
}

_INT = {"seed", "workers", "kmax", "chains", "warmup", "draws", "thin", "bins", "I", "J", "L", "replicates", "replicate"}
_FLOAT = {"pve", "alpha", "bin_width_pct", "bin_width", "p_visit", "missing_frac", "min_duration"}
_BOOL = {"fixed_scores", "add_intercept", "include_scores"}
_KNOWN = set(DEFAULTS) | _INT | _FLOAT | _BOOL | {
    "input", "schema", "covariates", "domain", "test_visit", "draws_file", "bands_level", "diagonal", "interpolation", "reference",
}


class ConfigError(InputError):
    pass


def read_config(path) -> dict:
    """Flat key = value file; ``#`` comments; an optional ``[section]`` header is ignored."""
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = "[frim]\n" + text
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out = {}
    for section in cp.sections():
        for k, v in cp[section].items():
            key = k.strip().replace("-", "_")
            if key in ("i", "j", "l"):
                key = key.upper()
            if key not in _KNOWN:
                raise ConfigError(f"{path}: unknown key {k!r}")
            out[key] = _coerce(key, v.strip())
    return out


def _coerce(key, value):
    try:
        if key in _INT:
            return int(value)
        if key in _FLOAT:
            return float(value)
        if key in _BOOL:
            if isinstance(value, bool):
                return value
            low = str(value).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


def resolve(args: argparse.Namespace) -> dict:
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("command", "config", "func")}
    conf = read_config(args.config) if getattr(args, "config", None) else {}
    merged = dict(DEFAULTS)
    merged.update(flags)
    merged.update(conf)
    n_bin_specs = sum(merged.get(k) is not None for k in ("bin_width_pct", "bin_width"))
    if n_bin_specs > 1:
        raise ConfigError("--bin-width-pct and --bin-width are mutually exclusive")
    if int(merged["workers"]) < 1:
        raise ConfigError("workers must be at least 1")
    return merged


# -- manifest / timing --------------------------------------------------------


class Run:
    def __init__(self, command, settings, out):
        self.t0 = time.perf_counter()
        self.out = Path(out)
        self.manifest = {
            "command": command,
            "argv": sys.argv[1:],
            "settings": {k: v for k, v in settings.items()},
            "seed": settings.get("seed"),
            "versions": _versions(),
            "timings": {},
            "status": "running",
        }

    @contextmanager
    def stage(self, name):
        t = time.perf_counter()
        self.manifest["current_stage"] = name
        try:
            yield
        finally:
            self.manifest["timings"][name] = self.manifest["timings"].get(name, 0.0) + time.perf_counter() - t

    def finish(self, status, error=None, stage=None):
        self.manifest.pop("current_stage", None)
        self.manifest["status"] = status
        if error is not None:
            self.manifest["error"] = f"{type(error).__name__}: {error}"
            self.manifest["failed_stage"] = stage
        self.manifest["wall_seconds"] = time.perf_counter() - self.t0
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, default=_json_default))


def _versions():
    import pandas
    import polyagamma
    import scipy

    return {
        "frim": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pandas.__version__,
        "polyagamma": getattr(polyagamma, "__version__", "unknown"),
    }


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    return str(o)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default))


class _Pool:
    """Owns the worker processes; modules only ever see ``map``."""

    def __init__(self, workers):
        self.workers = int(workers)
        self.ex = ProcessPoolExecutor(self.workers) if self.workers > 1 else None

    def map(self, fn, items):
        if self.ex is None:
            return map(fn, items)
        return self.ex.map(fn, items)

    def close(self):
        if self.ex is not None:
            self.ex.shutdown()


# -- settings builders ----------------------------------------------------------


def pipeline_settings(cfg):
    from .pipeline import PipelineSettings
    from .sampler import SamplerConfig

    sampler = SamplerConfig(
        chains=cfg["chains"], warmup=cfg["warmup"], draws=cfg["draws"], seed=cfg["seed"], thin=cfg["thin"]
    )
    return PipelineSettings(
        bin_width_pct=cfg.get("bin_width_pct"),
        bin_width=cfg.get("bin_width"),
        n_bins=cfg.get("bins"),
        pve_threshold=cfg["pve"],
        K_max=cfg["kmax"],
        missing_policy=cfg["missing_policy"],
        diagonal=cfg.get("diagonal", "smooth"),
        interpolation=cfg.get("interpolation", "linear"),
        sampler=sampler,
        alpha=cfg["alpha"],
    )


def sim_config(cfg):
    from .simulate import SimConfig

    return SimConfig(
        I=cfg["I"], J=cfg["J"], L=cfg["L"], family=cfg["family"], case=cfg["case"], p_visit=cfg["p_visit"],
        missing_frac=cfg["missing_frac"], seed=cfg["seed"], fixed_scores=cfg["fixed_scores"],
    )


def _schema(text):
    if not text:
        return None
    out = {}
    for part in str(text).split(","):
        if "=" not in part:
            raise ConfigError(f"schema entries look like field=column, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_input(cfg):
    from .data import ingest_long_csv

    if not cfg.get("input"):
        raise ConfigError("an input CSV is required (--input)")
    covs = [c.strip() for c in str(cfg["covariates"]).split(",") if c.strip()] if cfg.get("covariates") else None
    domain = None
    if cfg.get("domain"):
        lo, hi = (float(x) for x in str(cfg["domain"]).split(","))
        domain = (lo, hi)
    return ingest_long_csv(
        cfg["input"], _schema(cfg.get("schema")), cfg["family"], covariates=covs,
        add_intercept=cfg["add_intercept"], domain_bounds=domain,
    )


# -- commands -------------------------------------------------------------------


def write_fit_outputs(fit, out, run: Run, level="combined", alpha=0.05):
    import pandas as pd

    from .sampler import summarize_random_effects, write_draws

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    centers = fit.layout.centers
    beta = fit.fcoef.evaluate(centers)
    frame = pd.DataFrame(beta, columns=list(fit.fcoef.names))
    frame.insert(0, "s", centers)
    frame.to_csv(out / "beta.csv", index=False)
    local = pd.DataFrame([f.summary() for f in fit.fits])
    local.to_csv(out / "local_fits.csv", index=False)
    mf = fit.mfpca
    for name, F in (("eigen_level1.csv", mf.phi), ("eigen_level2.csv", mf.psi)):
        ef = pd.DataFrame(F, columns=[f"k{k + 1}" for k in range(F.shape[1])])
        ef.insert(0, "s", mf.grid)
        ef.to_csv(out / name, index=False)
    _write_json(out / "mfpca.json", mf.summary())
    write_draws(out / "draws.bin", fit.draws)
    _write_json(out / "diagnostics.json", fit.draws.diagnostics())
    bands = summarize_random_effects(fit.draws, fit.inputs, level, alpha)
    bands.to_frame().to_csv(out / f"bands_{level}.csv", index=False)
    run.manifest["summary"] = fit.summary()


def cmd_fit(cfg, run: Run, pool: _Pool):
    from .pipeline import StageError, fit_frim

    with run.stage("ingest"):
        ds = _load_input(cfg)
    settings = pipeline_settings(cfg)
    try:
        with run.stage("pipeline"):
            fit = fit_frim(ds, settings, map_fn=pool.map)
    except StageError as exc:
        exc.run_stage = exc.stage
        raise
    run.manifest["stage_timings"] = fit.timings
    with run.stage("write"):
        write_fit_outputs(fit, run.out, run, cfg.get("bands_level", "combined"), cfg["alpha"])
    return EXIT_OK


def cmd_simulate(cfg, run: Run, pool: _Pool):
    from .data import write_long_csv
    from .simulate import generate_dataset

    with run.stage("simulate"):
        sc = sim_config(cfg)
        ds, truth = generate_dataset(sc, cfg["replicate"])
    with run.stage("write"):
        run.out.mkdir(parents=True, exist_ok=True)
        write_long_csv(ds, run.out / "data.csv")
        np.savez(
            run.out / "truth.npz", grid=truth.grid, xi=truth.xi, zeta=truth.zeta, beta=truth.beta, r=truth.r,
            eta=truth.eta, missing=truth.missing, visit_subject=truth.visit_subject,
        )
        _write_json(run.out / "simulation.json", sc.to_dict())
    return EXIT_OK


def cmd_coverage(cfg, run: Run, pool: _Pool):
    import pandas as pd

    from .simulate import run_coverage_study

    sc = sim_config(cfg)
    settings = pipeline_settings(cfg)
    with run.stage("coverage"):
        report = run_coverage_study(sc, cfg["replicates"], settings, map_fn=pool.map)
    with run.stage("write"):
        run.out.mkdir(parents=True, exist_ok=True)
        row = {
            "case": sc.case, "family": sc.family, "I": sc.I, "J": sc.J, "L": sc.L,
            "W": settings.bin_width_pct if settings.bin_width_pct is not None else "",
            "missing_frac": sc.missing_frac, "replicates": cfg["replicates"],
            "excluded": len(report.meta["excluded"]), "mpcp": report.mpcp,
        }
        pd.DataFrame([row]).to_csv(run.out / "coverage.csv", index=False)
        (run.out / "coverage.json").write_text(report.to_json())
    run.manifest["mpcp"] = report.mpcp
    return EXIT_OK


def cmd_detect(cfg, run: Run, pool: _Pool):
    import pandas as pd

    from .pipeline import flag_test_visits

    with run.stage("ingest"):
        if cfg.get("input"):
            ds = _load_input(cfg)
        else:
            from .simulate import generate_dataset

            ds, _ = generate_dataset(sim_config(cfg), cfg["replicate"])
    with run.stage("split"):
        test = _test_mask(ds, cfg)
    settings = pipeline_settings(cfg)
    with run.stage("flag"):
        flagged = flag_test_visits(ds, test, settings, alpha=cfg["alpha"], min_duration=cfg["min_duration"],
                                   reference=cfg["reference"], map_fn=pool.map)
    rows, reports = [], []
    for v, rep in flagged:
        sid, vid = ds.subject_ids[ds.visit_subject[v]], ds.visit_ids[v]
        reports.append({"subject": sid, "visit": vid, **rep.to_dict()})
        for (a, b), d in zip(rep.intervals, rep.durations):
            rows.append({"subject": sid, "visit": vid, "start": a, "end": b, "duration": d})
    with run.stage("write"):
        run.out.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows, columns=["subject", "visit", "start", "end", "duration"]).to_csv(
            run.out / "anomalies.csv", index=False
        )
        _write_json(run.out / "anomalies.json", reports)
    run.manifest["n_flagged_intervals"] = len(rows)
    return EXIT_OK


def _test_mask(ds, cfg):
    """One test visit per subject: an explicit visit id, or a seeded random pick."""
    test = np.zeros(ds.n_visits, dtype=bool)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg["seed"]), 7]))
    for i in range(ds.I):
        rows = np.flatnonzero(ds.visit_subject == i)
        if cfg.get("test_visit") is not None:
            hit = [v for v in rows if str(ds.visit_ids[v]) == str(cfg["test_visit"])]
            if hit:
                test[hit[0]] = True
        elif len(rows) >= 3:
            test[rng.choice(rows)] = True
    if not test.any():
        raise ConfigError("no test visits selected")
    return test


def cmd_export(cfg, run: Run, pool: _Pool):
    from .sampler import draws_to_frame, read_draws

    path = cfg.get("draws_file") or cfg.get("input")
    if not path:
        raise ConfigError("export needs --draws-file PATH")
    with run.stage("export"):
        dr = read_draws(path)
        run.out.mkdir(parents=True, exist_ok=True)
        draws_to_frame(dr, include_scores=bool(cfg.get("include_scores", False))).to_csv(run.out / "draws.csv", index=False)
        _write_json(run.out / "diagnostics.json", dr.diagnostics())
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "coverage": cmd_coverage, "detect": cmd_detect, "export": cmd_export}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--family", choices=["gaussian", "binomial"])
    bins = common.add_mutually_exclusive_group()
    bins.add_argument("--bin-width-pct", type=float, dest="bin_width_pct")
    bins.add_argument("--bin-width", type=float, dest="bin_width")
    common.add_argument("--bins", type=int)
    common.add_argument("--pve", type=float)
    common.add_argument("--kmax", type=int)
    common.add_argument("--chains", type=int)
    common.add_argument("--warmup", type=int)
    common.add_argument("--draws", type=int)
    common.add_argument("--thin", type=int)
    common.add_argument("--missing-policy", choices=["drop", "pairwise"], dest="missing_policy")
    common.add_argument("--alpha", type=float)
    common.add_argument("-v", "--verbose", action="store_true")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--input", metavar="CSV")
    data.add_argument("--schema", help="field=column pairs, e.g. subject=id,visit=day,s=minute,y=mims")
    data.add_argument("--covariates", help="comma-separated covariate columns")
    data.add_argument("--domain", help="s_min,s_max")
    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--I", type=int, dest="I")
    sim.add_argument("--J", type=int, dest="J")
    sim.add_argument("--L", type=int, dest="L")
    sim.add_argument("--case", choices=["case1", "case2"])
    sim.add_argument("--p-visit", type=float, dest="p_visit")
    sim.add_argument("--missing-frac", type=float, dest="missing_frac")
    sim.add_argument("--replicate", type=int)

    p = argparse.ArgumentParser(prog="frim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"frim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common, data], help="fit the model to a long-format CSV")
    sub.add_parser("simulate", parents=[common, sim], help="write one simulated dataset")
    cov = sub.add_parser("coverage", parents=[common, sim], help="repeated-simulation coverage study")
    cov.add_argument("--replicates", type=int)
    det = sub.add_parser("detect", parents=[common, data, sim], help="flag unusual visits against training visits")
    det.add_argument("--test-visit", dest="test_visit")
    det.add_argument("--min-duration", type=float, dest="min_duration")
    det.add_argument("--reference", choices=["pooled", "predictive"],
                     help="band from the subject's pooled training visits, or a fresh-visit predictive band")
    exp = sub.add_parser("export", parents=[common], help="convert a draws file to CSV")
    exp.add_argument("--draws-file", dest="draws_file")
    exp.add_argument("--include-scores", action="store_true", default=None, dest="include_scores")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
    except FRIMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    cfg.pop("verbose", None)
    run = Run(args.command, cfg, cfg["out"])
    pool = _Pool(cfg["workers"])
    code, err = EXIT_INTERNAL, None
    try:
        code = COMMANDS[args.command](cfg, run, pool)
    except ConvergenceBudgetError as exc:
        code, err = EXIT_BUDGET, exc
    except InputError as exc:
        code, err = EXIT_INPUT, exc
    except FRIMError as exc:
        inner = getattr(exc, "error", None)
        code = EXIT_INPUT if isinstance(inner, InputError) else EXIT_INTERNAL
        err = exc
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        code, err = EXIT_INTERNAL, exc
    finally:
        pool.close()
    stage = getattr(err, "stage", None) or run.manifest.get("current_stage")
    run.finish("ok" if code == EXIT_OK else "failed", err, stage)
    if err is not None:
        print(f"error: {err}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
