"""Command-line experiment runner.

Usage::

    pwgd run --config linear_d65_pwgd --output runs/d65
    pwgd compare --config linear_d257_pwgd --methods wgd,pwgd --trials 10 --output runs/cmp
    pwgd scaling --config scaling_linear --dims 17,65,257 --sizes 256 --worker-counts 1,2,4
    pwgd klbound --config linear_d17_pwgd --output runs/kl

``--config`` takes a JSON file or the name of a bundled preset.  The flags
``--workers``, ``--trials`` and ``--seed`` override the config.
"""

import argparse
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import __version__, diagnostics, models
from .errors import ConfigurationError, SamplerAborted
from .parallel import ParticlePool
from .samplers import METHODS, SamplerConfig, run_sampler

logger = logging.getLogger(__name__)

MODEL_NAMES = ("linear",) + models.TOY_NAMES


@dataclass
class ModelSection:
    name: str = "linear"
    k: int = 6
    delta: float = 0.1
    gamma: float = 1.0
    alpha: int = 1
    sigma_rel: float = 0.01
    data_seed: int = 0


@dataclass
class SamplerSection:
    method: str = "pwgd"
    n_particles: int = 16
    alpha0: float = 1e-3
    max_iter: int = 200
    step_tol: float = None
    seed: int = 0
    line_search: bool = True


@dataclass
class ProjectionSection:
    tolerance: float = 1e-4
    refresh: int = 10
    r_max: int = None
    solver: str = "dense"
    oversample: int = 10
    power_iters: int = 2


@dataclass
class KDESection:
    rule: str = "median"
    scale: float = 1.0
    bandwidth: float = None
    batch_size: int = None


@dataclass
class RuntimeSection:
    workers: int = 1
    output_dir: str = "runs"
    trials: int = 1


@dataclass
class RunConfig:
    """Resolved run configuration; ``to_dict`` round-trips through ``from_dict``."""

    model: ModelSection = field(default_factory=ModelSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    kde: KDESection = field(default_factory=KDESection)
    runtime: RuntimeSection = field(default_factory=RuntimeSection)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")
        sections = {f.name: f.default_factory for f in dataclasses.fields(cls)}
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigurationError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        built = {}
        for name, factory in sections.items():
            built[name] = _build_section(name, factory, data.get(name, {}))
        cfg = cls(**built)
        cfg.validate()
        return cfg

    def to_dict(self):
        return dataclasses.asdict(self)

    def validate(self):
        m, s, p, kd, rt = self.model, self.sampler, self.projection, self.kde, self.runtime
        _require(m.name in MODEL_NAMES, "model.name", f"must be one of {MODEL_NAMES}")
        if m.name == "linear":
            _require(isinstance(m.k, int) and 1 <= m.k <= 12, "model.k", "must be an integer in [1, 12]")
            _require(m.alpha in (1, 2), "model.alpha", "must be 1 or 2")
            _require(m.delta > 0 and m.gamma > 0, "model.delta/gamma", "must both be positive")
            _require(m.sigma_rel > 0, "model.sigma_rel", "must be positive")
        _require(s.method in METHODS, "sampler.method", f"must be one of {METHODS}")
        _require(isinstance(s.n_particles, int) and s.n_particles >= 1, "sampler.n_particles", "must be >= 1")
        _require(s.alpha0 > 0 and math.isfinite(s.alpha0), "sampler.alpha0", "must be positive")
        _require(isinstance(s.max_iter, int) and s.max_iter >= 0, "sampler.max_iter", "must be >= 0")
        _require(p.refresh >= 1, "projection.refresh", "must be >= 1")
        _require(p.tolerance >= 0, "projection.tolerance", "must be >= 0")
        _require(p.solver in ("dense", "randomized"), "projection.solver", "must be dense or randomized")
        _require(kd.rule in ("median", "fixed"), "kde.rule", "must be median or fixed")
        _require(kd.scale > 0, "kde.scale", "must be positive")
        _require(kd.rule != "fixed" or (kd.bandwidth or 0) > 0, "kde.bandwidth", "fixed rule needs a positive value")
        _require(s.method != "pwgd_batch" or (kd.batch_size or 0) >= 1, "kde.batch_size",
                 "pwgd_batch needs batch_size >= 1")
        _require(isinstance(rt.workers, int) and rt.workers >= 1, "runtime.workers", "must be >= 1")
        _require(isinstance(rt.trials, int) and rt.trials >= 1, "runtime.trials", "must be >= 1")

    def sampler_config(self, trial=0, method=None):
        s, p, kd = self.sampler, self.projection, self.kde
        return SamplerConfig(
            method=method or s.method, n_particles=s.n_particles, alpha0=s.alpha0,
            max_iter=s.max_iter, step_tol=s.step_tol, line_search=s.line_search,
            refresh=p.refresh, tolerance=p.tolerance, r_max=p.r_max, solver=p.solver,
            oversample=p.oversample, power_iters=p.power_iters, batch_size=kd.batch_size,
            bandwidth_rule=kd.rule, bandwidth_scale=kd.scale, bandwidth=kd.bandwidth,
            seed=s.seed + trial, workers=self.runtime.workers,
        )


def _require(ok, name, message):
    if not ok:
        raise ConfigurationError(f"{name}: {message}")


def _build_section(name, factory, values):
    if not isinstance(values, dict):
        raise ConfigurationError(f"{name}: section must be a JSON object")
    default = factory()
    known = {f.name: f for f in dataclasses.fields(default)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigurationError(f"{name}.{sorted(unknown)[0]}: unknown field")
    for key, value in values.items():
        ref = getattr(default, key)
        if isinstance(ref, bool) and not isinstance(value, bool):
            raise ConfigurationError(f"{name}.{key}: expected true/false, got {value!r}")
        if isinstance(ref, (int, float)) and not isinstance(ref, bool) and value is not None:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigurationError(f"{name}.{key}: expected a number, got {value!r}")
        if isinstance(ref, str) and not isinstance(value, str):
            raise ConfigurationError(f"{name}.{key}: expected a string, got {value!r}")
    return dataclasses.replace(default, **values)


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("pwgd.presets").iterdir()
                  if p.name.endswith(".json"))


def load_config(source):
    """Parse a config from a JSON path or a bundled preset name."""
    path = Path(source)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
    else:
        preset = resources.files("pwgd.presets") / f"{source}.json"
        if not preset.is_file():
            raise ConfigurationError(f"config {source!r} is neither a file nor a preset "
                                     f"(presets: {', '.join(preset_names())})")
        text = preset.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON in {source}: {exc}") from exc
    return RunConfig.from_dict(data)


def build_model(section):
    """Target model and its reference density for a model section."""
    if section.name == "linear":
        model = models.linear_problem(section.k, delta=section.delta, gamma=section.gamma,
                                      alpha=section.alpha, sigma_rel=section.sigma_rel,
                                      seed=section.data_seed)
        return model, models.analytic_posterior(model)
    model = models.toy_model(section.name)
    return model, diagnostics.toy_reference(model)


def _apply_overrides(cfg, args):
    rt = cfg.runtime
    if getattr(args, "workers", None) is not None:
        rt.workers = args.workers
    if getattr(args, "trials", None) is not None:
        rt.trials = args.trials
    if getattr(args, "seed", None) is not None:
        cfg.sampler.seed = args.seed
    if getattr(args, "output", None) is not None:
        rt.output_dir = args.output
    cfg.validate()
    return cfg


def _write_manifest(out, cfg, extra):
    manifest = {"version": __version__, "config": cfg.to_dict()}
    manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def _export_model_data(out, model):
    if isinstance(model, models.LinearPDEModel):
        diagnostics.write_vector(out / "x_true.csv", model.x_true)
        diagnostics.write_vector(out / "data.csv", model.data)


def _run_trial(model, oracle, scfg, trial_dir, pool):
    trial_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        ens, records = run_sampler(model, scfg, oracle=oracle, pool=pool)
        error = None
    except SamplerAborted as exc:
        ens, records, error = exc.ensemble, exc.records, str(exc)
        (trial_dir / "error.txt").write_text(error + "\n", encoding="utf-8")
    diagnostics.write_trace(trial_dir / "trace.csv", records)
    diagnostics.write_timing(trial_dir / "timing.csv", records)
    diagnostics.write_particles(trial_dir / "particles.csv", ens.X)
    if scfg.method in ("pwgd", "pwgd_batch"):
        diagnostics.write_eigs(trial_dir / "eigs.csv", records)
    return records, error, 1e3 * (time.perf_counter() - t0)


def cmd_run(cfg):
    out = Path(cfg.runtime.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, oracle = build_model(cfg.model)
    _export_model_data(out, model)
    trials, failed = [], False
    with ParticlePool(cfg.runtime.workers) as pool:
        for t in range(cfg.runtime.trials):
            scfg = cfg.sampler_config(t)
            records, error, wall = _run_trial(model, oracle, scfg, out / f"trial_{t}", pool)
            failed |= error is not None
            trials.append({"trial": t, "seed": scfg.seed, "iterations": len(records),
                           "wall_ms": wall, "error": error})
            _log_trial(scfg.method, t, records, error)
    _write_manifest(out, cfg, {"command": "run", "trials": trials,
                               "wall_ms_total": sum(t["wall_ms"] for t in trials)})
    return 1 if failed else 0


def _log_trial(method, t, records, error):
    if error:
        logger.error("%s trial %d aborted: %s", method, t, error)
    elif records:
        last = records[-1]
        logger.info("%s trial %d: %d iterations, rmse_mean %.4g, rmse_var %.4g, r %d",
                    method, t, last.iter, last.rmse_mean, last.rmse_var, last.r)
    else:
        logger.info("%s trial %d: no iterations", method, t)


def cmd_compare(cfg, methods):
    if len(methods) < 2:
        raise ConfigurationError("compare needs at least two methods")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigurationError(f"unknown method(s): {', '.join(bad)}")
    out = Path(cfg.runtime.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, oracle = build_model(cfg.model)
    _export_model_data(out, model)
    rows, runs, failed = [], [], False
    with ParticlePool(cfg.runtime.workers) as pool:
        for method in methods:
            for t in range(cfg.runtime.trials):
                scfg = cfg.sampler_config(t, method=method)
                records, error, wall = _run_trial(model, oracle, scfg, out / method / f"trial_{t}", pool)
                failed |= error is not None
                rows.extend((method, t, r.iter, r.rmse_mean, r.rmse_var, r.step_norm) for r in records)
                runs.append({"method": method, "trial": t, "seed": scfg.seed,
                             "iterations": len(records), "wall_ms": wall, "error": error})
                _log_trial(method, t, records, error)
    diagnostics.write_csv(out / "compare.csv",
                          ("method", "trial", "iter", "rmse_mean", "rmse_var", "step_norm"), rows)
    _write_manifest(out, cfg, {"command": "compare", "methods": list(methods), "runs": runs,
                               "wall_ms_total": sum(r["wall_ms"] for r in runs)})
    return 1 if failed else 0


SCALING_HEADER = ("d", "n_particles", "workers", "r", "iterations", "wall_ms",
                  "grad_ms", "kernel_ms", "projection_ms", "update_ms")


def scaling_cell(cfg, dim, n_particles, workers):
    """Mean per-iteration phase times (ms) for one grid cell."""
    k = int(round(math.log2(dim - 1))) if cfg.model.name == "linear" else None
    if k is not None and 2**k + 1 != dim:
        raise ConfigurationError(f"dimension {dim} is not 2^k + 1")
    section = dataclasses.replace(cfg.model, k=k) if k is not None else cfg.model
    model, oracle = build_model(section)
    scfg = dataclasses.replace(cfg.sampler_config(0), n_particles=n_particles, workers=workers)
    with ParticlePool(workers) as pool:
        _, records = run_sampler(model, scfg, oracle=oracle, pool=pool)
    n = max(len(records), 1)
    phase = {p: sum(r.phase_ms.get(p, 0.0) for r in records) / n
             for p in ("grad", "kernel", "projection", "update")}
    return (dim, n_particles, workers, records[-1].r if records else 0, len(records),
            sum(r.wall_ms for r in records) / n, phase["grad"], phase["kernel"],
            phase["projection"], phase["update"])


def cmd_scaling(cfg, dims, sizes, worker_counts):
    if not (dims and sizes and worker_counts):
        raise ConfigurationError("scaling needs nonempty dims, sizes and worker counts")
    out = Path(cfg.runtime.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rows = [scaling_cell(cfg, d, n, w) for d in dims for n in sizes for w in worker_counts]
    diagnostics.write_csv(out / "scaling.csv", SCALING_HEADER, rows)
    _write_manifest(out, cfg, {"command": "scaling", "dims": list(dims), "sizes": list(sizes),
                               "worker_counts": list(worker_counts),
                               "wall_ms_total": 1e3 * (time.perf_counter() - t0)})
    return 0


def cmd_klbound(cfg):
    if cfg.model.name != "linear":
        raise ConfigurationError("klbound needs the linear model")
    out = Path(cfg.runtime.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = build_model(cfg.model)
    rows = diagnostics.kl_bound_report(model, check=False)
    diagnostics.write_klbound(out / "klbound.csv", rows)
    worst = min(row.slack for row in rows)
    _write_manifest(out, cfg, {"command": "klbound", "min_slack": worst})
    if worst < -1e-8:
        logger.error("KL bound violated: minimum slack %.3e", worst)
        return 1
    logger.info("KL bound holds for r = 1..%d (minimum slack %.3e)", model.dim, worst)
    return 0


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="pwgd", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config file or preset name")
        p.add_argument("--output", help="output directory (overrides runtime.output_dir)")
        p.add_argument("--workers", type=int, help="worker threads (overrides runtime.workers)")
        p.add_argument("--trials", type=int, help="number of trials (overrides runtime.trials)")
        p.add_argument("--seed", type=int, help="base sampler seed (overrides sampler.seed)")
        return p

    common(sub.add_parser("run", help="run the configured sampler"))
    p = common(sub.add_parser("compare", help="run several methods with shared seeds"))
    p.add_argument("--methods", type=_str_list, required=True, help="comma-separated methods")
    p = common(sub.add_parser("scaling", help="time pWGD phases over a grid"))
    p.add_argument("--dims", type=_int_list, default=[17, 65, 257])
    p.add_argument("--sizes", type=_int_list, default=[256])
    p.add_argument("--worker-counts", type=_int_list, default=[1, 2, 4])
    common(sub.add_parser("klbound", help="tabulate the KL projection bound"))
    sub.add_parser("presets", help="list bundled presets")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "presets":
        print("\n".join(preset_names()))
        return 0
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "compare":
            return cmd_compare(cfg, args.methods)
        if args.command == "scaling":
            return cmd_scaling(cfg, args.dims, args.sizes, args.worker_counts)
        return cmd_klbound(cfg)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
