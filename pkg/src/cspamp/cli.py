"""Command-line driver: predicate -> Parisi table -> instance -> run -> diagnostics -> sweep.

Every JSON output carries the resolved configuration and a hash of the
package sources.  Configuration comes from flags, optionally layered over a
flat ``key = value`` file given with ``--config``.
"""

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import analysis, engine, instance, parisi, predicate

EXIT_BAD_CONFIG = 2
EXIT_PREDICATE = 3
EXIT_PARISI = 4
EXIT_NAN = 5

CSV_COLUMNS = ["predicate", "n", "d", "delta", "fraction", "alg_estimate", "E_f"]


class ConfigError(ValueError):
    pass


class ParisiNotConverged(RuntimeError):
    pass


def version_hash():
    """sha256 over the package's source files, in name order."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


# -- configuration --------------------------------------------------------------

@dataclasses.dataclass
class ExperimentConfig:
    predicate: str = "maxcut2"
    n: int = 1 << 15
    d: int = 256
    delta: float = 0.05
    pieces: int = 3
    eta: float = 0.05
    paths: int = 100_000
    instance_seed: int = 0
    engine_seed: int = 0
    rounding_seed: int = 0
    sde_seed: int = 0
    clamp: float = None
    history_pairs: int = 1 << 17
    out: str = "out"
    cache: str = None
    threads: int = 1
    strict_parisi: bool = True

    def resolved(self):
        """Validate and fill in environment-dependent fields."""
        cfg = dataclasses.replace(self)
        if cfg.cache is None:
            cfg.cache = os.environ.get("CSPAMP_CACHE_DIR") or os.path.join(
                os.path.expanduser("~"), ".cache", "cspamp")
        env_threads = os.environ.get("CSPAMP_THREADS")
        if env_threads:
            cfg.threads = _coerce("threads", int, env_threads)
        try:
            p = predicate.load(cfg.predicate)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load predicate {cfg.predicate!r}: {exc}") from None
        if cfg.n < 1:
            raise ConfigError("n must be positive")
        if cfg.d < 2 or cfg.d % p.r:
            raise ConfigError(f"d must be at least 2 and divisible by r = {p.r}")
        if not 0 < cfg.delta <= 0.5:
            raise ConfigError("delta must lie in (0, 0.5]")
        if cfg.pieces < 0:
            raise ConfigError("pieces must be non-negative")
        if not 0 < cfg.eta < 1:
            raise ConfigError("eta must lie in (0, 1)")
        if cfg.paths < 100:
            raise ConfigError("paths must be at least 100")
        if cfg.threads < 1:
            raise ConfigError("threads must be positive")
        if cfg.clamp is not None and not cfg.clamp > 0:
            raise ConfigError("clamp must be positive")
        return cfg, p

    def to_dict(self):
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _field_type(name):
    default = _FIELDS[name].default
    if name == "clamp":
        return float
    if name == "cache":
        return str
    return type(default)


def _coerce(key, typ, raw):
    try:
        if typ is bool:
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(float(raw)) if "e" in str(raw).lower() else int(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key = value")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, _field_type(key), value.strip())
    return out


def build_config(args):
    values = {}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        values.update(parse_config_text(text))
    for key in _FIELDS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return ExperimentConfig(**values)


def apply_threads(threads):
    try:
        import numba
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
    except (ImportError, ValueError):
        pass


# -- pipeline pieces ------------------------------------------------------------

def _dump(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
    os.replace(tmp, path)


def _envelope(cfg, **body):
    return {"version": version_hash(), "config": cfg.to_dict(), **body}


def _run_doc(res):
    """Engine output with its own settings filed under "engine"."""
    doc = res.to_json_dict()
    doc["engine"] = doc.pop("config")
    return doc


def prepare_parisi(p, cfg):
    """Parisi table plus SDE statistics for (xi, k, delta), cached on disk.

    Returns ``(solution, consts, alg_estimate, stats_summary)``.
    """
    xi = predicate.mixture(p)
    grid_cfg = parisi.GridConfig.for_delta(cfg.delta, eta=cfg.eta)
    sol = parisi.cached_solution(xi, cfg.pieces, grid_cfg, cfg.cache)
    if cfg.strict_parisi and not sol.converged:
        raise ParisiNotConverged("Parisi minimization did not converge")
    key = parisi.cache_key(xi, cfg.pieces, grid_cfg)
    stats_path = Path(cfg.cache) / f"sde-{key}-{cfg.delta!r}-{cfg.paths}-{cfg.sde_seed}.json"
    if stats_path.exists():
        summary = json.loads(stats_path.read_text())
    else:
        stats = parisi.simulate_sde(sol, cfg.delta, cfg.paths, cfg.sde_seed, keep_final=False)
        summary = {
            "mean_phixx": stats.mean_phixx.tolist(),
            "mean_phixx_sq": stats.mean_phixx_sq.tolist(),
            "consts": parisi.nonlinearity_constants(sol, stats, cfg.delta, p.r).tolist(),
            "alg_estimate": parisi.alg_energy_estimate(sol, stats),
            "normalization_drift": parisi.normalization_drift(xi, stats).tolist(),
        }
        _dump(summary, stats_path)
    summary = dict(summary, functional_value=sol.functional_value, mu=sol.mu.to_dict(),
                   converged=sol.converged)
    return sol, np.asarray(summary["consts"]), summary["alg_estimate"], summary


def make_instance(p, cfg):
    return instance.sample_index_regular(cfg.n, cfg.d, p.r, cfg.instance_seed)


def run_engine(inst, p, sol, consts, cfg, record_history=False):
    rc = engine.RunConfig(delta=cfg.delta, seed=cfg.engine_seed, clamp=cfg.clamp,
                          record_history=record_history, history_pairs=cfg.history_pairs,
                          rounding_seed=cfg.rounding_seed)
    return engine.run(inst, p, sol, consts, rc)


def save_history(hist, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **{f.name: getattr(hist, f.name) for f in dataclasses.fields(hist)})


def load_history(path):
    with np.load(path) as data:
        return engine.History(**{f.name: data[f.name] for f in dataclasses.fields(engine.History)})


def diagnose(result_doc, hist, p=None, inst=None):
    """Moment, proximity and value-decomposition checks as a JSON-ready report."""
    cfg = result_doc["config"]
    delta = cfg["delta"]
    p = p or predicate.load(cfg["predicate"])
    xi = predicate.mixture(p)
    L = hist.u_edge.shape[0]
    checks = []
    for ell in range(1, L + 1):
        rep = analysis.moment_report(hist.u_edge[ell - 1], ell, xi, delta, p.r)
        for m in rep.to_dict()["moments"]:
            if m["k"] > 4:
                continue
            tol = "3 stderr" if m["k"] % 2 else ("5%" if m["k"] == 2 else "10%")
            checks.append({"statistic": f"E[u^{m['k']}] at step {ell}",
                           "empirical": m["empirical"], "prediction": m["predicted"],
                           "tolerance": tol, "pass": m["pass"]})
    z_sq = np.mean(hist.z_edge**2, axis=1)
    for ell in range(L + 1):
        pred = (ell + 1) * delta
        checks.append({"statistic": f"E[z^2] at step {ell}", "empirical": float(z_sq[ell]),
                       "prediction": pred, "tolerance": "5%",
                       "pass": bool(abs(z_sq[ell] - pred) <= 0.05 * pred)})
    if inst is not None:
        res = engine.RunResult(z_final=np.asarray(result_doc["z_final"]), truncated=None,
                               assignment=None, satisfying_fraction=None, diagnostics={},
                               config=None, clamp=None, timing={}, history=hist)
        vd = engine.value_decomposition(res, inst, p, cfg["d"], delta)
        checks.append({"statistic": "value decomposition gap", "empirical": vd.gap,
                       "prediction": 0.0, "tolerance": "0.01",
                       "pass": bool(vd.gap <= 0.01), "lhs": vd.lhs, "rhs": vd.rhs})
    return {"checks": checks, "passed": all(c["pass"] for c in checks)}


def pipeline(cfg, p, out_dir, write=True):
    """One full run.  Returns the CSV row as a dict."""
    engine.check_predicate(p)
    sol, consts, alg, summary = prepare_parisi(p, cfg)
    inst = make_instance(p, cfg)
    res = run_engine(inst, p, sol, consts, cfg, record_history=True)
    row = {"predicate": p.name or cfg.predicate, "n": cfg.n, "d": cfg.d, "delta": cfg.delta,
           "fraction": res.satisfying_fraction, "alg_estimate": alg, "E_f": p.mean}
    if write:
        out_dir = Path(out_dir)
        doc = _envelope(cfg, **_run_doc(res), parisi=summary, summary=row)
        _dump(doc, out_dir / "result.json")
        doc_z = dict(doc, z_final=res.z_final.tolist())
        report = diagnose(doc_z, res.history, p, inst)
        _dump(_envelope(cfg, **report), out_dir / "diagnostics.json")
        with open(out_dir / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, CSV_COLUMNS)
            w.writeheader()
            w.writerow(row)
    return row


# -- commands -------------------------------------------------------------------

def cmd_predicate(args):
    try:
        p = predicate.load(args.predicate)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    flags = predicate.predicate_flags(p)
    doc = {"version": version_hash(), "name": p.name, "r": p.r, "mean": p.mean,
           "fourier": {",".join(map(str, k)): v for k, v in p.fourier_dict(1e-14).items()},
           "mixture_weights": predicate.mixture(p).weights.tolist(),
           "flags": flags._asdict()}
    text = json.dumps(doc, sort_keys=True, indent=1)
    if args.out:
        _dump(doc, args.out)
    else:
        print(text)
    if flags.has_linear or predicate.mixture(p).is_degenerate():
        return EXIT_PREDICATE
    return 0


def cmd_gen(args):
    if args.n < 1 or args.r < 2 or args.d < 1 or args.d % args.r:
        raise ConfigError("need n >= 1, r >= 2 and r dividing d")
    inst = instance.sample_index_regular(args.n, args.d, args.r, args.seed)
    if args.dry_run:
        print(f"would write n={args.n} m={inst.m} r={args.r} d={args.d} to {args.out}")
        return 0
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    inst.save(args.out)
    return 0


def cmd_parisi(args):
    cfg, p = build_config(args).resolved()
    engine.check_predicate(p)
    if args.dry_run:
        print(json.dumps(_envelope(cfg), sort_keys=True, indent=1))
        return 0
    _, _, alg, summary = prepare_parisi(p, cfg)
    doc = _envelope(cfg, alg_estimate=alg, **{k: v for k, v in summary.items() if k != "consts"})
    if args.out:
        _dump(doc, args.out)
    else:
        print(json.dumps({"alg_estimate": alg, "functional_value": summary["functional_value"],
                          "mu": summary["mu"]}, sort_keys=True))
    return 0


def cmd_run(args):
    cfg, p = build_config(args).resolved()
    engine.check_predicate(p)
    try:
        inst = instance.CspInstance.load(args.instance)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read instance: {exc}") from None
    if inst.r != p.r:
        raise ConfigError("instance arity does not match the predicate")
    cfg.n, cfg.d = inst.n, inst.d or int(inst.m * inst.r // max(inst.n, 1))
    if args.dry_run:
        print(json.dumps(_envelope(cfg, instance=args.instance), sort_keys=True, indent=1))
        return 0
    sol, consts, alg, summary = prepare_parisi(p, cfg)
    res = run_engine(inst, p, sol, consts, cfg, record_history=bool(args.histories))
    doc = _envelope(cfg, instance=str(args.instance), **_run_doc(res), alg_estimate=alg,
                    z_final=res.z_final.tolist())
    _dump(doc, args.out)
    if args.histories:
        save_history(res.history, args.histories)
    return 0


def cmd_diag(args):
    try:
        doc = json.loads(Path(args.result).read_text())
        hist = load_history(args.histories)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read inputs: {exc}") from None
    if "z_final" not in doc:
        raise ConfigError("result file lacks z_final")
    p = predicate.load(doc["config"]["predicate"])
    inst = None
    if doc.get("instance") and Path(doc["instance"]).exists():
        inst = instance.CspInstance.load(doc["instance"])
    report = diagnose(doc, hist, p, inst)
    _dump({"version": version_hash(), "config": doc["config"], **report}, args.out)
    return 0


def cmd_pipeline(args):
    cfg, p = build_config(args).resolved()
    engine.check_predicate(p)
    if args.dry_run:
        print(json.dumps(_envelope(cfg), sort_keys=True, indent=1))
        return 0
    row = pipeline(cfg, p, cfg.out)
    buf = io.StringIO()
    csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n").writerow(row)
    print(buf.getvalue(), end="")
    return 0


def _axis_values(axis, raw):
    items = [v.strip() for v in raw.split(",") if v.strip()] if raw else []
    if not items:
        raise ConfigError("sweep needs at least one value")
    typ = float if axis == "delta" else int
    return [_coerce(axis, typ, v) for v in items]


def row_seed(base, axis, value):
    """Per-row seed derived from the base seed and the axis value."""
    h = hashlib.sha256(f"{base}:{axis}:{value!r}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def cmd_sweep(args):
    base = build_config(args)
    values = _axis_values(args.axis, args.values)
    plans = []
    for v in values:
        cfg = dataclasses.replace(base, **{args.axis: v})
        cfg.instance_seed = row_seed(base.instance_seed, args.axis, v)
        cfg.engine_seed = row_seed(base.engine_seed, args.axis, v)
        cfg.rounding_seed = row_seed(base.rounding_seed, args.axis, v)
        cfg.out = os.path.join(base.out, f"{args.axis}={v}")
        plans.append(cfg.resolved())
    if args.dry_run:
        print(json.dumps([_envelope(c) for c, _ in plans], sort_keys=True, indent=1))
        return 0
    rows = []
    failed = False
    for cfg, p in plans:
        try:
            row = pipeline(cfg, p, cfg.out)
            row["error"] = ""
        except Exception as exc:  # a failed row is recorded, the sweep goes on
            failed = True
            row = {"predicate": cfg.predicate, "n": cfg.n, "d": cfg.d, "delta": cfg.delta,
                   "fraction": "", "alg_estimate": "", "E_f": "", "error": repr(exc)}
        rows.append(row)
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_COLUMNS + ["error"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    Path(base.out).mkdir(parents=True, exist_ok=True)
    (Path(base.out) / f"sweep-{args.axis}.csv").write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    return 1 if failed else 0


# -- argument parsing -------------------------------------------------------------

def _experiment_flags(sp):
    sp.add_argument("--config", help="flat key = value file; flags override it")
    sp.add_argument("--predicate", help="named predicate or truth-table file")
    sp.add_argument("--n", type=int)
    sp.add_argument("--d", type=int)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--pieces", type=int, help="number of steps in the Parisi measure")
    sp.add_argument("--eta", type=float)
    sp.add_argument("--paths", type=int, help="SDE paths for the nonlinearity constants")
    sp.add_argument("--instance-seed", dest="instance_seed", type=int)
    sp.add_argument("--seed", dest="engine_seed", type=int, help="engine seed")
    sp.add_argument("--rounding-seed", dest="rounding_seed", type=int)
    sp.add_argument("--sde-seed", dest="sde_seed", type=int)
    sp.add_argument("--clamp", type=float)
    sp.add_argument("--cache", "--parisi-cache", dest="cache")
    sp.add_argument("--threads", type=int)
    sp.add_argument("--dry-run", action="store_true", help="validate and print the plan only")


def build_parser():
    ap = argparse.ArgumentParser(prog="cspamp", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("predicate", help="Fourier expansion, mixture and flags of a predicate")
    sp.add_argument("--predicate", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_predicate)

    sp = sub.add_parser("gen", help="sample an index-regular instance")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--d", type=int, required=True)
    sp.add_argument("--r", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dry-run", action="store_true")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("parisi", help="minimize the Parisi functional and cache the table")
    _experiment_flags(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_parisi)

    sp = sub.add_parser("run", help="run message passing on an instance file")
    _experiment_flags(sp)
    sp.add_argument("--instance", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--histories", help="also write per-step histories (npz)")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("diag", help="state-evolution diagnostics for a recorded run")
    sp.add_argument("--result", required=True)
    sp.add_argument("--histories", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_diag)

    sp = sub.add_parser("pipeline", help="predicate to rounded assignment in one go")
    _experiment_flags(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("sweep", help="pipeline runs over one axis")
    _experiment_flags(sp)
    sp.add_argument("--out")
    sp.add_argument("--axis", choices=("d", "delta", "n"), required=True)
    sp.add_argument("--values", default="", help="comma-separated axis values")
    sp.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        threads = os.environ.get("CSPAMP_THREADS") or getattr(args, "threads", None)
        if threads:
            apply_threads(int(threads))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", parisi.ParisiConvergenceWarning)
            return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except engine.PredicateRejected as exc:
        print(f"predicate rejected: {exc}", file=sys.stderr)
        return EXIT_PREDICATE
    except ParisiNotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARISI
    except engine.EngineNaNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (parisi.GridError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
