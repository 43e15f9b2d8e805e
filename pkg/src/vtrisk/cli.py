"""Command-line entry point: ``vtrisk <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .anatomy import extract_sccs, preprocess
from .engine import EngineParams
from .errors import ConfigError, ConfigParseError, InputDataError, StageError, VTRiskError
from .protocol import load_protocol
from .restitution import apply_beta_blocker, load_restitution, restitution_from_dict
from .risk import (DEFAULT_THETA, cohort_table, load_cohort, patient_report_markdown, score,
                   write_cohort_outputs)
from .sweep import load_sweep, run_sweep, summarize
from .voxel_model import (PhantomSpec, generate_phantom, load_twin, packaged_phantom,
                          packaged_phantom_names, save_twin)

log = logging.getLogger("vtrisk")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_STAGE = 0, 2, 3, 4


class Stage:
    """Context that tags any non-config, non-input failure with a stage name."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, kind, exc, tb):
        if exc is None or isinstance(exc, (ConfigError, InputDataError)):
            return False
        if isinstance(exc, StageError):
            exc.stage = getattr(exc, "stage", self.name)
            return False
        if isinstance(exc, (VTRiskError, ArithmeticError, ValueError, OSError)):
            err = StageError(f"{type(exc).__name__}: {exc}")
            err.stage = self.name
            raise err from exc
        return False


# ------------------------------------------------------------------ file helpers


def read_json(path, what="config"):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {what} file {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def twin_digest(twin):
    h = hashlib.sha256()
    g = twin.grid
    h.update(json.dumps([list(g.dims), list(g.spacing_mm), list(g.origin_mm)]).encode())
    for arr in (g.labels, twin.layers, twin.fibers, twin.aha_segment):
        if arr is not None:
            h.update(np.ascontiguousarray(arr).tobytes())
    h.update(json.dumps([s.to_json() for s in twin.pacing_sites], sort_keys=True).encode())
    return h.hexdigest()


def canonical_hash(obj):
    return sha256_bytes(json.dumps(obj, sort_keys=True, default=str).encode())


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_manifest(out_dir, inputs, scenario, started, extra=None):
    """One manifest.json per output directory, hashing inputs and outputs."""
    out = Path(out_dir)
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp"):
            files[str(p.relative_to(out))] = sha256_file(p)
    manifest = {
        "tool": "vtrisk",
        "version": __version__,
        "scenario": scenario,
        "config_hash": canonical_hash(inputs),
        "inputs": inputs,
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "outputs": files,
    }
    if extra:
        manifest.update(extra)
    write_json(out / "manifest.json", manifest)
    return manifest


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


# ------------------------------------------------------------------ run config


@dataclasses.dataclass
class RunConfig:
    restitution: object
    engine: EngineParams
    radius_mm: float = 10.0
    theta: float = DEFAULT_THETA

    def to_json(self):
        return {
            "restitution": self.restitution.to_json(),
            "engine": dataclasses.asdict(self.engine),
            "cluster_radius_mm": self.radius_mm,
            "theta": self.theta,
        }


def load_run_config(path, scenario="baseline", theta=None):
    """``--config`` JSON: optional keys restitution (path or table), engine,
    cluster_radius_mm, theta."""
    d = read_json(path) if path else {}
    if not isinstance(d, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(d) - {"restitution", "engine", "cluster_radius_mm", "theta"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    rs = d.get("restitution")
    if rs is None:
        rset = load_restitution()
    elif isinstance(rs, str):
        base = Path(path).parent if path else Path(".")
        rpath = Path(rs) if Path(rs).is_absolute() else base / rs
        rset = restitution_from_dict(read_json(rpath, "restitution"))
    else:
        rset = restitution_from_dict(rs)
    if scenario == "beta-blocker":
        rset = apply_beta_blocker(rset)
    elif scenario != "baseline":
        raise ConfigError(f"unknown scenario {scenario!r}")
    try:
        engine = EngineParams(**d.get("engine", {}))
    except TypeError as exc:
        raise ConfigError(f"engine parameters: {exc}") from exc
    th = float(theta if theta is not None else d.get("theta", DEFAULT_THETA))
    return RunConfig(rset, engine, float(d.get("cluster_radius_mm", 10.0)), th)


def _protocol(path):
    if path is None:
        return load_protocol()
    d = read_json(path, "protocol")
    from .protocol import ProtocolSpec
    return ProtocolSpec.from_dict(d)


# ------------------------------------------------------------------ commands


def cmd_phantom(spec_file, out_dir):
    started = _now()
    with Stage("phantom"):
        if not Path(spec_file).exists() and spec_file in packaged_phantom_names():
            d = packaged_phantom(spec_file).to_dict()
        else:
            d = read_json(spec_file, "phantom spec")
        try:
            spec = PhantomSpec.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"phantom spec: {exc}") from exc
        twin = generate_phantom(spec)
        save_twin(twin, out_dir)
    write_manifest(out_dir, {"phantom_spec": spec.to_dict()}, None, started,
                   {"twin_hash": twin_digest(twin)})
    return twin


def cmd_preprocess(twin_dir, out_dir, force=False):
    started = _now()
    with Stage("preprocess"):
        twin = load_twin(twin_dir)
        twin = preprocess(twin, force=force)
        save_twin(twin, out_dir)
        sccs = extract_sccs(twin)
        write_json(Path(out_dir) / "sccs.json", [s.to_json() for s in sccs])
    write_manifest(out_dir, {"twin": twin_digest(twin)}, None, started, {"twin_hash": twin_digest(twin)})
    return twin


def _ensure_preprocessed(twin):
    if twin.layers is None or twin.fibers is None or twin.aha_segment is None or len(twin.pacing_sites) != 34:
        with Stage("preprocess"):
            twin = preprocess(twin)
    return twin


def _sweep(twin, cfg, spec, threads, out_dir, resume):
    with Stage("sweep"):
        Path(out_dir).mkdir(parents=True, exist_ok=True)

        def progress(done, total):
            if done % 250 == 0 or done == total:
                log.info("sweep progress %d/%d", done, total)

        return run_sweep(twin, cfg.restitution, spec, threads, Path(out_dir) / "sweep.jsonl",
                         resume, cfg.engine, progress=progress)


def _inputs(twin, cfg, spec, scenario):
    return {
        "twin": twin_digest(twin),
        "run_config": cfg.to_json(),
        "protocol": spec.to_json(),
        "scenario": scenario,
        "restitution_hash": cfg.restitution.digest(),
    }


def cmd_sweep(twin_dir, out_dir, config=None, protocol=None, scenario="baseline", threads=1, resume=False):
    started = _now()
    cfg = load_run_config(config, scenario)
    spec = _protocol(protocol)
    with Stage("load"):
        twin = _ensure_preprocessed(load_twin(twin_dir))
    run = _sweep(twin, cfg, spec, threads, out_dir, resume)
    write_manifest(out_dir, _inputs(twin, cfg, spec, scenario), cfg.restitution.scenario, started,
                   {"wall_seconds": round(run.wall_seconds, 3), "threads": threads})
    return run


def _analyze(twin, run, cfg, out_dir):
    with Stage("analyze"):
        summary = summarize(run, twin, cfg.radius_mm)
        out = Path(out_dir)
        write_json(out / "summary.json", summary.to_json())
        write_json(out / "zones.json", [z.to_json() for z in summary.zones])
        with open(out / "configs.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["config_index", "site", "s2_bcl_ms", "n_s2", "cv_factor", "apd_factor",
                        "effective", "reentry", "cycle_length_ms", "exit_node", "exit_aha_segment"])
            for r in run.records:
                ev = r.get("reentry") or {}
                w.writerow([r["config_index"], r["site"], r["s2_bcl_ms"], r["n_s2"], r["cv_factor"],
                            r["apd_factor"], int(r["effective"]), int(bool(ev.get("sustained"))),
                            ev.get("cycle_length_ms", ""), ev.get("exit_node", ""),
                            ev.get("exit_aha_segment", "")])
    return summary


def cmd_analyze(twin_dir, sweep_file, out_dir, config=None, protocol=None, scenario="baseline"):
    started = _now()
    cfg = load_run_config(config, scenario)
    spec = _protocol(protocol)
    with Stage("load"):
        twin = _ensure_preprocessed(load_twin(twin_dir))
        run = load_sweep(sweep_file, spec, cfg.restitution.scenario)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    summary = _analyze(twin, run, cfg, out_dir)
    write_manifest(out_dir, dict(_inputs(twin, cfg, spec, scenario), sweep=sha256_file(sweep_file)),
                   cfg.restitution.scenario, started)
    return summary


def _risk(summary_json, cfg, out_dir, patient_id, sccs=()):
    with Stage("risk"):
        result = None
        if summary_json["effective"] > 0:
            result = score(summary_json["positives"], summary_json["effective"], cfg.theta)
        payload = {
            "patient_id": patient_id,
            "scenario": summary_json["scenario"],
            "effective": summary_json["effective"],
            "positives": summary_json["positives"],
            "positives_baseline": summary_json["positives_baseline"],
            "ar_index": result.ar_index if result else None,
            "arrisk": result.arrisk.value if result else None,
            "theta": cfg.theta,
            "n_zones": len(summary_json["zones"]),
        }
        write_json(Path(out_dir) / "risk_report.json", payload)
        md = patient_report_markdown(patient_id, summary_json, result, summary_json["zones"], sccs)
        (Path(out_dir) / "report.md").write_text(md)
    return payload


def cmd_risk(summary_file, out_dir, theta=None, config=None, patient_id=None):
    started = _now()
    cfg = load_run_config(config, "baseline", theta)
    summary_json = read_json(summary_file, "summary")
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    pid = patient_id or Path(summary_file).resolve().parent.name
    payload = _risk(summary_json, cfg, out_dir, pid)
    write_manifest(out_dir, {"summary": sha256_file(summary_file), "theta": cfg.theta},
                   summary_json.get("scenario"), started)
    return payload


def cmd_pipeline(twin_dir, out_dir, config=None, protocol=None, scenario="baseline", threads=1,
                 resume=False, theta=None):
    """Preprocess (when needed), sweep, analyze and score one twin."""
    started = _now()
    cfg = load_run_config(config, scenario, theta)
    spec = _protocol(protocol)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with Stage("load"):
        twin = _ensure_preprocessed(load_twin(twin_dir))
    with Stage("preprocess"):
        sccs = [s.to_json() for s in extract_sccs(twin)]
        for s in sccs:
            s["n_voxels"] = len(s["centerline"])
        write_json(out / "sccs.json", sccs)
    run = _sweep(twin, cfg, spec, threads, out, resume)
    summary = _analyze(twin, run, cfg, out)
    payload = _risk(summary.to_json(), cfg, out, Path(twin_dir).resolve().name, sccs)
    write_manifest(out, _inputs(twin, cfg, spec, scenario), cfg.restitution.scenario, started,
                   {"wall_seconds": round(run.wall_seconds, 3), "threads": threads})
    return payload


def cmd_cohort(cohort_csv, out_dir, theta=DEFAULT_THETA, followup=True):
    started = _now()
    with Stage("cohort"):
        records = load_cohort(cohort_csv)
        rows, report = cohort_table(records, theta, followup)
        payload = write_cohort_outputs(rows, report, out_dir, theta)
    inputs = {"cohort": sha256_file(cohort_csv) if cohort_csv else "packaged", "theta": theta,
              "followup": followup}
    write_manifest(out_dir, inputs, None, started)
    return payload


# ------------------------------------------------------------------ argparse


def build_parser():
    p = argparse.ArgumentParser(prog="vtrisk", description="Voxel-model arrhythmic risk pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"vtrisk {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True, threads=True):
        sp.add_argument("--config", help="run config JSON (restitution, engine, cluster radius, theta)")
        sp.add_argument("--protocol", help="protocol JSON overriding the default sweep axes")
        if scenario:
            sp.add_argument("--scenario", choices=["baseline", "beta-blocker"], default="baseline")
        if threads:
            sp.add_argument("--threads", type=int, default=1)
            sp.add_argument("--resume", action="store_true", help="reuse records in an existing sweep.jsonl")
        sp.add_argument("--seed", type=int, default=None, help="reserved; the pipeline is deterministic")
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("phantom", help="generate a synthetic twin from a phantom spec JSON")
    sp.add_argument("spec", help="phantom spec JSON, or a packaged name (channel, control, marginal)")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("preprocess", help="layers, fibers, AHA partition and SCC inventory")
    sp.add_argument("twin")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("sweep", help="run the pacing protocol sweep")
    sp.add_argument("twin")
    common(sp)

    sp = sub.add_parser("analyze", help="summarize a sweep: counts and risk zones")
    sp.add_argument("twin")
    sp.add_argument("--sweep", required=True, help="sweep.jsonl")
    common(sp, threads=False)

    sp = sub.add_parser("risk", help="AR-index and ARRISK from a summary.json")
    sp.add_argument("summary")
    sp.add_argument("--config")
    sp.add_argument("--theta", type=float, default=None)
    sp.add_argument("--patient-id")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("pipeline", help="preprocess, sweep, analyze and score one twin")
    sp.add_argument("twin")
    common(sp)
    sp.add_argument("--theta", type=float, default=None)

    sp = sub.add_parser("cohort", help="replay ARRISK over a cohort CSV")
    sp.add_argument("csv", nargs="?", default=None, help="cohort CSV (default: packaged Table I fixture)")
    sp.add_argument("--theta", type=float, default=DEFAULT_THETA)
    sp.add_argument("--no-followup", action="store_true", help="use the original clinical labels")
    sp.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "phantom":
            cmd_phantom(args.spec, args.out)
        elif args.command == "preprocess":
            cmd_preprocess(args.twin, args.out, args.force)
        elif args.command == "sweep":
            cmd_sweep(args.twin, args.out, args.config, args.protocol, args.scenario, args.threads, args.resume)
        elif args.command == "analyze":
            cmd_analyze(args.twin, args.sweep, args.out, args.config, args.protocol, args.scenario)
        elif args.command == "risk":
            cmd_risk(args.summary, args.out, args.theta, args.config, args.patient_id)
        elif args.command == "pipeline":
            cmd_pipeline(args.twin, args.out, args.config, args.protocol, args.scenario, args.threads,
                         args.resume, args.theta)
        elif args.command == "cohort":
            cmd_cohort(args.csv, args.out, args.theta, not args.no_followup)
    except ConfigError as exc:
        print(f"vtrisk: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputDataError as exc:
        print(f"vtrisk: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StageError as exc:
        print(f"vtrisk: stage {getattr(exc, 'stage', '?')} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except VTRiskError as exc:
        print(f"vtrisk: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
