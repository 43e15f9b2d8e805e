"""Parallel protocol sweep with checkpointing, summaries and scenario reruns."""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import ReentryEvent, analyze_result, cluster_exit_sites
from .engine import EngineParams, check_log_invariants, prepare, simulate
from .errors import VTRiskError
from .protocol import ProtocolSpec, build_schedule, enumerate_configs
from .restitution import apply_beta_blocker

log = logging.getLogger(__name__)

FSYNC_EVERY = 50
CHUNK = 25


def _dumps(rec):
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def simulate_config(twin, rset, spec, config, params=EngineParams(), check_invariants=True):
    """One sweep record. Failures become non-effective records with an error."""
    rec = config.to_json()
    try:
        sched = build_schedule(config, spec)
        r = rset.with_protocol_factors(config.cv_factor, config.apd_factor)
        res = simulate(twin, r, sched, params)
        ev = analyze_result(res, twin, r) if res.effective else None
        rec.update(
            effective=bool(res.effective),
            captured=[bool(c) for c in res.captured],
            n_activations=res.n_activations,
            reentry=ev.to_json() if ev else None,
            error=None,
        )
        if check_invariants:
            problems = check_log_invariants(res, twin)
            rec["invariants_ok"] = not problems
            if problems:
                rec["invariant_problems"] = problems
    except (VTRiskError, KeyError) as exc:
        rec.update(effective=False, captured=[], n_activations=0, reentry=None,
                   error=f"{type(exc).__name__}: {exc}")
        if check_invariants:
            rec["invariants_ok"] = True
    return rec


@dataclass
class SweepRun:
    scenario: str
    spec: ProtocolSpec
    workers: int
    records: list
    restitution_digest: str = ""
    wall_seconds: float = 0.0

    def __post_init__(self):
        idx = [r["config_index"] for r in self.records]
        if idx != list(range(len(idx))):
            raise VTRiskError("sweep records must cover config indices 0..n-1 in order")

    def jsonl(self):
        return "".join(_dumps(r) + "\n" for r in self.records)


def read_checkpoint(path):
    """Records from a (possibly truncated) JSONL checkpoint, keyed by config index."""
    done = {}
    p = Path(path)
    if not p.exists():
        return done
    with open(p) as fh:
        for line in fh:
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                break  # torn final line from an interrupted run
            done[int(rec["config_index"])] = rec
    return done


def run_sweep(twin, rset, spec=ProtocolSpec(), workers=1, out_path=None, resume=False,
              params=EngineParams(), check_invariants=True, progress=None):
    """Simulate and analyze every configuration of ``spec``.

    Configurations are cut into fixed chunks in index order and handed to a
    thread pool (the engine kernel releases the GIL).  Completed records are
    appended to ``out_path`` as they arrive; with ``resume`` the records
    already present there are reused.  The final file is rewritten in index
    order so its bytes do not depend on ``workers``.
    """
    configs = enumerate_configs(spec)
    done = read_checkpoint(out_path) if (resume and out_path) else {}
    todo = [c for c in configs if c.config_index not in done]
    prepare(twin, params)
    t0 = time.perf_counter()
    lock = threading.Lock()
    fh = None
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(out_path, "a" if resume else "w")
    pending = [0]

    def work(chunk):
        recs = [simulate_config(twin, rset, spec, c, params, check_invariants) for c in chunk]
        with lock:
            for rec in recs:
                done[rec["config_index"]] = rec
                if fh is not None:
                    fh.write(_dumps(rec) + "\n")
                    pending[0] += 1
            if fh is not None and pending[0] >= FSYNC_EVERY:
                fh.flush()
                os.fsync(fh.fileno())
                pending[0] = 0
            if progress is not None:
                progress(len(done), len(configs))
        return len(recs)

    chunks = [todo[i:i + CHUNK] for i in range(0, len(todo), CHUNK)]
    try:
        if workers <= 1:
            for ch in chunks:
                work(ch)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(work, chunks))
    finally:
        if fh is not None:
            fh.flush()
            os.fsync(fh.fileno())
            fh.close()
    records = [done[c.config_index] for c in configs]
    run = SweepRun(rset.scenario, spec, workers, records, rset.digest(), time.perf_counter() - t0)
    if out_path is not None:
        tmp = Path(str(out_path) + ".tmp")
        tmp.write_text(run.jsonl())
        os.replace(tmp, out_path)
    log.info("sweep %s: %d configs (%d reused) in %.1f s", rset.scenario, len(records),
             len(configs) - len(todo), run.wall_seconds)
    return run


def load_sweep(path, spec=ProtocolSpec(), scenario="BASELINE"):
    done = read_checkpoint(path)
    return SweepRun(scenario, spec, 0, [done[i] for i in sorted(done)])


@dataclass
class PatientSummary:
    scenario: str
    total_configs: int
    effective: int
    positives: int
    positives_baseline: int
    reentries: list = field(default_factory=list)   # (config_index, ReentryEvent)
    zones: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def __post_init__(self):
        if not self.positives_baseline <= self.positives <= self.effective <= self.total_configs:
            raise VTRiskError("summary counts out of order")

    def to_json(self):
        """Deterministic payload (wall-clock time lives in the run manifest)."""
        return {
            "scenario": self.scenario,
            "total_configs": self.total_configs,
            "effective": self.effective,
            "positives": self.positives,
            "positives_baseline": self.positives_baseline,
            "reentries": [dict(config_index=i, **ev.to_json()) for i, ev in self.reentries],
            "zones": [z.to_json() for z in self.zones],
        }


def summarize(run, twin=None, radius_mm=10.0):
    """Counts, baseline counts, reentry list and exit-site risk zones."""
    eff = [r for r in run.records if r["effective"]]
    pos = [r for r in eff if r.get("reentry") and r["reentry"]["sustained"]]
    base = [r for r in pos if r["cv_factor"] == 1.0 and r["apd_factor"] == 1.0]
    reentries = [(r["config_index"], ReentryEvent.from_json(r["reentry"])) for r in pos]
    zones = []
    with_exit = [(i, ev) for i, ev in reentries if ev.exit_node is not None]
    if twin is not None and with_exit:
        nodes = np.array([ev.exit_node for _, ev in with_exit], dtype=np.int64)
        zones = cluster_exit_sites(
            twin.grid.centers_mm(nodes), radius_mm,
            segments=[ev.exit_aha_segment for _, ev in with_exit],
            config_indices=[i for i, _ in with_exit],
        )
    return PatientSummary(run.scenario, len(run.records), len(eff), len(pos), len(base),
                          reentries, zones, run.wall_seconds)


def run_beta_blocker_followup(twin, rset, spec=ProtocolSpec(), workers=1, out_path=None,
                              resume=False, params=EngineParams(), radius_mm=10.0):
    """Repeat the sweep with beta-blocker scaling applied to ``rset``."""
    bb = apply_beta_blocker(rset)
    run = run_sweep(twin, bb, spec, workers, out_path, resume, params)
    return summarize(run, twin, radius_mm)
