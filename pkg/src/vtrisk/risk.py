"""AR-index, ARRISK classes, threshold estimation and cohort concordance."""
from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde

from .errors import DegenerateSamples, InputDataError, NoEffectiveSimulations, NoIntersection, RowParseError

DEFAULT_THETA = 0.738


class RiskClass(str, enum.Enum):
    ZERO = "ZERO"
    LOW = "LOW"
    HIGH = "HIGH"

    @property
    def rank(self):
        return ("ZERO", "LOW", "HIGH").index(self.value)


def ar_index(positives, effective):
    """Positive simulations as a percentage of effective ones."""
    if effective <= 0:
        raise NoEffectiveSimulations("AR-index needs at least one effective simulation")
    if positives < 0 or positives > effective:
        raise InputDataError(f"positives {positives} outside 0..{effective}")
    return 100.0 * positives / effective


def classify(ar, theta=DEFAULT_THETA):
    if theta <= 0:
        raise InputDataError("theta must be > 0")
    if ar == 0:
        return RiskClass.ZERO
    return RiskClass.LOW if ar <= theta else RiskClass.HIGH


@dataclass(frozen=True)
class ARResult:
    ar_index: float
    arrisk: RiskClass
    theta: float

    def to_json(self):
        return {"ar_index": self.ar_index, "arrisk": self.arrisk.value, "theta": self.theta}


def score(positives, effective, theta=DEFAULT_THETA):
    ar = ar_index(positives, effective)
    return ARResult(ar, classify(ar, theta), theta)


@dataclass(frozen=True)
class CohortRecord:
    patient_id: str
    positives: int
    effective: int
    positives_baseline: int = 0
    clinical_risk: RiskClass | None = None
    followup_clinical_risk: RiskClass | None = None
    vt_flags: str = ""
    reported_arrisk: RiskClass | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.positives <= self.effective:
            raise InputDataError(f"{self.patient_id}: positives {self.positives} outside 0..{self.effective}")

    def score(self, theta=DEFAULT_THETA):
        return score(self.positives, self.effective, theta)


_META_COLUMNS = ("lv_mass_g", "bz_g", "cz_g", "scc_g", "lvef_pct", "age", "sex", "sim_time_h")
_REQUIRED = ("patient_id", "effective_sims", "n_vt")


def _risk_or_none(text):
    text = (text or "").strip().upper()
    return RiskClass(text) if text else None


def load_cohort(path=None):
    """Read a cohort CSV; the packaged Table I fixture when ``path`` is None."""
    if path is None:
        text = resources.files("vtrisk.data").joinpath("cohort_table1.csv").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InputDataError(f"cannot read cohort file: {exc}") from exc
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames is None:
        raise RowParseError("cohort CSV is empty (row 1)")
    missing = [c for c in _REQUIRED if c not in reader.fieldnames]
    if missing:
        raise RowParseError(f"row 1: missing columns {missing}")
    records = []
    for rownum, row in enumerate(reader, start=2):
        try:
            meta = {k: row[k] for k in _META_COLUMNS if k in row and row[k] != ""}
            records.append(CohortRecord(
                patient_id=row["patient_id"].strip(),
                positives=int(row["n_vt"]),
                effective=int(row["effective_sims"]),
                positives_baseline=int(row.get("n_vt_baseline") or 0),
                clinical_risk=_risk_or_none(row.get("clinical_risk")),
                followup_clinical_risk=_risk_or_none(row.get("followup_clinical_risk")),
                vt_flags=(row.get("vt_flags") or "").strip(),
                reported_arrisk=_risk_or_none(row.get("arrisk")),
                metadata=meta,
            ))
        except (ValueError, TypeError, InputDataError) as exc:
            raise RowParseError(f"row {rownum}: {exc}") from exc
    if not records:
        raise RowParseError("cohort CSV has no data rows (row 2)")
    return records


def _kde(samples, bandwidth):
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0:
        raise DegenerateSamples("need at least two distinct values per group for a density estimate")
    return gaussian_kde(x, bw_method=bandwidth)


def estimate_threshold(low_scores, high_scores, bandwidth="silverman", resolution=1e-4):
    """Crossing of the LOW and HIGH kernel densities between the group means.

    The densities are evaluated on a grid of step ``resolution`` spanning the
    two means; the first sign change of ``f_low - f_high`` (walking from the
    LOW mean) is refined by linear interpolation.
    """
    lo, hi = np.asarray(low_scores, float), np.asarray(high_scores, float)
    if lo.size == 0 or hi.size == 0:
        raise DegenerateSamples("both groups need samples")
    m_lo, m_hi = lo.mean(), hi.mean()
    if m_lo == m_hi:
        raise DegenerateSamples("groups have equal means")
    f_lo, f_hi = _kde(lo, bandwidth), _kde(hi, bandwidth)
    a, b = sorted((m_lo, m_hi))
    grid = np.linspace(a, b, int(np.ceil((b - a) / resolution)) + 1)
    d = f_lo(grid) - f_hi(grid)
    if m_lo > m_hi:
        grid, d = grid[::-1], d[::-1]
    sign = np.sign(d)
    flips = np.flatnonzero(sign[:-1] * sign[1:] <= 0)
    flips = [i for i in flips if not (sign[i] == 0 and sign[i + 1] == 0)]
    if not flips:
        raise NoIntersection("group densities do not cross between the means")
    i = flips[0]
    if d[i] == d[i + 1]:
        return float(grid[i])
    w = d[i] / (d[i] - d[i + 1])
    return float(grid[i] + w * (grid[i + 1] - grid[i]))


def cohort_threshold(records, bandwidth="silverman", followup=True):
    """Threshold from AR-index samples grouped by clinical LOW and HIGH class."""
    groups = {RiskClass.LOW: [], RiskClass.HIGH: []}
    for r in records:
        clin = r.followup_clinical_risk if followup and r.followup_clinical_risk else r.clinical_risk
        if clin in groups:
            groups[clin].append(ar_index(r.positives, r.effective))
    return estimate_threshold(groups[RiskClass.LOW], groups[RiskClass.HIGH], bandwidth)


@dataclass(frozen=True)
class ConcordanceReport:
    n: int
    exact_matches: int
    positive_total: int
    positive_agree: int
    negative_total: int
    negative_agree: int
    confusion: dict

    def to_json(self):
        return {
            "n": self.n,
            "exact_matches": self.exact_matches,
            "positive_agreement": [self.positive_agree, self.positive_total],
            "negative_agreement": [self.negative_agree, self.negative_total],
            "confusion": self.confusion,
        }


def concordance(pairs):
    """Agreement between ARRISK and clinical class.

    ``pairs`` holds (ARResult or RiskClass, clinical RiskClass).  A clinical
    positive agrees when ARRISK is non-ZERO; a clinical negative agrees when
    ARRISK is ZERO.  ``confusion[clinical][arrisk]`` counts every pair.
    """
    pairs = list(pairs)
    if not pairs:
        raise InputDataError("concordance needs a nonempty cohort")
    names = [c.value for c in RiskClass]
    confusion = {c: {a: 0 for a in names} for c in names}
    exact = pt = pa = nt = na = 0
    for ar, clin in pairs:
        cls = ar.arrisk if isinstance(ar, ARResult) else RiskClass(ar)
        clin = RiskClass(clin)
        confusion[clin.value][cls.value] += 1
        exact += cls == clin
        if clin is RiskClass.ZERO:
            nt += 1
            na += cls is RiskClass.ZERO
        else:
            pt += 1
            pa += cls is not RiskClass.ZERO
    return ConcordanceReport(len(pairs), exact, pt, pa, nt, na, confusion)


def cohort_table(records, theta=DEFAULT_THETA, followup=True):
    """Per-row scores plus concordance against clinical (or follow-up) class."""
    rows, pairs = [], []
    for r in records:
        res = r.score(theta)
        clin = r.followup_clinical_risk if followup and r.followup_clinical_risk else r.clinical_risk
        rows.append((r, res, clin))
        if clin is not None:
            pairs.append((res, clin))
    return rows, concordance(pairs) if pairs else None


def write_cohort_outputs(rows, report, out_dir, theta):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cohort_scores.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["patient_id", "n_vt", "effective_sims", "ar_index", "arrisk", "reported_arrisk",
                    "clinical_risk"])
        for r, res, clin in rows:
            rep = r.reported_arrisk.value if r.reported_arrisk else ""
            w.writerow([r.patient_id, r.positives, r.effective, f"{res.ar_index:.4f}", res.arrisk.value, rep,
                        clin.value if clin else ""])
    lines = [f"# Cohort ARRISK replay (theta = {theta})", "",
             "| patient | #VT | effective | AR-index | ARRISK | clinical |", "|---|---|---|---|---|---|"]
    for r, res, clin in rows:
        lines.append(f"| {r.patient_id} | {r.positives} | {r.effective} | {res.ar_index:.4f} | "
                     f"{res.arrisk.value} | {clin.value if clin else ''} |")
    counts = {c.value: sum(res.arrisk is c for _, res, _ in rows) for c in RiskClass}
    reported = [(r, res) for r, res, _ in rows if r.reported_arrisk is not None]
    n_match = sum(res.arrisk is r.reported_arrisk for r, res in reported)
    lines += ["", "Class counts: " + ", ".join(f"{k} {v}" for k, v in counts.items())]
    if reported:
        lines.append(f"Matches with reported ARRISK: {n_match}/{len(reported)}")
    if report is not None:
        lines += [
            f"Positive agreement: {report.positive_agree}/{report.positive_total}",
            f"Negative agreement: {report.negative_agree}/{report.negative_total}",
            f"Exact class matches: {report.exact_matches}/{report.n}",
        ]
    (out / "cohort_report.md").write_text("\n".join(lines) + "\n")
    payload = {"theta": theta, "class_counts": counts,
               "reported_matches": [n_match, len(reported)],
               "concordance": report.to_json() if report else None}
    (out / "cohort_report.json").write_text(json.dumps(payload, indent=1) + "\n")
    return payload


def patient_report_markdown(patient_id, summary, result, zones, sccs=()):
    """Markdown report for one twin: counts, AR-index, ARRISK, zones and SCCs."""
    lines = [
        f"# Arrhythmic risk report: {patient_id}", "",
        f"- Scenario: {summary['scenario']}",
        f"- Configurations: {summary['total_configs']}",
        f"- Effective simulations (N): {summary['effective']}",
        f"- Sustained reentries (P): {summary['positives']}",
        f"- Reentries at baseline parameters: {summary['positives_baseline']}",
        f"- AR-index: {result.ar_index:.4f}" if result else "- AR-index: n/a (no effective simulations)",
        f"- ARRISK: {result.arrisk.value} (theta = {result.theta})" if result else "- ARRISK: n/a",
        "", "## Risk zones", "",
        "| zone | support | centroid (mm) | AHA segments |", "|---|---|---|---|",
    ]
    for z in zones:
        c = ", ".join(f"{v:.1f}" for v in z["centroid_mm"])
        lines.append(f"| {z['zone_id']} | {z['support']} | ({c}) | {', '.join(map(str, z['aha_segments']))} |")
    if not zones:
        lines.append("| - | 0 | - | - |")
    lines += ["", "## Slow conduction channels", "", "| id | length (mm) | centerline voxels | mass (g) |", "|---|---|---|---|"]
    for s in sccs:
        lines.append(f"| {s['id']} | {s['length_mm']:.1f} | {len(s['centerline'])} | {s['mass_g']:.3f} |")
    if not sccs:
        lines.append("| - | - | 0 | 0 |")
    return "\n".join(lines) + "\n"
