"""Privacy-preserving site reports and their fleet-level aggregation.

A SiteReport is the only datum that crosses the wire: a bin histogram,
failed count, and per-feature {mean, std, min, max} aggregates. The wire
schema is closed (unknown fields are rejected) and carries no per-case
values, case ids, or voxel data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from ..errors import EmptyWindowError, StaleWindowError
from ..features import FEATURE_NAMES, FEATURE_VERSION, FeatureVector
from ..models import FAILED_MAX_BIN, N_BINS, QualityPrediction

WIRE_FORMAT_VERSION = 1

_AGG_KEYS = ("mean", "std", "min", "max")

REPORT_FIELDS = (
    "site_id",
    "window_id",
    "n_cases",
    "bin_histogram",
    "failed_count",
    "feature_summary",
    "model_version",
    "feature_version",
    "created_at",
    "format_version",
)

# How many recent windows each site keeps for alert-rule evaluation.
RECENT_WINDOW_LIMIT = 16


@dataclass(frozen=True)
class SiteReport:
    site_id: str
    window_id: int
    n_cases: int
    bin_histogram: tuple
    failed_count: int
    feature_summary: dict  # feature name -> {"mean","std","min","max"}
    model_version: str
    feature_version: str
    created_at: str
    format_version: int = WIRE_FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "site_id": self.site_id,
            "window_id": self.window_id,
            "n_cases": self.n_cases,
            "bin_histogram": list(self.bin_histogram),
            "failed_count": self.failed_count,
            "feature_summary": {k: dict(v) for k, v in self.feature_summary.items()},
            "model_version": self.model_version,
            "feature_version": self.feature_version,
            "created_at": self.created_at,
            "format_version": self.format_version,
        }

    @staticmethod
    def from_dict(doc: dict) -> "SiteReport":
        return SiteReport(
            site_id=doc["site_id"],
            window_id=doc["window_id"],
            n_cases=doc["n_cases"],
            bin_histogram=tuple(doc["bin_histogram"]),
            failed_count=doc["failed_count"],
            feature_summary={k: dict(v) for k, v in doc["feature_summary"].items()},
            model_version=doc["model_version"],
            feature_version=doc["feature_version"],
            created_at=doc["created_at"],
            format_version=doc["format_version"],
        )


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return (_is_int(x) or isinstance(x, float)) and math.isfinite(x)


def validate_report_doc(doc) -> list[str]:
    """Validate a wire payload against the closed report schema.

    Returns a list of problems; an empty list means the payload is valid.
    """
    if not isinstance(doc, dict):
        return ["payload must be a JSON object"]
    problems = []
    for key in doc:
        if key not in REPORT_FIELDS:
            problems.append(f"unknown field {key!r}")
    for key in REPORT_FIELDS:
        if key not in doc:
            problems.append(f"missing field {key!r}")
    if problems:
        return problems

    if doc["format_version"] != WIRE_FORMAT_VERSION:
        problems.append(f"format_version must be {WIRE_FORMAT_VERSION}, got {doc['format_version']!r}")
    if not isinstance(doc["site_id"], str) or not doc["site_id"]:
        problems.append("site_id must be a nonempty string")
    if not _is_int(doc["window_id"]) or doc["window_id"] < 1:
        problems.append("window_id must be an integer >= 1")
    if not _is_int(doc["n_cases"]) or doc["n_cases"] < 1:
        problems.append("n_cases must be an integer >= 1")
    hist = doc["bin_histogram"]
    if not isinstance(hist, list) or len(hist) != N_BINS or not all(_is_int(h) and h >= 0 for h in hist):
        problems.append(f"bin_histogram must be {N_BINS} nonnegative integers")
        return problems
    if not _is_int(doc["failed_count"]):
        problems.append("failed_count must be an integer")
        return problems
    if _is_int(doc["n_cases"]) and sum(hist) != doc["n_cases"]:
        problems.append("bin_histogram must sum to n_cases")
    if doc["failed_count"] != sum(hist[: FAILED_MAX_BIN + 1]):
        problems.append("failed_count must equal the sum of histogram bins 0..2")
    for key in ("model_version", "feature_version", "created_at"):
        if not isinstance(doc[key], str):
            problems.append(f"{key} must be a string")
    fs = doc["feature_summary"]
    if not isinstance(fs, dict) or set(fs) != set(FEATURE_NAMES):
        problems.append(f"feature_summary must hold exactly the features {list(FEATURE_NAMES)}")
        return problems
    for name, agg in fs.items():
        if not isinstance(agg, dict) or set(agg) != set(_AGG_KEYS):
            problems.append(f"feature_summary[{name!r}] must hold exactly {list(_AGG_KEYS)}")
            continue
        if not all(_is_num(agg[k]) for k in _AGG_KEYS):
            problems.append(f"feature_summary[{name!r}] values must be finite numbers")
            continue
        if agg["std"] < 0:
            problems.append(f"feature_summary[{name!r}].std must be >= 0")
        if agg["min"] > agg["max"]:
            problems.append(f"feature_summary[{name!r}].min must be <= max")
    return problems


def site_aggregate(
    preds: list[QualityPrediction],
    feats: list[FeatureVector],
    ids: list[str] | None = None,
    *,
    site_id: str,
    window_id: int,
    model_version: str,
    created_at: str | None = None,
) -> SiteReport:
    """Collapse one window of per-case predictions into a SiteReport.

    `ids` is only used to check alignment; no per-case value enters the report.
    """
    if not preds:
        raise EmptyWindowError("cannot aggregate an empty window")
    if len(preds) != len(feats) or (ids is not None and len(ids) != len(preds)):
        raise ValueError("predictions, features, and ids must align")
    hist = [0] * N_BINS
    for p in preds:
        hist[p.predicted_bin] += 1
    A = np.array([f.as_array() for f in feats], dtype=np.float64)
    summary = {
        name: {
            "mean": float(A[:, j].mean()),
            "std": float(A[:, j].std()),
            "min": float(A[:, j].min()),
            "max": float(A[:, j].max()),
        }
        for j, name in enumerate(FEATURE_NAMES)
    }
    return SiteReport(
        site_id=site_id,
        window_id=window_id,
        n_cases=len(preds),
        bin_histogram=tuple(hist),
        failed_count=sum(hist[: FAILED_MAX_BIN + 1]),
        feature_summary=summary,
        model_version=model_version,
        feature_version=FEATURE_VERSION,
        created_at=created_at if created_at is not None else datetime.now(timezone.utc).isoformat(),
    )


@dataclass
class SiteState:
    site_id: str
    last_window_id: int = 0
    n_windows: int = 0
    n_cases: int = 0
    bin_histogram: list = field(default_factory=lambda: [0] * N_BINS)
    failed_count: int = 0
    # Running pooled moments per feature: count, sum of n*mean, sum of n*(std^2+mean^2), min, max.
    feature_stats: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)  # first window's feature summary + its n_cases
    recent: list = field(default_factory=list)  # last few reports, for alert rules
    model_version: str = ""
    flagged_windows: list = field(default_factory=list)

    @property
    def failed_rate(self) -> float:
        return self.failed_count / self.n_cases if self.n_cases else 0.0

    def pooled_features(self) -> dict:
        out = {}
        for name, s in self.feature_stats.items():
            n = s["count"]
            mean = s["mean_sum"] / n
            var = max(0.0, s["sq_sum"] / n - mean**2)
            out[name] = {"mean": mean, "std": math.sqrt(var), "min": s["min"], "max": s["max"]}
        return out

    def to_dict(self) -> dict:
        return {
            "site_id": self.site_id,
            "last_window_id": self.last_window_id,
            "n_windows": self.n_windows,
            "n_cases": self.n_cases,
            "bin_histogram": list(self.bin_histogram),
            "failed_count": self.failed_count,
            "failed_rate": self.failed_rate,
            "features": self.pooled_features(),
            "baseline": dict(self.baseline),
            "model_version": self.model_version,
            "flagged_windows": list(self.flagged_windows),
            "recent_windows": [dict(r) for r in self.recent],
        }


class FleetSummary:
    """Cumulative per-site and fleet-wide aggregates over ingested reports."""

    def __init__(self, expected_model_version: str | None = None):
        self.expected_model_version = expected_model_version
        self.sites: dict[str, SiteState] = {}

    def site(self, site_id: str) -> SiteState:
        if site_id not in self.sites:
            self.sites[site_id] = SiteState(site_id=site_id)
        return self.sites[site_id]

    @property
    def total_cases(self) -> int:
        return sum(s.n_cases for s in self.sites.values())

    @property
    def total_failed(self) -> int:
        return sum(s.failed_count for s in self.sites.values())

    @property
    def failed_rate(self) -> float:
        total = self.total_cases
        return self.total_failed / total if total else 0.0

    def to_dict(self) -> dict:
        hist = [0] * N_BINS
        for s in self.sites.values():
            for b in range(N_BINS):
                hist[b] += s.bin_histogram[b]
        return {
            "format_version": WIRE_FORMAT_VERSION,
            "expected_model_version": self.expected_model_version,
            "fleet": {
                "n_sites": len(self.sites),
                "n_windows": sum(s.n_windows for s in self.sites.values()),
                "n_cases": self.total_cases,
                "failed_count": self.total_failed,
                "failed_rate": self.failed_rate,
                "bin_histogram": hist,
            },
            "sites": {site_id: s.to_dict() for site_id, s in sorted(self.sites.items())},
        }


def merge_report(summary: FleetSummary, r: SiteReport) -> FleetSummary:
    """Fold one report into the summary.

    Rejects replayed or out-of-order windows with StaleWindowError, leaving
    the summary unchanged. Reports from distinct sites commute: any arrival
    order yields the same summary.
    """
    s = summary.site(r.site_id)
    if r.window_id <= s.last_window_id:
        raise StaleWindowError(
            f"site {r.site_id!r}: window {r.window_id} is not newer than last ingested {s.last_window_id}"
        )
    s.last_window_id = r.window_id
    s.n_windows += 1
    s.n_cases += r.n_cases
    for b in range(N_BINS):
        s.bin_histogram[b] += r.bin_histogram[b]
    s.failed_count += r.failed_count

    for name, agg in r.feature_summary.items():
        st = s.feature_stats.setdefault(
            name, {"count": 0, "mean_sum": 0.0, "sq_sum": 0.0, "min": math.inf, "max": -math.inf}
        )
        n = r.n_cases
        st["count"] += n
        st["mean_sum"] += n * agg["mean"]
        st["sq_sum"] += n * (agg["std"] ** 2 + agg["mean"] ** 2)
        st["min"] = min(st["min"], agg["min"])
        st["max"] = max(st["max"], agg["max"])

    if not s.baseline:
        s.baseline = {
            "n_cases": r.n_cases,
            "features": {name: dict(agg) for name, agg in r.feature_summary.items()},
        }
    s.recent.append(
        {
            "window_id": r.window_id,
            "n_cases": r.n_cases,
            "failed_count": r.failed_count,
            "feature_summary": {name: dict(agg) for name, agg in r.feature_summary.items()},
        }
    )
    del s.recent[:-RECENT_WINDOW_LIMIT]

    s.model_version = r.model_version
    if summary.expected_model_version is not None and r.model_version != summary.expected_model_version:
        s.flagged_windows.append(
            {"window_id": r.window_id, "model_version": r.model_version, "expected": summary.expected_model_version}
        )
    return summary


@dataclass(frozen=True)
class AlertRule:
    kind: str  # "failed_rate_threshold" or "feature_drift"
    threshold: float
    min_cases: int = 1
    window_count: int = 3
    feature: str | None = None  # drift rules only; None checks all four

    def __post_init__(self):
        if self.kind not in ("failed_rate_threshold", "feature_drift"):
            raise ValueError(f"unknown alert rule kind {self.kind!r}")
        if self.kind == "failed_rate_threshold" and not (0.0 < self.threshold <= 1.0):
            raise ValueError("failed_rate threshold must be in (0, 1]")
        if self.min_cases < 1:
            raise ValueError("min_cases must be >= 1")
        if self.window_count < 1:
            raise ValueError("window count must be >= 1")


# Motivated by the in-distribution vs out-of-distribution failed-rate gap:
# a sustained failed rate above 20% over 3 windows is worth a look.
DEFAULT_RULES = (
    AlertRule(kind="failed_rate_threshold", threshold=0.2, min_cases=20, window_count=3),
    AlertRule(kind="feature_drift", threshold=6.0, min_cases=20, window_count=3),
)


def evaluate_alerts(summary: FleetSummary, rules=DEFAULT_RULES) -> list[dict]:
    """Evaluate alert rules per site over its recent windows."""
    alerts = []
    for site_id, s in sorted(summary.sites.items()):
        for rule in rules:
            recent = s.recent[-rule.window_count :]
            n = sum(r["n_cases"] for r in recent)
            if n < rule.min_cases:
                continue
            if rule.kind == "failed_rate_threshold":
                failed = sum(r["failed_count"] for r in recent)
                rate = failed / n
                if rate > rule.threshold:
                    alerts.append(
                        {
                            "site_id": site_id,
                            "rule": rule.kind,
                            "value": rate,
                            "threshold": rule.threshold,
                            "detail": f"failed rate {rate:.3f} over last {len(recent)} windows ({failed}/{n} cases)",
                        }
                    )
            else:
                names = FEATURE_NAMES if rule.feature is None else (rule.feature,)
                for name in names:
                    base = s.baseline["features"][name]
                    pooled = sum(r["n_cases"] * r["feature_summary"][name]["mean"] for r in recent) / n
                    se = max(base["std"], 1e-9) / math.sqrt(n)
                    z = abs(pooled - base["mean"]) / se
                    if z > rule.threshold:
                        alerts.append(
                            {
                                "site_id": site_id,
                                "rule": rule.kind,
                                "feature": name,
                                "value": z,
                                "threshold": rule.threshold,
                                "detail": (
                                    f"{name} mean {pooled:.4f} deviates from baseline {base['mean']:.4f} "
                                    f"by {z:.1f} standard errors"
                                ),
                            }
                        )
    return alerts
