from .report import (
    DEFAULT_RULES,
    WIRE_FORMAT_VERSION,
    AlertRule,
    FleetSummary,
    SiteReport,
    evaluate_alerts,
    merge_report,
    site_aggregate,
    validate_report_doc,
)

__all__ = [
    "DEFAULT_RULES",
    "WIRE_FORMAT_VERSION",
    "AlertRule",
    "FleetSummary",
    "SiteReport",
    "evaluate_alerts",
    "merge_report",
    "site_aggregate",
    "validate_report_doc",
]
