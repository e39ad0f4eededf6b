"""Central monitor: ingests SiteReports over HTTP, keeps a fleet summary,
and evaluates alert rules.

State is an append-only JSONL log of accepted reports, replayed at startup;
the in-memory summary is purely derived from the log, so a restart always
reproduces the same summary. Ingestion is serialized per site; the summary
endpoint reads a consistent snapshot.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from ..errors import StaleWindowError
from .report import DEFAULT_RULES, FleetSummary, SiteReport, evaluate_alerts, merge_report, validate_report_doc

log = logging.getLogger(__name__)


class Monitor:
    """Report ingestion and summary state, independent of the HTTP front end."""

    def __init__(self, log_path, expected_model_version: str | None = None, rules=DEFAULT_RULES):
        self.log_path = Path(log_path)
        self.rules = tuple(rules)
        self.summary = FleetSummary(expected_model_version)
        self._site_locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._state_lock = threading.Lock()
        if self.log_path.exists():
            self._replay()

    def _site_lock(self, site_id: str) -> threading.Lock:
        with self._locks_guard:
            if site_id not in self._site_locks:
                self._site_locks[site_id] = threading.Lock()
            return self._site_locks[site_id]

    def _replay(self) -> None:
        n = 0
        with open(self.log_path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError:
                    log.warning("skipping undecodable log line (truncated write?)")
                    continue
                if validate_report_doc(doc):
                    log.warning("skipping invalid report in log")
                    continue
                try:
                    merge_report(self.summary, SiteReport.from_dict(doc))
                    n += 1
                except StaleWindowError:
                    log.warning("skipping stale report in log")
        log.info("replayed %d reports from %s", n, self.log_path)

    def ingest(self, doc) -> tuple[int, dict]:
        """Validate and merge one wire payload. Returns (http_status, body)."""
        problems = validate_report_doc(doc)
        if problems:
            return 422, {"status": "rejected", "errors": problems}
        report = SiteReport.from_dict(doc)
        with self._site_lock(report.site_id):
            last = self.summary.site(report.site_id).last_window_id
            if report.window_id <= last:
                return 409, {
                    "status": "stale",
                    "errors": [f"window {report.window_id} already ingested (last is {last})"],
                }
            self._append_log(doc)
            with self._state_lock:
                merge_report(self.summary, report)
        return 200, {"status": "accepted", "site_id": report.site_id, "window_id": report.window_id}

    def _append_log(self, doc) -> None:
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.log_path, "a") as f:
            f.write(json.dumps(doc, sort_keys=True) + "\n")
            f.flush()
            os.fsync(f.fileno())

    def summary_snapshot(self) -> dict:
        with self._state_lock:
            return self.summary.to_dict()

    def alerts_snapshot(self) -> dict:
        with self._state_lock:
            return {"format_version": 1, "alerts": evaluate_alerts(self.summary, self.rules)}


class _Handler(BaseHTTPRequestHandler):
    server_version = "segqc-monitor/1"

    def _respond(self, status: int, body: dict) -> None:
        payload = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def do_GET(self):
        monitor: Monitor = self.server.monitor
        if self.path == "/v1/summary":
            self._respond(200, monitor.summary_snapshot())
        elif self.path == "/v1/alerts":
            self._respond(200, monitor.alerts_snapshot())
        elif self.path == "/v1/healthz":
            self._respond(200, {"status": "ok", "format_version": 1})
        else:
            self._respond(404, {"status": "not found", "errors": [f"unknown path {self.path}"]})

    def do_POST(self):
        monitor: Monitor = self.server.monitor
        if self.path != "/v1/reports":
            self._respond(404, {"status": "not found", "errors": [f"unknown path {self.path}"]})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            doc = json.loads(self.rfile.read(length))
        except (ValueError, json.JSONDecodeError):
            self._respond(422, {"status": "rejected", "errors": ["body is not valid JSON"]})
            return
        status, body = monitor.ingest(doc)
        self._respond(status, body)

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)


class MonitorServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, monitor: Monitor, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.monitor = monitor

    @property
    def port(self) -> int:
        return self.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.server_address[0]}:{self.port}"


def serve(monitor: Monitor, host: str = "127.0.0.1", port: int = 8300) -> MonitorServer:
    """Create the HTTP server (not yet serving; call serve_forever or use a thread)."""
    return MonitorServer(monitor, host=host, port=port)
