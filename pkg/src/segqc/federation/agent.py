"""Hospital-side agent: watches a case directory, scores windows of cases
locally, and pushes aggregate reports to the monitor.

Only the aggregated SiteReport leaves the machine. Reports are spooled to
disk before the first delivery attempt, so a crash or an unreachable
monitor never loses or renumbers a window; replayed deliveries are dropped
by the monitor's stale-window check (409), which the agent treats as
delivered.

Case files are NIfTI pairs named <case>_img.nii[.gz] and <case>_pred.nii[.gz],
plus <case>_lung.nii[.gz] when lung_mode is "file".
"""

from __future__ import annotations

import json
import logging
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

from ..errors import SegQCError
from ..features import extract_features, heuristic_lung_mask
from ..models import load_model_file, predict
from ..nifti import load as load_nifti
from .report import site_aggregate

log = logging.getLogger(__name__)

_IMG_SUFFIXES = ("_img.nii.gz", "_img.nii")


@dataclass(frozen=True)
class AgentConfig:
    site_id: str
    monitor_url: str
    model_path: str
    input_dir: str
    state_dir: str
    window_size: int = 20
    lung_mode: str = "heuristic"  # "heuristic" or "file"
    poll_interval: float = 10.0
    model_version: str = ""
    max_attempts: int = 5
    backoff_base: float = 0.5
    backoff_cap: float = 30.0
    timeout: float = 10.0

    def __post_init__(self):
        if self.lung_mode not in ("heuristic", "file"):
            raise ValueError(f"lung_mode must be 'heuristic' or 'file', got {self.lung_mode!r}")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")


def _post_json(url: str, doc: dict, timeout: float) -> tuple[int, dict]:
    data = json.dumps(doc).encode()
    req = urllib.request.Request(url, data=data, headers={"Content-Type": "application/json"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, json.loads(resp.read() or b"{}")
    except urllib.error.HTTPError as e:
        body = e.read()
        try:
            return e.code, json.loads(body) if body else {}
        except json.JSONDecodeError:
            return e.code, {}


class Agent:
    def __init__(self, config: AgentConfig):
        self.config = config
        self.model = load_model_file(config.model_path)
        self.state_dir = Path(config.state_dir)
        self.spool_dir = self.state_dir / "spool"
        self.spool_dir.mkdir(parents=True, exist_ok=True)
        self.state_path = self.state_dir / "state.json"
        self.state = self._load_state()
        self._reconcile_spool()

    # -- state and spool ----------------------------------------------------

    def _load_state(self) -> dict:
        if self.state_path.exists():
            with open(self.state_path) as f:
                return json.load(f)
        return {"last_window_id": 0, "processed_cases": []}

    def _save_state(self) -> None:
        tmp = self.state_path.with_suffix(".tmp")
        with open(tmp, "w") as f:
            json.dump(self.state, f, sort_keys=True)
        tmp.replace(self.state_path)

    def _spool_path(self, window_id: int) -> Path:
        return self.spool_dir / f"window_{window_id:08d}.json"

    def _spooled_windows(self) -> list[Path]:
        return sorted(self.spool_dir.glob("window_*.json"))

    def _reconcile_spool(self) -> None:
        # The spool is the write-ahead intent log: a spooled window beyond the
        # recorded state means the crash hit between spool write and state save.
        changed = False
        processed = set(self.state["processed_cases"])
        for path in self._spooled_windows():
            with open(path) as f:
                entry = json.load(f)
            wid = entry["report"]["window_id"]
            if wid > self.state["last_window_id"]:
                self.state["last_window_id"] = wid
                processed.update(entry["case_ids"])
                changed = True
        if changed:
            self.state["processed_cases"] = sorted(processed)
            self._save_state()

    # -- case discovery and scoring -----------------------------------------

    def discover_cases(self) -> list[str]:
        """Unprocessed case ids with a complete file set, sorted."""
        input_dir = Path(self.config.input_dir)
        processed = set(self.state["processed_cases"])
        found = []
        for suffix in _IMG_SUFFIXES:
            for img in input_dir.glob(f"*{suffix}"):
                case_id = img.name[: -len(suffix)]
                if case_id in processed:
                    continue
                if self._case_file(case_id, "pred") is None:
                    continue
                if self.config.lung_mode == "file" and self._case_file(case_id, "lung") is None:
                    continue
                found.append(case_id)
        return sorted(set(found))

    def _case_file(self, case_id: str, role: str) -> Path | None:
        for ext in (".nii.gz", ".nii"):
            p = Path(self.config.input_dir) / f"{case_id}_{role}{ext}"
            if p.exists():
                return p
        return None

    def score_case(self, case_id: str):
        img = load_nifti(self._case_file(case_id, "img"))
        pred = load_nifti(self._case_file(case_id, "pred"), as_mask=True)
        if self.config.lung_mode == "file":
            lung = load_nifti(self._case_file(case_id, "lung"), as_mask=True)
        else:
            lung = heuristic_lung_mask(img)
        fv = extract_features(img, pred, lung)
        return predict(self.model, fv, case_id=case_id), fv

    # -- windows and delivery -------------------------------------------------

    def build_window(self, case_ids: list[str]) -> dict:
        """Score a batch, spool the aggregate report, and consume the cases."""
        preds, feats = [], []
        for case_id in case_ids:
            p, f = self.score_case(case_id)
            preds.append(p)
            feats.append(f)
        window_id = self.state["last_window_id"] + 1
        report = site_aggregate(
            preds,
            feats,
            case_ids,
            site_id=self.config.site_id,
            window_id=window_id,
            model_version=self.config.model_version,
        )
        entry = {"report": report.to_dict(), "case_ids": list(case_ids)}
        with open(self._spool_path(window_id), "w") as f:
            json.dump(entry, f, sort_keys=True)
        self.state["last_window_id"] = window_id
        self.state["processed_cases"] = sorted(set(self.state["processed_cases"]) | set(case_ids))
        self._save_state()
        return entry

    def deliver_spool(self) -> bool:
        """Try to deliver every spooled report in window order.

        Returns True when the spool is empty afterwards. Stops at the first
        network failure (bounded exponential backoff between attempts).
        """
        url = self.config.monitor_url.rstrip("/") + "/v1/reports"
        for path in self._spooled_windows():
            with open(path) as f:
                entry = json.load(f)
            delivered = False
            for attempt in range(self.config.max_attempts):
                try:
                    status, body = _post_json(url, entry["report"], self.config.timeout)
                except (urllib.error.URLError, OSError) as e:
                    wait = min(self.config.backoff_cap, self.config.backoff_base * 2**attempt)
                    log.warning("monitor unreachable (%s); retrying in %.1fs", e, wait)
                    time.sleep(wait)
                    continue
                if status == 200 or status == 409:
                    # 409 means this window was already ingested before a crash.
                    delivered = True
                    break
                if status == 422:
                    log.error("monitor rejected window %s: %s", entry["report"]["window_id"], body)
                    path.rename(path.with_suffix(".rejected"))
                    delivered = True
                    break
                log.warning("unexpected status %s from monitor: %s", status, body)
                time.sleep(min(self.config.backoff_cap, self.config.backoff_base * 2**attempt))
            if not delivered:
                return False
            if path.exists():
                path.unlink()
        return not self._spooled_windows()

    def run_once(self, flush_partial: bool = True) -> int:
        """One processing pass: build windows from ready cases, deliver the spool.

        Returns the number of windows built.
        """
        cases = self.discover_cases()
        built = 0
        w = self.config.window_size
        full_end = len(cases) - len(cases) % w
        batches = [cases[i : i + w] for i in range(0, full_end, w)]
        if flush_partial and cases[full_end:]:
            batches.append(cases[full_end:])
        for batch in batches:
            self.build_window(batch)
            built += 1
        self.deliver_spool()
        return built

    def run_forever(self) -> None:
        log.info("agent %s watching %s", self.config.site_id, self.config.input_dir)
        while True:
            try:
                self.run_once(flush_partial=False)
            except SegQCError as e:
                log.error("processing pass failed: %s", e)
            time.sleep(self.config.poll_interval)
