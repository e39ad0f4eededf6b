"""Single entry point wiring all modules into reproducible workflows.

Subcommands: synth, extract, train, eval, bootstrap, ablate, agent, monitor.
Every run writes a manifest echoing its fully resolved configuration, and
all randomness flows from a single --seed per invocation.

Exit codes: 0 success, 1 usage, 2 partial data failure, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation, nifti, synth
from .errors import SegQCError, VersionMismatchError
from .features import extract_features, heuristic_lung_mask, read_features_csv, write_features_csv
from .models import (
    TrainConfig,
    bin_of,
    load_model_file,
    save_model_file,
    train_linear_svm,
    train_logistic,
    train_ridge,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2
EXIT_INTERNAL = 3

log = logging.getLogger("segqc")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config_file(path: str) -> dict:
    raw = Path(path).read_bytes()
    if str(path).endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(raw.decode())
    return json.loads(raw)


class _Resolver:
    """CLI flag > config file value > built-in default, recording the result."""

    def __init__(self, args):
        self.config = _load_config_file(args.config) if getattr(args, "config", None) else {}
        self.args = args
        self.resolved: dict = {}

    def get(self, name: str, default=None):
        cli = getattr(self.args, name.replace("-", "_"), None)
        value = cli if cli is not None else self.config.get(name, default)
        self.resolved[name] = value
        return value

    def require(self, name: str):
        value = self.get(name)
        if value is None:
            raise _UsageError(f"missing required option --{name} (or config key {name!r})")
        return value


class _UsageError(SegQCError):
    pass


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    r = _Resolver(args)
    n_cases = r.require("n-cases")
    seed = r.get("seed", 0)
    spectrum = r.get("spectrum", "uniform")
    out_dir = Path(r.require("out-dir"))
    dims = tuple(r.get("dims", [32, 64, 64]))
    if n_cases <= 0:
        raise _UsageError("--n-cases must be positive")

    cases = synth.build_dataset(n_cases, seed, spectrum, dims=dims)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in cases:
        files = {
            "image": f"{case.case_id}_img.nii.gz",
            "gt": f"{case.case_id}_gt.nii.gz",
            "lung": f"{case.case_id}_lung.nii.gz",
            "pred": f"{case.case_id}_pred.nii.gz",
        }
        nifti.save(out_dir / files["image"], case.image)
        nifti.save(out_dir / files["gt"], case.gt_mask)
        nifti.save(out_dir / files["lung"], case.lung_mask)
        nifti.save(out_dir / files["pred"], case.pred_mask)
        entries.append(
            {
                "case_id": case.case_id,
                "files": files,
                "true_dice": case.true_dice,
                "corruption": case.corruption,
                "split": case.split,
            }
        )
    manifest = {"format_version": 1, "config": r.resolved, "cases": entries}
    _write_json(out_dir / "manifest.json", manifest)
    print(f"wrote {len(entries)} cases and manifest.json to {out_dir}")
    return EXIT_OK


def _read_manifest(path) -> dict:
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != 1:
        raise SegQCError(f"unsupported manifest format_version {manifest.get('format_version')!r}")
    return manifest


# ---------------------------------------------------------------- extract


def _extract_one(case: dict, base: Path, lung_mode: str):
    img = nifti.load(base / case["files"]["image"])
    pred = nifti.load(base / case["files"]["pred"], as_mask=True)
    if lung_mode == "file":
        lung = nifti.load(base / case["files"]["lung"], as_mask=True)
    else:
        lung = heuristic_lung_mask(img)
    return extract_features(img, pred, lung)


def cmd_extract(args) -> int:
    r = _Resolver(args)
    manifest_path = Path(r.require("manifest"))
    out_csv = Path(r.require("out"))
    lung_mode = r.get("lung-mode", "file")
    workers = r.get("workers", 4)
    if lung_mode not in ("file", "heuristic"):
        raise _UsageError("--lung-mode must be 'file' or 'heuristic'")

    manifest = _read_manifest(manifest_path)
    base = manifest_path.parent
    rows, errors = [], []

    def work(case):
        return case["case_id"], _extract_one(case, base, lung_mode)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        futures = {ex.submit(work, case): case["case_id"] for case in manifest["cases"]}
        for fut, case_id in futures.items():
            try:
                rows.append(fut.result())
            except Exception as e:  # per-case failures must not stop the run
                errors.append({"case_id": case_id, "error": str(e)})

    rows.sort(key=lambda t: t[0])
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    write_features_csv(out_csv, rows)
    _write_json(
        str(out_csv) + ".manifest.json",
        {"format_version": 1, "config": r.resolved, "n_cases": len(rows), "errors": sorted(errors, key=lambda e: e["case_id"])},
    )
    print(f"extracted features for {len(rows)} cases -> {out_csv}")
    if errors:
        for e in sorted(errors, key=lambda e: e["case_id"]):
            print(f"error: {e['case_id']}: {e['error']}", file=sys.stderr)
        print(f"{len(errors)} case(s) failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------- train


def _labeled_features(features_csv, manifest_path, split: str | None):
    """Join feature rows with manifest Dice labels; returns (ids, X, dice)."""
    rows = dict(read_features_csv(features_csv))
    manifest = _read_manifest(manifest_path)
    ids, feats, dice = [], [], []
    for case in manifest["cases"]:
        if split is not None and case["split"] != split:
            continue
        cid = case["case_id"]
        if cid not in rows:
            raise SegQCError(f"case {cid!r} (split {case['split']}) missing from {features_csv}")
        ids.append(cid)
        feats.append(rows[cid])
        dice.append(float(case["true_dice"]))
    if not ids:
        raise SegQCError(f"no cases with split {split!r} in {manifest_path}")
    X = np.array([f.as_array() for f in feats])
    return ids, feats, X, dice


_KINDS = {"logistic": train_logistic, "linear-svm": train_linear_svm, "ridge": train_ridge}


def cmd_train(args) -> int:
    r = _Resolver(args)
    features_csv = r.require("features")
    manifest = r.require("manifest")
    kind = r.get("kind", "logistic")
    split = r.get("split", "train")
    out = r.require("out")
    config = TrainConfig(
        l2_strength=r.get("l2-strength", 1.0),
        max_iters=int(r.get("max-iters", 500)),
        tol=r.get("tol", 1e-6),
        seed=int(r.get("seed", 0)),
        class_weighting=r.get("class-weighting", "balanced"),
    )
    if kind not in _KINDS:
        raise _UsageError(f"--kind must be one of {sorted(_KINDS)}")

    _, _, X, dice = _labeled_features(features_csv, manifest, split)
    if kind == "ridge":
        model = train_ridge(X, dice, config.l2_strength)
    else:
        bins = [bin_of(d) for d in dice]
        model = _KINDS[kind](X, bins, config)
    save_model_file(model, out)
    _write_json(str(out) + ".manifest.json", {"format_version": 1, "config": r.resolved, "n_train_cases": X.shape[0]})
    print(f"trained {kind} model on {X.shape[0]} cases -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _fmt_sens(report) -> str:
    if report.sensitivity is None:
        return "undefined (0 failed cases)"
    return f"{report.sensitivity:.2f} ({report.detected}/{report.total_failed})"


def _render_table(reports: dict) -> str:
    names = list(reports)
    rows = [
        ("sensitivity", [_fmt_sens(reports[n]) for n in names]),
        ("specificity (avg 5 bins)", [f"{reports[n].specificity_avg:.2f}" for n in names]),
        ("MAE", [f"{reports[n].mae_mean:.2f} +/- {reports[n].mae_std:.2f}" for n in names]),
    ]
    col0 = max(len(r[0]) for r in rows)
    widths = [max(len(n), max(len(r[1][i]) for r in rows)) for i, n in enumerate(names)]
    lines = [" | ".join(["metric".ljust(col0)] + [n.ljust(w) for n, w in zip(names, widths)])]
    lines.append("-|-".join(["-" * col0] + ["-" * w for w in widths]))
    for label, cells in rows:
        lines.append(" | ".join([label.ljust(col0)] + [c.ljust(w) for c, w in zip(cells, widths)]))
    return "\n".join(lines)


def cmd_eval(args) -> int:
    r = _Resolver(args)
    model_paths = r.require("model")
    features_csv = r.require("features")
    manifest = r.require("manifest")
    split = r.get("split", "test")
    out = r.get("out")

    ids, feats, _, dice = _labeled_features(features_csv, manifest, split)
    reports = {}
    for path in model_paths:
        model = load_model_file(path)
        reports[Path(path).name] = evaluation.evaluate(model, feats, dice, ids=ids, dataset_id=f"split:{split}")
    print(_render_table(reports))
    if out:
        _write_json(
            out,
            {
                "format_version": 1,
                "config": r.resolved,
                "reports": {name: rep.to_dict() for name, rep in reports.items()},
            },
        )
    return EXIT_OK


# ---------------------------------------------------------------- bootstrap


def cmd_bootstrap(args) -> int:
    r = _Resolver(args)
    features_csv = r.require("features")
    manifest = r.require("manifest")
    out = r.require("out")
    config = evaluation.BootstrapConfig(
        runs=int(r.get("runs", 10000)),
        sample_size=int(r.get("sample-size", 192)),
        seed=int(r.get("seed", 0)),
        model_kind=r.get("model-kind", "logistic").replace("-", "_"),
        train=TrainConfig(l2_strength=r.get("l2-strength", 1.0), max_iters=int(r.get("max-iters", 500))),
        workers=int(r.get("workers", 1)),
    )
    train_split = r.get("train-split", "train")
    eval_split = r.get("eval-split", "test")

    _, _, X, dice = _labeled_features(features_csv, manifest, train_split)
    _, eval_feats, _, eval_dice = _labeled_features(features_csv, manifest, eval_split)
    report = evaluation.bootstrap_sensitivity(X, dice, [(eval_split, eval_feats, eval_dice)], config)
    doc = {"format_version": 1, "invocation": r.resolved}
    doc.update(report.to_dict())
    _write_json(out, doc)
    res = report.results[eval_split]
    print(
        f"bootstrap: runs={config.runs} sample_size={config.sample_size} "
        f"ci95=({res.ci95[0]:.3f}, {res.ci95[1]:.3f}) redraws={report.redraws} -> {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------- ablate


def cmd_ablate(args) -> int:
    r = _Resolver(args)
    features_csv = r.require("features")
    manifest = r.require("manifest")
    out = r.get("out")
    train_split = r.get("train-split", "train")
    eval_split = r.get("eval-split", "test")
    config = TrainConfig(
        l2_strength=r.get("l2-strength", 1.0),
        max_iters=int(r.get("max-iters", 500)),
        class_weighting=r.get("class-weighting", "balanced"),
    )

    _, _, X, dice = _labeled_features(features_csv, manifest, train_split)
    _, eval_feats, _, eval_dice = _labeled_features(features_csv, manifest, eval_split)
    report = evaluation.ablation(X, dice, [(eval_split, eval_feats, eval_dice)], config)

    base = report.baseline[eval_split]
    sens = "undefined" if base["sensitivity"] is None else f"{base['sensitivity']:.2f}"
    print(f"baseline (all features): sensitivity {sens}, specificity {base['specificity_avg']:.2f}")
    for row in report.rows:
        m = row["metrics"][eval_split]
        d = row["deltas"][eval_split]
        ds = "n/a" if d["sensitivity"] is None else f"{d['sensitivity']:+.2f}"
        print(
            f"without {row['left_out']:<18} sensitivity "
            f"{'undefined' if m['sensitivity'] is None else format(m['sensitivity'], '.2f')} ({ds}), "
            f"specificity {m['specificity_avg']:.2f} ({d['specificity_avg']:+.2f})"
        )
    if out:
        _write_json(out, {"format_version": 1, "config": r.resolved, **report.to_dict()})
    return EXIT_OK


# ---------------------------------------------------------------- services


def cmd_agent(args) -> int:
    from .federation.agent import Agent, AgentConfig

    r = _Resolver(args)
    config = AgentConfig(
        site_id=r.require("site-id"),
        monitor_url=r.require("monitor-url"),
        model_path=r.require("model"),
        input_dir=r.require("input-dir"),
        state_dir=r.require("state-dir"),
        window_size=int(r.get("window-size", 20)),
        lung_mode=r.get("lung-mode", "heuristic"),
        poll_interval=r.get("poll-interval", 10.0),
        model_version=r.get("model-version", ""),
    )
    agent = Agent(config)
    if args.once:
        built = agent.run_once(flush_partial=True)
        print(f"processed {built} window(s)")
        return EXIT_OK
    agent.run_forever()
    return EXIT_OK


def cmd_monitor(args) -> int:
    from .federation.monitor import Monitor, MonitorServer
    from .federation.report import DEFAULT_RULES, AlertRule

    r = _Resolver(args)
    log_path = r.require("log")
    host = r.get("host", "127.0.0.1")
    port = int(r.get("port", 8300))
    expected = r.get("expected-model-version")
    rules = DEFAULT_RULES
    if "rules" in r.config:
        rules = tuple(AlertRule(**rule) for rule in r.config["rules"])
        r.resolved["rules"] = r.config["rules"]

    monitor = Monitor(log_path, expected_model_version=expected, rules=rules)
    server = MonitorServer(monitor, host=host, port=port)
    print(f"monitor listening on {server.url} (report log: {log_path})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> _Parser:
    parser = _Parser(prog="segqc", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="TOML or JSON config file; CLI flags take precedence")
        return p

    p = add("synth", cmd_synth, "generate a synthetic phantom dataset")
    p.add_argument("-n", "--n-cases", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--spectrum", choices=synth.SPECTRA)
    p.add_argument("--out-dir")
    p.add_argument("--dims", type=int, nargs=3, metavar=("NZ", "NY", "NX"))

    p = add("extract", cmd_extract, "extract quality features for every manifest case")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--lung-mode", choices=["file", "heuristic"])
    p.add_argument("--workers", type=int)

    p = add("train", cmd_train, "train a quality model from features and Dice labels")
    p.add_argument("--features")
    p.add_argument("--manifest")
    p.add_argument("--kind", choices=sorted(_KINDS))
    p.add_argument("--split")
    p.add_argument("--l2-strength", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--class-weighting", choices=["balanced", "uniform"])
    p.add_argument("--out")

    p = add("eval", cmd_eval, "evaluate trained models on a labeled split")
    p.add_argument("--model", action="append")
    p.add_argument("--features")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--out")

    p = add("bootstrap", cmd_bootstrap, "bootstrap confidence analysis of failed-mask sensitivity")
    p.add_argument("--features")
    p.add_argument("--manifest")
    p.add_argument("--runs", type=int)
    p.add_argument("--sample-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--model-kind", choices=["logistic", "linear-svm", "ridge"])
    p.add_argument("--l2-strength", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--train-split")
    p.add_argument("--eval-split")
    p.add_argument("--out")

    p = add("ablate", cmd_ablate, "leave-one-feature-out ablation of the logistic model")
    p.add_argument("--features")
    p.add_argument("--manifest")
    p.add_argument("--train-split")
    p.add_argument("--eval-split")
    p.add_argument("--l2-strength", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--class-weighting", choices=["balanced", "uniform"])
    p.add_argument("--out")

    p = add("agent", cmd_agent, "run a site agent that scores cases and pushes reports")
    p.add_argument("--site-id")
    p.add_argument("--monitor-url")
    p.add_argument("--model")
    p.add_argument("--input-dir")
    p.add_argument("--state-dir")
    p.add_argument("--window-size", type=int)
    p.add_argument("--lung-mode", choices=["file", "heuristic"])
    p.add_argument("--poll-interval", type=float)
    p.add_argument("--model-version")
    p.add_argument("--once", action="store_true", help="process ready cases once (flushing a partial window) and exit")

    p = add("monitor", cmd_monitor, "run the central monitor HTTP service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--log")
    p.add_argument("--expected-model-version")

    return parser


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _UsageError as e:
        print(f"segqc: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except VersionMismatchError as e:
        print(f"segqc: refused: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SegQCError as e:
        print(f"segqc: error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except OSError as e:
        print(f"segqc: i/o error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
