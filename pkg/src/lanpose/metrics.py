"""Pose error metrics and recall tables.

ADD is the mean distance between model points under the predicted and
ground-truth transforms; ADD-S is its symmetric variant using
nearest-neighbour distances (used for blocks with a non-trivial symmetry
group). The n-degree n-cm metric thresholds the rotation error (after
symmetry alignment) and the translation error jointly.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .blocks import BlockModel, catalog_by_id
from .errors import ConfigError
from .geometry import Pose, geodesic_angle, sym_align
from .scene import load_records, pose_from_json, pose_to_json

ADD_THRESHOLDS = (0.02, 0.05, 0.1)
METRIC_KEYS = ("add_s_002", "add_s_005", "add_s_010", "deg2cm2", "deg5cm5")
SECTIONS = ("object", "assembly")


def add_metric(pred: Pose, gt: Pose, model: BlockModel) -> float:
    """Mean distance (mm) between correspondingly transformed model points."""
    d = np.linalg.norm(pred.apply(model.vertices) - gt.apply(model.vertices), axis=1)
    return float(d.mean())


def adds_metric(pred: Pose, gt: Pose, model: BlockModel) -> float:
    """Mean distance (mm) from gt-transformed points to the closest
    pred-transformed point."""
    pts_pred = pred.apply(model.vertices)
    pts_gt = gt.apply(model.vertices)
    dists, _ = cKDTree(pts_pred).query(pts_gt, k=1)
    return float(dists.mean())


def deg_cm(pred: Pose, gt: Pose, sym) -> tuple:
    """(rotation error deg, translation error cm); rotation error is taken
    against the best symmetry-equivalent ground truth."""
    aligned = sym_align(gt.rot, pred.rot, sym)
    rot_err = geodesic_angle(aligned, pred.rot)
    trans_err = float(np.linalg.norm(pred.t - gt.t)) / 10.0
    return rot_err, trans_err


def pose_flags(pred: Pose, gt: Pose, model: BlockModel) -> dict:
    """Per-sample pass/fail flags for every reported metric."""
    symmetric = len(model.sym_group) > 1
    err = adds_metric(pred, gt, model) if symmetric else add_metric(pred, gt, model)
    rot_err, trans_err = deg_cm(pred, gt, model.sym_group)
    flags = {}
    for k, key in zip(ADD_THRESHOLDS, ("add_s_002", "add_s_005", "add_s_010")):
        flags[key] = err < k * model.diameter
    flags["deg2cm2"] = rot_err < 2.0 and trans_err < 2.0
    flags["deg5cm5"] = rot_err < 5.0 and trans_err < 5.0
    return flags


@dataclass
class MetricsReport:
    """Per-block and mean recalls (percent) for object and assembly poses."""

    per_block: dict = field(default_factory=dict)  # section -> block -> metric -> pct
    means: dict = field(default_factory=dict)  # section -> metric -> pct
    counts: dict = field(default_factory=dict)  # section -> block -> n

    def block_ids(self, section: str) -> list:
        return sorted(self.per_block.get(section, {}))


def _worker_count() -> int:
    env = os.environ.get("LANPOSE_THREADS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError as e:
            raise ConfigError(f"LANPOSE_THREADS must be an integer, got {env!r}") from e
    return 1


def recall_table(records, predictions) -> MetricsReport:
    """Score predictions against ground truth.

    `records` are DatasetRecords; `predictions` are dicts with `record_id`
    and any of the poses `base`, `target`, `assembly`. Object-pose rows pool
    base and target predictions per block; assembly rows are grouped by the
    target block. Aggregation is count-based, so worker order cannot change
    the result.
    """
    by_id = {r.id: r for r in records}
    catalog = catalog_by_id()

    jobs = []  # (section, block_id, pred, gt, model)
    for p in predictions:
        rec = by_id.get(p["record_id"])
        if rec is None:
            raise ConfigError(f"prediction references unknown record {p['record_id']}")
        for role, gt in (("base", rec.gt_base), ("target", rec.gt_target)):
            pose = p.get(role)
            if pose is not None:
                block = rec.scene.objects[getattr(rec, f"{role}_id")].block_id
                jobs.append(("object", block, pose, gt, catalog[block]))
        if p.get("assembly") is not None:
            block = rec.scene.objects[rec.target_id].block_id
            jobs.append(("assembly", block, p["assembly"], rec.gt_assembly, catalog[block]))

    def score(job):
        section, block, pose, gt, model = job
        return section, block, pose_flags(pose, gt, model)

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(score, jobs))
    else:
        results = [score(j) for j in jobs]

    passed = {s: {} for s in SECTIONS}
    totals = {s: {} for s in SECTIONS}
    for section, block, flags in results:
        tot = totals[section].setdefault(block, 0)
        totals[section][block] = tot + 1
        acc = passed[section].setdefault(block, {k: 0 for k in METRIC_KEYS})
        for k in METRIC_KEYS:
            acc[k] += int(flags[k])

    report = MetricsReport()
    for section in SECTIONS:
        blocks = sorted(totals[section])
        if not blocks:
            continue
        report.per_block[section] = {}
        report.counts[section] = {}
        for b in blocks:
            n = totals[section][b]
            report.per_block[section][b] = {
                k: 100.0 * passed[section][b][k] / n for k in METRIC_KEYS
            }
            report.counts[section][b] = n
        report.means[section] = {
            k: float(np.mean([report.per_block[section][b][k] for b in blocks]))
            for k in METRIC_KEYS
        }
    return report


def write_predictions(path: str, predictions) -> None:
    """JSON-lines predictions: {record_id, base, target, assembly} poses."""
    with open(path, "w", encoding="utf-8") as f:
        for p in predictions:
            doc = {"v": 1, "record_id": p["record_id"]}
            for key in ("base", "target", "assembly"):
                if p.get(key) is not None:
                    doc[key] = pose_to_json(p[key])
            f.write(json.dumps(doc, separators=(",", ":")) + "\n")


def load_predictions(path: str) -> list:
    preds = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            p = {"record_id": doc["record_id"]}
            for key in ("base", "target", "assembly"):
                p[key] = pose_from_json(doc[key]) if key in doc else None
            preds.append(p)
    return preds


def eval_files(records_path: str, predictions_path: str) -> MetricsReport:
    """Pure function of the two files: same bytes in, same report out."""
    return recall_table(load_records(records_path), load_predictions(predictions_path))


_COLUMNS = ("0.02d", "0.05d", "0.1d", "2deg2cm", "5deg5cm")
_TITLES = {"object": "6D Object Pose", "assembly": "6D Assembly Pose"}


def format_report(report: MetricsReport) -> str:
    """Fixed-width text table, two decimals (ADD(-S) recall in percent)."""
    lines = []
    for section in SECTIONS:
        if section not in report.per_block:
            continue
        lines.append(f"=== {_TITLES[section]} ===")
        header = f"{'block':<8}" + "".join(f"{c:>10}" for c in _COLUMNS) + f"{'n':>8}"
        lines.append(header)
        for b in report.block_ids(section):
            row = report.per_block[section][b]
            vals = "".join(f"{row[k]:>10.2f}" for k in METRIC_KEYS)
            lines.append(f"{b:<8}{vals}{report.counts[section][b]:>8}")
        vals = "".join(f"{report.means[section][k]:>10.2f}" for k in METRIC_KEYS)
        lines.append(f"{'mean':<8}{vals}{'':>8}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    """Parse format_report output back into numbers (round-trip contract)."""
    out = {}
    section = None
    for line in text.splitlines():
        line = line.rstrip()
        if line.startswith("==="):
            title = line.strip("= ").strip()
            section = {v: k for k, v in _TITLES.items()}[title]
            out[section] = {}
            continue
        if not line or line.split()[0] == "block" or section is None:
            continue
        parts = line.split()
        block = parts[0]
        vals = [float(x) for x in parts[1 : 1 + len(METRIC_KEYS)]]
        out[section][block] = dict(zip(METRIC_KEYS, vals))
    return out


def report_csv_rows(report: MetricsReport) -> list:
    rows = [("section", "block", *METRIC_KEYS, "n")]
    for section in SECTIONS:
        if section not in report.per_block:
            continue
        for b in report.block_ids(section):
            r = report.per_block[section][b]
            rows.append(
                (section, b, *(f"{r[k]:.2f}" for k in METRIC_KEYS), str(report.counts[section][b]))
            )
        m = report.means[section]
        rows.append((section, "mean", *(f"{m[k]:.2f}" for k in METRIC_KEYS), ""))
    return rows


def write_report_csv(path: str, report: MetricsReport) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in report_csv_rows(report):
            f.write(",".join(row) + "\n")


def read_report_csv(path: str) -> MetricsReport:
    report = MetricsReport()
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        if header[:2] != ["section", "block"]:
            raise ConfigError(f"not a metrics csv: {path}")
        for line in f:
            parts = line.strip().split(",")
            if len(parts) < 2 + len(METRIC_KEYS):
                continue
            section, block = parts[0], parts[1]
            vals = {k: float(v) for k, v in zip(METRIC_KEYS, parts[2 : 2 + len(METRIC_KEYS)])}
            if block == "mean":
                report.means[section] = vals
            else:
                report.per_block.setdefault(section, {})[block] = vals
                n = parts[2 + len(METRIC_KEYS)]
                report.counts.setdefault(section, {})[block] = int(n) if n else 0
    return report
