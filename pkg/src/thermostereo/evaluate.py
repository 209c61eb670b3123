"""Evaluation per condition tag, single-pair inference and benchmark tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data.codecs import encode_disparity_png16, read_image
from .data.manifest import DatasetManifest
from .data.sample import StereoSample, crop_pad, to_tensors
from .metrics import DEFAULT_THRESHOLDS, MetricReport, compute_metrics, render_error_map

log = logging.getLogger(__name__)


@torch.no_grad()
def predict(model, sample: StereoSample) -> np.ndarray:
    """Full-resolution disparity for one sample, padding cropped."""
    model.eval()
    device = next(model.parameters()).device
    t = to_tensors(sample)
    out = model(t.left[None].to(device), t.right[None].to(device))
    return crop_pad(out.d_final[0, 0], t.pad).cpu().numpy()


def oracle_predictor(sample: StereoSample) -> np.ndarray:
    """Bypass mode: returns the ground truth itself."""
    return sample.gt.data


@dataclass
class EvalResult:
    per_condition: dict[str, MetricReport]
    aggregate: MetricReport
    n_excluded: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "conditions": {k: v.to_json() for k, v in sorted(self.per_condition.items())},
            "aggregate": self.aggregate.to_json(),
            "n_excluded_no_gt": self.n_excluded,
            **self.extra,
        }

    def table(self) -> str:
        return format_condition_table(self.per_condition, self.aggregate)


def evaluate(predictor, manifest: DatasetManifest, thresholds=DEFAULT_THRESHOLDS, d_max: float = 192,
             dense: bool = True) -> EvalResult:
    """Stream the manifest through ``predictor`` and merge metrics per tag.

    ``predictor`` is a model or any ``StereoSample -> (H, W) array`` callable.
    Ground-truth pixels outside ``(0, d_max)`` are invalid.
    """
    fn = (lambda s: predict(predictor, s)) if isinstance(predictor, torch.nn.Module) else predictor
    per: dict[str, MetricReport] = {}
    excluded = 0
    for sample in manifest.samples(dense=dense):
        if sample.gt is None:
            excluded += 1
            continue
        gt = sample.gt
        valid = gt.valid & (gt.data > 0) & (gt.data < d_max)
        rep = compute_metrics(fn(sample), gt.data, valid, thresholds, d_max, sample.condition_tag)
        tag = sample.condition_tag
        per[tag] = per[tag].merge(rep) if tag in per else rep
    if excluded:
        log.warning("%d samples without ground truth were excluded", excluded)
    agg = MetricReport(outlier_counts={f"{t:g}": 0 for t in thresholds}, condition_tag="all")
    for tag in sorted(per):
        agg = agg.merge(per[tag], tag="all")
    return EvalResult(per, agg, excluded)


@torch.no_grad()
def measure_throughput(model, shape=(256, 640), repeats: int = 3) -> float:
    """Forward passes per second on the current device (batch 1)."""
    model.eval()
    x = torch.rand(1, 1, *shape, device=next(model.parameters()).device)
    model(x, x)
    t0 = time.perf_counter()
    for _ in range(repeats):
        model(x, x)
    return repeats / (time.perf_counter() - t0)


def format_condition_table(per: dict[str, MetricReport], aggregate: MetricReport | None = None) -> str:
    keys = sorted({k for r in per.values() for k in r.outlier_counts}, key=float)
    head = f"{'condition':<10} {'EPE':>8} " + " ".join(f"{'>' + k:>8}" for k in keys) + f" {'samples':>8}"
    lines = [head, "-" * len(head)]
    rows = sorted(per.items()) + ([("all", aggregate)] if aggregate is not None else [])
    for tag, r in rows:
        rates = r.outlier_rates
        lines.append(f"{tag:<10} {r.epe:>8.4f} " + " ".join(f"{rates.get(k, float('nan')):>8.3f}" for k in keys)
                     + f" {r.sample_count:>8d}")
    return "\n".join(lines)


def write_eval(result: EvalResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(result.to_json(), indent=2))
    (out / "metrics.txt").write_text(result.table() + "\n")
    return out / "metrics.json"


@torch.no_grad()
def infer(model, left_path, right_path, out_path, gt_path=None, error_map_path=None) -> np.ndarray:
    """Predict disparity for one image pair and write it as PNG16 (divisor 256)."""
    left, right = read_image(left_path), read_image(right_path)
    if left.shape != right.shape:
        raise ValueError(f"image size mismatch: {left.shape} vs {right.shape}")
    disp = np.clip(predict(model, StereoSample(left, right, id=Path(left_path).stem)), 0, None)
    encode_disparity_png16(disp, out_path)
    if gt_path is not None and error_map_path is not None:
        from .data.manifest import load_disparity
        gt = load_disparity(Path(gt_path))
        render_error_map(disp, gt.data, gt.valid, error_map_path)
    return disp


# ---------------------------------------------------------------------------- report


def _load_run(run_dir: Path) -> dict | None:
    path = run_dir / "metrics.json" if run_dir.is_dir() else run_dir
    try:
        doc = json.loads(path.read_text())
        agg = doc["aggregate"]
        row = {"run": doc.get("run", run_dir.name), "variant": doc.get("variant", ""),
               "params": doc.get("params"), "fps": doc.get("throughput_hz"),
               "epe": float(agg["epe"]), "conditions": {}}
        for tag, rep in doc.get("conditions", {}).items():
            row["conditions"][tag] = {"epe": float(rep["epe"]), **{k: float(v) for k, v in rep["outliers"].items()}}
        row["outliers"] = {k: float(v) for k, v in agg["outliers"].items()}
        return row
    except (OSError, ValueError, KeyError, TypeError) as e:
        log.warning("skipping %s: malformed metrics (%s)", run_dir, e)
        return None


def report(run_dirs, csv_path: str | Path | None = None) -> tuple[list[dict], str]:
    """Merge per-run metrics into one table sorted by aggregate EPE (ascending).

    Columns: per condition EPE and outlier rates, then aggregate EPE, params
    and measured throughput. Returns the rows and the formatted table.
    """
    rows = [r for r in (_load_run(Path(d)) for d in run_dirs) if r is not None]
    rows.sort(key=lambda r: r["epe"])
    tags = sorted({t for r in rows for t in r["conditions"]})
    keys = sorted({k for r in rows for c in r["conditions"].values() for k in c if k != "epe"}, key=float)
    header = ["run", "variant"]
    for t in tags:
        header += [f"{t}/EPE"] + [f"{t}/>{k}" for k in keys]
    header += ["EPE", "params_M", "fps"]
    table_rows = []
    for r in rows:
        line = [r["run"], r["variant"]]
        for t in tags:
            c = r["conditions"].get(t, {})
            line += [c.get("epe", float("nan"))] + [c.get(k, float("nan")) for k in keys]
        nan = float("nan")
        line += [r["epe"], r["params"] / 1e6 if r["params"] else nan, r["fps"] if r["fps"] is not None else nan]
        table_rows.append(line)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(table_rows)
    buf = io.StringIO()
    widths = [max(len(h), 10) for h in header]
    buf.write(" ".join(f"{h:>{w}}" for h, w in zip(header, widths)) + "\n")
    for line in table_rows:
        cells = [f"{v:.4f}" if isinstance(v, float) else str(v) for v in line]
        buf.write(" ".join(f"{c:>{w}}" for c, w in zip(cells, widths)) + "\n")
    return rows, buf.getvalue()
