"""Seam and preservation metrics on byte-scale RGB images."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import read_pgm_mask, read_ppm
from .masks import MaskError, boundary_pairs, check_mask

EXACT = math.inf  # PSNR of identical regions


def color_distance(image: np.ndarray, m: np.ndarray) -> float:
    """Mean Euclidean RGB distance over all 4-adjacent preserved/generated pixel pairs."""
    img = np.asarray(image, dtype=np.float64)
    m = check_mask(m)
    if img.shape[:2] != m.shape or img.ndim != 3:
        raise MaskError(f"color_distance: image {img.shape} does not match mask {m.shape}")
    pairs = boundary_pairs(m)
    d = img[pairs[:, 0], pairs[:, 1]] - img[pairs[:, 2], pairs[:, 3]]
    return float(np.mean(np.sqrt(np.sum(d * d, axis=1))))


def masked_psnr(output: np.ndarray, reference: np.ndarray, m: np.ndarray, region: str = "preserved") -> float:
    """PSNR (dB, peak 255) over the selected region; ``math.inf`` when the region matches exactly."""
    out = np.asarray(output, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if out.shape != ref.shape:
        raise ValueError(f"masked_psnr: shape mismatch {out.shape} vs {ref.shape}")
    m = check_mask(m)
    if region not in ("preserved", "generated"):
        raise ValueError(f"region must be 'preserved' or 'generated', got {region!r}")
    sel = m == (1 if region == "preserved" else 0)
    if not sel.any():
        raise ValueError(f"masked_psnr: the {region} region is empty")
    mse = float(np.mean((out[sel] - ref[sel]) ** 2))
    if mse == 0.0:
        return EXACT
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _finite_or_none(v: float):
    return None if math.isinf(v) else v


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    missing: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict:
        if not self.rows:
            return {"count": 0}
        agg: dict = {"count": len(self.rows)}
        for key in ("cd", "psnr_preserved", "psnr_generated", "mse"):
            vals = [r[key] for r in self.rows]
            finite = [v for v in vals if not math.isinf(v)]
            agg[key] = float(np.mean(finite)) if finite else EXACT
            agg[f"{key}_exact_count"] = len(vals) - len(finite)
        return agg

    def to_json(self) -> dict:
        agg = {k: (_finite_or_none(v) if isinstance(v, float) else v) for k, v in self.aggregate.items()}
        rows = [{k: (_finite_or_none(v) if isinstance(v, float) else v) for k, v in r.items()} for r in self.rows]
        return {"aggregate": agg, "images": rows, "missing": self.missing, "meta": self.meta}

    def to_csv(self) -> str:
        lines = ["stem,cd,psnr_preserved,psnr_generated,mse"]
        for r in self.rows:
            vals = [r["cd"], r["psnr_preserved"], r["psnr_generated"], r["mse"]]
            lines.append(",".join([r["stem"]] + ["exact" if math.isinf(v) else f"{v:.6f}" for v in vals]))
        return "\n".join(lines) + "\n"


def evaluate_image(out: np.ndarray, ref: np.ndarray, m: np.ndarray) -> dict:
    return {
        "cd": color_distance(out, m),
        "psnr_preserved": masked_psnr(out, ref, m, "preserved"),
        "psnr_generated": masked_psnr(out, ref, m, "generated"),
        "mse": float(np.mean((np.asarray(out, np.float64) - np.asarray(ref, np.float64)) ** 2)),
    }


def evaluate_run(results_dir, masks_dir, references_dir, out_dir=None, meta: dict | None = None) -> EvalReport:
    """Match ``<stem>.ppm`` results with ``<stem>.pgm`` masks and ``<stem>.ppm`` references."""
    results_dir, masks_dir, references_dir = Path(results_dir), Path(masks_dir), Path(references_dir)
    report = EvalReport(meta=dict(meta or {}))
    stems = sorted(p.stem for p in results_dir.glob("*.ppm")) if results_dir.is_dir() else []
    for stem in stems:
        mpath, rpath = masks_dir / f"{stem}.pgm", references_dir / f"{stem}.ppm"
        absent = [str(p) for p in (mpath, rpath) if not p.exists()]
        if absent:
            report.missing.append({"stem": stem, "missing": absent})
            continue
        row = {"stem": stem}
        row.update(evaluate_image(read_ppm(results_dir / f"{stem}.ppm"), read_ppm(rpath), read_pgm_mask(mpath)))
        report.rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(report.to_csv())
        (out / "eval.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    return report


def write_csv_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
