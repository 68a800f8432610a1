"""Contact sheet (input | mask | output) for an evaluated run."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .imageio import read_pgm_mask, read_ppm, write_ppm
from .metrics import write_csv_rows


class ReportError(RuntimeError):
    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__("missing artifacts: " + ", ".join(missing))


def mask_panel(m: np.ndarray) -> np.ndarray:
    """Preserved pixels white, generated pixels black, as RGB bytes."""
    return np.repeat((np.asarray(m, dtype=np.uint8) * 255)[:, :, None], 3, axis=2)


def contact_sheet(triples: list[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> np.ndarray:
    """One row per (input, mask, output) triple; panels abut with no padding."""
    rows = [np.concatenate([inp, mask_panel(m), out], axis=1) for inp, m, out in triples]
    return np.concatenate(rows, axis=0)


def report_render(eval_json, out_dir) -> dict:
    """Render ``contact_sheet.ppm`` and ``report.csv`` from an ``eval.json``.

    Image locations come from the ``results_dir``/``masks_dir``/``references_dir``
    entries in the report's meta. Returns a summary dict; ``sheet`` is None for
    an empty report. Raises ReportError listing every absent file.
    """
    eval_json = Path(eval_json)
    if not eval_json.exists():
        raise ReportError([str(eval_json)])
    report = json.loads(eval_json.read_text())
    meta = report.get("meta", {})
    rows = report.get("images", [])
    if not rows:
        return {"sheet": None, "rows": 0, "message": "no evaluated images; contact sheet not written"}
    dirs = {k: Path(meta.get(k, "")) for k in ("results_dir", "masks_dir", "references_dir")}
    paths = [(dirs["references_dir"] / f"{r['stem']}.ppm", dirs["masks_dir"] / f"{r['stem']}.pgm",
              dirs["results_dir"] / f"{r['stem']}.ppm") for r in rows]
    missing = [str(p) for trio in paths for p in trio if not p.exists()]
    if missing:
        raise ReportError(missing)
    triples = [(read_ppm(a), read_pgm_mask(b), read_ppm(c)) for a, b, c in paths]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sheet = contact_sheet(triples)
    write_ppm(out / "contact_sheet.ppm", sheet)
    write_csv_rows(out / "report.csv", ["row", "stem", "cd", "psnr_preserved", "psnr_generated"],
                   [[i, r["stem"], r["cd"], "exact" if r["psnr_preserved"] is None else r["psnr_preserved"],
                     "exact" if r["psnr_generated"] is None else r["psnr_generated"]] for i, r in enumerate(rows)])
    return {"sheet": str(out / "contact_sheet.ppm"), "rows": len(rows), "shape": list(sheet.shape)}
