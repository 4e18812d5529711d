"""Post-hoc studies linking segmentation scores to tumor composition.

Two views over a set of scored cases: (a) five equal-count bins by
per-case mean Dice, reporting the average ED/NCR/ET volumes in each bin,
which exposes whether a particular subregion's size tracks difficulty;
(b) the lowest-Dice bin subdivided into five quintiles by enhancing-tumor
volume, reporting mean Dice per quintile. Ties in either sort resolve by
case id, so the analyses are deterministic for identical inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import REGIONS, MetricsReport

N_BINS = 5


@dataclass
class EvalRecord:
    """One scored case: metrics plus reference-region voxel counts."""
    case_id: str
    dice: dict       # region -> float
    hd95: dict       # region -> float
    volumes: dict    # "ED"/"NCR"/"ET" -> int (reference voxels)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([self.dice[r] for r in REGIONS]))


def eval_record(report: MetricsReport, volumes: dict) -> EvalRecord:
    return EvalRecord(
        case_id=report.case_id,
        dice={r: report.scores[r].dice for r in REGIONS},
        hd95={r: report.scores[r].hd95 for r in REGIONS},
        volumes={k: int(v) for k, v in volumes.items()})


EVAL_CSV_HEADER = ["case_id", "dice_wt", "dice_tc", "dice_et",
                   "hd95_wt", "hd95_tc", "hd95_et",
                   "ed_volume", "ncr_volume", "et_volume"]


def write_eval_csv(path, records: list[EvalRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_CSV_HEADER)
        for r in sorted(records, key=lambda r: r.case_id):
            w.writerow([r.case_id,
                        *(f"{r.dice[reg]:.6f}" for reg in REGIONS),
                        *(f"{r.hd95[reg]:.6f}" for reg in REGIONS),
                        r.volumes["ED"], r.volumes["NCR"], r.volumes["ET"]])


def read_eval_csv(path) -> list[EvalRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EvalRecord(
                case_id=row["case_id"],
                dice={"WT": float(row["dice_wt"]), "TC": float(row["dice_tc"]),
                      "ET": float(row["dice_et"])},
                hd95={"WT": float(row["hd95_wt"]), "TC": float(row["hd95_tc"]),
                      "ET": float(row["hd95_et"])},
                volumes={"ED": int(row["ed_volume"]),
                         "NCR": int(row["ncr_volume"]),
                         "ET": int(row["et_volume"])}))
    return out


def _dice_bins(records: list[EvalRecord]) -> list[list[EvalRecord]]:
    if len(records) < N_BINS:
        raise ValueError(f"need at least {N_BINS} scored cases")
    ordered = sorted(records, key=lambda r: (r.mean_dice, r.case_id))
    return [list(chunk) for chunk in np.array_split(np.array(ordered,
                                                             dtype=object),
                                                    N_BINS)]


def analyze_dice_bins(records: list[EvalRecord]) -> list[dict]:
    """Equal-count mean-Dice bins (1 = lowest) with mean region volumes."""
    rows = []
    for i, bin_recs in enumerate(_dice_bins(records), start=1):
        dices = [r.mean_dice for r in bin_recs]
        rows.append({
            "bin": i, "count": len(bin_recs),
            "dice_lo": min(dices), "dice_hi": max(dices),
            "mean_ed_volume": float(np.mean([r.volumes["ED"] for r in bin_recs])),
            "mean_ncr_volume": float(np.mean([r.volumes["NCR"] for r in bin_recs])),
            "mean_et_volume": float(np.mean([r.volumes["ET"] for r in bin_recs]))})
    return rows


def analyze_et_quintiles(records: list[EvalRecord]) -> list[dict]:
    """Quintiles by |ET| inside the lowest-Dice bin, mean Dice each."""
    lowest = _dice_bins(records)[0]
    if len(lowest) < N_BINS:
        raise ValueError(
            f"lowest Dice bin holds {len(lowest)} cases; need >= {N_BINS}")
    ordered = sorted(lowest, key=lambda r: (r.volumes["ET"], r.case_id))
    rows = []
    for i, chunk in enumerate(np.array_split(np.array(ordered, dtype=object),
                                             N_BINS), start=1):
        recs = list(chunk)
        rows.append({
            "quintile": i, "count": len(recs),
            "mean_et_volume": float(np.mean([r.volumes["ET"] for r in recs])),
            "mean_dice_wt": float(np.mean([r.dice["WT"] for r in recs])),
            "mean_dice_tc": float(np.mean([r.dice["TC"] for r in recs])),
            "mean_dice_et": float(np.mean([r.dice["ET"] for r in recs])),
            "mean_dice": float(np.mean([r.mean_dice for r in recs]))})
    return rows


def write_rows_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v)
                        for k, v in row.items()})


def read_rows_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
