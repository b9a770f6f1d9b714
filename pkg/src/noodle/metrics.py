"""Detection and classification metrics plus the score-report emitter.

AUROC uses the rank-sum form of the Mann-Whitney statistic with half-credit
ties.  The statistic ``U`` is an exact multiple of 1/2 (average ranks are
half-integers), so for the sizes this package handles both ``U`` and the pair
count ``c = n_id * n_ood`` are exact in float64; only the final division
rounds.  Evaluating the smaller of ``U/c`` and ``(c-U)/c`` and reflecting
makes ``auroc(a, b) + auroc(b, a) == 1.0`` hold exactly, not just to
tolerance.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .scoring import select_threshold

REPORT_FORMAT = "noodle-report"

REPORT_CSV_HEADER = "dataset,n_id,n_ood,fpr95,auroc,id_accuracy,seed,config_hash"


@dataclass
class ScoreReport:
    """One ID-vs-OOD evaluation: raw scores plus derived metrics.

    The raw arrays are always persisted so every metric can be re-derived;
    ``fpr95`` is FPR at the report's ``tpr`` level (0.95 unless overridden).
    """

    dataset: str
    id_scores: np.ndarray
    ood_scores: np.ndarray
    fpr95: float
    auroc: float
    id_accuracy: float
    seed: int
    config_hash: str
    tpr: float = 0.95


def fpr_at_tpr(id_scores: np.ndarray, ood_scores: np.ndarray, tpr: float = 0.95) -> float:
    """Fraction of OOD scores at or above the threshold that admits ``tpr``
    of the ID scores (inclusive rule on both sides)."""
    ood_scores = np.asarray(ood_scores, dtype=float).reshape(-1)
    if ood_scores.size == 0:
        raise ValueError("ood_scores must be non-empty")
    tau = select_threshold(id_scores, tpr)
    return float((ood_scores >= tau).sum() / ood_scores.size)


def auroc(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """Probability a random ID score exceeds a random OOD score, ties counted
    half; computed via rank sums in O(n log n)."""
    id_scores = np.asarray(id_scores, dtype=float).reshape(-1)
    ood_scores = np.asarray(ood_scores, dtype=float).reshape(-1)
    n_id, n_ood = id_scores.size, ood_scores.size
    if n_id == 0 or n_ood == 0:
        raise ValueError("both score arrays must be non-empty")
    ranks = rankdata(np.concatenate([id_scores, ood_scores]), method="average")
    u = float(ranks[:n_id].sum()) - n_id * (n_id + 1) / 2.0
    c = float(n_id) * float(n_ood)
    if 2.0 * u <= c:
        return u / c
    return 1.0 - (c - u) / c


def id_accuracy(pred_labels: np.ndarray, clean_labels: np.ndarray) -> float:
    """Fraction of exact label matches."""
    pred_labels = np.asarray(pred_labels).reshape(-1)
    clean_labels = np.asarray(clean_labels).reshape(-1)
    if pred_labels.size == 0 or pred_labels.shape != clean_labels.shape:
        raise ValueError(
            f"need equal-length non-empty label arrays, got {pred_labels.shape} and {clean_labels.shape}"
        )
    return float((pred_labels == clean_labels).mean())


def make_report(
    dataset: str,
    id_scores: np.ndarray,
    ood_scores: np.ndarray,
    id_acc: float,
    seed: int,
    config_hash: str,
    tpr: float = 0.95,
) -> ScoreReport:
    """Compute the metric pair from raw scores and bundle everything."""
    return ScoreReport(
        dataset=dataset,
        id_scores=np.asarray(id_scores, dtype=float).reshape(-1),
        ood_scores=np.asarray(ood_scores, dtype=float).reshape(-1),
        fpr95=fpr_at_tpr(id_scores, ood_scores, tpr),
        auroc=auroc(id_scores, ood_scores),
        id_accuracy=float(id_acc),
        seed=int(seed),
        config_hash=config_hash,
        tpr=float(tpr),
    )


def emit_report(report: ScoreReport, path: str | os.PathLike, fmt: str = "json") -> None:
    """Write a report as JSON (full, re-derivable) or as one CSV table row.

    The JSON document always includes the raw score arrays; floats use
    shortest round-trip formatting, so re-parsing recomputes the metrics
    bit-identically.  The CSV layout is one row per evaluated OOD set under
    the header in ``REPORT_CSV_HEADER``.
    """
    if fmt == "json":
        doc = {
            "format": REPORT_FORMAT,
            "version": 1,
            "dataset": report.dataset,
            "seed": report.seed,
            "config_hash": report.config_hash,
            "tpr": report.tpr,
            "metrics": {
                "fpr95": report.fpr95,
                "auroc": report.auroc,
                "id_accuracy": report.id_accuracy,
            },
            "id_scores": report.id_scores.tolist(),
            "ood_scores": report.ood_scores.tolist(),
        }
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                json.dump(doc, fh, sort_keys=True, indent=1)
                fh.write("\n")
        except OSError as exc:
            raise OSError(f"cannot write report {path}: {exc}") from exc
    elif fmt == "csv":
        row = ",".join(
            [
                report.dataset,
                str(report.id_scores.size),
                str(report.ood_scores.size),
                repr(report.fpr95),
                repr(report.auroc),
                repr(report.id_accuracy),
                str(report.seed),
                report.config_hash,
            ]
        )
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(REPORT_CSV_HEADER + "\n" + row + "\n")
        except OSError as exc:
            raise OSError(f"cannot write report {path}: {exc}") from exc
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def load_report(path: str | os.PathLike) -> ScoreReport:
    """Read back a JSON report."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != REPORT_FORMAT:
        raise ValueError(f"{path}: not a score report")
    return ScoreReport(
        dataset=doc["dataset"],
        id_scores=np.array(doc["id_scores"], dtype=float),
        ood_scores=np.array(doc["ood_scores"], dtype=float),
        fpr95=doc["metrics"]["fpr95"],
        auroc=doc["metrics"]["auroc"],
        id_accuracy=doc["metrics"]["id_accuracy"],
        seed=doc["seed"],
        config_hash=doc["config_hash"],
        tpr=doc["tpr"],
    )
