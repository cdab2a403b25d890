"""Measurement protocol: accuracy, RMSE, IoU, attack reports and transfer
matrices, with CSV/JSON emission stable enough for golden-file tests.

UAP evaluation applies, to each image, the perturbation crafted for the
zone opposite the image's label (one UAP per zone is crafted), which is the
targeted-flip protocol the reported accuracy collapses require.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import Perturbation
from .errors import ConfigError, DataError, ShapeError

CSV_COLUMNS = ["model_id", "dataset_id", "attack", "clean_accuracy",
               "adv_accuracy", "mean_rmse", "mean_iou_original",
               "mean_iou_adversarial", "mean_iterations", "seeds"]


@dataclass
class AttackReport:
    model_id: str
    dataset_id: str
    attack: str
    clean_accuracy: float
    adv_accuracy: float
    mean_rmse: float
    mean_iou_original: float | None = None
    mean_iou_adversarial: float | None = None
    mean_iterations: float | None = None
    seeds: str = ""


@dataclass
class TransferMatrix:
    rows: list
    cols: list
    cells: np.ndarray    # adversarial accuracy, rows = crafting source

    def to_dict(self):
        return {"rows": list(self.rows), "cols": list(self.cols),
                "cells": self.cells.tolist()}


def rmse(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"rmse: shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def iou(pred, ref):
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"iou: shape mismatch {pred.shape} vs {ref.shape}")
    if not np.isin(pred, (0, 1)).all() or not np.isin(ref, (0, 1)).all():
        raise DataError("iou: masks must be binary")
    p = pred.astype(bool)
    r = ref.astype(bool)
    union = (p | r).sum()
    if union == 0:
        return 1.0          # both empty: perfect agreement by convention
    return float((p & r).sum() / union)


def _deltas_for(source, labels, n):
    """Resolve a perturbation source into per-image deltas and metadata."""
    if source is None or source == "none":
        return None, "none", None, ""
    if isinstance(source, dict):        # zone-keyed UAP pair, targeted flip
        if 0 not in source or 1 not in source:
            raise ConfigError("UAP pair must have entries for zones 0 and 1")
        deltas = np.stack([source[1 - int(l)].delta for l in labels])
        seeds = ",".join(sorted({str(source[z].meta.get("seed", "")) for z in (0, 1)}))
        return deltas, "UAP", None, seeds
    if isinstance(source, Perturbation):
        deltas = np.broadcast_to(source.delta, (n,) + source.delta.shape)
        return deltas, source.kind, None, str(source.meta.get("seed", ""))
    # per-image bank
    bank = list(source)
    if len(bank) != n:
        raise ConfigError(f"perturbation bank has {len(bank)} entries for {n} images")
    deltas = np.stack([p.delta for p in bank])
    iters = [p.meta.get("iterations") for p in bank]
    mean_iters = float(np.mean([i for i in iters if i is not None])) \
        if any(i is not None for i in iters) else None
    return deltas, bank[0].kind, mean_iters, ""


def evaluate_attack(model, dataset, source, model_id=None, dataset_id=None,
                    adv_masks=None, batch_size=128):
    """Full protocol for one (model, dataset, attack) cell.

    `source` is None for the clean row, a Perturbation (URN or single UAP),
    a {zone: Perturbation} pair (targeted UAP), or a per-image sequence.
    Adversarial images are clamp(x + delta, 0, 255).
    """
    images = np.asarray(dataset.images, np.float32)
    labels = np.asarray(dataset.labels)
    n = len(images)
    deltas, kind, mean_iters, seeds = _deltas_for(source, labels, n)

    if deltas is None:
        adv = images
    else:
        if deltas.shape[1:] != images.shape[1:]:
            raise ShapeError(f"perturbation shape {deltas.shape[1:]} does not "
                             f"match images {images.shape[1:]}")
        adv = np.clip(images + deltas, 0.0, 255.0)

    clean_pred, adv_pred = [], []
    for i in range(0, n, batch_size):
        clean_pred.append(model.classify_batch(images[i:i + batch_size]))
        adv_pred.append(model.classify_batch(adv[i:i + batch_size]))
    clean_pred = np.concatenate(clean_pred)
    adv_pred = np.concatenate(adv_pred)

    per_image_rmse = [rmse(images[i], adv[i]) for i in range(n)]

    iou_orig = iou_adv = None
    if getattr(model, "has_segmentation", False):
        orig_scores, adv_scores = [], []
        for i in range(0, n, batch_size):
            pred = model.segment_batch(adv[i:i + batch_size])
            for j, pm in enumerate(pred):
                orig_scores.append(iou(pm, dataset.masks[i + j]))
                if adv_masks is not None:
                    adv_scores.append(iou(pm, adv_masks[i + j]))
        iou_orig = float(np.mean(orig_scores))
        if adv_masks is not None:
            iou_adv = float(np.mean(adv_scores))

    return AttackReport(
        model_id=model_id or getattr(model, "arch", "model"),
        dataset_id=dataset_id or getattr(dataset, "style", "dataset"),
        attack=kind,
        clean_accuracy=float((clean_pred == labels).mean()),
        adv_accuracy=float((adv_pred == labels).mean()),
        mean_rmse=float(np.mean(per_image_rmse)),
        mean_iou_original=iou_orig,
        mean_iou_adversarial=iou_adv,
        mean_iterations=mean_iters,
        seeds=seeds,
    )


def transfer_matrix(targets, uap_bank, urn=None):
    """Cross matrix of adversarial accuracies.

    targets: ordered {name: (model, dataset)}; uap_bank: {name: UAP pair}.
    Row = crafting source, column = evaluation target. An extra "URN" row is
    appended when `urn` (a Perturbation) is given.
    """
    names = list(targets)
    for name in names:
        if name not in uap_bank:
            raise ConfigError(f"no UAP crafted for source {name!r}")
    rows = []
    for src in names:
        row = []
        for tgt in names:
            model, dataset = targets[tgt]
            row.append(evaluate_attack(model, dataset, uap_bank[src]).adv_accuracy)
        rows.append(row)
    row_names = list(names)
    if urn is not None:
        rows.append([evaluate_attack(*targets[tgt], urn).adv_accuracy
                     for tgt in names])
        row_names.append("URN")
    return TransferMatrix(row_names, names, np.asarray(rows, dtype=np.float64))


# ---------------------------------------------------------------------------
# report files

def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_report_csv(path, reports):
    lines = [",".join(CSV_COLUMNS)]
    for rep in reports:
        row = asdict(rep)
        lines.append(",".join(_format_cell(row[c]) for c in CSV_COLUMNS))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_report_json(path, reports, metadata=None):
    payload = {"metadata": metadata or {}, "reports": [asdict(r) for r in reports]}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_matrix_csv(path, matrix):
    lines = ["source," + ",".join(matrix.cols)]
    for name, row in zip(matrix.rows, matrix.cells):
        lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
