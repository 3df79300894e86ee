"""Evaluation metrics over hard label maps: Dice, HD95, and confusion-derived.

All routines work on integer label maps and use exact integer counting, so
they agree bitwise with brute-force pixel-loop oracles.  Undefined values
(empty classes, zero denominators) are reported as None rather than numbers.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def _check_pair(pred: np.ndarray, truth: np.ndarray):
    if pred.shape != truth.shape or pred.ndim != 2:
        raise DimensionError(f"mask pair shapes differ or not 2-d: {pred.shape} vs {truth.shape}")


def dice_score(pred: np.ndarray, truth: np.ndarray, cls: int) -> float:
    """2|P & T| / (|P| + |T|); vacuously 1.0 when the class is absent from both."""
    _check_pair(pred, truth)
    p = pred == cls
    t = truth == cls
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def boundary_pixels(mask: np.ndarray, cls: int) -> np.ndarray:
    """(N, 2) coordinates of class pixels with a 4-neighbour outside the class.

    Pixels on the array border count as boundary (outside the array is
    outside the class).
    """
    inside = mask == cls
    padded = np.pad(inside, 1, constant_values=False)
    core = padded[1:-1, 1:-1]
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(core & ~interior)


def _directed_h95(src: np.ndarray, dst: np.ndarray) -> float:
    # exact integer squared distances, sqrt only at the end
    d2 = (
        (src[:, 0:1] - dst[None, :, 0]) ** 2 + (src[:, 1:2] - dst[None, :, 1]) ** 2
    )
    mins = np.sqrt(d2.min(axis=1).astype(np.float64))
    mins.sort()
    rank = int(np.ceil(0.95 * mins.size)) - 1  # nearest-rank percentile
    return float(mins[rank])


def hausdorff95(pred: np.ndarray, truth: np.ndarray, cls: int) -> float | None:
    """Symmetric 95th-percentile boundary distance in pixel units.

    None when the class is empty in either mask (undefined, not zero).
    """
    _check_pair(pred, truth)
    a = boundary_pixels(pred, cls).astype(np.int64)
    b = boundary_pixels(truth, cls).astype(np.int64)
    if a.size == 0 or b.size == 0:
        return None
    return max(_directed_h95(a, b), _directed_h95(b, a))


def confusion_metrics(pred: np.ndarray, truth: np.ndarray, cls: int) -> dict:
    """IoU / SE / SP / ACC from the one-vs-rest confusion table.

    Zero-denominator entries come back as None.
    """
    _check_pair(pred, truth)
    p = pred == cls
    t = truth == cls
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    tn = int((~p & ~t).sum())
    total = tp + fp + fn + tn
    return {
        "iou": tp / (tp + fp + fn) if tp + fp + fn else None,
        "se": tp / (tp + fn) if tp + fn else None,
        "sp": tn / (tn + fp) if tn + fp else None,
        "acc": (tp + tn) / total if total else None,
    }


def case_metrics(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> dict:
    """Per-class metrics for one mask pair, with vacuous/undefined flags."""
    classes = {}
    for cls in range(num_classes):
        in_truth = bool((truth == cls).any())
        in_pred = bool((pred == cls).any())
        entry = {
            "dice": dice_score(pred, truth, cls),
            "vacuous": not in_truth and not in_pred,
            "present_in_truth": in_truth,
            "hd95": hausdorff95(pred, truth, cls),
        }
        entry.update(confusion_metrics(pred, truth, cls))
        classes[str(cls)] = entry
    return {"classes": classes}


def aggregate_cases(cases: list[dict], num_classes: int) -> dict:
    """Mean rows across cases, foreground classes only (class 0 = background).

    Classes absent from a case's ground truth are excluded from that case's
    mean DSC; the number of exclusions is reported.
    """
    per_class_dice: dict[str, list] = {str(c): [] for c in range(num_classes)}
    case_dsc, case_hd = [], []
    confusion_keys = ("iou", "se", "sp", "acc")
    confusion_values: dict[str, list] = {k: [] for k in confusion_keys}
    excluded = 0
    for case in cases:
        dices, hds = [], []
        for cls in range(1, num_classes):
            entry = case["classes"][str(cls)]
            if not entry["present_in_truth"]:
                excluded += 1
                continue
            dices.append(entry["dice"])
            per_class_dice[str(cls)].append(entry["dice"])
            if entry["hd95"] is not None:
                hds.append(entry["hd95"])
            for k in confusion_keys:
                if entry[k] is not None:
                    confusion_values[k].append(entry[k])
        if dices:
            case_dsc.append(float(np.mean(dices)))
        if hds:
            case_hd.append(float(np.mean(hds)))
    report = {
        "mean_dsc": float(np.mean(case_dsc)) if case_dsc else None,
        "mean_hd95": float(np.mean(case_hd)) if case_hd else None,
        "per_class_dsc": {
            cls: (float(np.mean(v)) if v else None) for cls, v in per_class_dice.items()
        },
        "cases": len(cases),
        "excluded_absent_classes": excluded,
    }
    for k in confusion_keys:
        vals = confusion_values[k]
        report[f"mean_{k}"] = float(np.mean(vals)) if vals else None
    return report


def evaluate_pairs(preds, truths, num_classes: int) -> dict:
    """Full metric report: per-case rows plus aggregated means."""
    cases = [case_metrics(p, t, num_classes) for p, t in zip(preds, truths)]
    report = aggregate_cases(cases, num_classes)
    report["per_case"] = cases
    return report
