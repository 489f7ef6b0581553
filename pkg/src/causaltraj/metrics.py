"""Displacement-error metrics over k sampled futures.

Two families: per-agent metrics (each agent may pick its best scenario
independently) and joint metrics (one scenario must serve the whole scene).
Both are derived from the same per-scenario, per-agent error table so the
orderings min_ade <= min_jade and min_fde <= min_jfde hold exactly, not just
up to rounding.

All arithmetic is float64. Shapes: predictions [k, F, N, 2] (time-major like
the trajectory container), ground truth [F, N, 2].
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

COURT_TO_METERS = 28.0 / 94.0  # 94 ft playing surface mapped onto a 28 m one


def _check(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim != 4 or pred.shape[-1] != 2:
        raise ShapeError(f"predictions must be [k, F, N, 2], got {pred.shape}")
    if gt.shape != pred.shape[1:]:
        raise ShapeError(f"ground truth {gt.shape} does not match predictions {pred.shape}")
    return pred, gt


def error_table(pred, gt) -> np.ndarray:
    """Euclidean errors per (scenario, frame, agent): [k, F, N]."""
    pred, gt = _check(pred, gt)
    d = pred - gt[None]
    return np.sqrt((d * d).sum(axis=-1))


def ade_table(pred, gt) -> np.ndarray:
    """Per-scenario, per-agent displacement error averaged over frames: [k, N]."""
    return error_table(pred, gt).mean(axis=1)


def fde_table(pred, gt) -> np.ndarray:
    """Per-scenario, per-agent error at the final frame: [k, N]."""
    return error_table(pred, gt)[:, -1, :]


def min_ade(pred, gt) -> float:
    """Each agent independently keeps its best scenario; mean over agents."""
    return float(ade_table(pred, gt).min(axis=0).mean())


def min_fde(pred, gt) -> float:
    return float(fde_table(pred, gt).min(axis=0).mean())


def min_jade(pred, gt) -> float:
    """One scenario serves the whole scene; best scene-average error."""
    return float(ade_table(pred, gt).mean(axis=1).min())


def min_jfde(pred, gt) -> float:
    return float(fde_table(pred, gt).mean(axis=1).min())


def average_jade(pred, gt) -> float:
    """Scene-average error averaged over all scenarios instead of the best."""
    return float(ade_table(pred, gt).mean())


def evaluate(pred, gt, slice_frames: int | None = None, scale: float = 1.0) -> dict:
    """All metrics at once; optionally truncated to the first ``slice_frames``.

    The final-displacement metrics always refer to the last frame of the
    (possibly truncated) slice. ``scale`` multiplies every reported value,
    e.g. ``COURT_TO_METERS`` to convert court units.
    """
    pred, gt = _check(pred, gt)
    if slice_frames is not None:
        if not 1 <= slice_frames <= pred.shape[1]:
            raise ShapeError(
                f"slice_frames {slice_frames} out of range for horizon {pred.shape[1]}"
            )
        pred = pred[:, :slice_frames]
        gt = gt[:slice_frames]
    return {
        "k": int(pred.shape[0]),
        "horizon": int(pred.shape[1]),
        "min_ade": min_ade(pred, gt) * scale,
        "min_fde": min_fde(pred, gt) * scale,
        "min_jade": min_jade(pred, gt) * scale,
        "min_jfde": min_jfde(pred, gt) * scale,
        "average_jade": average_jade(pred, gt) * scale,
    }


def evaluate_batch(preds, gts, slice_frames: int | None = None, scale: float = 1.0) -> dict:
    """Mean of :func:`evaluate` over cases; preds [C, k, F, N, 2], gts [C, F, N, 2]."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.ndim != 5 or gts.ndim != 4 or preds.shape[0] != gts.shape[0]:
        raise ShapeError(f"batch shapes {preds.shape} / {gts.shape} inconsistent")
    cases = [evaluate(p, g, slice_frames=slice_frames, scale=scale) for p, g in zip(preds, gts)]
    out = {"cases": len(cases)}
    for key in ("min_ade", "min_fde", "min_jade", "min_jfde", "average_jade"):
        out[key] = float(np.mean([c[key] for c in cases]))
    out["k"] = cases[0]["k"]
    out["horizon"] = cases[0]["horizon"]
    return out
