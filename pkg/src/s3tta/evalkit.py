"""Instance and semantic segmentation metrics, the aggregate-all TTA baseline and
feature-embedding projection."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .augment import build_bundles
from .segnet import bundle_probs, decode_instances, merge_probs
from .styletx import to_tensor

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7)


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    iou_threshold: float

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom


def iou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """IoU between every predicted instance (rows) and ground-truth instance (columns).

    Instance ids are taken in ascending order of their nonzero values.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p_ids = np.unique(pred[pred > 0])
    g_ids = np.unique(gt[gt > 0])
    if len(p_ids) == 0 or len(g_ids) == 0:
        return np.zeros((len(p_ids), len(g_ids)))
    p_idx = np.searchsorted(p_ids, pred.ravel())
    g_idx = np.searchsorted(g_ids, gt.ravel())
    p_fg = pred.ravel() > 0
    g_fg = gt.ravel() > 0
    both = p_fg & g_fg
    inter = np.zeros((len(p_ids), len(g_ids)))
    np.add.at(inter, (p_idx[both], g_idx[both]), 1)
    p_area = np.bincount(p_idx[p_fg], minlength=len(p_ids)).astype(float)
    g_area = np.bincount(g_idx[g_fg], minlength=len(g_ids)).astype(float)
    union = p_area[:, None] + g_area[None, :] - inter
    return inter / union


def match(pred: np.ndarray, gt: np.ndarray, threshold: float) -> MatchResult:
    """One-to-one matching that maximizes the number of pairs with IoU >= threshold."""
    iou = iou_matrix(pred, gt)
    n_pred, n_gt = iou.shape
    tp = 0
    if n_pred and n_gt:
        ok = iou >= threshold
        rows, cols = linear_sum_assignment(ok, maximize=True)
        tp = int(ok[rows, cols].sum())
    return MatchResult(tp, n_pred - tp, n_gt - tp, threshold)


def f1_at(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    return match(pred, gt, threshold).f1


def dice_jaccard(pred_fg: np.ndarray, gt_fg: np.ndarray) -> tuple[float, float]:
    a = np.asarray(pred_fg, dtype=bool)
    b = np.asarray(gt_fg, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    inter = np.count_nonzero(a & b)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0, 1.0
    union = total - inter
    return 2 * inter / total, inter / union


def baseline_aggregate_all(img, st, net, bank, policies, angles, min_area: int = 9) -> np.ndarray:
    """Average the rotated-back, resized-back ProbMaps of every variant of every policy."""
    size = img.shape[:2]
    merged = []
    for bundle in build_bundles(img, policies, angles, st, bank):
        maps = bundle_probs(net, bundle)
        merged.append(merge_probs(maps, size) * len(maps))
    n = sum(len(angles) for _ in policies)
    total = np.sum(np.stack(merged), axis=0, dtype=np.float64) / n
    return decode_instances(total.astype(np.float32), min_area)


def embedding_vectors(images, st) -> np.ndarray:
    """Global-average-pooled deepest encoder feature of each image."""
    with torch.no_grad():
        return np.stack([st.encode(to_tensor(im))[-1].mean(dim=(2, 3))[0].double().numpy() for im in images])


def pca_2d(vectors: np.ndarray) -> np.ndarray:
    """Project onto the top two principal components (sign fixed by the largest loading)."""
    if len(vectors) < 3:
        raise ValueError("need at least three points for a 2-D projection")
    centered = vectors - vectors.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    signs = np.sign(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)])
    signs[signs == 0] = 1
    comps = comps * signs[:, None]
    pts = centered @ comps.T
    if pts.shape[1] < 2:
        pts = np.hstack([pts, np.zeros((len(pts), 2 - pts.shape[1]))])
    return pts


def embed_project(images, st) -> np.ndarray:
    """``(N, 2)`` principal-component projection of the images' encoder embeddings."""
    if len(images) < 3:
        raise ValueError("need at least three images")
    return pca_2d(embedding_vectors(images, st))


def mean_pairwise_distance(points: np.ndarray) -> float:
    diff = points[:, None, :] - points[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    n = len(points)
    return float(d.sum() / (n * (n - 1)))


def write_metrics_report(path, rows, thresholds=DEFAULT_THRESHOLDS, note: str | None = None) -> list[dict]:
    """Per-image rows ``(image_id, method, pred, gt)`` -> CSV with one summary row per method.

    Values are percentages with one decimal. Matching is optimal one-to-one
    assignment; a comment header records this.
    """
    out = []
    per_method: dict[str, list] = {}
    for image_id, method, pred, gt in rows:
        dice, jac = dice_jaccard(pred > 0, gt > 0)
        for t in thresholds:
            f1 = f1_at(pred, gt, t)
            out.append({"image_id": image_id, "method": method, "tau": t,
                        "f1": f1 * 100, "dice": dice * 100, "jaccard": jac * 100})
            per_method.setdefault(method, []).append(out[-1])
    summary = []
    for method, recs in per_method.items():
        for t in thresholds:
            sel = [r for r in recs if r["tau"] == t]
            summary.append({"image_id": "ALL", "method": method, "tau": t,
                            "f1": float(np.mean([r["f1"] for r in sel])),
                            "dice": float(np.mean([r["dice"] for r in sel])),
                            "jaccard": float(np.mean([r["jaccard"] for r in sel]))})
    with open(path, "w", newline="") as fh:
        fh.write("# matching: optimal one-to-one assignment on IoU >= tau\n")
        if note:
            fh.write(f"# {note}\n")
        writer = csv.DictWriter(fh, fieldnames=["image_id", "method", "tau", "f1", "dice", "jaccard"])
        writer.writeheader()
        for r in out + summary:
            writer.writerow({**r, "f1": f"{r['f1']:.1f}", "dice": f"{r['dice']:.1f}", "jaccard": f"{r['jaccard']:.1f}"})
    return summary
