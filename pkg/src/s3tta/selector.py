"""Rotational-consistency scoring and single-policy selection."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import imgeom
from .augment import AugmentationPolicy, AugmentedBundle


@dataclass(frozen=True)
class ConsistencyScore:
    policy: AugmentationPolicy
    mae: float


def consistency_score(bundle: AugmentedBundle) -> ConsistencyScore:
    """Mean over unordered angle pairs of the per-pixel MAE between rotated-back variants."""
    angles = sorted(bundle.variants)
    if len(angles) < 2:
        raise ValueError("consistency needs at least two rotation variants")
    back = np.stack(
        [imgeom.rotate_back(bundle.variants[k], k) for k in angles]
    ).astype(np.float64)
    pair_maes = [np.abs(back[i] - back[j]).mean() for i, j in combinations(range(len(angles)), 2)]
    return ConsistencyScore(bundle.policy, float(np.mean(pair_maes)))


def select(bundles: list[AugmentedBundle]) -> tuple[AugmentationPolicy, list[ConsistencyScore]]:
    """Winner is the lowest MAE; ties go to the earliest policy in enumeration order."""
    if not bundles:
        raise ValueError("nothing to select from")
    angle_sets = {frozenset(b.variants) for b in bundles}
    if len(angle_sets) > 1:
        raise ValueError("bundles were built on different angle sets")
    scores = [consistency_score(b) for b in bundles]
    best = min(scores, key=lambda s: (s.mae, s.policy))
    return best.policy, scores


def write_score_log(path, rows, style_ids=None, append: bool = False) -> None:
    """Write ``(image_id, scores, winner)`` triples as CSV.

    Columns: image_id, scale, style_id, mae, selected_flag. Identity-style
    policies are logged with style_id ``none``.
    """
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(["image_id", "scale", "style_id", "mae", "selected_flag"])
        for image_id, scores, winner in rows:
            for s in scores:
                j = s.policy.style_index
                sid = "none" if j < 0 else (style_ids[j] if style_ids else str(j))
                writer.writerow(
                    [image_id, s.policy.scale, sid, f"{s.mae:.8f}", int(s.policy == winner)]
                )
