"""Scale-style augmentation policies and per-policy rotation bundles.

A bundle holds one policy's augmented image at every configured angle, built
in the fixed order rotate -> resize -> stylize.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from . import imgeom
from .styletx import StyleTransfer, adain, feature_stats, to_image, to_tensor

log = logging.getLogger(__name__)

IDENTITY_STYLE = -1
FULL_GRID_SCALES = (0.7, 1.0, 1.5, 2.0)


@dataclass(frozen=True, order=True)
class AugmentationPolicy:
    scale: float
    style_index: int = IDENTITY_STYLE

    @property
    def is_identity_style(self) -> bool:
        return self.style_index == IDENTITY_STYLE


@dataclass
class StyleBank:
    images: list[np.ndarray]
    ids: list[str]
    _feats: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.images) != len(self.ids):
            raise ValueError("style bank needs one id per image")

    def __len__(self) -> int:
        return len(self.images)

    def features(self, model: StyleTransfer) -> list[torch.Tensor]:
        """Deepest encoder feature of every style image.

        Cached per model instance; only valid while the encoder is frozen.
        """
        key = id(model)
        if key not in self._feats:
            with torch.no_grad():
                self._feats = {key: [model.encode(to_tensor(im))[-1] for im in self.images]}
        return self._feats[key]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "manifest.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "id"])
            for i, (sid, im) in enumerate(zip(self.ids, self.images)):
                writer.writerow([i, sid])
                _write_png8(directory / f"{sid}.png", im)

    @classmethod
    def load(cls, directory) -> "StyleBank":
        directory = Path(directory)
        with open(directory / "manifest.csv", newline="") as fh:
            rows = sorted(csv.DictReader(fh), key=lambda r: int(r["index"]))
        ids = [r["id"] for r in rows]
        return cls([_read_png8(directory / f"{sid}.png") for sid in ids], ids)


def _write_png8(path, img: np.ndarray) -> None:
    arr = np.round(img * 255).astype(np.uint8)
    PILImage.fromarray(arr[..., 0] if arr.shape[2] == 1 else arr).save(path)


def _read_png8(path) -> np.ndarray:
    arr = np.asarray(PILImage.open(path))
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr.astype(np.float32) / 255.0


@dataclass
class AugmentedBundle:
    policy: AugmentationPolicy
    variants: dict[int, np.ndarray]
    original_size: tuple[int, int]


def enumerate_policies(scales, bank_size: int, include_identity: bool = False):
    """All scale x style combinations, scale ascending then style index ascending.

    The identity-style policy (index -1) comes first within a scale when enabled.
    """
    scales = sorted(set(float(s) for s in scales))
    if not scales:
        raise ValueError("scale set must not be empty")
    if any(s <= 0 for s in scales):
        raise ValueError(f"scales must be positive: {scales}")
    styles = ([IDENTITY_STYLE] if include_identity else []) + list(range(bank_size))
    if not styles:
        raise ValueError("no styles: empty bank and identity style disabled")
    return [AugmentationPolicy(s, j) for s in scales for j in styles]


def apply_policy(
    img: np.ndarray, policy: AugmentationPolicy, angles, st: StyleTransfer, bank: StyleBank | None
) -> AugmentedBundle:
    """Reference single-policy path: rotate -> resize -> stylize for every angle."""
    variants = {}
    for k in sorted(angles):
        x = imgeom.resize(imgeom.rotate(img, k), policy.scale)
        if not policy.is_identity_style:
            style_feat = bank.features(st)[policy.style_index]
            with torch.no_grad():
                out, _ = st.stylize(to_tensor(x), style_feat)
            x = to_image(out)
        variants[k] = x
    return AugmentedBundle(policy, variants, img.shape[:2])


def build_bundles(img: np.ndarray, policies, angles, st: StyleTransfer | None, bank: StyleBank | None):
    """Bundles for many policies at once.

    Same result as calling :func:`apply_policy` per policy, but each rotated and
    resized input is encoded only once and shared by all styles at that scale.
    """
    angles = sorted(angles)
    by_scale: dict[float, list[AugmentationPolicy]] = {}
    for p in policies:
        by_scale.setdefault(p.scale, []).append(p)
    feats = bank.features(st) if any(not p.is_identity_style for p in policies) else None
    out = {}
    for scale, group in by_scale.items():
        inputs = {k: imgeom.resize(imgeom.rotate(img, k), scale) for k in angles}
        styled = [p for p in group if not p.is_identity_style]
        stylized = {}
        if styled:
            stylized = _stylize_many(st, inputs, [feats[p.style_index] for p in styled])
        for p in group:
            if p.is_identity_style:
                variants = dict(inputs)
            else:
                j = styled.index(p)
                variants = {k: stylized[k][j] for k in angles}
            out[p] = AugmentedBundle(p, variants, img.shape[:2])
    return [out[p] for p in policies]


def _stylize_many(st: StyleTransfer, inputs: dict, style_feats: list[torch.Tensor]):
    """Stylize each input toward each style feature; returns ``{angle: [img per style]}``."""
    results = {k: [None] * len(style_feats) for k in inputs}
    shapes: dict[tuple, list[int]] = {}
    for k, x in inputs.items():
        shapes.setdefault(x.shape, []).append(k)
    with torch.no_grad():
        for keys in shapes.values():
            batch = torch.cat([to_tensor(inputs[k]) for k in keys])
            padded, pads = st.pad(batch)
            content = st.encoder(padded)[-1]
            n = len(keys)
            targets = torch.cat([adain(content, f) for f in style_feats])
            decoded = st.unpad(st.decoder(targets), pads)
            for j in range(len(style_feats)):
                for i, k in enumerate(keys):
                    results[k][j] = to_image(decoded[j * n + i])
    return results


def select_style_bank(images, st: StyleTransfer, n_styles: int, ids=None, seed: int = 0) -> StyleBank:
    """Pick ``n_styles`` images by farthest-point sampling in feature-statistics space.

    Each image is described by the concatenated channel means and stds of its
    encoder features. The first pick is the image closest to the centroid.
    """
    if n_styles < 1 or n_styles > len(images):
        raise ValueError(f"cannot pick {n_styles} styles from {len(images)} images")
    ids = list(ids) if ids is not None else [f"style{i:04d}" for i in range(len(images))]
    try:
        desc = np.stack([_style_descriptor(st, im) for im in images])
    except ValueError:
        log.warning("feature descriptors unavailable, falling back to seeded random styles")
        rng = np.random.default_rng(seed)
        picks = sorted(rng.choice(len(images), n_styles, replace=False).tolist())
        return StyleBank([images[i] for i in picks], [ids[i] for i in picks])
    centroid = desc.mean(axis=0)
    picks = [int(np.argmin(((desc - centroid) ** 2).sum(1)))]
    dist = ((desc - desc[picks[0]]) ** 2).sum(1)
    while len(picks) < n_styles:
        nxt = int(np.argmax(dist))
        picks.append(nxt)
        dist = np.minimum(dist, ((desc - desc[nxt]) ** 2).sum(1))
    return StyleBank([images[i] for i in picks], [ids[i] for i in picks])


def _style_descriptor(st: StyleTransfer, img: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        feats = st.encode(to_tensor(img))
    parts = []
    for f in feats:
        mu, sigma = feature_stats(f)
        parts += [mu[0].numpy(), sigma[0].numpy()]
    return np.concatenate(parts).astype(np.float64)
