"""Compact U-Net with a 3-class head (background / interior / boundary).

Instances are recovered from the probability map by thresholding the interior
class, labeling 4-connected components and growing them into the predicted
boundary pixels.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from . import imgeom
from .styletx import read_checkpoint, save_checkpoint, to_image, to_tensor

BACKGROUND, INTERIOR, BOUNDARY = 0, 1, 2
N_CLASSES = 3
PROB_EPS = 1e-7
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect"),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, padding_mode="reflect"),
        nn.ReLU(inplace=True),
    )


class SegNet(nn.Module):
    """U-Net with ``levels`` down/up steps and skip connections."""

    def __init__(self, in_channels: int = 3, base: int = 16, levels: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.base = base
        self.levels = levels
        widths = [base * 2**i for i in range(levels + 1)]
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths[:-1]:
            self.down.append(_block(cin, w))
            cin = w
        self.bottleneck = _block(widths[-2], widths[-1])
        self.up = nn.ModuleList(
            _block(widths[i + 1] + widths[i], widths[i]) for i in reversed(range(levels))
        )
        self.head = nn.Conv2d(base, N_CLASSES, 1)

    @property
    def stride(self) -> int:
        return 2**self.levels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Class logits ``(N, 3, H, W)``; H and W must divide ``stride``."""
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"input {h}x{w} not divisible by {self.stride}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for block, skip in zip(self.up, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)

    def probs(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax probabilities for an arbitrary-size batch (reflect-padded internally)."""
        h, w = x.shape[-2:]
        if h < self.stride or w < self.stride:
            raise ValueError(f"image {h}x{w} smaller than network stride {self.stride}")
        ph, pw = (-h) % self.stride, (-w) % self.stride
        top, left = ph // 2, pw // 2
        if ph or pw:
            mode = "reflect" if min(h, w) > max(ph, pw) else "replicate"
            x = F.pad(x, (left, pw - left, top, ph - top), mode=mode)
        p = torch.softmax(self.forward(x), dim=1)
        return p[..., top : top + h, left : left + w]


def forward(net: SegNet, img: np.ndarray) -> np.ndarray:
    """ProbMap ``(H, W, 3)`` for one image."""
    with torch.no_grad():
        return to_image(net.probs(to_tensor(img)))


def forward_batch(net: SegNet, imgs: list[np.ndarray]) -> list[np.ndarray]:
    """ProbMaps for equally sized images in one batched pass."""
    with torch.no_grad():
        x = torch.cat([to_tensor(im) for im in imgs])
        p = net.probs(x)
    return [to_image(p[i]) for i in range(len(imgs))]


def inner_boundary(labels: np.ndarray) -> np.ndarray:
    """Instance pixels with a 4-neighbour carrying a different label (image border excluded)."""
    lab = labels
    edge = np.zeros(lab.shape, dtype=bool)
    edge[1:, :] |= lab[1:, :] != lab[:-1, :]
    edge[:-1, :] |= lab[:-1, :] != lab[1:, :]
    edge[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    edge[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    return edge & (lab > 0)


def class_targets(labels: np.ndarray) -> np.ndarray:
    """Instance label map -> per-pixel class ids (0 background, 1 interior, 2 boundary)."""
    target = np.where(labels > 0, INTERIOR, BACKGROUND).astype(np.int64)
    target[inner_boundary(labels)] = BOUNDARY
    return target


def seg_loss(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy of ``(N, 3, H, W)`` probabilities against class ids."""
    if probs.shape[0] != targets.shape[0] or probs.shape[2:] != targets.shape[1:]:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(targets.shape)}")
    picked = probs.gather(1, targets[:, None]).clamp_min(PROB_EPS)
    return -torch.log(picked).mean()


def _grow_into(labels: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Breadth-first growth of labeled regions into ``allowed`` pixels.

    Each pass claims the unlabeled allowed pixels 4-adjacent to a labeled one;
    contested pixels go to the smallest neighbouring label.
    """
    labels = labels.copy()
    big = np.iinfo(labels.dtype).max
    while True:
        free = allowed & (labels == 0)
        if not free.any():
            break
        best = np.full(labels.shape, big, dtype=labels.dtype)
        for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
            nb = np.roll(labels, shift, axis=axis)
            # roll wraps around; blank the wrapped row/column
            idx = [slice(None), slice(None)]
            idx[axis] = 0 if shift == 1 else -1
            nb[tuple(idx)] = 0
            best = np.where(nb > 0, np.minimum(best, nb), best)
        claim = free & (best != big)
        if not claim.any():
            break
        labels[claim] = best[claim]
    return labels


def relabel_sequential(labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels)
    ids = ids[ids > 0]
    lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.int32)
    lut[ids] = np.arange(1, len(ids) + 1, dtype=np.int32)
    return lut[labels]


def decode_instances(probs: np.ndarray, min_area: int = 9, threshold: float = 0.5) -> np.ndarray:
    """ProbMap ``(H, W, 3)`` -> instance label map with contiguous ids 1..K."""
    interior = probs[..., INTERIOR] > threshold
    labels, _ = ndimage.label(interior, structure=FOUR_CONNECTED)
    labels = labels.astype(np.int32)
    boundary = (np.argmax(probs, axis=-1) == BOUNDARY) & ~interior
    labels = _grow_into(labels, boundary)
    if labels.max() > 0:
        areas = np.bincount(labels.ravel())
        small = areas < min_area
        small[0] = False
        labels[small[labels]] = 0
    return relabel_sequential(labels)


def save_segnet(path, net: SegNet, **extra) -> None:
    arch = {"in_channels": net.in_channels, "base": net.base, "levels": net.levels}
    save_checkpoint(path, "segnet", net, arch, **extra)


def load_segnet(path) -> tuple[SegNet, dict]:
    ckpt = read_checkpoint(path, "segnet")
    net = SegNet(**ckpt.arch)
    net.load_state_dict(ckpt.state)
    net.eval()
    return net, ckpt.extra


def merge_probs(maps: list[np.ndarray], size: tuple[int, int]) -> np.ndarray:
    """Average equally sized ProbMaps, resize to ``size`` and renormalize."""
    mean = np.mean(np.stack(maps), axis=0, dtype=np.float64)
    return normalize_probs(imgeom.resize_to(mean, size, clamp=False))


def normalize_probs(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 0.0, None)
    return (p / p.sum(axis=-1, keepdims=True)).astype(np.float32)


def predict_plain(net: SegNet, img: np.ndarray, min_area: int = 9) -> np.ndarray:
    return decode_instances(forward(net, img), min_area)


def bundle_probs(net: SegNet, bundle) -> list[np.ndarray]:
    """Forward every rotation variant of a bundle and rotate each ProbMap back."""
    angles = sorted(bundle.variants)
    maps = []
    shapes = {bundle.variants[k].shape for k in angles}
    if len(shapes) == 1:
        outs = forward_batch(net, [bundle.variants[k] for k in angles])
    else:
        outs = [forward(net, bundle.variants[k]) for k in angles]
    for k, p in zip(angles, outs):
        maps.append(imgeom.rotate_back(p, k))
    return maps


def predict_s3tta(
    img: np.ndarray,
    st,
    net: SegNet,
    bank,
    policies,
    angles=imgeom.ANGLES,
    min_area: int = 9,
    return_scores: bool = False,
):
    """Select one scale-style policy by rotational consistency, then segment with it.

    The winning policy's rotation variants are segmented, rotated back,
    averaged, resized to the input resolution and decoded into instances.
    """
    from .augment import build_bundles
    from .selector import select

    bundles = build_bundles(img, policies, angles, st, bank)
    if len(bundles) == 1:
        # nothing to choose; a single-angle bundle could not be scored anyway
        winner, scores = bundles[0].policy, []
    else:
        winner, scores = select(bundles)
    bundle = next(b for b in bundles if b.policy == winner)
    probs = merge_probs(bundle_probs(net, bundle), bundle.original_size)
    labels = decode_instances(probs, min_area)
    if return_scores:
        return labels, winner, scores
    return labels
