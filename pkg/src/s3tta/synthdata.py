"""Synthetic cell images with controllable scale and style, plus dataset I/O.

Cells are filled ellipses on a textured background. Style is set by the
foreground/background intensities, an RGB tint, a sinusoidal texture and
additive noise; scale by the radius range.

Dataset layout on disk::

    images/<id>.png   8-bit, 1 or 3 channels
    labels/<id>.png   16-bit single channel instance ids
    manifest.csv      id, split, domain
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .segnet import relabel_sequential

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DomainSpec:
    size: tuple[int, int] = (64, 64)
    cell_radius_range: tuple[float, float] = (8.0, 12.0)
    cell_count_range: tuple[int, int] = (3, 7)
    foreground_intensity: tuple[float, float] = (0.7, 0.05)
    background_intensity: tuple[float, float] = (0.15, 0.03)
    texture_frequency: float = 0.05
    texture_amplitude: float = 0.05
    color_tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_std: float = 0.02
    channels: int = 3
    min_gap: int = 1
    max_tries: int = 200
    name: str = "domain"

    def __post_init__(self):
        lo, hi = self.cell_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad radius range {self.cell_radius_range}")
        c_lo, c_hi = self.cell_count_range
        if not 0 <= c_lo <= c_hi:
            raise ValueError(f"bad count range {self.cell_count_range}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if min(self.size) < 1:
            raise ValueError(f"bad image size {self.size}")

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        for key in ("size", "cell_radius_range", "cell_count_range", "foreground_intensity",
                    "background_intensity", "color_tint"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    id: str = ""
    domain: str = ""


def ellipse_mask(shape, cy, cx, ry, rx, theta) -> np.ndarray:
    """Pixels whose centers fall inside a rotated ellipse."""
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def place_cells(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """Non-overlapping ellipse instance map; placement gives up after ``max_tries``."""
    h, w = spec.size
    labels = np.zeros((h, w), dtype=np.int32)
    n_target = int(rng.integers(spec.cell_count_range[0], spec.cell_count_range[1] + 1))
    lo, hi = spec.cell_radius_range
    placed, tries = 0, 0
    while placed < n_target and tries < spec.max_tries:
        tries += 1
        r = rng.uniform(lo, hi)
        ecc = rng.uniform(1.0, 2.0)
        ry, rx = r, r / ecc
        theta = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        mask = ellipse_mask((h, w), cy, cx, ry, rx, theta)
        if mask.sum() < 9:
            continue
        grown = mask
        for _ in range(spec.min_gap):
            grown = _dilate4(grown)
        if (labels[grown] > 0).any():
            continue
        placed += 1
        labels[mask] = placed
    return labels


def _dilate4(m: np.ndarray) -> np.ndarray:
    out = m.copy()
    out[1:] |= m[:-1]
    out[:-1] |= m[1:]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    return out


def render(spec: DomainSpec, labels: np.ndarray, rng: np.random.Generator, noise: bool = True):
    """Grayscale-then-tinted image for a label map."""
    h, w = labels.shape
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    texture = spec.texture_amplitude * np.sin(
        2 * np.pi * spec.texture_frequency * (xx * np.cos(theta) + yy * np.sin(theta)) + phase
    )
    bg_mean, bg_std = spec.background_intensity
    fg_mean, fg_std = spec.foreground_intensity
    gray = np.full((h, w), bg_mean + bg_std * rng.standard_normal())
    n = int(labels.max())
    levels = fg_mean + fg_std * rng.standard_normal(n + 1)
    fg = labels > 0
    gray[fg] = levels[labels[fg]]
    gray = gray + texture
    tint = np.asarray(spec.color_tint, dtype=np.float64)
    img = gray[..., None] * (tint[None, None, :] if spec.channels == 3 else tint[:1].mean())
    if noise and spec.noise_std > 0:
        img = img + spec.noise_std * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_sample(spec: DomainSpec, seed: int, sample_id: str = "") -> Sample:
    rng = np.random.default_rng(seed)
    labels = place_cells(spec, rng)
    image = render(spec, labels, rng)
    return Sample(image, labels, sample_id, spec.name)


def generate_many(spec: DomainSpec, n: int, seed: int, prefix: str = "") -> list[Sample]:
    """``n`` samples with independent seed streams derived from ``seed`` and the index."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [
        generate_sample(spec, int(child.generate_state(1)[0]), f"{prefix}{i:04d}")
        for i, child in enumerate(children)
    ]


@dataclass
class Split:
    train: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)


def make_split(spec_train: DomainSpec, spec_test: DomainSpec, n_train: int, n_test: int, seed: int) -> Split:
    """Train and test samples drawn from disjoint seed streams."""
    s_train, s_test = np.random.SeedSequence(seed).spawn(2)
    train = generate_many(spec_train, n_train, int(s_train.generate_state(1)[0]), "train")
    test = generate_many(spec_test, n_test, int(s_test.generate_state(1)[0]), "test")
    return Split(train, test)


def scale_shifted(spec: DomainSpec, factor: float, name: str | None = None) -> DomainSpec:
    lo, hi = spec.cell_radius_range
    return replace(spec, cell_radius_range=(lo * factor, hi * factor), name=name or spec.name)


def save_dataset(directory, samples: list[Sample], split: str = "") -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    rows = _read_manifest(manifest) if manifest.exists() else []
    known = {r["id"] for r in rows}
    for i, s in enumerate(samples):
        sid = s.id or f"{split}{i:04d}"
        if sid in known:
            raise ValueError(f"duplicate sample id {sid!r}")
        known.add(sid)
        img8 = np.round(s.image * 255).astype(np.uint8)
        PILImage.fromarray(img8[..., 0] if img8.shape[2] == 1 else img8).save(directory / "images" / f"{sid}.png")
        if s.labels.max() > 65535:
            raise ValueError(f"{sid}: more than 65535 instances")
        PILImage.fromarray(s.labels.astype(np.uint16)).save(directory / "labels" / f"{sid}.png")
        rows.append({"id": sid, "split": split, "domain": s.domain})
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["id", "split", "domain"])
        writer.writeheader()
        writer.writerows(rows)


def _read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _read_png(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            return np.asarray(im)
    except (OSError, ValueError) as exc:
        raise ValueError(f"{path.name}: cannot read ({exc})") from exc


def load_dataset(directory, split: str | None = None) -> list[Sample]:
    """Load samples listed in ``manifest.csv`` (or every image if there is none).

    Images come back as float32 in ``[0, 1]``; 8-bit round trips are exact.
    Label maps with gaps in their ids are relabeled to 1..K.
    """
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if manifest.exists():
        rows = _read_manifest(manifest)
    elif (directory / "images").is_dir():
        rows = [{"id": p.stem, "split": "", "domain": ""} for p in sorted((directory / "images").glob("*.png"))]
    else:
        return []
    if split is not None:
        rows = [r for r in rows if r["split"] == split]
    samples = []
    for r in rows:
        sid = r["id"]
        img_path = directory / "images" / f"{sid}.png"
        lab_path = directory / "labels" / f"{sid}.png"
        img = _read_png(img_path)
        lab = _read_png(lab_path).astype(np.int32)
        if img.ndim == 2:
            img = img[..., None]
        if img.dtype != np.uint8 or img.shape[2] not in (1, 3):
            raise ValueError(f"{img_path.name}: expected 8-bit 1- or 3-channel image, got {img.dtype} {img.shape}")
        if lab.ndim != 2 or lab.shape != img.shape[:2]:
            raise ValueError(f"{lab_path.name}: label map shape {lab.shape} does not match image {img.shape[:2]}")
        ids = np.unique(lab[lab > 0])
        if len(ids) and ids[-1] != len(ids):
            log.warning("%s: non-contiguous instance ids, relabeling to 1..%d", lab_path.name, len(ids))
            lab = relabel_sequential(lab)
        samples.append(Sample(img.astype(np.float32) / 255.0, lab, sid, r.get("domain", "")))
    return samples
