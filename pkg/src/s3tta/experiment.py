"""Domain-shift experiment on synthetic data.

Models are trained on one domain and tested on a domain whose cells are
smaller and look different. Plain prediction is compared against
test-time augmentation, both averaged over every policy and restricted to
the most rotation-consistent one.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import evalkit, imgeom, synthdata
from .augment import FULL_GRID_SCALES, build_bundles, enumerate_policies, select_style_bank
from .segnet import SegNet, predict_plain, predict_s3tta, save_segnet
from .selector import select, write_score_log
from .styletx import param_hash, save_style_transfer
from .synthdata import DomainSpec
from .trainer import TrainConfig, joint_train, pretrain_style, train_plain

log = logging.getLogger(__name__)

METHODS = ("baseline", "aggregate_all", "s3tta")

STYLE_A = dict(
    foreground_intensity=(0.7, 0.05),
    background_intensity=(0.15, 0.03),
    texture_frequency=0.05,
    texture_amplitude=0.05,
    color_tint=(0.6, 1.0, 0.6),
    noise_std=0.02,
)
STYLE_B = dict(
    foreground_intensity=(0.5, 0.08),
    background_intensity=(0.3, 0.05),
    texture_frequency=0.2,
    texture_amplitude=0.08,
    color_tint=(1.0, 0.55, 0.9),
    noise_std=0.05,
)


def domain_a() -> DomainSpec:
    return DomainSpec(cell_radius_range=(8.0, 12.0), cell_count_range=(3, 7), name="A", **STYLE_A)


def domain_shifted() -> DomainSpec:
    return DomainSpec(cell_radius_range=(4.0, 6.0), cell_count_range=(8, 20), name="B-small", **STYLE_B)


def domain_scale_only() -> DomainSpec:
    return DomainSpec(cell_radius_range=(4.0, 6.0), cell_count_range=(8, 20), name="A-small", **STYLE_A)


def domain_style_only() -> DomainSpec:
    return DomainSpec(cell_radius_range=(8.0, 12.0), cell_count_range=(3, 7), name="B", **STYLE_B)


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_train: int = 200
    n_test: int = 50
    n_embed: int = 20
    train_domain: DomainSpec = field(default_factory=domain_a)
    test_domain: DomainSpec = field(default_factory=domain_shifted)
    scale_shift_domain: DomainSpec = field(default_factory=domain_scale_only)
    style_shift_domain: DomainSpec = field(default_factory=domain_style_only)
    train: TrainConfig = field(default_factory=TrainConfig)
    thresholds: tuple = evalkit.DEFAULT_THRESHOLDS
    min_area: int = 9

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown experiment keys: {sorted(unknown)}")
        d = dict(d)
        defaults = cls()
        for key in ("train_domain", "test_domain", "scale_shift_domain", "style_shift_domain"):
            if key in d:
                base = getattr(defaults, key).to_dict()
                base.update(d[key])
                d[key] = DomainSpec.from_dict(base)
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "thresholds" in d:
            d["thresholds"] = tuple(d["thresholds"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


@dataclass
class ExperimentResult:
    f1: dict
    scale2_fraction: float
    embed_spread: dict
    in_domain_f1: dict
    encoder_hash_before: str
    encoder_hash_after: str
    pretrain_history: dict
    timings: dict


def run(cfg: ExperimentConfig, outdir) -> ExperimentResult:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    timings = {}
    t0 = time.perf_counter()
    split = synthdata.make_split(cfg.train_domain, cfg.test_domain, cfg.n_train, cfg.n_test, cfg.seed)
    scale_test = synthdata.make_split(cfg.train_domain, cfg.scale_shift_domain, 0, cfg.n_test, cfg.seed + 1000).test
    train_images = [s.image for s in split.train]

    st, pre_hist = pretrain_style(train_images, tc)
    timings["pretrain"] = time.perf_counter() - t0
    log.info("pretrain objective %.4f -> %.4f", pre_hist["initial_objective"], pre_hist["final_objective"])
    bank = select_style_bank(train_images, st, tc.n_styles, ids=[s.id for s in split.train], seed=tc.seed)
    bank.save(outdir / "style_bank")
    hash_before = param_hash(st.encoder)

    t1 = time.perf_counter()
    st, seg, _ = joint_train(split.train, st, tc, bank, log_path=outdir / "train_log.csv")
    timings["joint"] = time.perf_counter() - t1
    hash_after = param_hash(st.encoder)
    save_style_transfer(outdir / "style_transfer.pt", st)
    save_segnet(outdir / "segnet.pt", seg)

    t2 = time.perf_counter()
    plain, _ = train_plain(split.train, tc)
    save_segnet(outdir / "segnet_plain.pt", plain)
    timings["plain"] = time.perf_counter() - t2

    t3 = time.perf_counter()
    policies = enumerate_policies(tc.scales, len(bank), tc.include_identity)
    rows, score_rows = [], []
    for s in split.test:
        rows.append((s.id, "baseline", predict_plain(plain, s.image, cfg.min_area), s.labels))
        rows.append((s.id, "aggregate_all",
                     evalkit.baseline_aggregate_all(s.image, st, seg, bank, policies, tc.angles, cfg.min_area),
                     s.labels))
        pred, winner, scores = predict_s3tta(s.image, st, seg, bank, policies, tc.angles, cfg.min_area,
                                             return_scores=True)
        rows.append((s.id, "s3tta", pred, s.labels))
        score_rows.append((s.id, scores, winner))
    summary = evalkit.write_metrics_report(outdir / "metrics.csv", rows, cfg.thresholds)
    write_score_log(outdir / "selection_scores.csv", score_rows, bank.ids)
    f1 = {(r["method"], r["tau"]): r["f1"] for r in summary}
    timings["evaluate"] = time.perf_counter() - t3

    full_grid = enumerate_policies(FULL_GRID_SCALES, len(bank), False)
    picks = []
    for s in scale_test:
        winner, _ = select(build_bundles(s.image, full_grid, tc.angles, st, bank))
        picks.append(winner.scale)
    scale2 = float(np.mean(np.isclose(picks, 2.0)))

    in_domain = synthdata.make_split(cfg.train_domain, cfg.train_domain, 0, cfg.n_test, cfg.seed + 4000).test
    torch.manual_seed(tc.seed + 1)
    untrained = SegNet(in_domain[0].image.shape[2], tc.seg_base, tc.seg_levels).eval()
    in_domain_f1 = {}
    for name, net in (("untrained", untrained), ("trained", seg)):
        in_domain_f1[name] = 100 * float(np.mean([
            evalkit.f1_at(predict_s3tta(s.image, st, net, bank, policies, tc.angles, cfg.min_area), s.labels)
            for s in in_domain
        ]))

    spread = embedding_condensation(cfg, st, bank, outdir)
    timings["total"] = time.perf_counter() - t0
    return ExperimentResult(f1, scale2, spread, in_domain_f1, hash_before, hash_after, pre_hist, timings)


def embedding_condensation(cfg: ExperimentConfig, st, bank, outdir=None) -> dict:
    """Mean pairwise 2-D distance of original vs stylized embeddings on a two-style corpus.

    The corpus mixes train-style and style-shifted images at the training
    scale; each image is stylized with the consistency-selected style.
    """
    n = cfg.n_embed
    a = synthdata.generate_many(cfg.train_domain, n, cfg.seed + 2000, "embA")
    b = synthdata.generate_many(cfg.style_shift_domain, n, cfg.seed + 3000, "embB")
    corpus = a + b
    policies = enumerate_policies((1.0,), len(bank), False)
    stylized = []
    for s in corpus:
        bundles = build_bundles(s.image, policies, cfg.train.angles, st, bank)
        winner, _ = select(bundles)
        stylized.append(next(x for x in bundles if x.policy == winner).variants[0])
    originals = [s.image for s in corpus]
    pts = evalkit.embed_project(originals + stylized, st)
    orig_pts, sty_pts = pts[: len(corpus)], pts[len(corpus):]
    if outdir is not None:
        with open(Path(outdir) / "embedding.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "set", "x", "y"])
            for label, group in (("original", orig_pts), ("stylized", sty_pts)):
                for s, (x, y) in zip(corpus, group):
                    writer.writerow([s.id, label, f"{x:.6f}", f"{y:.6f}"])
    return {
        "original": evalkit.mean_pairwise_distance(orig_pts),
        "stylized": evalkit.mean_pairwise_distance(sty_pts),
    }
