"""Command-line entry point.

Experiments are defined in a YAML file; flags only carry the config path, the
output directory and the seed. Every run writes into
``<out>/<command>/<run-id>/`` where ``run-id`` is a hash of the resolved
config, and stores that resolved config next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4, 5

COMMANDS = ("gen-data", "pretrain-st", "train", "predict", "evaluate", "ablate", "visualize-embedding")
METHODS = ("baseline", "aggregate_all", "s3tta")
ABLATION_SCALES = ((1.0,), (1.0, 2.0), (1.0, 1.5, 2.0), (0.7, 1.0, 1.5, 2.0))
ABLATION_STYLES = (1, 3)

DEFAULTS = {
    "seed": 0,
    "n_train": 200,
    "n_test": 50,
    "train_domain": {},
    "test_domain": {},
    "train": {},
    "method": "s3tta",
    "scales": [0.7, 1.0, 1.5, 2.0],
    "n_styles": 3,
    "angles": [0, 1, 2, 3],
    "include_identity": False,
    "thresholds": [0.5, 0.6, 0.7],
    "min_area": 9,
    "data_dir": None,
    "test_dir": None,
    "pred_dir": None,
    "st_checkpoint": None,
    "seg_checkpoint": None,
    "style_bank": None,
    "train_plain": True,
}

log = logging.getLogger("s3tta")


class ConfigError(Exception):
    pass


class MissingArtifact(Exception):
    pass


@dataclass
class Run:
    command: str
    config: dict
    outdir: Path


def load_config(path, seed=None) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except FileNotFoundError as exc:
            raise MissingArtifact(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        unknown = sorted(set(user) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(user)
    if seed is not None:
        cfg["seed"] = seed
    if cfg["method"] not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {cfg['method']!r}")
    return cfg


def run_id(command: str, cfg: dict) -> str:
    blob = json.dumps({"command": command, **cfg}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _need(cfg: dict, *keys) -> list:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")
    return [cfg[k] for k in keys]


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"not found: {p}")
    return p


def _train_config(cfg: dict):
    from .trainer import TrainConfig

    d = {"seed": cfg["seed"], "scales": cfg["scales"], "n_styles": cfg["n_styles"],
         "angles": cfg["angles"], "include_identity": cfg["include_identity"], **cfg["train"]}
    try:
        return TrainConfig.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def _domain(d: dict, fallback):
    from .synthdata import DomainSpec

    try:
        return DomainSpec.from_dict({**fallback().to_dict(), **d})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"domain: {exc}") from exc


def _dataset(path, split=None):
    from .synthdata import load_dataset

    samples = load_dataset(_existing(path), split)
    if not samples:
        raise MissingArtifact(f"no samples in {path}" + (f" for split {split!r}" if split else ""))
    return samples


def _models(cfg: dict, need_st: bool):
    from .augment import StyleBank
    from .segnet import load_segnet
    from .styletx import load_style_transfer

    (seg_path,) = _need(cfg, "seg_checkpoint")
    net, _ = load_segnet(_existing(seg_path))
    st = bank = None
    if need_st:
        st_path, bank_path = _need(cfg, "st_checkpoint", "style_bank")
        st, _ = load_style_transfer(_existing(st_path))
        bank = StyleBank.load(_existing(bank_path))
    return st, net, bank


def _policies(cfg: dict, bank, scales=None, n_styles=None):
    from .augment import enumerate_policies

    n = len(bank) if n_styles is None else n_styles
    if bank is not None and n > len(bank):
        raise ConfigError(f"n_styles={n} exceeds style bank size {len(bank)}")
    return enumerate_policies(scales or cfg["scales"], n, cfg["include_identity"])


def _predict(method, img, st, net, bank, policies, cfg):
    from . import evalkit, segnet

    if method == "baseline":
        return segnet.predict_plain(net, img, cfg["min_area"]), None
    if method == "aggregate_all":
        return evalkit.baseline_aggregate_all(img, st, net, bank, policies, cfg["angles"], cfg["min_area"]), None
    labels, winner, scores = segnet.predict_s3tta(
        img, st, net, bank, policies, cfg["angles"], cfg["min_area"], return_scores=True
    )
    return labels, (scores, winner)


# commands


def cmd_gen_data(run: Run) -> None:
    from . import experiment, synthdata

    cfg = run.config
    train_spec = _domain(cfg["train_domain"], experiment.domain_a)
    test_spec = _domain(cfg["test_domain"], experiment.domain_shifted)
    split = synthdata.make_split(train_spec, test_spec, int(cfg["n_train"]), int(cfg["n_test"]), cfg["seed"])
    data = run.outdir / "data"
    if data.exists():
        # same run id means same config: regenerate rather than append
        shutil.rmtree(data)
    synthdata.save_dataset(data, split.train, "train")
    synthdata.save_dataset(data, split.test, "test")
    log.info("wrote %d train / %d test samples", len(split.train), len(split.test))


def cmd_pretrain_st(run: Run) -> None:
    from .augment import select_style_bank
    from .styletx import save_style_transfer
    from .trainer import pretrain_style

    cfg = run.config
    (data_dir,) = _need(cfg, "data_dir")
    samples = _dataset(data_dir, "train") if _has_split(data_dir, "train") else _dataset(data_dir)
    tc = _train_config(cfg)
    images = [s.image for s in samples]
    st, hist = pretrain_style(images, tc)
    save_style_transfer(run.outdir / "style_transfer.pt", st,
                        initial_objective=hist["initial_objective"], final_objective=hist["final_objective"])
    with open(run.outdir / "pretrain_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "phase", "L_c", "L_s", "L_rec"])
        writer.writeheader()
        writer.writerows(hist["steps"])
    bank = select_style_bank(images, st, tc.n_styles, ids=[s.id for s in samples], seed=tc.seed)
    bank.save(run.outdir / "style_bank")
    log.info("pretrain objective %.4f -> %.4f", hist["initial_objective"], hist["final_objective"])


def _has_split(data_dir, split) -> bool:
    manifest = Path(data_dir) / "manifest.csv"
    if not manifest.exists():
        return False
    with open(manifest, newline="") as fh:
        return any(r.get("split") == split for r in csv.DictReader(fh))


def cmd_train(run: Run) -> None:
    from .augment import StyleBank
    from .segnet import save_segnet
    from .styletx import load_style_transfer, save_style_transfer
    from .trainer import joint_train, train_plain

    cfg = run.config
    data_dir, st_path, bank_path = _need(cfg, "data_dir", "st_checkpoint", "style_bank")
    samples = _dataset(data_dir, "train") if _has_split(data_dir, "train") else _dataset(data_dir)
    st, _ = load_style_transfer(_existing(st_path))
    bank = StyleBank.load(_existing(bank_path))
    tc = _train_config(cfg)
    if tc.checkpoint_every and not tc.checkpoint_dir:
        tc = type(tc).from_dict({**tc.to_dict(), "checkpoint_dir": str(run.outdir / "checkpoints")})
    st, net, _ = joint_train(samples, st, tc, bank, log_path=run.outdir / "train_log.csv")
    save_style_transfer(run.outdir / "style_transfer.pt", st)
    save_segnet(run.outdir / "segnet.pt", net)
    bank.save(run.outdir / "style_bank")
    if cfg["train_plain"]:
        plain, _ = train_plain(samples, tc)
        save_segnet(run.outdir / "segnet_plain.pt", plain)


def cmd_predict(run: Run) -> None:
    from .selector import write_score_log
    from .synthdata import Sample, save_dataset

    cfg = run.config
    method = cfg["method"]
    (test_dir,) = _need(cfg, "test_dir")
    samples = _dataset(test_dir, "test") if _has_split(test_dir, "test") else _dataset(test_dir)
    st, net, bank = _models(cfg, need_st=method != "baseline")
    policies = _policies(cfg, bank) if method != "baseline" else None
    preds, score_rows = [], []
    for s in samples:
        labels, extra = _predict(method, s.image, st, net, bank, policies, cfg)
        preds.append(Sample(s.image, labels, s.id, method))
        if extra is not None:
            score_rows.append((s.id, extra[0], extra[1]))
    if (run.outdir / "predictions").exists():
        shutil.rmtree(run.outdir / "predictions")
    save_dataset(run.outdir / "predictions", preds, "pred")
    if score_rows:
        write_score_log(run.outdir / "selection_scores.csv", score_rows, bank.ids)


def cmd_evaluate(run: Run) -> None:
    from .evalkit import write_metrics_report

    cfg = run.config
    pred_dir, test_dir = _need(cfg, "pred_dir", "test_dir")
    preds = {s.id: s.labels for s in _dataset(pred_dir)}
    gts = _dataset(test_dir, "test") if _has_split(test_dir, "test") else _dataset(test_dir)
    rows = []
    for g in gts:
        if g.id not in preds:
            raise MissingArtifact(f"no prediction for {g.id} in {pred_dir}")
        rows.append((g.id, cfg["method"], preds[g.id], g.labels))
    summary = write_metrics_report(run.outdir / "metrics.csv", rows, tuple(cfg["thresholds"]))
    for r in summary:
        print(f"{r['method']} F1@{r['tau']}: {r['f1']:.1f}")


def cmd_ablate(run: Run) -> None:
    from .evalkit import f1_at

    cfg = run.config
    (test_dir,) = _need(cfg, "test_dir")
    samples = _dataset(test_dir, "test") if _has_split(test_dir, "test") else _dataset(test_dir)
    st, net, bank = _models(cfg, need_st=True)
    thresholds = tuple(cfg["thresholds"])
    with open(run.outdir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_scales", "scales", "n_styles"] + [f"f1@{t}" for t in thresholds])
        for n_styles in ABLATION_STYLES:
            for scales in ABLATION_SCALES:
                usable = min(n_styles, len(bank))
                policies = _policies(cfg, bank, scales, usable)
                scores = {t: [] for t in thresholds}
                for s in samples:
                    labels, _ = _predict("s3tta", s.image, st, net, bank, policies, cfg)
                    for t in thresholds:
                        scores[t].append(f1_at(labels, s.labels, t))
                writer.writerow([len(scales), "|".join(f"{x:g}" for x in scales), usable]
                                + [f"{100 * np.mean(scores[t]):.1f}" for t in thresholds])


def cmd_visualize_embedding(run: Run) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .augment import build_bundles
    from .evalkit import embed_project, mean_pairwise_distance
    from .selector import select

    cfg = run.config
    (test_dir,) = _need(cfg, "test_dir")
    samples = _dataset(test_dir)
    st_path, bank_path = _need(cfg, "st_checkpoint", "style_bank")
    from .augment import StyleBank
    from .styletx import load_style_transfer

    st, _ = load_style_transfer(_existing(st_path))
    bank = StyleBank.load(_existing(bank_path))
    policies = _policies(cfg, bank, scales=(1.0,))
    stylized = []
    for s in samples:
        bundles = build_bundles(s.image, policies, cfg["angles"], st, bank)
        winner, _ = select(bundles) if len(bundles) > 1 else (bundles[0].policy, [])
        stylized.append(next(b for b in bundles if b.policy == winner).variants[cfg["angles"][0]])
    pts = embed_project([s.image for s in samples] + stylized, st)
    n = len(samples)
    with open(run.outdir / "embedding.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "set", "x", "y"])
        for i, s in enumerate(samples):
            writer.writerow([s.id, "original", f"{pts[i, 0]:.6f}", f"{pts[i, 1]:.6f}"])
            writer.writerow([s.id, "stylized", f"{pts[n + i, 0]:.6f}", f"{pts[n + i, 1]:.6f}"])
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(pts[:n, 0], pts[:n, 1], s=12, label="original")
    ax.scatter(pts[n:, 0], pts[n:, 1], s=12, label="stylized")
    ax.legend()
    fig.savefig(run.outdir / "embedding.png", dpi=120, bbox_inches="tight")
    plt.close(fig)
    print(f"mean pairwise distance original={mean_pairwise_distance(pts[:n]):.4f} "
          f"stylized={mean_pairwise_distance(pts[n:]):.4f}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain-st": cmd_pretrain_st,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "visualize-embedding": cmd_visualize_embedding,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s3tta", description="Scale-style test-time augmentation toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--out", default="runs", help="output root (default: runs)")
        p.add_argument("--seed", type=int, help="override the config seed")
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        outdir = Path(args.out) / args.command / run_id(args.command, cfg)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "config.yaml", "w") as fh:
            yaml.safe_dump(cfg, fh, sort_keys=True)
        HANDLERS[args.command](Run(args.command, cfg, outdir))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - reported as a one-line diagnostic
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(outdir)
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
