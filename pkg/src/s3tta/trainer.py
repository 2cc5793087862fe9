"""Style-transfer pretraining and joint augmentation-segmentation training."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import imgeom
from .augment import StyleBank, build_bundles, enumerate_policies
from .segnet import SegNet, class_targets, save_segnet, seg_loss
from .selector import select
from .styletx import StyleTransfer, param_hash, save_style_transfer, style_transfer_losses, to_tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_c: float = 1.0
    w_s: float = 2.0
    w_seg: float = 5.0

    def __post_init__(self):
        if min(self.w_c, self.w_s, self.w_seg) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


def total_loss(l_seg, l_c, l_s, w: LossWeights = LossWeights()):
    return l_seg * w.w_seg + (l_c * w.w_c + l_s * w.w_s)


@dataclass
class TrainConfig:
    seed: int = 0
    lr_pretrain: float = 1e-3
    lr_joint: float = 5e-4
    batch_size: int = 4
    pretrain_steps: int = 500
    joint_steps: int = 2000
    plain_steps: int = 2000
    encoder_warmup_steps: int = 250
    w_rec: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    scales: tuple = (0.7, 1.0, 1.5, 2.0)
    n_styles: int = 3
    include_identity: bool = False
    angles: tuple = imgeom.ANGLES
    widths: tuple = (16, 32, 64, 128)
    seg_base: int = 16
    seg_levels: int = 3
    random_rotations: bool = True
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        for key in ("scales", "angles", "widths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


def _check_finite(step: int, **losses) -> None:
    for name, value in losses.items():
        value = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(value):
            raise TrainingDiverged(f"step {step}: {name} is {value}")


def _item(x) -> float:
    return x.item() if torch.is_tensor(x) else float(x)


def _stack(images) -> torch.Tensor:
    return torch.cat([to_tensor(im) for im in images])


def pretrain_style(images: list[np.ndarray], cfg: TrainConfig, eval_pairs: int = 8):
    """Pretrain the style-transfer network on random content-style pairs.

    ``cfg.pretrain_steps`` is split in two phases. For the first
    ``encoder_warmup_steps`` encoder and decoder learn to reconstruct images.
    For the rest the encoder is fixed and the decoder minimizes
    ``w_c * content + w_s * style + w_rec * reconstruction``. Keeping the
    encoder out of the feature-space losses stops it from shrinking its
    features to zero them trivially.

    Returns ``(model, history)``. ``history["steps"]`` has one dict per step.
    ``initial_objective`` and ``final_objective`` hold ``w_c * content + w_s * style``
    on fixed evaluation pairs for the step-0 decoder and the final decoder, both
    measured with the final (frozen) encoder so that they share one feature space.
    ``phase_start_objective`` is the same quantity when the style phase begins.
    """
    if len(images) < 2:
        raise ValueError("pretraining needs at least two images")
    warmup = min(cfg.encoder_warmup_steps, cfg.pretrain_steps)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = StyleTransfer(images[0].shape[2], cfg.widths)
    decoder_at_init = copy.deepcopy(model.decoder.state_dict())
    w = cfg.weights
    eval_c = _stack([images[i] for i in rng.integers(len(images), size=eval_pairs)])
    eval_s = _stack([images[i] for i in rng.integers(len(images), size=eval_pairs)])

    def objective(m) -> float:
        with torch.no_grad():
            _, l_c, l_s = style_transfer_losses(m, eval_c, eval_s)
        return float(w.w_c * l_c + w.w_s * l_s)

    history = {"steps": []}
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_pretrain)
    for step in range(warmup):
        content = _stack([images[i] for i in rng.integers(len(images), size=cfg.batch_size)])
        rec = F.mse_loss(model.reconstruct(content), content)
        _check_finite(step, rec=rec)
        opt.zero_grad()
        rec.backward()
        opt.step()
        history["steps"].append({"step": step, "phase": "warmup", "L_c": None, "L_s": None, "L_rec": rec.item()})

    for p in model.encoder.parameters():
        p.requires_grad_(False)
    probe = copy.deepcopy(model)
    probe.decoder.load_state_dict(decoder_at_init)
    history["initial_objective"] = objective(probe)
    history["phase_start_objective"] = objective(model)
    opt = torch.optim.Adam(model.decoder.parameters(), lr=cfg.lr_pretrain)
    for step in range(warmup, cfg.pretrain_steps):
        ci = rng.integers(len(images), size=cfg.batch_size)
        si = rng.integers(len(images), size=cfg.batch_size)
        content = _stack([images[i] for i in ci])
        style = _stack([images[i] for i in si])
        rec = F.mse_loss(model.reconstruct(content), content)
        _, l_c, l_s = style_transfer_losses(model, content, style)
        _check_finite(step, rec=rec, content=l_c, style=l_s)
        loss = w.w_c * l_c + w.w_s * l_s + cfg.w_rec * rec
        opt.zero_grad()
        loss.backward()
        opt.step()
        history["steps"].append(
            {"step": step, "phase": "style", "L_c": l_c.item(), "L_s": l_s.item(), "L_rec": rec.item()}
        )
    history["final_objective"] = objective(model)
    for p in model.encoder.parameters():
        p.requires_grad_(True)
    model.eval()
    return model, history


def _winner(img, policies, angles, st, bank):
    bundles = build_bundles(img, policies, angles, st, bank)
    return select(bundles)[0]


def joint_train(
    samples,
    st: StyleTransfer,
    cfg: TrainConfig,
    bank: StyleBank,
    log_path=None,
    on_step=None,
):
    """Jointly train the style decoder and a fresh segmentation network.

    Each step selects, per training sample, the most rotation-consistent policy
    and pushes only that policy's 0-degree variant through segmentation. The
    encoder stays frozen.

    Returns ``(st, segnet, history)``.
    """
    torch.manual_seed(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed + 1)
    channels = samples[0].image.shape[2]
    net = SegNet(channels, cfg.seg_base, cfg.seg_levels)
    for p in st.encoder.parameters():
        p.requires_grad_(False)
    enc_hash = param_hash(st.encoder)
    policies = enumerate_policies(cfg.scales, len(bank), cfg.include_identity)
    params = list(st.decoder.parameters()) + list(net.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr_joint)
    w = cfg.weights
    style_feats = None
    history = []
    writer, fh = None, None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "L_seg", "L_c", "L_s", "L_total", "selected_scale", "selected_style"])
    try:
        for step in range(cfg.joint_steps):
            st.eval()
            idx = rng.integers(len(samples), size=cfg.batch_size)
            turns = rng.integers(4, size=cfg.batch_size) if cfg.random_rotations else np.zeros(cfg.batch_size, int)
            items = []
            for i, k in zip(idx, turns):
                img = imgeom.rotate(samples[i].image, int(k))
                lab = imgeom.rotate(samples[i].labels, int(k))
                items.append((img, lab, _winner(img, policies, cfg.angles, st, bank)))
            if style_feats is None:
                style_feats = bank.features(st)
            st.train()
            l_seg = l_c = l_s = 0.0
            for img, lab, pol in items:
                x = imgeom.resize(img, pol.scale)
                y = imgeom.resize_nearest(lab, x.shape[:2])
                if y.shape != x.shape[:2]:
                    raise ValueError(f"label {y.shape} / image {x.shape[:2]} mismatch after scaling")
                target = torch.from_numpy(class_targets(y))[None]
                xt = to_tensor(x)
                if pol.is_identity_style:
                    stylized, lc, ls = xt, torch.zeros(()), torch.zeros(())
                else:
                    stylized, lc, ls = style_transfer_losses(st, xt, bank_image(bank, pol.style_index))
                probs = net.probs(stylized)
                l_seg = l_seg + seg_loss(probs, target) / len(items)
                l_c = l_c + lc / len(items)
                l_s = l_s + ls / len(items)
            loss = total_loss(l_seg, l_c, l_s, w)
            _check_finite(step, L_seg=l_seg, L_c=l_c, L_s=l_s)
            opt.zero_grad()
            if loss.requires_grad:
                loss.backward()
                opt.step()
            row = {
                "step": step,
                "L_seg": _item(l_seg),
                "L_c": _item(l_c),
                "L_s": _item(l_s),
                "L_total": _item(loss),
                "selected_scale": "|".join(f"{p.scale:g}" for _, _, p in items),
                "selected_style": "|".join(str(p.style_index) for _, _, p in items),
            }
            history.append(row)
            if writer:
                writer.writerow([row[k] for k in row])
            if on_step:
                on_step(step, row)
            if cfg.checkpoint_every and cfg.checkpoint_dir and (step + 1) % cfg.checkpoint_every == 0:
                ckdir = Path(cfg.checkpoint_dir)
                ckdir.mkdir(parents=True, exist_ok=True)
                save_style_transfer(ckdir / f"st_step{step + 1}.pt", st)
                save_segnet(ckdir / f"seg_step{step + 1}.pt", net)
    finally:
        if fh:
            fh.close()
    st.eval()
    net.eval()
    if param_hash(st.encoder) != enc_hash:
        raise RuntimeError("encoder weights changed during joint training")
    return st, net, history


def bank_image(bank: StyleBank, j: int) -> torch.Tensor:
    return to_tensor(bank.images[j])


def train_plain(samples, cfg: TrainConfig) -> tuple[SegNet, list[float]]:
    """Segmentation network trained on raw images only (the no-TTA baseline)."""
    torch.manual_seed(cfg.seed + 2)
    rng = np.random.default_rng(cfg.seed + 2)
    net = SegNet(samples[0].image.shape[2], cfg.seg_base, cfg.seg_levels)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_joint)
    losses = []
    for step in range(cfg.plain_steps):
        idx = rng.integers(len(samples), size=cfg.batch_size)
        turns = rng.integers(4, size=cfg.batch_size) if cfg.random_rotations else np.zeros(cfg.batch_size, int)
        x = _stack([imgeom.rotate(samples[i].image, int(k)) for i, k in zip(idx, turns)])
        y = torch.from_numpy(
            np.stack([class_targets(imgeom.rotate(samples[i].labels, int(k))) for i, k in zip(idx, turns)])
        )
        loss = seg_loss(net.probs(x), y)
        _check_finite(step, L_seg=loss)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    net.eval()
    return net, losses
