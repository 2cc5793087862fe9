"""AdaIN style transfer with a compact multi-stage encoder and a mirrored decoder.

The encoder is a stack of ``conv3x3 -> ReLU`` stages with reflect padding and
2x average pooling between stages, so stage ``i`` runs at ``1 / 2**(i-1)`` of the
input resolution. Its per-stage ReLU outputs are the feature maps used by the
style loss; the deepest one carries the AdaIN renormalization.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-5
FORMAT_VERSION = 1


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """``(H, W, C)`` array -> ``(1, C, H, W)`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].float()


def to_image(t: torch.Tensor) -> np.ndarray:
    """``(1, C, H, W)`` or ``(C, H, W)`` tensor -> ``(H, W, C)`` array."""
    if t.dim() == 4:
        t = t[0]
    return t.detach().permute(1, 2, 0).contiguous().numpy()


def feature_stats(feat: torch.Tensor, eps: float = EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel spatial mean and stabilized std of an ``(N, C, H, W)`` tensor.

    The std uses the biased (population) variance: ``sqrt(var + eps)``.
    """
    n, c = feat.shape[:2]
    flat = feat.reshape(n, c, -1)
    mu = flat.mean(dim=2)
    var = flat.var(dim=2, unbiased=False)
    return mu, torch.sqrt(var + eps)


def adain(content: torch.Tensor, style: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Renormalize ``content`` channels to the mean/std of ``style``.

    Both are ``(N, C, H, W)``; spatial sizes may differ. ``style`` may have batch
    size 1, in which case its statistics broadcast over the content batch.
    """
    if content.shape[1] != style.shape[1]:
        raise ValueError(f"channel mismatch: {content.shape[1]} vs {style.shape[1]}")
    c_mu, c_sigma = feature_stats(content, eps)
    s_mu, s_sigma = feature_stats(style, eps)
    normalized = (content - c_mu[:, :, None, None]) / c_sigma[:, :, None, None]
    return normalized * s_sigma[:, :, None, None] + s_mu[:, :, None, None]


class Encoder(nn.Module):
    def __init__(self, in_channels: int = 3, widths=(16, 32, 64, 128)):
        super().__init__()
        self.in_channels = in_channels
        self.widths = tuple(widths)
        chans = (in_channels,) + self.widths
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, padding=1, padding_mode="reflect")
            for i in range(len(self.widths))
        )

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def stride(self) -> int:
        return 2 ** (self.depth - 1)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for i, conv in enumerate(self.convs):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            x = F.relu(conv(x))
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Maps the deepest encoder feature back to an image in ``[0, 1]``.

    A sigmoid head keeps outputs in range without the dead gradients of a hard clamp.
    """

    def __init__(self, out_channels: int = 3, widths=(16, 32, 64, 128)):
        super().__init__()
        widths = tuple(widths)
        rev = widths[::-1]
        blocks = []
        for i in range(len(rev) - 1):
            blocks.append(nn.Conv2d(rev[i], rev[i + 1], 3, padding=1, padding_mode="reflect"))
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(widths[0], out_channels, 3, padding=1, padding_mode="reflect")

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        x = feat
        for conv in self.blocks:
            x = F.relu(conv(x))
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.head(x))


class StyleTransfer(nn.Module):
    def __init__(self, channels: int = 3, widths=(16, 32, 64, 128)):
        super().__init__()
        self.channels = channels
        self.widths = tuple(widths)
        self.encoder = Encoder(channels, widths)
        self.decoder = Decoder(channels, widths)

    @property
    def stride(self) -> int:
        return self.encoder.stride

    def pad(self, x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int, int, int]]:
        """Reflect-pad ``(N, C, H, W)`` so both spatial dims divide the encoder stride."""
        h, w = x.shape[-2:]
        if h < self.stride or w < self.stride:
            raise ValueError(f"image {h}x{w} smaller than encoder stride {self.stride}")
        ph, pw = (-h) % self.stride, (-w) % self.stride
        pads = (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2)
        if ph or pw:
            mode = "reflect" if min(h, w) > max(ph, pw) else "replicate"
            x = F.pad(x, pads, mode=mode)
        return x, pads

    @staticmethod
    def unpad(x: torch.Tensor, pads: tuple[int, int, int, int]) -> torch.Tensor:
        left, right, top, bottom = pads
        h, w = x.shape[-2:]
        return x[..., top : h - bottom, left : w - right]

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        x, _ = self.pad(x)
        return self.encoder(x)

    def stylize(
        self, content: torch.Tensor, style_feat: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Stylize a content batch given the deepest feature of the style image.

        Returns the stylized batch (same size as ``content``) and the AdaIN
        target feature it was decoded from.
        """
        padded, pads = self.pad(content)
        target = adain(self.encoder(padded)[-1], style_feat)
        out = self.unpad(self.decoder(target), pads)
        return out, target

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        padded, pads = self.pad(x)
        return self.unpad(self.decoder(self.encoder(padded)[-1]), pads)


def stylize(model: StyleTransfer, content_img: np.ndarray, style_img: np.ndarray):
    """Array-level stylization: returns ``(stylized image, AdaIN target feature)``."""
    with torch.no_grad():
        style_feat = model.encode(to_tensor(style_img))[-1]
        out, target = model.stylize(to_tensor(content_img), style_feat)
    return to_image(out), target


def content_loss(encoder_feat: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """MSE between the deepest encoding of the stylized image and the AdaIN target."""
    if encoder_feat.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(encoder_feat.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(encoder_feat, target)


def style_loss(stylized_feats, style_feats) -> torch.Tensor:
    """Summed over layers: squared distance between channel-mean vectors plus
    between channel-std vectors (averaged over the batch).

    ``style_feats`` entries may have batch size 1 and broadcast over the
    stylized batch.
    """
    total = 0.0
    for f_t, f_s in zip(stylized_feats, style_feats, strict=True):
        mu_t, sigma_t = feature_stats(f_t)
        mu_s, sigma_s = feature_stats(f_s)
        mu_s, sigma_s = mu_s.expand_as(mu_t), sigma_s.expand_as(sigma_t)
        total = total + ((mu_t - mu_s) ** 2).sum(1).mean() + ((sigma_t - sigma_s) ** 2).sum(1).mean()
    return total


def style_transfer_losses(model: StyleTransfer, content: torch.Tensor, style: torch.Tensor):
    """Stylize ``content`` toward ``style`` and compute both losses.

    Returns ``(stylized, content_loss, style_loss)``. Gradients reach the
    decoder through the stylized image; encoder outputs for the style and the
    AdaIN target are computed without gradient.
    """
    with torch.no_grad():
        style_feats = model.encode(style)
    stylized, target = model.stylize(content, style_feats[-1])
    target = target.detach()
    feats = model.encode(stylized)
    return stylized, content_loss(feats[-1], target), style_loss(feats, style_feats)


def param_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    kind: str
    arch: dict
    state: dict
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, kind: str, model: nn.Module, arch: dict, **extra) -> None:
    torch.save(
        {
            "format_version": FORMAT_VERSION,
            "kind": kind,
            "arch": arch,
            "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
            "extra": extra,
        },
        path,
    )


def read_checkpoint(path, kind: str) -> Checkpoint:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {blob.get('format_version')!r}")
    if blob.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {blob.get('kind')!r}")
    return Checkpoint(blob["kind"], blob["arch"], blob["state"], blob.get("extra", {}))


def save_style_transfer(path, model: StyleTransfer, **extra) -> None:
    arch = {"channels": model.channels, "widths": list(model.widths)}
    save_checkpoint(path, "style_transfer", model, arch, **extra)


def load_style_transfer(path) -> tuple[StyleTransfer, dict]:
    ckpt = read_checkpoint(path, "style_transfer")
    model = StyleTransfer(ckpt.arch["channels"], ckpt.arch["widths"])
    model.load_state_dict(ckpt.state)
    model.eval()
    return model, ckpt.extra
