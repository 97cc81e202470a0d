"""Metrics and visualization: distribution distance, class-entropy score,
attention-map rendering and a desk-scale caption-consistency probe.

The distribution metrics work on features from a pluggable extractor; at
desk scale the extractor is a small attribute classifier trained on the
synthetic corpus.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from . import data as data_mod
from .errors import InvalidInputError

log = logging.getLogger(__name__)


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def from_features(cls, features: np.ndarray) -> "FeatureStats":
        if features.ndim != 2 or features.shape[0] < 2:
            raise InvalidInputError("need a (count >= 2, width) feature matrix")
        return cls(features.mean(axis=0), np.cov(features, rowvar=False),
                   features.shape[0])


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; tiny negative eigenvalues clamped to zero."""
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(stats_a: FeatureStats, stats_b: FeatureStats) -> float:
    """Frechet distance between two feature Gaussians.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with the cross
    term computed as Tr sqrt(sqrt(S_a) S_b sqrt(S_a)) for stability.
    """
    mu_a, mu_b = np.atleast_1d(stats_a.mean), np.atleast_1d(stats_b.mean)
    cov_a, cov_b = np.atleast_2d(stats_a.cov), np.atleast_2d(stats_b.cov)
    if mu_a.shape != mu_b.shape:
        raise InvalidInputError("feature widths differ between the two stats")
    sqrt_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(sqrt_a @ cov_b @ sqrt_a)
    value = (float(np.sum((mu_a - mu_b) ** 2))
             + float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross)))
    return max(value, 0.0)


def inception_score(class_probabilities: np.ndarray, eps: float = 1e-12) -> float:
    """exp(mean KL(p(y|x) || mean_x p(y|x))) over the probability rows."""
    probs = np.asarray(class_probabilities, dtype=np.float64)
    if probs.ndim != 2:
        raise InvalidInputError("expected an (m, K) probability matrix")
    if (probs < -1e-9).any() or np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
        raise InvalidInputError("rows must be probability vectors")
    marginal = probs.mean(axis=0)
    kl = (probs * (np.log(np.clip(probs, eps, None))
                   - np.log(np.clip(marginal, eps, None)))).sum(axis=1)
    return float(np.exp(kl.mean()))


def normalize_attention(alpha: torch.Tensor) -> torch.Tensor:
    """Min-max rescale to [0, 1]; a constant map becomes all zeros."""
    if not torch.isfinite(alpha).all():
        raise InvalidInputError("attention map must be finite")
    lo, hi = alpha.min(), alpha.max()
    if hi == lo:
        log.warning("constant attention map; returning all zeros")
        return torch.zeros_like(alpha)
    return (alpha - lo) / (hi - lo)


def upsample_attention(alpha: torch.Tensor, factor: int) -> torch.Tensor:
    """Bilinear upsampling of a (H, W) map by an integer factor."""
    if factor < 1:
        raise InvalidInputError("upsample factor must be >= 1")
    if factor == 1:
        return alpha.clone()
    out = F.interpolate(alpha[None, None], scale_factor=factor,
                        mode="bilinear", align_corners=True)
    return out[0, 0]


def _colorize(heat: torch.Tensor) -> np.ndarray:
    """Map [0, 1] values to a blue->red ramp, returned as (H, W, 3) uint8."""
    h = heat.detach().numpy()
    r = np.clip(h * 2.0, 0, 1)
    b = np.clip((1.0 - h) * 2.0, 0, 1)
    g = 1.0 - np.abs(h - 0.5) * 2.0
    return (np.stack([r, g, b], axis=-1) * 255).round().astype(np.uint8)


def render_grid(images: list[torch.Tensor] | torch.Tensor, rows: int, cols: int,
                path: str | Path, pad: int = 2) -> Path:
    """Tile [-1, 1] image tensors into one 8-bit sheet file."""
    if rows * cols < len(images):
        raise InvalidInputError(f"grid {rows}x{cols} too small for {len(images)} images")
    tiles = [data_mod.tensor_to_image(img) for img in images]
    w, h = tiles[0].size
    sheet = Image.new("RGB", (cols * (w + pad) - pad, rows * (h + pad) - pad),
                      (0, 0, 0))
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        sheet.paste(tile, (c * (w + pad), r * (h + pad)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sheet.save(path)
    return path


def render_attention_overlay(image: torch.Tensor, alpha: torch.Tensor,
                             path: str | Path, blend: float = 0.5) -> Path:
    """normalize -> upsample -> colorize -> alpha-blend over the image."""
    res = image.shape[-1]
    factor = res // alpha.shape[-1]
    heat = upsample_attention(normalize_attention(alpha), factor)
    heat_rgb = _colorize(heat)
    base = np.asarray(data_mod.tensor_to_image(image), dtype=np.float64)
    blended = ((1 - blend) * base + blend * heat_rgb).round().astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(blended).save(path)
    return path


def _conv_stack(in_channels: int, channels: int, depth: int = 3):
    layers, in_ch, ch = [], in_channels, channels
    for _ in range(depth):
        layers += [nn.Conv2d(in_ch, ch, 4, stride=2, padding=1), nn.ReLU()]
        in_ch, ch = ch, ch * 2
    return nn.Sequential(*layers), in_ch


def _foreground_mask(images: torch.Tensor) -> torch.Tensor:
    """Per-pixel distance from the corner-estimated background color.

    Makes the shape branch invariant to foreground/background colors, so it
    generalizes to attribute combinations held out of the training split.
    """
    corners = torch.stack([images[..., 0, 0], images[..., 0, -1],
                           images[..., -1, 0], images[..., -1, -1]], dim=-1)
    background = corners.mean(dim=-1)[..., None, None]
    return (images - background).pow(2).sum(dim=1, keepdim=True).sqrt()


class ProbeClassifier(nn.Module):
    """Small conv net predicting the synthetic corpus attributes.

    The color head sees RGB; the shape head sees only a background-subtracted
    foreground mask. Doubles as the desk-scale feature extractor: the pooled
    penultimate activations of both branches are the features used for the
    distribution metrics.
    """

    def __init__(self, image_size: int, colors: list[str], shapes: list[str],
                 channels: int = 16):
        super().__init__()
        self.image_size = image_size
        self.colors = list(colors)
        self.shapes = list(shapes)
        self.color_net, color_width = _conv_stack(3, channels)
        self.shape_net, shape_width = _conv_stack(1, channels)
        self.feature_width = color_width + shape_width
        self.color_head = nn.Linear(color_width, len(self.colors))
        self.shape_head = nn.Linear(shape_width, len(self.shapes))

    def _branch_features(self, images: torch.Tensor):
        if images.shape[-1] != self.image_size:
            raise InvalidInputError(
                f"probe expects {self.image_size}px images, got {images.shape[-1]}")
        color_feats = self.color_net(images).mean(dim=(2, 3))
        shape_feats = self.shape_net(_foreground_mask(images)).mean(dim=(2, 3))
        return color_feats, shape_feats

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return torch.cat(self._branch_features(images), dim=-1)

    def forward(self, images: torch.Tensor):
        color_feats, shape_feats = self._branch_features(images)
        return self.color_head(color_feats), self.shape_head(shape_feats)

    def class_probabilities(self, images: torch.Tensor) -> np.ndarray:
        """Color-class probabilities, the desk stand-in for a big classifier."""
        with torch.no_grad():
            logits, _ = self.forward(images)
        return torch.softmax(logits, dim=-1).numpy()


def train_probe(records, colors, shapes, image_size: int, steps: int = 300,
                batch_size: int = 32, seed: int = 0, lr: float = 2e-3) -> ProbeClassifier:
    """Fit the attribute probe on corpus records carrying attribute metadata."""
    torch.manual_seed(seed)
    probe = ProbeClassifier(image_size, colors, shapes)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    rng = data_mod.make_rng(seed)
    color_index = {c: i for i, c in enumerate(probe.colors)}
    shape_index = {s: i for i, s in enumerate(probe.shapes)}
    usable = [r for r in records if r.attributes]
    if not usable:
        raise InvalidInputError("records carry no attribute metadata")
    for _ in range(steps):
        idx = rng.integers(len(usable), size=batch_size)
        imgs, col_t, shp_t = [], [], []
        for i in idx:
            rec = usable[int(i)]
            view = data_mod.random_view(
                data_mod._load_image(str(rec.image_path)), rng, image_size)
            imgs.append(data_mod.image_to_tensor(view))
            col_t.append(color_index[rec.attributes["color"]])
            shp_t.append(shape_index[rec.attributes["shape"]])
        col_logits, shp_logits = probe(torch.stack(imgs))
        loss = (F.cross_entropy(col_logits, torch.tensor(col_t))
                + F.cross_entropy(shp_logits, torch.tensor(shp_t)))
        opt.zero_grad()
        loss.backward()
        opt.step()
    return probe


def probe_accuracy(probe: ProbeClassifier, images: torch.Tensor,
                   colors: list[str], shapes: list[str]) -> dict[str, float]:
    """Fraction of images whose predicted attributes match the expected ones."""
    if len(colors) != images.shape[0] or len(shapes) != images.shape[0]:
        raise InvalidInputError("one expected attribute pair per image required")
    with torch.no_grad():
        col_logits, shp_logits = probe(images)
    col_pred = col_logits.argmax(dim=-1)
    shp_pred = shp_logits.argmax(dim=-1)
    col_true = torch.tensor([probe.colors.index(c) for c in colors])
    shp_true = torch.tensor([probe.shapes.index(s) for s in shapes])
    return {
        "color": float((col_pred == col_true).float().mean()),
        "shape": float((shp_pred == shp_true).float().mean()),
    }


def caption_consistency(generated: torch.Tensor, expected_attributes: list[dict],
                        probe: ProbeClassifier) -> dict[str, float]:
    """Per-attribute accuracy of generated images against their captions."""
    if not expected_attributes:
        raise InvalidInputError("no attribute annotations supplied")
    return probe_accuracy(
        probe, generated,
        [a["color"] for a in expected_attributes],
        [a["shape"] for a in expected_attributes])


def feature_stats(probe: ProbeClassifier, images: torch.Tensor,
                  batch_size: int = 64) -> FeatureStats:
    chunks = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunks.append(probe.features(images[start:start + batch_size]).numpy())
    return FeatureStats.from_features(np.concatenate(chunks, axis=0))
