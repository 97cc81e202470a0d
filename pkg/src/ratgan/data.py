"""Corpus loading, augmentation, batching and a synthetic shapes corpus.

Corpus layout on disk:

    <root>/images/<id>.png
    <root>/captions/<id>.txt      one caption per line
    <root>/manifest.jsonl         one record per image: id, split and (for the
                                  synthetic corpus) ground-truth attributes

The synthetic generator renders a single colored shape on a plain background
with templated captions, so a probe classifier can later check whether
generated images honor their conditioning caption.
"""

from __future__ import annotations

import functools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .errors import InvalidConfigError, InvalidInputError

log = logging.getLogger(__name__)

CAPTION_TEMPLATES = [
    "a {color} {shape} on a {background} background",
    "the {shape} is {color} on a {background} background",
    "a {background} background with a {color} {shape}",
    "one {color} {shape} over a plain {background} background",
    "this image shows a {color} {shape} on {background}",
    "a small {color} {shape} sits on a {background} background",
    "there is a {color} {shape} against a {background} background",
    "a {color} colored {shape} on a {background} backdrop",
    "an image of a {color} {shape} with a {background} background",
    "a {shape} colored {color} on a {background} background",
]

COLOR_RGB = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (45, 80, 230),
    "yellow": (235, 220, 50),
    "purple": (150, 60, 200),
    "orange": (240, 140, 30),
}
BACKGROUND_RGB = {
    "white": (245, 245, 245),
    "black": (25, 25, 25),
    "gray": (128, 128, 128),
}
SHAPES = ("circle", "square", "triangle")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class CaptionedImageRecord:
    image_id: str
    image_path: Path
    captions: list[str]
    split: str = "train"
    attributes: dict = field(default_factory=dict)


@dataclass
class Batch:
    images: torch.Tensor    # (n, 3, R, R) in [-1, 1]
    tokens: torch.Tensor    # (n, L) padded indices
    lengths: torch.Tensor   # (n,) true lengths
    ids: list[str]
    captions: list[str]


@dataclass
class SyntheticCorpusSpec:
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    shapes: tuple[str, ...] = SHAPES
    backgrounds: tuple[str, ...] = ("white", "black")
    count: int = 512
    image_size: int = 64
    test_fraction_combos: int = 5   # every Nth attribute combo goes to test


def _render_shape(size: int, color: str, shape: str, background: str,
                  rng: np.random.Generator) -> Image.Image:
    img = Image.new("RGB", (size, size), BACKGROUND_RGB[background])
    draw = ImageDraw.Draw(img)
    # jittered position/radius keeps the corpus diverse but unambiguous
    radius = int(size * rng.uniform(0.22, 0.34))
    cx = int(rng.uniform(radius + 1, size - radius - 1))
    cy = int(rng.uniform(radius + 1, size - radius - 1))
    rgb = COLOR_RGB[color]
    if shape == "circle":
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius], fill=rgb)
    elif shape == "square":
        draw.rectangle([cx - radius, cy - radius, cx + radius, cy + radius], fill=rgb)
    elif shape == "triangle":
        draw.polygon([(cx, cy - radius), (cx - radius, cy + radius),
                      (cx + radius, cy + radius)], fill=rgb)
    else:
        raise InvalidConfigError(f"unknown shape {shape!r}")
    return img


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, seed: int,
                              root: str | Path) -> Path:
    """Render a deterministic captioned-shapes corpus under `root`."""
    if spec.count < 1:
        raise InvalidConfigError("corpus count must be >= 1")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "captions").mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)
    combos = [(c, s, b) for c in spec.colors for s in spec.shapes
              for b in spec.backgrounds]
    with open(root / "manifest.jsonl", "w") as manifest:
        for i in range(spec.count):
            combo_index = int(rng.integers(len(combos)))
            color, shape, background = combos[combo_index]
            # stride through the flattened combo enumeration so the held-out
            # combos vary in every attribute, not just the innermost one
            split = ("test" if combo_index % spec.test_fraction_combos == 2
                     else "train")
            image_id = f"img{i:05d}"
            img = _render_shape(spec.image_size, color, shape, background, rng)
            img.save(root / "images" / f"{image_id}.png")
            captions = [t.format(color=color, shape=shape, background=background)
                        for t in CAPTION_TEMPLATES]
            (root / "captions" / f"{image_id}.txt").write_text(
                "\n".join(captions) + "\n")
            manifest.write(json.dumps({
                "id": image_id, "color": color, "shape": shape,
                "background": background, "split": split,
                "caption": captions[0],
            }) + "\n")
    return root


def load_manifest(root: str | Path) -> dict[str, dict]:
    path = Path(root) / "manifest.jsonl"
    if not path.exists():
        return {}
    entries = {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            entries[rec["id"]] = rec
    return entries


def load_corpus(root: str | Path, split: str | None = "train") -> list[CaptionedImageRecord]:
    """Read records from the images/captions layout, filtered by split tag."""
    root = Path(root)
    if not (root / "images").is_dir():
        raise InvalidInputError(f"no images/ directory under {root}")
    manifest = load_manifest(root)
    records = []
    for image_path in sorted((root / "images").iterdir()):
        image_id = image_path.stem
        caption_path = root / "captions" / f"{image_id}.txt"
        if not caption_path.exists():
            log.warning("skipping %s: no caption file", image_id)
            continue
        captions = [ln for ln in caption_path.read_text().splitlines() if ln.strip()]
        if not captions:
            log.warning("skipping %s: caption file empty", image_id)
            continue
        meta = manifest.get(image_id, {})
        rec = CaptionedImageRecord(
            image_id=image_id, image_path=image_path, captions=captions,
            split=meta.get("split", "train"),
            attributes={k: meta[k] for k in ("color", "shape", "background")
                        if k in meta})
        if split is None or rec.split == split:
            records.append(rec)
    if not records:
        raise InvalidInputError(f"no usable records under {root} for split {split!r}")
    return records


@functools.lru_cache(maxsize=4096)
def _load_image(path: str) -> Image.Image:
    return Image.open(path).convert("RGB")


def random_view(image: Image.Image, rng: np.random.Generator,
                target_size: int) -> Image.Image:
    """Random crop from a 76/64-oversized resize, then a coin-flip mirror."""
    resized = image.resize((target_size * 76 // 64,) * 2, Image.BILINEAR)
    margin = resized.width - target_size
    left = int(rng.integers(margin + 1))
    top = int(rng.integers(margin + 1))
    view = resized.crop((left, top, left + target_size, top + target_size))
    if rng.random() < 0.5:
        view = view.transpose(Image.FLIP_LEFT_RIGHT)
    return view


def image_to_tensor(image: Image.Image) -> torch.Tensor:
    """(3, H, W) tensor in [-1, 1]."""
    arr = np.asarray(image, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def tensor_to_image(tensor: torch.Tensor) -> Image.Image:
    arr = ((tensor.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return Image.fromarray(arr.permute(1, 2, 0).numpy())


_warned_replacement = False


def make_batch(records: list[CaptionedImageRecord], n: int,
               rng: np.random.Generator, vocab, image_size: int) -> Batch:
    """Sample n records with one random caption and one random view each."""
    global _warned_replacement
    if n < 2:
        raise InvalidInputError("batch size must be >= 2")
    if n > len(records):
        if not _warned_replacement:
            log.warning("batch size %d exceeds corpus size %d; sampling with "
                        "replacement", n, len(records))
            _warned_replacement = True
        idx = rng.integers(len(records), size=n)
    else:
        idx = rng.choice(len(records), size=n, replace=False)
    images, token_lists, ids, captions = [], [], [], []
    for i in idx:
        rec = records[int(i)]
        caption = rec.captions[int(rng.integers(len(rec.captions)))]
        view = random_view(_load_image(str(rec.image_path)), rng, image_size)
        images.append(image_to_tensor(view))
        token_lists.append(vocab.encode(caption))
        ids.append(rec.image_id)
        captions.append(caption)
    lengths = torch.tensor([len(t) for t in token_lists])
    max_len = int(lengths.max())
    tokens = torch.zeros(n, max_len, dtype=torch.long)
    for row, ids_list in enumerate(token_lists):
        tokens[row, :len(ids_list)] = torch.tensor(ids_list)
    return Batch(torch.stack(images), tokens, lengths, ids, captions)
