"""Text and image encoders pretrained with a batch contrastive objective.

The text side is a bidirectional LSTM whose final forward/backward states are
concatenated and projected to the sentence embedding width. The image side is
a small convolutional stack. Both are trained jointly so that matching
caption/image pairs score highest inside each batch; the resulting text
encoder is frozen and reused by the GAN.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointVersionError, InvalidConfigError, InvalidInputError

ENCODER_CHECKPOINT_VERSION = "ratgan-encoders-1"

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
EOS_TOKEN = "<eos>"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    """Token/index bijection with reserved pad, unknown and end markers."""

    index_to_token: list[str]
    token_to_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.token_to_index:
            self.token_to_index = {t: i for i, t in enumerate(self.index_to_token)}
        assert self.index_to_token[:3] == [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN]

    @property
    def pad(self) -> int:
        return 0

    @property
    def unk(self) -> int:
        return 1

    @property
    def eos(self) -> int:
        return 2

    def __len__(self) -> int:
        return len(self.index_to_token)

    def encode(self, text: str, add_eos: bool = True) -> list[int]:
        ids = [self.token_to_index.get(t, self.unk) for t in tokenize(text)]
        if add_eos:
            ids.append(self.eos)
        return ids

    def decode(self, ids: list[int]) -> list[str]:
        return [self.index_to_token[i] for i in ids]

    @classmethod
    def build(cls, texts: list[str], min_freq: int = 1) -> "Vocabulary":
        counts: dict[str, int] = {}
        for text in texts:
            for tok in tokenize(text):
                counts[tok] = counts.get(tok, 0) + 1
        kept = sorted(t for t, c in counts.items() if c >= min_freq)
        return cls([PAD_TOKEN, UNK_TOKEN, EOS_TOKEN] + kept)


@dataclass
class EncoderConfig:
    embed_dim: int = 256          # sentence/image embedding width d
    token_embed_dim: int = 128
    lstm_hidden: int = 128
    image_size: int = 256
    image_channels: int = 64
    learning_rate: float = 2e-4
    symmetric_loss: bool = False  # also apply the loss column-wise (image->text)
    log_eps: float = 1e-12


def desk_encoder_config() -> EncoderConfig:
    return EncoderConfig(
        embed_dim=64, token_embed_dim=32, lstm_hidden=32,
        image_size=64, image_channels=16,
    )


class TextEncoder(nn.Module):
    """Bidirectional LSTM sentence encoder.

    The final hidden states of the two directions are concatenated and
    linearly projected to the embedding width.
    """

    def __init__(self, vocab_size: int, cfg: EncoderConfig):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed_dim = cfg.embed_dim
        self.embedding = nn.Embedding(vocab_size, cfg.token_embed_dim, padding_idx=0)
        self.lstm = nn.LSTM(cfg.token_embed_dim, cfg.lstm_hidden,
                            batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * cfg.lstm_hidden, cfg.embed_dim)

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Encode a padded (n, L) index batch into (n, d) sentence embeddings."""
        if tokens.dim() != 2:
            raise InvalidInputError(f"expected (batch, length) indices, got {tuple(tokens.shape)}")
        if (lengths < 1).any():
            raise InvalidInputError("every sequence must have true length >= 1")
        if tokens.max().item() >= self.vocab_size or tokens.min().item() < 0:
            raise InvalidInputError("token index out of vocabulary range")
        emb = self.embedding(tokens)
        packed = nn.utils.rnn.pack_padded_sequence(
            emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, (h_n, _) = self.lstm(packed)
        # h_n: (2, n, hidden) -> concat directions
        combined = torch.cat([h_n[0], h_n[1]], dim=-1)
        s = self.proj(combined)
        # fix the embedding magnitude at sqrt(d) so each coordinate stays
        # O(1); downstream consumers (notably the gradient-penalized
        # discriminator) rely on the sentence signal not being vanishingly
        # small relative to image features
        return F.normalize(s, dim=-1) * math.sqrt(self.embed_dim)

    def encode(self, token_ids: list[int]) -> torch.Tensor:
        """Encode one sequence into a width-d vector."""
        if len(token_ids) == 0:
            raise InvalidInputError("cannot encode an empty token sequence")
        tokens = torch.tensor([token_ids], dtype=torch.long)
        lengths = torch.tensor([len(token_ids)])
        return self.forward(tokens, lengths)[0]


class ImageEncoder(nn.Module):
    """Convolutional image encoder: 4 stride-2 convs, global pool, linear head."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.image_size = cfg.image_size
        ch = cfg.image_channels
        layers: list[nn.Module] = []
        in_ch = 3
        for _ in range(4):
            layers += [nn.Conv2d(in_ch, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            in_ch = ch
            ch = min(ch * 2, 8 * cfg.image_channels)
        self.features = nn.Sequential(*layers)
        self.proj = nn.Linear(in_ch, cfg.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Encode a (n, 3, H, W) batch in [-1, 1] into (n, d) embeddings."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.shape[-2:] != (self.image_size, self.image_size) or images.shape[1] != 3:
            raise InvalidInputError(
                f"expected 3x{self.image_size}x{self.image_size} images, got {tuple(images.shape[1:])}")
        fm = self.features(images)
        pooled = fm.mean(dim=(2, 3))
        # same fixed magnitude as the text side so the two embedding spaces
        # are directly comparable
        return F.normalize(self.proj(pooled), dim=-1) * math.sqrt(
            self.proj.out_features)


def similarity_matrix(text_batch: torch.Tensor, image_batch: torch.Tensor) -> torch.Tensor:
    """All-pairs dot products: M[i, j] = <s_i, f_j>."""
    if text_batch.shape != image_batch.shape:
        raise InvalidInputError(
            f"batch shapes differ: {tuple(text_batch.shape)} vs {tuple(image_batch.shape)}")
    return text_batch @ image_batch.T


def match_probabilities(M: torch.Tensor) -> torch.Tensor:
    """Row-wise overflow-safe softmax over the similarity matrix."""
    if not torch.isfinite(M).all():
        raise InvalidInputError("similarity matrix has non-finite entries")
    shifted = M - M.max(dim=1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=1, keepdim=True)


def contrastive_loss(Mhat: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Negative log-probability mass on the matching diagonal."""
    diag = Mhat.diagonal().clamp_min(eps)
    return -torch.log(diag).sum()


def contrastive_pipeline(text_batch: torch.Tensor, image_batch: torch.Tensor,
                         symmetric: bool = False, eps: float = 1e-12) -> torch.Tensor:
    """similarity -> match probabilities -> contrastive loss, optionally both ways."""
    M = similarity_matrix(text_batch, image_batch)
    loss = contrastive_loss(match_probabilities(M), eps)
    if symmetric:
        loss = loss + contrastive_loss(match_probabilities(M.T), eps)
    return loss


def save_encoder_checkpoint(path: str | Path, cfg: EncoderConfig, vocab: Vocabulary,
                            text_encoder: TextEncoder, image_encoder: ImageEncoder,
                            step: int = 0) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({
        "version": ENCODER_CHECKPOINT_VERSION,
        "config": cfg.__dict__,
        "vocab": vocab.index_to_token,
        "text_encoder": text_encoder.state_dict(),
        "image_encoder": image_encoder.state_dict(),
        "step": step,
    }, tmp)
    tmp.replace(path)


def load_encoder_checkpoint(path: str | Path):
    """Returns (cfg, vocab, text_encoder, image_encoder, step)."""
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupted file should surface as a parse error
        raise CheckpointVersionError(f"cannot read encoder checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("version") != ENCODER_CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"incompatible encoder checkpoint version: {blob.get('version') if isinstance(blob, dict) else '?'}")
    cfg = EncoderConfig(**blob["config"])
    vocab = Vocabulary(blob["vocab"])
    text_encoder = TextEncoder(len(vocab), cfg)
    text_encoder.load_state_dict(blob["text_encoder"])
    image_encoder = ImageEncoder(cfg)
    image_encoder.load_state_dict(blob["image_encoder"])
    return cfg, vocab, text_encoder, image_encoder, blob["step"]


def pretrain_encoders(corpus, cfg: EncoderConfig, steps: int, batch_size: int,
                      seed: int = 0, checkpoint_path: str | Path | None = None,
                      log_path: str | Path | None = None,
                      vocab: Vocabulary | None = None):
    """Joint contrastive pretraining over a captioned-image corpus.

    Returns (vocab, text_encoder, image_encoder, losses). `corpus` is a list
    of CaptionedImageRecord from the data pipeline.
    """
    from . import data as data_mod

    if batch_size < 2:
        raise InvalidConfigError("contrastive pretraining needs batch size >= 2")
    if len(corpus) == 0:
        raise InvalidConfigError("corpus is empty")

    if vocab is None:
        vocab = Vocabulary.build([c for rec in corpus for c in rec.captions])
    torch.manual_seed(seed)
    text_encoder = TextEncoder(len(vocab), cfg)
    image_encoder = ImageEncoder(cfg)
    params = list(text_encoder.parameters()) + list(image_encoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)

    rng = data_mod.make_rng(seed)
    losses: list[float] = []
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(steps):
            batch = data_mod.make_batch(corpus, batch_size, rng, vocab,
                                        image_size=cfg.image_size)
            s = text_encoder(batch.tokens, batch.lengths)
            f = image_encoder(batch.images)
            loss = contrastive_pipeline(s, f, symmetric=cfg.symmetric_loss,
                                        eps=cfg.log_eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if log_file is not None:
                log_file.write(json.dumps({"step": step, "loss": loss.item()}) + "\n")
    finally:
        if log_file is not None:
            log_file.close()

    if checkpoint_path is not None:
        save_encoder_checkpoint(checkpoint_path, cfg, vocab,
                                text_encoder, image_encoder, step=steps)
    return vocab, text_encoder, image_encoder, losses


def held_out_loss(text_encoder: TextEncoder, image_encoder: ImageEncoder,
                  corpus, vocab: Vocabulary, batch_size: int, seed: int,
                  image_size: int) -> float:
    """Contrastive loss on one held-out batch, without gradient tracking."""
    from . import data as data_mod

    rng = data_mod.make_rng(seed)
    batch = data_mod.make_batch(corpus, batch_size, rng, vocab, image_size=image_size)
    with torch.no_grad():
        s = text_encoder(batch.tokens, batch.lengths)
        f = image_encoder(batch.images)
        return contrastive_pipeline(s, f).item()
