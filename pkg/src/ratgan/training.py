"""Alternating adversarial training loop with checkpointing and ablations."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import encoders as enc_mod
from .discriminator import (Discriminator, desk_discriminator_config,
                            full_discriminator_config)
from .errors import CheckpointVersionError, InvalidConfigError
from .generator import (Generator, desk_generator_config, full_generator_config)
from .objectives import (d_hinge_loss, d_hinge_terms, g_adv_loss, ma_gp_penalty,
                         sample_mismatched_captions)

TRAIN_CHECKPOINT_VERSION = "ratgan-train-1"


@dataclass
class TrainConfig:
    g_lr: float = 1e-4
    d_lr: float = 4e-4
    adam_betas: tuple[float, float] = (0.0, 0.9)
    batch_size: int = 24
    steps: int = 2000
    seed: int = 0
    scale: str = "desk"                  # "desk" | "full"
    variant: str = "rat"                 # "rat" | "stacked_mlp"
    shallow: bool = False                # halve affine layers per block
    attention_mode: str = "soft_threshold"
    gp_weight: float = 2.0
    gp_power: float = 6.0
    checkpoint_every: int = 500
    sample_every: int = 500
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise InvalidConfigError("learning rates must be positive")
        if self.batch_size < 2:
            raise InvalidConfigError("batch size must be >= 2")
        if self.scale not in ("desk", "full"):
            raise InvalidConfigError(f"unknown scale preset {self.scale!r}")


def small_dataset_train_config(**overrides) -> TrainConfig:
    """Full-scale preset for small corpora: batch 24."""
    defaults = dict(scale="full", batch_size=24)
    defaults.update(overrides)
    return TrainConfig(**defaults)


def large_dataset_train_config(**overrides) -> TrainConfig:
    """Full-scale preset for large corpora: batch 48."""
    defaults = dict(scale="full", batch_size=48)
    defaults.update(overrides)
    return TrainConfig(**defaults)


def build_models(cfg: TrainConfig, sentence_width: int):
    """Construct the generator/discriminator pair for a training config."""
    sub_units = 1 if cfg.shallow else 2
    if cfg.scale == "desk":
        g_cfg = desk_generator_config(sentence_width=sentence_width,
                                      sub_units=sub_units, variant=cfg.variant)
        d_cfg = desk_discriminator_config(sentence_width=sentence_width,
                                          attention_mode=cfg.attention_mode)
    else:
        g_cfg = full_generator_config(sentence_width=sentence_width,
                                      sub_units=sub_units, variant=cfg.variant)
        d_cfg = full_discriminator_config(sentence_width=sentence_width,
                                          attention_mode=cfg.attention_mode)
    return Generator(g_cfg), Discriminator(d_cfg)


def stacked_mlp_substitute(cfg: TrainConfig, sentence_width: int) -> Generator:
    """The isolated-fusion baseline: per-layer MLP heads on [z; s], no recurrence."""
    variant_cfg = TrainConfig(**{**asdict(cfg), "variant": "stacked_mlp"})
    generator, _ = build_models(variant_cfg, sentence_width)
    return generator


def parameter_hash(module: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(path: str | Path, cfg: TrainConfig, generator: Generator,
                    discriminator: Discriminator, g_opt, d_opt, step: int,
                    torch_gen: torch.Generator, data_rng: np.random.Generator,
                    encoder_checkpoint: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({
        "version": TRAIN_CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "generator": generator.state_dict(),
        "generator_config": asdict(generator.cfg),
        "discriminator": discriminator.state_dict(),
        "discriminator_config": asdict(discriminator.cfg),
        "g_opt": g_opt.state_dict(),
        "d_opt": d_opt.state_dict(),
        "step": step,
        "torch_rng": torch_gen.get_state(),
        "data_rng": data_rng.bit_generator.state,
        "encoder_checkpoint": encoder_checkpoint,
    }, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointVersionError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("version") != TRAIN_CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"incompatible checkpoint version: "
            f"{blob.get('version') if isinstance(blob, dict) else '?'}")
    return blob


def restore_models(blob: dict):
    """Rebuild (generator, discriminator) from a checkpoint blob."""
    from .generator import GeneratorConfig
    from .discriminator import DiscriminatorConfig

    generator = Generator(GeneratorConfig(**blob["generator_config"]))
    generator.load_state_dict(blob["generator"])
    discriminator = Discriminator(DiscriminatorConfig(**blob["discriminator_config"]))
    discriminator.load_state_dict(blob["discriminator"])
    return generator, discriminator


class NonFiniteLossError(RuntimeError):
    pass


def train(cfg: TrainConfig, corpus: list[data_mod.CaptionedImageRecord],
          encoder_checkpoint: str | Path,
          resume_from: str | Path | None = None) -> dict:
    """Run the adversarial loop; returns a summary with paths and metrics.

    One discriminator update then one generator update per step; fresh noise
    is drawn for the generator update. The text encoder stays frozen (hashes
    asserted before and after).
    """
    enc_cfg, vocab, text_encoder, _, _ = enc_mod.load_encoder_checkpoint(
        encoder_checkpoint)
    text_encoder.eval()
    for p in text_encoder.parameters():
        p.requires_grad_(False)
    encoder_hash_before = parameter_hash(text_encoder)

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    generator, discriminator = build_models(cfg, enc_cfg.embed_dim)
    image_size = discriminator.cfg.resolution
    g_opt = torch.optim.Adam(generator.parameters(), lr=cfg.g_lr,
                             betas=cfg.adam_betas)
    d_opt = torch.optim.Adam(discriminator.parameters(), lr=cfg.d_lr,
                             betas=cfg.adam_betas)
    torch_gen = torch.Generator().manual_seed(cfg.seed)
    data_rng = data_mod.make_rng(cfg.seed)
    start_step = 0

    if resume_from is not None:
        blob = load_checkpoint(resume_from)
        generator.load_state_dict(blob["generator"])
        discriminator.load_state_dict(blob["discriminator"])
        g_opt.load_state_dict(blob["g_opt"])
        d_opt.load_state_dict(blob["d_opt"])
        torch_gen.set_state(blob["torch_rng"])
        data_rng.bit_generator.state = blob["data_rng"]
        start_step = blob["step"]

    log_path = out_dir / "train_log.jsonl"
    metrics: list[dict] = []
    mode = "a" if resume_from is not None else "w"
    noise_width = generator.cfg.noise_width

    with open(log_path, mode) as log_file:
        for step in range(start_step, cfg.steps):
            t0 = time.monotonic()
            batch = data_mod.make_batch(corpus, cfg.batch_size, data_rng,
                                        vocab, image_size=image_size)
            with torch.no_grad():
                s = text_encoder(batch.tokens, batch.lengths)

            # discriminator update
            z = torch.randn(cfg.batch_size, noise_width, generator=torch_gen)
            with torch.no_grad():
                fake = generator(z, s)
            score_real = discriminator(batch.images, s)
            score_fake = discriminator(fake, s)
            order = sample_mismatched_captions(torch.arange(cfg.batch_size))
            score_mismatch = discriminator(batch.images, s[order])
            hinge = d_hinge_loss(score_real, score_fake, score_mismatch)
            penalty = ma_gp_penalty(discriminator, batch.images, s,
                                    k=cfg.gp_weight, p=cfg.gp_power)
            d_loss = hinge + penalty
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()

            # generator update with fresh noise
            z = torch.randn(cfg.batch_size, noise_width, generator=torch_gen)
            fake = generator(z, s)
            g_loss = g_adv_loss(discriminator(fake, s))
            g_opt.zero_grad()
            g_loss.backward()
            g_opt.step()

            term_real, term_fake, term_mismatch = (
                t.item() for t in d_hinge_terms(score_real, score_fake,
                                                score_mismatch))
            record = {
                "step": step,
                "real_match": term_real,
                "fake_match": term_fake,
                "real_mismatch": term_mismatch,
                "gradient_penalty": penalty.item(),
                "d_total": d_loss.item(),
                "g_loss": g_loss.item(),
                "mean_abs_pixel": fake.detach().abs().mean().item(),
                "wall_time": time.monotonic() - t0,
            }
            if not all(np.isfinite(v) for k, v in record.items()
                       if k not in ("step",)):
                dump = out_dir / f"diverged_step{step}.json"
                dump.write_text(json.dumps({
                    "record": record, "captions": batch.captions,
                    "ids": batch.ids}, indent=2))
                raise NonFiniteLossError(
                    f"non-finite loss at step {step}; diagnostics in {dump}")
            metrics.append(record)
            log_file.write(json.dumps(record) + "\n")

            done = step + 1
            if done % cfg.checkpoint_every == 0 or done == cfg.steps:
                save_checkpoint(out_dir / "checkpoint.pt", cfg, generator,
                                discriminator, g_opt, d_opt, done, torch_gen,
                                data_rng, str(encoder_checkpoint))
            if done % cfg.sample_every == 0 or done == cfg.steps:
                from .evaluation import render_grid
                probe_gen = torch.Generator().manual_seed(cfg.seed + 1)
                n = min(8, s.shape[0])
                z = torch.randn(n, noise_width, generator=probe_gen)
                with torch.no_grad():
                    samples = generator(z, s[:n])
                cols = min(n, 4)
                render_grid(list(samples), -(-n // cols), cols,
                            out_dir / f"samples_step{done:06d}.png")

    assert parameter_hash(text_encoder) == encoder_hash_before, \
        "text encoder changed during GAN training"
    return {
        "checkpoint": str(out_dir / "checkpoint.pt"),
        "log": str(log_path),
        "metrics": metrics,
        "encoder_hash": encoder_hash_before,
    }
