"""Command-line surface: corpus synthesis, pretraining, training, sampling,
attention visualization and evaluation.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure. A YAML
config file can pre-set any training flag; explicit flags win.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch
import yaml

from . import data as data_mod
from . import encoders as enc_mod
from . import evaluation as eval_mod
from . import training as train_mod
from .errors import CheckpointVersionError, InvalidConfigError, InvalidInputError


def _errors_to_exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (InvalidConfigError, InvalidInputError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except (CheckpointVersionError, train_mod.NonFiniteLossError,
                OSError, RuntimeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    return wrapper


@click.group()
def main():
    """Text-conditional GAN toolkit with recurrent affine conditioning."""


@main.command("synth-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--count", default=512, show_default=True)
@click.option("--size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_errors_to_exit_codes
def synth_data(out, count, size, seed):
    """Render a synthetic captioned-shapes corpus."""
    spec = data_mod.SyntheticCorpusSpec(count=count, image_size=size)
    root = data_mod.generate_synthetic_corpus(spec, seed, out)
    click.echo(f"wrote corpus with {count} images to {root}")


@main.command("pretrain")
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--steps", default=300, show_default=True)
@click.option("--batch", default=16, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--scale", default="desk", type=click.Choice(["desk", "full"]),
              show_default=True)
@_errors_to_exit_codes
def pretrain(corpus, out, steps, batch, seed, scale):
    """Contrastively pretrain the text and image encoders."""
    records = data_mod.load_corpus(corpus, split="train")
    cfg = (enc_mod.desk_encoder_config() if scale == "desk"
           else enc_mod.EncoderConfig())
    log_path = Path(out).with_suffix(".log.jsonl")
    _, _, _, losses = enc_mod.pretrain_encoders(
        records, cfg, steps=steps, batch_size=batch, seed=seed,
        checkpoint_path=out, log_path=log_path)
    click.echo(f"pretrained encoders: loss {losses[0]:.4f} -> {losses[-1]:.4f}; "
               f"checkpoint at {out}")


def _load_train_config(config_path, overrides) -> train_mod.TrainConfig:
    base: dict = {}
    if config_path is not None:
        base = yaml.safe_load(Path(config_path).read_text()) or {}
        unknown = set(base) - set(train_mod.TrainConfig.__dataclass_fields__)
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
    base.update({k: v for k, v in overrides.items() if v is not None})
    return train_mod.TrainConfig(**base)


@main.command("train")
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--encoder", required=True, type=click.Path(exists=True))
@click.option("--config", type=click.Path(exists=True))
@click.option("--out", type=click.Path())
@click.option("--steps", type=int)
@click.option("--batch", type=int)
@click.option("--seed", type=int)
@click.option("--scale", type=click.Choice(["desk", "full"]))
@click.option("--ablation", type=click.Choice(["rat", "stacked_mlp"]))
@click.option("--shallow", is_flag=True, default=None)
@click.option("--attention",
              type=click.Choice(["soft_threshold", "softmax", "off"]))
@click.option("--resume", type=click.Path(exists=True))
@_errors_to_exit_codes
def train_cmd(corpus, encoder, config, out, steps, batch, seed, scale,
              ablation, shallow, attention, resume):
    """Run adversarial training against a pretrained encoder checkpoint."""
    cfg = _load_train_config(config, {
        "output_dir": out, "steps": steps, "batch_size": batch, "seed": seed,
        "scale": scale, "variant": ablation, "shallow": shallow,
        "attention_mode": attention,
    })
    records = data_mod.load_corpus(corpus, split="train")
    summary = train_mod.train(cfg, records, encoder, resume_from=resume)
    click.echo(f"training complete; checkpoint at {summary['checkpoint']}")


def _load_models(checkpoint):
    blob = train_mod.load_checkpoint(checkpoint)
    generator, discriminator = train_mod.restore_models(blob)
    generator.eval()
    discriminator.eval()
    enc_path = blob["encoder_checkpoint"]
    _, vocab, text_encoder, _, _ = enc_mod.load_encoder_checkpoint(enc_path)
    text_encoder.eval()
    return blob, generator, discriminator, vocab, text_encoder


def _encode_captions(text_encoder, vocab, captions: list[str]) -> torch.Tensor:
    with torch.no_grad():
        return torch.stack([text_encoder.encode(vocab.encode(c))
                            for c in captions])


@main.command("sample")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--captions", "captions_file", required=True,
              type=click.Path(exists=True))
@click.option("--count", default=10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@_errors_to_exit_codes
def sample(checkpoint, captions_file, count, seed, out):
    """Generate `count` images per caption, one grid sheet per caption."""
    _, generator, _, vocab, text_encoder = _load_models(checkpoint)
    captions = [ln for ln in Path(captions_file).read_text().splitlines()
                if ln.strip()]
    if not captions:
        raise InvalidInputError("captions file is empty")
    gen = torch.Generator().manual_seed(seed)
    out_dir = Path(out)
    for caption_id, caption in enumerate(captions):
        s = _encode_captions(text_encoder, vocab, [caption] * count)
        z = torch.randn(count, generator.cfg.noise_width, generator=gen)
        with torch.no_grad():
            images = generator(z, s)
        cols = min(count, 5)
        rows = -(-count // cols)
        path = out_dir / f"{caption_id}_{seed}.png"
        eval_mod.render_grid(list(images), rows, cols, path)
        click.echo(f"wrote {path}")


@main.command("attn-viz")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True)
@click.option("--count", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@_errors_to_exit_codes
def attn_viz(checkpoint, corpus, split, count, seed, out):
    """Overlay discriminator attention maps on corpus images."""
    _, _, discriminator, vocab, text_encoder = _load_models(checkpoint)
    records = data_mod.load_corpus(corpus, split=split)
    rng = data_mod.make_rng(seed)
    res = discriminator.cfg.resolution
    out_dir = Path(out)
    written = 0
    for rec in records[:count]:
        caption = rec.captions[0]
        view = data_mod._load_image(str(rec.image_path)).resize((res, res))
        image = data_mod.image_to_tensor(view)
        s = _encode_captions(text_encoder, vocab, [caption])[0]
        with torch.no_grad():
            P = discriminator.downsample_encode(image)
            alpha, _ = discriminator.spatial_attention(P, s)
        path = out_dir / f"{rec.image_id}_attention.png"
        eval_mod.render_attention_overlay(image, alpha, path)
        written += 1
    click.echo(f"wrote {written} overlays to {out_dir}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--samples", default=256, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--probe-steps", default=300, show_default=True)
@click.option("--out", required=True, type=click.Path())
@_errors_to_exit_codes
def eval_cmd(checkpoint, corpus, samples, seed, probe_steps, out):
    """Desk-scale metrics: distribution distance, class-entropy score and
    caption consistency, using a probe classifier trained on the corpus."""
    _, generator, _, vocab, text_encoder = _load_models(checkpoint)
    train_records = data_mod.load_corpus(corpus, split="train")
    size = generator.cfg.resolution
    spec = data_mod.SyntheticCorpusSpec(image_size=size)
    probe = eval_mod.train_probe(train_records, list(spec.colors),
                                 list(spec.shapes), size, steps=probe_steps,
                                 seed=seed)
    report = evaluate_generator(generator, text_encoder, vocab, train_records,
                                probe, n_samples=samples, seed=seed)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(json.dumps(report, indent=2))
    click.echo(json.dumps(report, indent=2))


def evaluate_generator(generator, text_encoder, vocab, records, probe,
                       n_samples: int, seed: int) -> dict:
    """Shared metric computation used by the eval command and tests."""
    rng = data_mod.make_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    size = generator.cfg.resolution
    idx = rng.integers(len(records), size=n_samples)
    real_images, fake_images, attrs = [], [], []
    for i in idx:
        rec = records[int(i)]
        caption = rec.captions[int(rng.integers(len(rec.captions)))]
        view = data_mod.random_view(
            data_mod._load_image(str(rec.image_path)), rng, size)
        real_images.append(data_mod.image_to_tensor(view))
        s = _encode_captions(text_encoder, vocab, [caption])[0]
        z = torch.randn(generator.cfg.noise_width, generator=gen)
        with torch.no_grad():
            fake_images.append(generator(z, s))
        attrs.append(rec.attributes)
    real = torch.stack(real_images)
    fake = torch.stack(fake_images)
    stats_real = eval_mod.feature_stats(probe, real)
    stats_fake = eval_mod.feature_stats(probe, fake)
    consistency = (eval_mod.caption_consistency(fake, attrs, probe)
                   if all(attrs) else {})
    report = {
        "fid": eval_mod.fid(stats_real, stats_fake),
        "inception_score": eval_mod.inception_score(
            probe.class_probabilities(fake)),
        "n_samples": n_samples,
        "extractor_id": "synthetic-attribute-probe",
    }
    for key, value in consistency.items():
        report[f"caption_consistency_{key}"] = value
    return report


if __name__ == "__main__":
    main()
