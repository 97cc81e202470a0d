import json
from pathlib import Path

import pytest
import torch

from ratgan import data as data_mod
from ratgan import encoders as enc
from ratgan import training as tr
from ratgan.errors import CheckpointVersionError, InvalidConfigError


@pytest.fixture(scope="module")
def encoder_ckpt(tiny_records, tmp_path_factory):
    path = tmp_path_factory.mktemp("enc") / "encoder.pt"
    cfg = enc.EncoderConfig(embed_dim=16, token_embed_dim=8, lstm_hidden=8,
                            image_size=32, image_channels=8)
    enc.pretrain_encoders(tiny_records, cfg, steps=60, batch_size=8, seed=0,
                          checkpoint_path=path)
    return path


def fast_config(tmp_path, **overrides):
    defaults = dict(batch_size=2, steps=4, seed=0, scale="desk",
                    checkpoint_every=2, sample_every=100,
                    output_dir=str(tmp_path / "run"))
    defaults.update(overrides)
    return tr.TrainConfig(**defaults)


class TestTrainConfig:
    def test_learning_rate_asymmetry_default(self):
        cfg = tr.TrainConfig()
        assert cfg.d_lr == pytest.approx(4 * cfg.g_lr)
        assert cfg.g_lr == pytest.approx(1e-4)

    def test_invalid_rates_rejected(self):
        with pytest.raises(InvalidConfigError):
            tr.TrainConfig(g_lr=0.0)

    def test_batch_size_floor(self):
        with pytest.raises(InvalidConfigError):
            tr.TrainConfig(batch_size=1)

    def test_named_presets(self):
        small = tr.small_dataset_train_config()
        large = tr.large_dataset_train_config()
        assert small.batch_size == 24 and small.scale == "full"
        assert large.batch_size == 48 and large.scale == "full"


class TestTrainLoop:
    def test_encoder_frozen_and_terms_nonnegative(self, tiny_records,
                                                  encoder_ckpt, tmp_path):
        cfg = fast_config(tmp_path)
        summary = tr.train(cfg, tiny_records, encoder_ckpt)
        _, _, text_encoder, _, _ = enc.load_encoder_checkpoint(encoder_ckpt)
        assert tr.parameter_hash(text_encoder) == summary["encoder_hash"]
        log_lines = [json.loads(l) for l in
                     Path(summary["log"]).read_text().splitlines()]
        assert len(log_lines) == cfg.steps
        for rec in log_lines:
            assert rec["real_match"] >= 0
            assert rec["fake_match"] >= 0
            assert rec["real_mismatch"] >= 0
            assert rec["gradient_penalty"] >= 0

    def test_resume_matches_uninterrupted_run(self, tiny_records, encoder_ckpt,
                                              tmp_path):
        full_cfg = fast_config(tmp_path / "full", steps=6, checkpoint_every=3)
        full = tr.train(full_cfg, tiny_records, encoder_ckpt)

        half_cfg = fast_config(tmp_path / "half", steps=3, checkpoint_every=3)
        tr.train(half_cfg, tiny_records, encoder_ckpt)
        resumed_cfg = fast_config(tmp_path / "half", steps=6, checkpoint_every=3)
        resumed = tr.train(resumed_cfg, tiny_records, encoder_ckpt,
                           resume_from=Path(half_cfg.output_dir) / "checkpoint.pt")

        full_log = [json.loads(l) for l in
                    Path(full["log"]).read_text().splitlines()]
        resumed_log = [json.loads(l) for l in
                       Path(resumed["log"]).read_text().splitlines()]
        for a, b in zip(full_log, resumed_log):
            for key in ("step", "real_match", "fake_match", "real_mismatch",
                        "gradient_penalty", "d_total", "g_loss"):
                assert a[key] == pytest.approx(b[key], rel=1e-6), key

    def test_seeded_determinism(self, tiny_records, encoder_ckpt, tmp_path):
        a = tr.train(fast_config(tmp_path / "a", steps=3), tiny_records,
                     encoder_ckpt)
        b = tr.train(fast_config(tmp_path / "b", steps=3), tiny_records,
                     encoder_ckpt)
        assert [m["d_total"] for m in a["metrics"]] == \
               [m["d_total"] for m in b["metrics"]]

    def test_nonfinite_guard(self, tiny_records, encoder_ckpt, tmp_path,
                             monkeypatch):
        def bad_hinge(*args, **kwargs):
            return torch.tensor(float("nan"), requires_grad=True)

        monkeypatch.setattr(tr, "d_hinge_loss", bad_hinge)
        cfg = fast_config(tmp_path)
        with pytest.raises(tr.NonFiniteLossError):
            tr.train(cfg, tiny_records, encoder_ckpt)
        dumps = list(Path(cfg.output_dir).glob("diverged_step*.json"))
        assert len(dumps) == 1
        payload = json.loads(dumps[0].read_text())
        assert "captions" in payload and "record" in payload


class TestCheckpointRoundTrip:
    def test_round_trip_identical_outputs(self, tiny_records, encoder_ckpt,
                                          tmp_path):
        cfg = fast_config(tmp_path, steps=2, checkpoint_every=2)
        summary = tr.train(cfg, tiny_records, encoder_ckpt)
        blob = tr.load_checkpoint(summary["checkpoint"])
        assert blob["step"] == 2
        generator, discriminator = tr.restore_models(blob)
        generator2, _ = tr.restore_models(tr.load_checkpoint(summary["checkpoint"]))
        z = torch.randn(2, generator.cfg.noise_width)
        s = torch.randn(2, generator.cfg.sentence_width)
        assert torch.equal(generator(z, s), generator2(z, s))

    def test_version_mismatch_rejected(self, tmp_path):
        bad = tmp_path / "bad.pt"
        torch.save({"version": "something-else"}, bad)
        with pytest.raises(CheckpointVersionError):
            tr.load_checkpoint(bad)

    def test_corrupted_file_rejected(self, tmp_path):
        bad = tmp_path / "corrupt.pt"
        bad.write_bytes(b"\x00\x01garbage")
        with pytest.raises(CheckpointVersionError):
            tr.load_checkpoint(bad)


class TestAblationVariants:
    @pytest.mark.parametrize("overrides", [
        dict(variant="stacked_mlp"),
        dict(shallow=True),
        dict(attention_mode="off"),
        dict(attention_mode="softmax"),
    ])
    def test_variants_construct_and_run(self, tiny_records, encoder_ckpt,
                                        tmp_path, overrides):
        cfg = fast_config(tmp_path, steps=2, **overrides)
        try:
            summary = tr.train(cfg, tiny_records, encoder_ckpt)
        except tr.NonFiniteLossError:
            assert overrides.get("attention_mode") == "softmax"
            return
        assert all("mean_abs_pixel" in m for m in summary["metrics"])

    def test_stacked_mlp_has_no_recurrence(self):
        cfg = tr.TrainConfig(scale="desk", variant="rat")
        generator = tr.stacked_mlp_substitute(cfg, sentence_width=16)
        assert generator.controller is None
        assert generator.cfg.variant == "stacked_mlp"

    def test_shallow_halves_affine_layers(self):
        deep, _ = tr.build_models(tr.TrainConfig(scale="desk"), 16)
        shallow, _ = tr.build_models(tr.TrainConfig(scale="desk", shallow=True), 16)
        assert shallow.fusion_layer_count * 2 == deep.fusion_layer_count
