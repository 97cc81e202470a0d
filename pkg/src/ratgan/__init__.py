"""Text-conditional GAN toolkit: recurrent affine conditioning in the
generator, soft-threshold spatial attention in the discriminator,
contrastive encoder pretraining, a training harness and evaluation tools."""

__version__ = "0.1.0"
