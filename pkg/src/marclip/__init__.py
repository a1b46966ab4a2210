"""Joint contrastive + masked-diffusion training and iterative decoding
on a deterministic synthetic shapes dataset."""

__version__ = "0.1.0"
