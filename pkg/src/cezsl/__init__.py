"""Zero-shot learning with a class-encoder latent embedding, CVAE-synthesised
semantics and self-taught pseudo-labelling."""

__version__ = "0.1.0"
