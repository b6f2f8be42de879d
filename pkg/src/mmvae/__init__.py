"""Multi-modal variational autoencoders with permutation-invariant encoders and masked objectives."""

__version__ = "0.1.0"
