"""Unified conditional multimodal MR image translation.

One modality-agnostic encoder, one modality-conditioned decoder, and one
multi-task discriminator cover every pairwise translation among M
co-registered modalities; the cycle constraint is built by recalling the
same autoencoder twice.
"""

__version__ = "0.1.0"
