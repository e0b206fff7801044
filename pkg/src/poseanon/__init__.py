"""Pose-preserving identity replacement toolkit.

Learns an identity-invariant, pose-preserving latent representation with a
VAE-style generator trained adversarially against a three-headed
discriminator (Wasserstein critic with gradient penalty, identity
classifier, continuous pose regressor), and audits the result under three
privacy-attack scenarios.
"""

__version__ = "0.1.0"
