"""Attested confidential interconnect toolkit.

Control plane: signed epoch-versioned flow policies, simulated TEE
attestation, and a mutually attested key exchange. Data plane: an
AES-256-GCM UDP tunnel with strict nonce discipline, replay windows, and
epoch-scoped key rotation. Plus an analytical and Monte Carlo model of
initialization time at cluster scale.
"""

__version__ = "0.1.0"
